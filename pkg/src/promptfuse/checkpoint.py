"""Parameter archives.

A checkpoint is an uncompressed zip of ``<name>.npy`` members, each a
little-endian float32 array with its shape in the ``.npy`` header, plus a
``__meta__.json`` member. Member timestamps are fixed so identical
parameters give byte-identical files.
"""
from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

META_MEMBER = "__meta__.json"
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _member(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def save_archive(path: str | Path, tensors: Mapping[str, torch.Tensor], meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name].detach().cpu().numpy().astype("<f4"))
            buf = io.BytesIO()
            np.lib.format.write_array(buf, arr, allow_pickle=False)
            zf.writestr(_member(name + ".npy"), buf.getvalue())
        zf.writestr(_member(META_MEMBER), json.dumps(meta or {}, sort_keys=True, indent=1))
    return path


def load_archive(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    tensors, meta = {}, {}
    with zipfile.ZipFile(path) as zf:
        for info in zf.infolist():
            if info.filename == META_MEMBER:
                meta = json.loads(zf.read(info))
            elif info.filename.endswith(".npy"):
                arr = np.lib.format.read_array(io.BytesIO(zf.read(info)), allow_pickle=False)
                tensors[info.filename[:-4]] = torch.from_numpy(arr.astype(np.float32))
    return tensors, meta
