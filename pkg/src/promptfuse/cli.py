"""Command-line entry point: ``promptfuse {gen,train,eval,ablate}``.

Exit codes: 0 success, 1 other errors, 2 missing dataset, 3 non-finite
loss, 4 checkpoint/registry mismatch. Argparse usage errors exit with 2 as
usual.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .ablation import desk_sweep, plot_sweep, run_ablation, table_entries, write_csv
from .config import MODES, ModelConfig, default_config, mode_config, paper_config
from .errors import CheckpointError, ConfigError, NonFiniteLoss
from .model import model_from_checkpoint
from .scenes import SceneSpec, generate_dataset, read_split, subsample_dataset, write_split
from .train import DESK_SCHEDULE, PAPER_SCHEDULE, StageSchedule, TrainSettings, evaluate_model, predict_dataset, \
    run_protocol

log = logging.getLogger("promptfuse")

EXIT_OK, EXIT_ERROR, EXIT_NO_DATA, EXIT_NAN, EXIT_REGISTRY = 0, 1, 2, 3, 4


def _default_model() -> ModelConfig:
    return default_config()


def _default_schedule() -> list[StageSchedule]:
    return list(PAPER_SCHEDULE if os.environ.get("PF_DESK", "1") == "0" else DESK_SCHEDULE)


@dataclass
class RunConfig:
    """Everything a command needs. Saved with all defaults filled in."""

    model: ModelConfig = field(default_factory=_default_model)
    scenes: SceneSpec = field(default_factory=SceneSpec)
    fraction: float = 1.0
    seed: int = 0
    n_train: int = 600
    n_val: int = 150
    schedule: list[StageSchedule] = field(default_factory=_default_schedule)
    settings: TrainSettings = field(default_factory=TrainSettings)
    data_dir: str = "data"
    output_dir: str = "runs"

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "scenes": self.scenes.to_dict(),
            "fraction": self.fraction,
            "seed": self.seed,
            "n_train": self.n_train,
            "n_val": self.n_val,
            "schedule": [s.to_dict() for s in self.schedule],
            "settings": self.settings.to_dict(),
            "data_dir": self.data_dir,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        kw = dict(d)
        if "model" in kw:
            kw["model"] = ModelConfig.from_dict(kw["model"])
        if "scenes" in kw:
            kw["scenes"] = SceneSpec.from_dict(kw["scenes"])
        if "schedule" in kw:
            kw["schedule"] = [StageSchedule.from_dict(s) for s in kw["schedule"]]
        if "settings" in kw:
            kw["settings"] = TrainSettings(**kw["settings"])
        return cls(**kw)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.loads(Path(path).read_text())


def _run_config(args) -> RunConfig:
    rc = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "fraction", None) is not None:
        changes["fraction"] = args.fraction
    if getattr(args, "data", None):
        changes["data_dir"] = args.data
    if getattr(args, "mode", None):
        base = paper_config() if os.environ.get("PF_DESK", "1") == "0" else rc.model
        changes["model"] = mode_config(args.mode, base)
    return dataclasses.replace(rc, **changes)


def _load_split(root: str | Path, split: str):
    try:
        return read_split(root, split)
    except FileNotFoundError as e:
        raise MissingDataset(str(e)) from e


class MissingDataset(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# commands

def cmd_gen(args) -> int:
    rc = _run_config(args)
    out = Path(args.out or rc.data_dir)
    if out.exists() and any(out.iterdir()) and not args.force:
        print(f"error: {out} exists and is not empty (use --force to overwrite)", file=sys.stderr)
        return EXIT_ERROR
    train = generate_dataset(rc.scenes, rc.n_train, "train")
    if rc.fraction < 1.0:
        train = subsample_dataset(train, rc.fraction, rc.seed)
    val = generate_dataset(rc.scenes, rc.n_val, "val")
    extra = {"fraction": rc.fraction, "subsample_seed": rc.seed, "pool_size": rc.n_train}
    manifest = write_split(out, "train", train, rc.scenes, extra)
    write_split(out, "val", val, rc.scenes)
    rc.save(out / "run_config.json")
    print(manifest)
    return EXIT_OK


def _scene_spec_of(root: Path, fallback: SceneSpec) -> SceneSpec:
    path = root / "train" / "MANIFEST.json"
    if path.exists():
        return SceneSpec.from_dict(json.loads(path.read_text())["scene_spec"])
    return fallback


def cmd_train(args) -> int:
    rc = _run_config(args)
    data = Path(rc.data_dir)
    train = _load_split(data, "train")
    val = _load_split(data, "val")
    manifest = json.loads((data / "train" / "MANIFEST.json").read_text())
    # only subsample a full pool; a dataset written with --fraction is already a subset
    if rc.fraction < 1.0 and manifest.get("fraction", 1.0) >= 1.0:
        train = subsample_dataset(train, rc.fraction, rc.seed)
    out = Path(args.out or rc.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rc_out = dataclasses.replace(rc, output_dir=str(out))
    rc_out.save(out / "run_config.json")
    result = run_protocol(rc.model, train, val, seed=rc.seed, schedules=rc.schedule, settings=rc.settings,
                          scene_spec=_scene_spec_of(data, rc.scenes), out_dir=out,
                          eval_every_stage=True, resume=args.resume)
    m = result.metrics
    print(f"config {rc.model.config_hash()} seed {rc.seed}: mAP {m.map:.4f} composite {m.composite:.4f} "
          f"trainable {result.trainable_scalars}/{result.total_scalars}")
    return EXIT_OK


def format_prediction(sample_id: str, box) -> str:
    return (f"{sample_id} {box.class_id} {box.center_x:.6f} {box.center_y:.6f} {box.size_x:.6f} "
            f"{box.size_y:.6f} {box.yaw:.6f} {box.score:.6f}")


def cmd_eval(args) -> int:
    rc = _run_config(args)
    samples = _load_split(rc.data_dir, args.split)
    if not samples:
        raise ConfigError(f"split {args.split!r} under {rc.data_dir} is empty")
    model, meta = model_from_checkpoint(args.checkpoint)
    report = evaluate_model(model, samples, rc.settings.eval_batch_size, seed=meta.get("seed"),
                            stage_id=meta.get("stage_id"))
    preds = predict_dataset(model, samples, rc.settings.eval_batch_size)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / f"eval_{args.split}"
    out.mkdir(parents=True, exist_ok=True)
    lines = [format_prediction(s.sample_id, b) for s, ps in zip(samples, preds) for b in ps]
    (out / "predictions.txt").write_text("".join(line + "\n" for line in lines))
    (out / "metrics.json").write_text(json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n")
    print(f"mAP {report.map:.4f} composite {report.composite:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    rc = _run_config(args)
    data = Path(rc.data_dir)
    fraction = rc.fraction if rc.fraction < 1.0 else 0.05
    manifest = data / "train" / "MANIFEST.json"
    if manifest.exists():
        train, val = _load_split(data, "train"), _load_split(data, "val")
        spec = _scene_spec_of(data, rc.scenes)
        if json.loads(manifest.read_text()).get("fraction", 1.0) < 1.0:
            fraction = 1.0  # already a subset; every seed trains on all of it
    else:
        spec = rc.scenes
        train, val = generate_dataset(spec, rc.n_train, "train"), generate_dataset(spec, rc.n_val, "val")
    entries = desk_sweep(rc.model) if args.sweep else table_entries(args.table, rc.model)
    seeds = list(range(rc.seed, rc.seed + args.seeds))
    rows = run_ablation(entries, seeds, train, val, fraction, rc.schedule, rc.settings, spec)
    out = Path(args.out or rc.output_dir)
    name = "sweep" if args.sweep else f"table{args.table}"
    print(write_csv(out / f"{name}.csv", rows))
    if args.sweep or args.table == 3:
        print(plot_sweep(rows, out / f"{name}.svg"))
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="promptfuse", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="run config JSON")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--fraction", type=float)
        sp.add_argument("--mode", choices=MODES)
        sp.add_argument("--data", help="dataset root (overrides data_dir)")
        sp.add_argument("--out")

    g = sub.add_parser("gen", help="write the synthetic dataset")
    common(g)
    g.add_argument("--force", action="store_true", help="write into a non-empty directory")
    t = sub.add_parser("train", help="run the three-stage protocol")
    common(t)
    t.add_argument("--resume", help="stage-2 checkpoint; runs stage 3 only")
    e = sub.add_parser("eval", help="evaluate a checkpoint and dump predictions")
    common(e)
    e.add_argument("checkpoint")
    e.add_argument("--split", default="val", choices=("train", "val"))
    a = sub.add_parser("ablate", help="run an ablation table")
    common(a)
    a.add_argument("--table", type=int, choices=(1, 2, 3), default=1)
    a.add_argument("--sweep", action="store_true", help="desk single-level sweep instead of a table")
    a.add_argument("--seeds", type=int, default=5, help="number of consecutive seeds")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    handlers = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate}
    try:
        return handlers[args.command](args)
    except MissingDataset as e:
        print(f"error: dataset not found: {e}", file=sys.stderr)
        return EXIT_NO_DATA
    except NonFiniteLoss as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NAN
    except CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_REGISTRY
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    raise SystemExit(main())
