"""Rotated BEV box geometry: corners, polygon clipping, IoU."""
from __future__ import annotations

import math

import numpy as np


def wrap_angle(a: float) -> float:
    """Map an angle into (-pi, pi]."""
    a = math.fmod(a + math.pi, 2 * math.pi)
    if a <= 0:
        a += 2 * math.pi
    return a - math.pi


def box_corners(cx: float, cy: float, sx: float, sy: float, yaw: float) -> list[tuple[float, float]]:
    """Counter-clockwise corners; ``sx`` runs along the heading."""
    c, s = math.cos(yaw), math.sin(yaw)
    hx, hy = sx / 2, sy / 2
    out = []
    for lx, ly in ((hx, hy), (-hx, hy), (-hx, -hy), (hx, -hy)):
        out.append((cx + lx * c - ly * s, cy + lx * s + ly * c))
    return out


def polygon_area(poly) -> float:
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        acc += x1 * y2 - x2 * y1
    return 0.5 * acc


def clip_polygon(subject, clip):
    """Sutherland-Hodgman: intersect ``subject`` with convex CCW ``clip``."""
    out = list(subject)
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, out = out, []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    out.append(_intersect(prev, cur, sp, sc))
                out.append(cur)
            elif sp >= 0:
                out.append(_intersect(prev, cur, sp, sc))
            prev, sp = cur, sc
    return out


def _intersect(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def rotated_iou(a, b) -> float:
    """IoU of two ``(cx, cy, sx, sy, yaw)`` boxes."""
    ax, ay, asx, asy, ayaw = a[:5]
    bx, by, bsx, bsy, byaw = b[:5]
    area_a, area_b = asx * asy, bsx * bsy
    if area_a <= 0 or area_b <= 0:
        return 0.0
    # bounding-circle reject
    if math.hypot(ax - bx, ay - by) > 0.5 * (math.hypot(asx, asy) + math.hypot(bsx, bsy)):
        return 0.0
    inter = clip_polygon(box_corners(ax, ay, asx, asy, ayaw), box_corners(bx, by, bsx, bsy, byaw))
    ia = max(polygon_area(inter), 0.0)
    union = area_a + area_b - ia
    return ia / union if union > 0 else 0.0


def iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = rotated_iou(a, b)
    return out


def aligned_iou(sa: tuple[float, float], sb: tuple[float, float]) -> float:
    """IoU of two boxes sharing centre and heading (size agreement only)."""
    inter = min(sa[0], sb[0]) * min(sa[1], sb[1])
    union = sa[0] * sa[1] + sb[0] * sb[1] - inter
    return inter / union if union > 0 else 0.0
