"""Held-out view evaluation and the metrics report.

The report has two files: ``metrics.csv`` with one row per scene and a
``summary.txt`` with the means.  Columns never change between runs, so
downstream scripts can rely on the header.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field

import numpy as np

from .archive import atomic_write_bytes
from .data import SceneRecord, difficulty_sources, make_difficulty_split
from .metrics import depth_metrics, psnr, ssim
from .renderer import render_image

COLUMNS = ("scene", "split", "views", "psnr", "ssim", "lpips", "abs_err", "acc@0.01", "acc@0.05")
DEPTH_THRESHOLDS = (0.01, 0.05)


@dataclass
class ViewResult:
    scene: str
    target: int
    sources: list
    psnr: float
    ssim: float
    depth: dict = field(default_factory=dict)


def evaluate_view(model, scene: SceneRecord, target: int, sources, chunk_size: int = 1024, render=None) -> ViewResult:
    """Render ``target`` from ``sources`` and score it against the stored image and depth.

    Padded border pixels are excluded.  Depth is divided by the scene scale
    before the thresholds apply.
    """
    view = scene.views[target]
    if render is None:
        render = render_image(model, [scene.views[i] for i in sources], view.intrinsics, view.pose,
                              view.near, view.far, chunk_size=chunk_size)
    h, w = scene.valid_size
    pred, gt = render.image[:h, :w], view.image[:h, :w]
    depth = {}
    if scene.depths is not None:
        gt_depth = scene.depths[target][:h, :w] / scene.scale
        depth = depth_metrics(render.depth[:h, :w] / scene.scale, gt_depth, thresholds=DEPTH_THRESHOLDS)
    return ViewResult(scene.scene_id, target, list(sources), psnr(pred, gt), ssim(pred, gt), depth)


def evaluation_targets(scene: SceneRecord, level: str, targets=None) -> dict:
    """Target id to source ids for ``level``; all feasible targets when ``targets`` is empty."""
    if targets:
        return {int(t): tuple(difficulty_sources(scene, int(t), level)) for t in targets}
    return make_difficulty_split(scene, level).assignments


def evaluate(model, scenes, level: str = "small", targets=None, chunk_size: int = 1024) -> list[ViewResult]:
    results = []
    for scene in scenes:
        for t, src in sorted(evaluation_targets(scene, level, targets).items()):
            results.append(evaluate_view(model, scene, t, src, chunk_size))
    return results


def _mean(values):
    values = [v for v in values if v is not None and np.isfinite(v)]
    return float(np.mean(values)) if values else float("nan")


def scene_rows(results: list[ViewResult], level: str) -> list[dict]:
    rows = []
    for scene in dict.fromkeys(r.scene for r in results):
        mine = [r for r in results if r.scene == scene]
        rows.append({
            "scene": scene,
            "split": level,
            "views": len(mine),
            "psnr": _mean(r.psnr for r in mine),
            "ssim": _mean(r.ssim for r in mine),
            "lpips": "n/a",
            "abs_err": _mean(r.depth.get("abs_err") for r in mine),
            "acc@0.01": _mean(r.depth.get("acc@0.01") for r in mine),
            "acc@0.05": _mean(r.depth.get("acc@0.05") for r in mine),
        })
    return rows


def _fmt(value):
    return f"{value:.6f}" if isinstance(value, float) else str(value)


def format_table(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in COLUMNS])
    return buf.getvalue()


def format_summary(rows: list[dict], level: str) -> str:
    lines = [
        f"split: {level}",
        "depth units: scene units divided by each scene's scale factor",
        "",
        f"{'scene':<16}{'PSNR':>9}{'SSIM':>8}{'LPIPS':>7}{'Abs err':>10}{'Acc(0.01)':>11}{'Acc(0.05)':>11}",
    ]

    def line(name, r):
        return (f"{name:<16}{r['psnr']:>9.3f}{r['ssim']:>8.3f}{'n/a':>7}"
                f"{r['abs_err']:>10.4f}{r['acc@0.01']:>11.3f}{r['acc@0.05']:>11.3f}")

    for r in rows:
        lines.append(line(r["scene"], r))
    keys = ("psnr", "ssim", "abs_err", "acc@0.01", "acc@0.05")
    lines.append(line("mean", {k: _mean(r[k] for r in rows) for k in keys}))
    return "\n".join(lines) + "\n"


def write_report(out_dir, rows: list[dict], level: str):
    """Write ``metrics.csv`` and ``summary.txt`` under ``out_dir``."""
    atomic_write_bytes(os.path.join(out_dir, "metrics.csv"), format_table(rows).encode())
    atomic_write_bytes(os.path.join(out_dir, "summary.txt"), format_summary(rows, level).encode())
