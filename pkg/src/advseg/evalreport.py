"""Metrics, attack-success rules, xi sweeps, ablations, and montages."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image as PILImage

from .attacker import AttackerModel, decode_deformation, decode_intensity, encode
from .segmenter import SegModel, segment
from .warp import apply_deformation

SUCCESS_RATIO = 0.7  # 30% relative Dice decrease
MODES = ("DV", "D_only", "V_only")

# fixed class palette (RGB), class index 1..N; background stays grayscale
PALETTE = [
    (66, 135, 245), (87, 201, 100), (245, 158, 66), (224, 66, 66),
    (170, 99, 222), (235, 222, 82), (82, 222, 222), (222, 82, 170),
]


def dice(pred, gt, class_id: int) -> float:
    """2|P∩G| / (|P|+|G|) for one class; 1.0 when both masks are empty."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    p = pred == class_id
    g = gt == class_id
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def perceptibility(i_dv, i_0) -> float:
    """Mean absolute pixel difference between attacked and clean image."""
    a = np.asarray(i_dv, dtype=np.float64)
    b = np.asarray(i_0, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.abs(a - b).mean())


def attack_success(baseline_dice: float, attacked_dice: float) -> bool:
    """True iff the attacked Dice dropped by at least 30% relative."""
    return attacked_dice < SUCCESS_RATIO * baseline_dice


@dataclass
class EvalReport:
    xi: float
    mode: str
    per_class_dice: dict[int, float]
    baseline_dice: dict[int, float]
    perceptibility: float
    success: dict[int, bool] = field(default_factory=dict)

    def __post_init__(self):
        if not self.success:
            self.success = {
                c: attack_success(self.baseline_dice[c], self.per_class_dice[c])
                for c in self.per_class_dice
            }


def _attack_slice(gen: AttackerModel, img: np.ndarray, mode: str,
                  rng: torch.Generator) -> np.ndarray:
    x = torch.as_tensor(np.asarray(img, dtype=np.float32))[None]
    z_d, z_v = encode(gen, x, rng=rng)
    d = decode_deformation(gen, z_d)
    v = decode_intensity(gen, z_v)
    if mode == "D_only":
        v = torch.zeros_like(v)
    elif mode == "V_only":
        d = torch.zeros_like(d)
    elif mode != "DV":
        raise ValueError(f"unknown mode {mode!r}")
    i_dv = apply_deformation(x, d) + v
    return i_dv[0].numpy()


def clean_baseline(seg: SegModel, test_slices) -> dict[int, float]:
    """Macro per-class Dice of the untouched segmenter on clean slices."""
    per_class = {c: [] for c in range(1, seg.n_classes + 1)}
    for img, lab in test_slices:
        pred = segment(seg, img).argmax(axis=-1)
        for c in per_class:
            per_class[c].append(dice(pred, lab, c))
    return {c: float(np.mean(v)) for c, v in per_class.items()}


def evaluate_attack(gen: AttackerModel, seg: SegModel, test_slices,
                    xi: float, mode: str = "DV", seed: int = 0) -> EvalReport:
    """One seeded attack sample per test slice; macro per-class Dice + p."""
    if not test_slices:
        raise ValueError("empty test set")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    rng = torch.Generator().manual_seed(seed)
    was_training = gen.training
    gen.eval()
    per_class = {c: [] for c in range(1, seg.n_classes + 1)}
    percepts = []
    with torch.no_grad():
        for img, lab in test_slices:
            i_dv = _attack_slice(gen, img, mode, rng)
            pred = segment(seg, i_dv).argmax(axis=-1)
            for c in per_class:
                per_class[c].append(dice(pred, lab, c))
            percepts.append(perceptibility(i_dv, img))
    gen.train(was_training)
    return EvalReport(
        xi=xi,
        mode=mode,
        per_class_dice={c: float(np.mean(v)) for c, v in per_class.items()},
        baseline_dice=clean_baseline(seg, test_slices),
        perceptibility=float(np.mean(percepts)),
    )


def report_table(reports: list[EvalReport], n_classes: int) -> str:
    """CSV mirroring the sweep layout: baseline row, then one row per
    (xi, mode). Header: xi, mode, dice_class_1..C, perceptibility,
    success_class_1..C."""
    buf = io.StringIO()
    w = csv.writer(buf)
    classes = list(range(1, n_classes + 1))
    w.writerow(["xi", "mode"] + [f"dice_class_{c}" for c in classes]
               + ["perceptibility"] + [f"success_class_{c}" for c in classes])
    if reports:
        base = reports[0].baseline_dice
        w.writerow(["", "baseline"] + [f"{base[c]:.4f}" for c in classes]
                   + [""] + ["" for _ in classes])
    for r in reports:
        w.writerow([f"{r.xi:g}", r.mode]
                   + [f"{r.per_class_dice[c]:.4f}" for c in classes]
                   + [f"{r.perceptibility:.4f}"]
                   + [str(int(r.success[c])) for c in classes])
    return buf.getvalue()


def sweep_xi(attackers: dict[float, AttackerModel], seg: SegModel, test_slices,
             modes=("DV",), seed: int = 0) -> list[EvalReport]:
    """Evaluate one trained attacker per xi across the requested modes."""
    if not attackers:
        raise ValueError("need at least one trained attacker")
    reports = []
    for xi in sorted(attackers):
        for mode in modes:
            reports.append(
                evaluate_attack(attackers[xi], seg, test_slices, xi, mode, seed))
    return reports


def _to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    lo, hi = img.min(), img.max()
    scale = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    return np.repeat((scale * 255).astype(np.uint8)[..., None], 3, axis=-1)


def _colorize(labels: np.ndarray, base: np.ndarray | None = None) -> np.ndarray:
    """Class overlay with the fixed palette; background keeps the base image."""
    labels = np.asarray(labels)
    out = _to_gray(base) if base is not None else np.zeros(labels.shape + (3,), np.uint8)
    for c in range(1, int(labels.max()) + 1):
        color = PALETTE[(c - 1) % len(PALETTE)]
        out[labels == c] = color
    return out


def render_montage(cases: list[dict], path: str, pad: int = 2):
    """PNG grid: rows I_0, S_GT, S_0, I_DV, V, S_DV; one column per case.

    Each case dict carries keys i_0, s_gt, s_0, i_dv, v, s_dv (label maps as
    integer grids, images as float grids).
    """
    if not cases:
        raise ValueError("no cases to render")
    rows = []
    for key, as_labels in [("i_0", False), ("s_gt", True), ("s_0", True),
                           ("i_dv", False), ("v", False), ("s_dv", True)]:
        tiles = []
        for case in cases:
            arr = np.asarray(case[key])
            tiles.append(_colorize(arr, case["i_0"]) if as_labels else _to_gray(arr))
        rows.append(tiles)
    H, W = np.asarray(cases[0]["i_0"]).shape
    grid = np.full(((H + pad) * 6 - pad, (W + pad) * len(cases) - pad, 3),
                   255, dtype=np.uint8)
    for r, tiles in enumerate(rows):
        for c, tile in enumerate(tiles):
            grid[r * (H + pad) : r * (H + pad) + H,
                 c * (W + pad) : c * (W + pad) + W] = tile
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    PILImage.fromarray(grid).save(path, format="PNG")
