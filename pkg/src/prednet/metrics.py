"""Frame-quality metrics for next-frame prediction.

All images are float arrays in [0, 1] with the spatial axes last; leading
axes (channels) are averaged.  Sequence-level helpers compare a prediction
array against ground truth and against the last-frame-copy baseline.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_CAP = 100.0
DEFAULT_TAU = 0.01

METRICS = ("mae", "psnr", "ssim", "psnr_movement", "ssim_movement", "ssim_cond", "sharpness")


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mae(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.abs(a - b).mean())


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB with peak 1, capped at 100 dB."""
    a, b = _pair(a, b)
    mse = float(((a - b) ** 2).mean())
    if mse < 1e-10:
        return PSNR_CAP
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation of the last two axes with ``g``."""
    out = sliding_window_view(img, g.size, axis=-1) @ g
    return sliding_window_view(out, g.size, axis=-2) @ g


def ssim_map(a, b) -> np.ndarray:
    a, b = _pair(a, b)
    if a.ndim < 2 or min(a.shape[-2:]) < SSIM_WINDOW:
        raise DimensionError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    g = gaussian_window()
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b) -> float:
    """Mean SSIM over all valid 11x11 Gaussian windows (sigma 1.5)."""
    return float(ssim_map(a, b).mean())


def conditioned_ssim(actual_prev, actual_t, pred_t, ssim_max: float = 1.0) -> float:
    """(ssim_max - SSIM(previous frame, prediction)) * SSIM(frame, prediction).

    A prediction that merely repeats the previous frame scores zero.
    """
    return (ssim_max - ssim(actual_prev, pred_t)) * ssim(actual_t, pred_t)


def movement_mask(sequence, tau: float = DEFAULT_TAU) -> list[int]:
    """Indices t >= 1 whose frame differs from its predecessor by MAE > tau."""
    seq = np.asarray(sequence)
    if len(seq) < 2:
        raise ContractError("movement mask needs at least two frames")
    if tau <= 0:
        raise ContractError("tau must be positive")
    return [t for t in range(1, len(seq)) if mae(seq[t], seq[t - 1]) > tau]


def sharpness(img) -> float:
    """Variance of the 3x3 Laplacian response over the valid region."""
    x = np.asarray(img, dtype=np.float64)
    if min(x.shape[-2:]) < 3:
        return 0.0
    lap = (
        x[..., :-2, 1:-1] + x[..., 2:, 1:-1] + x[..., 1:-1, :-2] + x[..., 1:-1, 2:] - 4 * x[..., 1:-1, 1:-1]
    )
    return float(lap.var())


def baseline_copy(sequence) -> np.ndarray:
    """Predictions of the last-frame-copy model; entry 0 is a copy of frame 0."""
    seq = np.asarray(sequence)
    if len(seq) < 2:
        raise ContractError("copy baseline needs at least two frames")
    pred = np.empty_like(seq)
    pred[0] = seq[0]
    pred[1:] = seq[:-1]
    return pred


# ------------------------------------------------------------------ reports


def frame_metrics(actual, pred, tau: float = DEFAULT_TAU) -> dict[str, list[float]]:
    """Per-frame values for t = 1..T-1.  Movement variants hold only the
    movement frames."""
    actual = np.asarray(actual)
    pred = np.asarray(pred)
    if actual.shape != pred.shape:
        raise DimensionError(f"prediction shape {pred.shape} != sequence shape {actual.shape}")
    moving = set(movement_mask(actual, tau))
    out: dict[str, list[float]] = {k: [] for k in METRICS}
    out["movement_frames"] = sorted(moving)
    for t in range(1, len(actual)):
        s = ssim(actual[t], pred[t])
        p = psnr(actual[t], pred[t])
        out["mae"].append(mae(actual[t], pred[t]))
        out["psnr"].append(p)
        out["ssim"].append(s)
        out["ssim_cond"].append((1.0 - ssim(actual[t - 1], pred[t])) * s)
        out["sharpness"].append(sharpness(pred[t]))
        if t in moving:
            out["psnr_movement"].append(p)
            out["ssim_movement"].append(s)
    return out


def _mean(values) -> float | None:
    return float(np.mean(values)) if len(values) else None


@dataclass
class MetricsReport:
    """Per-sequence rows, frame-pooled aggregates and deltas against the
    copy baseline (per-sequence differences, then averaged)."""

    rows: list[dict] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    deltas: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        columns = ["sequence_id", *METRICS, "n_frames", "n_movement", *(f"delta_{m}" for m in METRICS)]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(columns)
            for row in self.rows:
                writer.writerow([_fmt(row.get(c)) for c in columns])
            agg = {"sequence_id": "aggregate", **self.aggregate}
            agg.update({f"delta_{m}": v for m, v in self.deltas.items()})
            writer.writerow([_fmt(agg.get(c)) for c in columns])


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.9g}"
    return str(value)


def build_report(actual_batch, pred_batch, tau: float = DEFAULT_TAU, ids=None) -> MetricsReport:
    """Score ``pred_batch`` ([N, T, C, H, W]) against ground truth and the copy
    baseline."""
    actual_batch = np.asarray(actual_batch)
    pred_batch = np.asarray(pred_batch)
    ids = list(range(len(actual_batch))) if ids is None else list(ids)
    pooled: dict[str, list[float]] = {m: [] for m in METRICS}
    delta_rows: dict[str, list[float]] = {m: [] for m in METRICS}
    report = MetricsReport()
    for sid, actual, pred in zip(ids, actual_batch, pred_batch):
        fm = frame_metrics(actual, pred, tau)
        cm = frame_metrics(actual, baseline_copy(actual), tau)
        row = {"sequence_id": sid, "n_frames": len(actual) - 1, "n_movement": len(fm["movement_frames"])}
        for m in METRICS:
            pooled[m].extend(fm[m])
            row[m] = _mean(fm[m])
            base = _mean(cm[m])
            if row[m] is not None and base is not None:
                row[f"delta_{m}"] = row[m] - base
                delta_rows[m].append(row[m] - base)
        report.rows.append(row)
    report.aggregate = {m: _mean(pooled[m]) for m in METRICS}
    report.aggregate["n_frames"] = len(pooled["mae"])
    report.aggregate["n_movement"] = len(pooled["psnr_movement"])
    report.deltas = {m: _mean(delta_rows[m]) for m in METRICS}
    return report
