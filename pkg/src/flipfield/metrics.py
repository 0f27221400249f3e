"""Image quality metrics and checkpoint evaluation over dataset splits.

PSNR is computed over all pixels and channels with a 99 dB cap for exact
matches. SSIM is single-scale on luma (Y = 0.299R + 0.587G + 0.114B) with the
standard 11x11 Gaussian window, sigma 1.5, K1 = 0.01, K2 = 0.03, dynamic range
1.0, averaged over valid window positions only.

Evaluation renders with midpoint sampling so repeated runs produce identical
CSV bytes; the wall_s column echoes the training wall-clock recorded in the
run manifest (the quantity comparable across modes), not the evaluation time.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

from .dataio import Dataset
from .errors import DataError, DimensionMismatch, ImageTooSmall, MissingFile
from .field import load_checkpoint
from .renderer import RenderSettings, render_image

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
_LUMA = np.array([0.299, 0.587, 0.114])
_C1 = 0.01 ** 2
_C2 = 0.03 ** 2


def psnr(a, b) -> float:
    """10 log10(1/MSE) in dB over all pixels and channels; 99.0 if identical."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax * ax) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


_WINDOW = _gaussian_window(SSIM_WINDOW, 1.5)


def _luma(img: np.ndarray) -> np.ndarray:
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ _LUMA
    raise DimensionMismatch(f"expected HxW or HxWx3 image, got {img.shape}")


def ssim(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    ya, yb = _luma(a), _luma(b)
    if min(ya.shape) < SSIM_WINDOW:
        raise ImageTooSmall(
            f"SSIM needs at least {SSIM_WINDOW} px per side, got {ya.shape}")
    mu_a = convolve2d(ya, _WINDOW, mode="valid")
    mu_b = convolve2d(yb, _WINDOW, mode="valid")
    var_a = convolve2d(ya * ya, _WINDOW, mode="valid") - mu_a * mu_a
    var_b = convolve2d(yb * yb, _WINDOW, mode="valid") - mu_b * mu_b
    cov = convolve2d(ya * yb, _WINDOW, mode="valid") - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + _C1) * (2.0 * cov + _C2)
    den = (mu_a * mu_a + mu_b * mu_b + _C1) * (var_a + var_b + _C2)
    return float(np.mean(num / den))


@dataclass
class MetricsReport:
    mode: str
    config_n: int
    view_ids: list
    psnr_db: list
    ssim: list
    wall_s: float

    def __post_init__(self):
        if not len(self.view_ids) == len(self.psnr_db) == len(self.ssim):
            raise DataError("per-view metric lists must have equal lengths")

    @property
    def mean_psnr_db(self) -> float:
        return float(np.mean(self.psnr_db))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))


CSV_NOTE = ("# lpips: not computed (requires a pretrained perceptual network);"
            " column intentionally left empty")
CSV_HEADER = "mode,config_n,view_id,psnr_db,ssim,wall_s,lpips"


def write_metrics_csv(path, report: MetricsReport) -> None:
    """Fixed-order CSV: mode,config_n,view_id,psnr_db,ssim,wall_s,lpips."""
    lines = [CSV_NOTE, CSV_HEADER]
    for vid, p, s in zip(report.view_ids, report.psnr_db, report.ssim):
        lines.append(f"{report.mode},{report.config_n},{vid},"
                     f"{p:.6f},{s:.6f},{report.wall_s:.3f},")
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n")


def _load_manifest(run_dir: Path) -> dict:
    path = run_dir / "manifest.json"
    if not path.exists():
        raise MissingFile(f"no manifest.json under {run_dir}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt manifest {path}: {exc}") from exc


def render_settings_from_manifest(manifest: dict) -> RenderSettings:
    """Deterministic evaluation settings: the run's quadrature, midpoints."""
    cfg = manifest["config"]
    return RenderSettings(
        n_samples=cfg["n_samples"], stratified=False,
        t_near=cfg["t_near"], t_far=cfg["t_far"],
        background=tuple(cfg["background"]), beta_min_sq=cfg["beta_min_sq"],
        variance_weighting=cfg["variance_weighting"])


def evaluate(run_dir, dataset: Dataset, split: str = "test", out_csv=None,
             update_manifest: bool = True) -> MetricsReport:
    """Render every view of the split from the run's checkpoint and score it.

    Writes the CSV when out_csv is given and records a summary entry in the
    run manifest. Midpoint sampling keeps output byte-identical across calls.
    """
    run = Path(run_dir)
    manifest = _load_manifest(run)
    params = load_checkpoint(run / manifest.get("checkpoint", "field.ckpt"))
    settings = render_settings_from_manifest(manifest)
    views = dataset.split(split)

    start = time.perf_counter()
    psnrs, ssims = [], []
    for obs in views:
        rendered, _ = render_image(params, obs.pose, obs.intr, settings)
        psnrs.append(psnr(obs.image, rendered))
        ssims.append(ssim(obs.image, rendered))
    eval_wall = time.perf_counter() - start

    report = MetricsReport(manifest["mode"], manifest["config_n"],
                           list(range(len(views))), psnrs, ssims,
                           float(manifest["wall_clock_s"]))
    if out_csv is not None:
        write_metrics_csv(out_csv, report)
    if update_manifest:
        manifest.setdefault("evaluations", {})[split] = {
            "mean_psnr_db": report.mean_psnr_db,
            "mean_ssim": report.mean_ssim,
            "n_views": len(views),
            "eval_wall_s": eval_wall,
            "csv": str(out_csv) if out_csv is not None else None,
        }
        (run / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return report
