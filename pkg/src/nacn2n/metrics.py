"""PSNR and SSIM between a denoised image and a reference.

PSNR uses a fixed dynamic range (1.0 for normalized images) rather than a
per-image maximum so scores are comparable across images. Zero MSE returns
a 100 dB sentinel so aggregates stay finite.

SSIM's default global mode computes one value from whole-image statistics
in the standard similarity form, whose numerator uses +c1 (and 2*cov + c2)
so that SSIM(x, x) = 1 holds exactly. The printed variant with a -c1
numerator and a bare covariance term is available behind `paper_literal`
for audit; it does not satisfy the identity property. Windowed mode
averages the same formula over 11x11 Gaussian-weighted windows (sigma 1.5)
on the valid interior.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError
from .imaging import ImageGrid, clip_for_display

PSNR_IDENTICAL_SENTINEL = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _as_f64(img) -> np.ndarray:
    if isinstance(img, ImageGrid):
        return img.pixels.astype(np.float64)
    return np.asarray(img, dtype=np.float64)


def psnr(x, y, max_value: float = 1.0) -> float:
    """10 * log10(max^2 / MSE) in dB; 100 dB sentinel when MSE is zero."""
    a, b = _as_f64(x), _as_f64(y)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    if not max_value > 0:
        raise ConfigError(f"psnr max_value must be > 0, got {max_value}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL_SENTINEL
    return float(10.0 * np.log10(max_value**2 / mse))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    win = np.outer(g, g)
    return win / win.sum()


def _ssim_value(mu_x, mu_y, var_x, var_y, cov, c1, c2, paper_literal):
    if paper_literal:
        num = (2.0 * mu_x * mu_y - c1) * (cov + c2)
    else:
        num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return num / den


def ssim(
    x,
    y,
    c1: float | None = None,
    c2: float | None = None,
    mode: str = "global",
    max_value: float = 1.0,
    paper_literal: bool = False,
) -> float:
    """Structural similarity with population statistics.

    Defaults: c1 = (0.01 * max)^2, c2 = (0.03 * max)^2.
    """
    a, b = _as_f64(x), _as_f64(y)
    if a.shape != b.shape:
        raise ShapeError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if c1 is None:
        c1 = (0.01 * max_value) ** 2
    if c2 is None:
        c2 = (0.03 * max_value) ** 2
    if not (c1 > 0 and c2 > 0):
        raise ConfigError(f"ssim stabilizers must be > 0, got c1={c1}, c2={c2}")

    if mode == "global":
        mu_x, mu_y = a.mean(), b.mean()
        var_x, var_y = a.var(), b.var()
        cov = float(np.mean((a - mu_x) * (b - mu_y)))
        return float(_ssim_value(mu_x, mu_y, var_x, var_y, cov, c1, c2, paper_literal))
    if mode == "windowed":
        return _ssim_windowed(a, b, c1, c2, paper_literal)
    raise ConfigError(f"unknown ssim mode '{mode}'")


def _ssim_windowed(a, b, c1, c2, paper_literal) -> float:
    h, w = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ShapeError(
            f"windowed ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )
    win = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    shape = (SSIM_WINDOW, SSIM_WINDOW)
    wa = np.lib.stride_tricks.sliding_window_view(a, shape)
    wb = np.lib.stride_tricks.sliding_window_view(b, shape)
    mu_x = np.einsum("ijkl,kl->ij", wa, win)
    mu_y = np.einsum("ijkl,kl->ij", wb, win)
    e_xx = np.einsum("ijkl,kl->ij", wa * wa, win)
    e_yy = np.einsum("ijkl,kl->ij", wb * wb, win)
    e_xy = np.einsum("ijkl,kl->ij", wa * wb, win)
    var_x = e_xx - mu_x**2
    var_y = e_yy - mu_y**2
    cov = e_xy - mu_x * mu_y
    values = _ssim_value(mu_x, mu_y, var_x, var_y, cov, c1, c2, paper_literal)
    return float(values.mean())


@dataclass
class MetricReport:
    """Per-image and aggregate PSNR/SSIM, with the no-op input baseline."""

    per_image: list[dict] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        cols = ["id", "psnr", "ssim", "baseline_psnr", "baseline_ssim", "flags"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for row in self.per_image:
                writer.writerow(
                    [
                        row["id"],
                        f"{row['psnr']:.6f}",
                        f"{row['ssim']:.6f}",
                        f"{row['baseline_psnr']:.6f}",
                        f"{row['baseline_ssim']:.6f}",
                        ";".join(row["flags"]),
                    ]
                )

    def to_json(self, path) -> None:
        payload = {"aggregate": self.aggregate, "config": self.config}
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def _flags_for(psnr_val, ssim_val):
    flags = []
    if psnr_val == PSNR_IDENTICAL_SENTINEL:
        flags.append("identical")
    if ssim_val < 0:
        flags.append("negative_ssim")
    return flags


def score_images(
    outputs: list[ImageGrid],
    inputs: list[ImageGrid],
    references: list[ImageGrid],
    max_value: float = 1.0,
    ssim_mode: str = "global",
) -> MetricReport:
    """Metric report for already-computed outputs (clipped internally)."""
    c1 = (0.01 * max_value) ** 2
    c2 = (0.03 * max_value) ** 2
    per_image = []
    for out, inp, ref in zip(outputs, inputs, references):
        if out.id != ref.id or inp.id != ref.id:
            raise ConfigError(
                f"id mismatch: output '{out.id}', input '{inp.id}', reference '{ref.id}'"
            )
        out_c = clip_for_display(out)
        inp_c = clip_for_display(inp)
        p = psnr(out_c, ref, max_value)
        s = ssim(out_c, ref, c1, c2, ssim_mode, max_value)
        bp = psnr(inp_c, ref, max_value)
        bs = ssim(inp_c, ref, c1, c2, ssim_mode, max_value)
        per_image.append(
            {
                "id": ref.id,
                "psnr": p,
                "ssim": s,
                "baseline_psnr": bp,
                "baseline_ssim": bs,
                "flags": _flags_for(p, s),
            }
        )
    if not per_image:
        raise ConfigError("score_images received no images")

    def agg(key):
        vals = np.array([row[key] for row in per_image], dtype=np.float64)
        return float(vals.mean()), float(vals.std())

    aggregate = {}
    for key in ("psnr", "ssim", "baseline_psnr", "baseline_ssim"):
        mean, std = agg(key)
        aggregate[f"{key}_mean"] = mean
        aggregate[f"{key}_std"] = std
    config = {"max_value": max_value, "c1": c1, "c2": c2, "ssim_mode": ssim_mode}
    return MetricReport(per_image, aggregate, config)


def evaluate(
    model,
    test_inputs: list[ImageGrid],
    references: list[ImageGrid],
    max_value: float = 1.0,
    ssim_mode: str = "global",
) -> MetricReport:
    """Run the chain over test inputs and score against references.

    Inputs and references must align by id. Outputs are clipped to [0, 1]
    for metric computation; the unclipped forward pass is unaffected.
    """
    from .models import apply_chain

    if len(test_inputs) != len(references):
        raise ConfigError(
            f"got {len(test_inputs)} inputs but {len(references)} references"
        )
    outputs = []
    for inp, ref in zip(test_inputs, references):
        if inp.id != ref.id:
            raise ConfigError(f"id mismatch: input '{inp.id}' vs reference '{ref.id}'")
        out, _ = apply_chain(model, inp)
        outputs.append(out)
    return score_images(outputs, test_inputs, references, max_value, ssim_mode)
