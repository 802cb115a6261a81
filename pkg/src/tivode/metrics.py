"""Pixel-space image quality metrics: MSE, PSNR and SSIM."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, InputError


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical images."""
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val ** 2 / err)


def ssim(a, b, window: int = 7, C1: float | None = None, C2: float | None = None,
         max_val: float = 1.0) -> float:
    """Mean structural similarity over all fully contained ``window`` squares.

    Local statistics use a uniform window and population (1/N) moments.
    """
    a, b = _pair(a, b)
    if a.ndim != 2:
        raise DimensionError(f"ssim expects 2-D images, got shape {a.shape}")
    if a.shape[0] < window or a.shape[1] < window:
        raise InputError(f"image {a.shape} is smaller than the {window}x{window} window")
    C1 = (0.01 * max_val) ** 2 if C1 is None else C1
    C2 = (0.03 * max_val) ** 2 if C2 is None else C2
    wa = sliding_window_view(a, (window, window))
    wb = sliding_window_view(b, (window, window))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = (wa * wa).mean(axis=(-2, -1)) - mu_a ** 2
    var_b = (wb * wb).mean(axis=(-2, -1)) - mu_b ** 2
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a ** 2 + mu_b ** 2 + C1) * (var_a + var_b + C2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    """Per-frame metrics plus arithmetic-mean aggregates."""

    ssim: list = field(default_factory=list)
    psnr: list = field(default_factory=list)
    mse: list = field(default_factory=list)
    video_ssim: list = field(default_factory=list)
    groups: dict = field(default_factory=dict)  # group name -> list of per-video SSIM

    def add_video(self, pred, target, groups=()) -> float:
        """Score one video frame-by-frame; returns its mean SSIM."""
        pred = np.asarray(pred)
        target = np.asarray(target)
        if pred.shape != target.shape:
            raise DimensionError(f"video shapes differ: {pred.shape} vs {target.shape}")
        frame_ssim = [ssim(p, t) for p, t in zip(pred, target)]
        self.ssim.extend(frame_ssim)
        self.psnr.extend(psnr(p, t) for p, t in zip(pred, target))
        self.mse.extend(mse(p, t) for p, t in zip(pred, target))
        v = float(np.mean(frame_ssim))
        self.video_ssim.append(v)
        for g in groups:
            self.groups.setdefault(g, []).append(v)
        return v

    @property
    def frame_count(self) -> int:
        return len(self.ssim)

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else math.nan

    @property
    def mean_mse(self) -> float:
        return float(np.mean(self.mse)) if self.mse else math.nan

    @property
    def mean_psnr(self) -> float:
        """Mean over frames; infinite if any frame is a perfect match."""
        return float(np.mean(self.psnr)) if self.psnr else math.nan

    @property
    def mean_video_ssim(self) -> float:
        return float(np.mean(self.video_ssim)) if self.video_ssim else math.nan

    def to_text(self, group_keys=()) -> str:
        lines = [
            f"frames={self.frame_count}",
            f"videos={len(self.video_ssim)}",
            f"ssim={_fmt(self.mean_ssim)}",
            f"psnr={_fmt(self.mean_psnr)}",
            f"mse={_fmt(self.mean_mse)}",
            f"video_ssim={_fmt(self.mean_video_ssim)}",
        ]
        for key in list(group_keys) + sorted(k for k in self.groups if k not in group_keys):
            vals = self.groups.get(key, [])
            lines.append(f"ssim.{key}={_fmt(float(np.mean(vals))) if vals else 'nan'}")
        return "".join(line + "\n" for line in lines)


def _fmt(x: float) -> str:
    if math.isinf(x):
        return "inf"
    if math.isnan(x):
        return "nan"
    return f"{x:.6f}"


def parse_report(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k] = float(v)
    return out
