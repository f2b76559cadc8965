"""Reconstruction and editing-quality metrics.

The perceptual distance and identity similarity use a seeded, never
trained random convolutional pyramid as the feature extractor.  Random
convolutional features are a standard trainable-free perceptual proxy
at this scale; every emitted report records the substitution and the
extractor seed so no number here is mistaken for an LPIPS or face-
embedding score.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import (Graph, Node, conv2d_raw, downsample2x_raw,
                       leaky_relu_raw)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_RANGE = 1.0

EXTRACTOR_NOTE = ("feature extractor is a seeded random conv pyramid "
                  "(surrogate for trained perceptual/identity networks)")
DEFAULT_EXTRACTOR_SEED = 2024


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"mse: image shapes differ: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.mean(d * d))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords[:, None] ** 2 + coords[None, :] ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local structural similarity over valid Gaussian windows,
    averaged across channels. Unit dynamic range."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise ValueError(f"ssim: expected (C,H,W) or (H,W), got {a.shape}")
    h, w = a.shape[1], a.shape[2]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"ssim: image {h}x{w} smaller than the "
                         f"{SSIM_WINDOW}x{SSIM_WINDOW} window")
    win = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1 = (SSIM_K1 * SSIM_RANGE) ** 2
    c2 = (SSIM_K2 * SSIM_RANGE) ** 2
    vals = []
    for ch in range(a.shape[0]):
        wa = sliding_window_view(a[ch], (SSIM_WINDOW, SSIM_WINDOW))
        wb = sliding_window_view(b[ch], (SSIM_WINDOW, SSIM_WINDOW))
        mu1 = np.tensordot(wa, win, axes=([2, 3], [0, 1]))
        mu2 = np.tensordot(wb, win, axes=([2, 3], [0, 1]))
        s11 = np.tensordot(wa * wa, win, axes=([2, 3], [0, 1])) - mu1 * mu1
        s22 = np.tensordot(wb * wb, win, axes=([2, 3], [0, 1])) - mu2 * mu2
        s12 = np.tensordot(wa * wb, win, axes=([2, 3], [0, 1])) - mu1 * mu2
        num = (2.0 * mu1 * mu2 + c1) * (2.0 * s12 + c2)
        den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
        vals.append(num / den)
    return float(np.mean(vals))


@dataclass(frozen=True, eq=False)
class FeatureExtractor:
    """Seeded fixed random convolutional pyramid: three stages of 3x3
    convolution, 2x subsampling, leaky ReLU.  Deterministic given the
    seed, never trained."""

    kernels: tuple
    seed: int

    @classmethod
    def create(cls, in_channels: int = 3, widths=(8, 12, 16),
               seed: int = DEFAULT_EXTRACTOR_SEED) -> "FeatureExtractor":
        rng = np.random.default_rng(seed)
        kernels = []
        cin = in_channels
        for cout in widths:
            fan_in = cin * 9
            k = rng.standard_normal((cout, cin, 3, 3)) * math.sqrt(2.0 / fan_in)
            k.setflags(write=False)
            kernels.append(k)
            cin = cout
        return cls(tuple(kernels), seed)

    def stage_features(self, image: np.ndarray) -> list[np.ndarray]:
        """Unit-normalized flattened feature vector per pyramid stage."""
        x = np.asarray(image, dtype=np.float64)
        out = []
        for k in self.kernels:
            x = leaky_relu_raw(downsample2x_raw(conv2d_raw(x, k)))
            flat = x.reshape(-1)
            r = np.sqrt(np.sum(flat * flat))
            if r == 0.0:
                raise ValueError("degenerate (all-zero) feature stage")
            out.append(flat / r)
        return out

    def features(self, image: np.ndarray) -> np.ndarray:
        return np.concatenate(self.stage_features(image))

    def build_stage_nodes(self, g: Graph, image: Node) -> list[Node]:
        """Same pyramid as graph nodes (identical floats to the numpy path)."""
        x = image
        out = []
        for k in self.kernels:
            x = g.leaky_relu(g.downsample2x(g.conv2d(x, g.constant(k))))
            size = int(np.prod(x.shape, dtype=np.int64))
            out.append(g.unit_normalize(g.reshape(x, (size,))))
        return out


def perceptual(extractor: FeatureExtractor, a: np.ndarray, b: np.ndarray) -> float:
    """Mean over pyramid stages of the MSE between normalized features."""
    if np.shape(a) != np.shape(b):
        raise ValueError(f"perceptual: image shapes differ: "
                         f"{np.shape(a)} vs {np.shape(b)}")
    fa = extractor.stage_features(a)
    fb = extractor.stage_features(b)
    return float(np.mean([np.mean((x - y) ** 2) for x, y in zip(fa, fb)]))


def identity_similarity(extractor: FeatureExtractor, a: np.ndarray,
                        b: np.ndarray) -> float:
    """Cosine similarity of the extracted multi-scale feature vectors."""
    fa = extractor.features(a)
    fb = extractor.features(b)
    na, nb = np.linalg.norm(fa), np.linalg.norm(fb)
    if na == 0.0 or nb == 0.0:
        raise ValueError("degenerate zero feature vector")
    return float(np.clip(np.dot(fa, fb) / (na * nb), -1.0, 1.0))


# ---------------------------------------------------------------------------
# Paired non-inferiority test: one-sided paired t statistic with the
# t CDF evaluated through the regularized incomplete beta function.
# ---------------------------------------------------------------------------

def _betacf(a: float, b: float, x: float) -> float:
    # Modified Lentz continued fraction for the incomplete beta function.
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 3e-16:
            return h
    raise RuntimeError("incomplete beta continued fraction did not converge")


def _betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_cdf(t: float, df: int) -> float:
    """P(T <= t) for Student's t with df degrees of freedom."""
    if df < 1:
        raise ValueError(f"degrees of freedom must be >= 1, got {df}")
    if t == 0.0:
        return 0.5
    ib = _betainc(0.5 * df, 0.5, df / (df + t * t))
    return 1.0 - 0.5 * ib if t > 0 else 0.5 * ib


@dataclass(frozen=True)
class NonInferiorityResult:
    t: float
    p: float
    df: int
    n: int
    mean: float
    std: float
    margin: float
    higher_is_better: bool
    degenerate: bool

    @property
    def convention(self) -> str:
        if self.higher_is_better:
            return "H1: mean(new - baseline) > -margin (benefit metric)"
        return "H1: mean(new - baseline) < margin (loss metric)"


def noninferiority_test(diffs, margin: float,
                        higher_is_better: bool = False) -> NonInferiorityResult:
    """One-sided paired t test that 'new' is at most ``margin`` worse.

    ``diffs`` are per-pair new-minus-baseline values.  For loss-like
    metrics the alternative is mean < margin; for benefit-like metrics
    (``higher_is_better``) the sign convention flips to mean > -margin.
    Zero-variance samples fall back to a documented convention: p is 0
    or 1 by the sign of the margin gap, and exactly 0.5 on the boundary,
    with the result flagged degenerate.
    """
    d = np.asarray(diffs, dtype=np.float64)
    if d.ndim != 1 or d.size < 3:
        raise ValueError(f"need at least 3 paired differences, got {d.size}")
    if margin <= 0.0:
        raise ValueError(f"margin must be positive, got {margin}")
    n = d.size
    m = float(d.mean())
    s = float(d.std(ddof=1))
    df = n - 1
    gap = (m + margin) if higher_is_better else (m - margin)
    if s == 0.0:
        if gap == 0.0:
            p = 0.5
        elif higher_is_better:
            p = 0.0 if gap > 0 else 1.0
        else:
            p = 0.0 if gap < 0 else 1.0
        return NonInferiorityResult(math.inf if gap else 0.0, p, df, n, m, s,
                                    margin, higher_is_better, True)
    t = gap / (s / math.sqrt(n))
    p = 1.0 - student_t_cdf(t, df) if higher_is_better else student_t_cdf(t, df)
    return NonInferiorityResult(t, p, df, n, m, s, margin, higher_is_better, False)


# ---------------------------------------------------------------------------
# Result rows and their CSV form.
# ---------------------------------------------------------------------------

CSV_HEADER = ["target", "space", "mse", "ssim", "perceptual", "identity",
              "alpha", "indist"]


@dataclass
class MetricsRow:
    target: str
    space: str
    mse: float
    ssim: float
    perceptual: float
    identity: float | None = None
    alpha: float | None = None
    indist: float | None = None

    def __post_init__(self):
        if self.mse < 0:
            raise ValueError(f"mse must be >= 0, got {self.mse}")
        if not -1.0 <= self.ssim <= 1.0:
            raise ValueError(f"ssim must be in [-1, 1], got {self.ssim}")
        if self.identity is not None and not -1.0 <= self.identity <= 1.0:
            raise ValueError(f"identity must be in [-1, 1], got {self.identity}")


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def _parse(s: str):
    return None if s == "" else float(s)


def write_metrics_csv(path: str, rows: list[MetricsRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in rows:
            writer.writerow([r.target, r.space, _fmt(r.mse), _fmt(r.ssim),
                             _fmt(r.perceptual), _fmt(r.identity),
                             _fmt(r.alpha), _fmt(r.indist)])


def read_metrics_csv(path: str) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != CSV_HEADER:
            raise ValueError(f"unexpected CSV header: {header}")
        out = []
        for rec in reader:
            out.append(MetricsRow(rec[0], rec[1], float(rec[2]), float(rec[3]),
                                  float(rec[4]), _parse(rec[5]), _parse(rec[6]),
                                  _parse(rec[7])))
    return out
