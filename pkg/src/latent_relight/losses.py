"""Training objective: pixel losses, coding rate, uniformity and intrinsic-consistency terms.

Convention: numpy arrays are channel-last (H, W, C); torch tensors are channel-first
(..., C, H, W). Loss functions return torch scalars when fed tensors (differentiable)
and Python floats when fed numpy arrays.
"""

from dataclasses import dataclass, asdict
from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class LossWeights:
    """Weights of the total objective and the coding-rate distortion constant."""

    w_l2: float = 10.0
    w_ssim: float = 0.1
    w_grad: float = 1.0
    w_intrinsic: float = 0.1
    w_intrinsic_reg: float = 1e-3
    w_extrinsic: float = 1e-4
    lambda_distortion: float = 0.5

    def validate(self) -> None:
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {value}")
        if self.lambda_distortion <= 0:
            raise ValueError("lambda_distortion must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**d)


def _to_bchw(x) -> torch.Tensor:
    """Coerce an image-like input to a (B, C, H, W) float tensor.

    numpy inputs are read as (H, W, C) or (H, W); torch inputs as (C, H, W),
    (B, C, H, W) or (H, W).
    """
    if isinstance(x, np.ndarray):
        t = torch.from_numpy(np.ascontiguousarray(x))
        if t.ndim == 2:
            return t[None, None]
        if t.ndim == 3:
            return t.permute(2, 0, 1)[None]
        raise ValueError(f"expected 2D or 3D numpy image, got shape {tuple(x.shape)}")
    t = x
    if t.ndim == 2:
        return t[None, None]
    if t.ndim == 3:
        return t[None]
    if t.ndim == 4:
        return t
    raise ValueError(f"expected 2D-4D tensor, got {t.ndim}D")


@lru_cache(maxsize=8)
def _gaussian_window(size: int, sigma: float, dtype: torch.dtype) -> torch.Tensor:
    half = (size - 1) / 2.0
    coords = torch.arange(size, dtype=torch.float64) - half
    g = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    g = g / g.sum()
    win = torch.outer(g, g)
    return win.to(dtype)


def ssim(image_a, image_b):
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Local statistics use reflect padding, so both images must be at least
    6 pixels on each side. Symmetric and differentiable; values in [-1, 1]
    for inputs on dynamic range 1.0.
    """
    numpy_in = isinstance(image_a, np.ndarray) and isinstance(image_b, np.ndarray)
    a, b = _to_bchw(image_a), _to_bchw(image_b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    pad = SSIM_WINDOW // 2
    if a.shape[-1] <= pad or a.shape[-2] <= pad:
        raise ValueError(f"image too small for {SSIM_WINDOW}x{SSIM_WINDOW} window: {tuple(a.shape)}")
    channels = a.shape[1]
    win = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA, a.dtype)
    kernel = win.expand(channels, 1, SSIM_WINDOW, SSIM_WINDOW)

    ap = F.pad(a, (pad, pad, pad, pad), mode="reflect")
    bp = F.pad(b, (pad, pad, pad, pad), mode="reflect")

    def blur(x):
        return F.conv2d(x, kernel, groups=channels)

    mu_a = blur(ap)
    mu_b = blur(bp)
    var_a = blur(ap * ap) - mu_a * mu_a
    var_b = blur(bp * bp) - mu_b * mu_b
    cov = blur(ap * bp) - mu_a * mu_b

    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    value = (num / den).mean()
    return float(value) if numpy_in else value


def image_gradients(image):
    """Forward differences along x and y, zero at the trailing edge."""
    t = image if isinstance(image, torch.Tensor) else _to_bchw(image)
    dx = torch.zeros_like(t)
    dy = torch.zeros_like(t)
    dx[..., :, :-1] = t[..., :, 1:] - t[..., :, :-1]
    dy[..., :-1, :] = t[..., 1:, :] - t[..., :-1, :]
    return dx, dy


def pixel_loss(pred, target, weights: LossWeights):
    """Weighted L2 + (1 - SSIM) + spatial-gradient L2 between two images."""
    numpy_in = isinstance(pred, np.ndarray) and isinstance(target, np.ndarray)
    p, t = _to_bchw(pred), _to_bchw(target)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(t.shape)}")
    l2 = ((p - t) ** 2).mean()
    ssim_term = 1.0 - ssim(p, t)
    dxp, dyp = image_gradients(p)
    dxt, dyt = image_gradients(t)
    grad = 0.5 * (((dxp - dxt) ** 2).mean() + ((dyp - dyt) ** 2).mean())
    total = weights.w_l2 * l2 + weights.w_ssim * ssim_term + weights.w_grad * grad
    return float(total) if numpy_in else total


def coding_rate(features, lam: float):
    """log det(I + d/(n lam^2) S^T S) for a row matrix S, via Cholesky.

    `features` is (n, d) or batched (..., n, d); the Gram matrix is symmetric
    positive definite so the factorization is stable, and the result carries
    gradients when the input does.
    """
    numpy_in = isinstance(features, np.ndarray)
    S = torch.from_numpy(np.ascontiguousarray(features)) if numpy_in else features
    if S.ndim < 2:
        raise ValueError("features must be at least 2D (n, d)")
    if lam <= 0:
        raise ValueError(f"lambda must be > 0, got {lam}")
    if not torch.isfinite(S).all():
        raise ValueError("non-finite values in coding_rate input")
    n, d = S.shape[-2], S.shape[-1]
    if n < 1 or d < 1:
        raise ValueError(f"degenerate shape {tuple(S.shape)}")
    scale = d / (n * lam * lam)
    eye = torch.eye(d, dtype=S.dtype, device=S.device)
    gram = eye + scale * (S.transpose(-2, -1) @ S)
    chol = torch.linalg.cholesky(gram)
    value = 2.0 * torch.log(torch.diagonal(chol, dim1=-2, dim2=-1)).sum(-1)
    return float(value) if numpy_in else value


class UniformityTarget:
    """Per-shape cache of coding rates of uniform hyperspherical row samples.

    The reference sample for a shape is drawn once (seeded by the shape, so
    the cache contents do not depend on request order) and its coding rate is
    the set point the regularizer pulls toward.
    """

    def __init__(self, seed: int = 0, lam: float = 0.5):
        if lam <= 0:
            raise ValueError("lambda must be > 0")
        self.seed = int(seed)
        self.lam = float(lam)
        self._samples: dict[tuple[int, int], np.ndarray] = {}
        self._rates: dict[tuple[int, int], float] = {}

    def sample(self, n: int, d: int) -> np.ndarray:
        if n < 1 or d < 1:
            raise ValueError(f"degenerate shape ({n}, {d})")
        key = (int(n), int(d))
        if key not in self._samples:
            rng = np.random.default_rng([self.seed, key[0], key[1]])
            rows = rng.standard_normal(key)
            norms = np.linalg.norm(rows, axis=1, keepdims=True)
            self._samples[key] = (rows / norms).astype(np.float64)
        return self._samples[key]

    def rate(self, n: int, d: int) -> float:
        key = (int(n), int(d))
        if key not in self._rates:
            self._rates[key] = coding_rate(self.sample(n, d), self.lam)
        return self._rates[key]


def uniformity_reg(features, target: UniformityTarget, lam: float | None = None):
    """|R(S) - R(S_ref)| where S_ref is the cached hyperspherical sample for S's shape."""
    if lam is not None and lam != target.lam:
        raise ValueError(f"lambda {lam} disagrees with target's lambda {target.lam}")
    numpy_in = isinstance(features, np.ndarray)
    S = torch.from_numpy(np.ascontiguousarray(features)) if numpy_in else features
    if S.ndim != 2:
        raise ValueError("uniformity_reg expects a 2D (n, d) matrix")
    n, d = S.shape
    reference = target.rate(int(n), int(d))
    value = (coding_rate(S, target.lam) - reference).abs()
    return float(value) if numpy_in else value


def _level_to_bchw(level) -> torch.Tensor:
    """Intrinsic level to (B, C, H, W); numpy levels are (H, W, C)."""
    if isinstance(level, np.ndarray):
        if level.ndim != 3:
            raise ValueError(f"numpy intrinsic level must be (H, W, C), got {level.shape}")
        return torch.from_numpy(np.ascontiguousarray(level)).permute(2, 0, 1)[None]
    if level.ndim == 3:
        return level[None]
    if level.ndim == 4:
        return level
    raise ValueError(f"intrinsic level must be 3D or 4D, got {level.ndim}D")


def intrinsic_loss(intrinsics_a, intrinsics_b, target: UniformityTarget, weights: LossWeights):
    """Per-level consistency between two encodings of the same scene.

    Each level contributes the mean (over batch and spatial positions) L2
    distance between corresponding channel vectors, plus the uniformity
    regularizer on the first encoding's rows, weighted by w_intrinsic_reg.
    """
    levels_a = [_level_to_bchw(s) for s in intrinsics_a]
    levels_b = [_level_to_bchw(s) for s in intrinsics_b]
    if len(levels_a) != len(levels_b):
        raise ValueError(f"level count mismatch: {len(levels_a)} vs {len(levels_b)}")
    numpy_in = all(isinstance(s, np.ndarray) for s in intrinsics_a)
    total = None
    for sa, sb in zip(levels_a, levels_b):
        if sa.shape != sb.shape:
            raise ValueError(f"level shape mismatch: {tuple(sa.shape)} vs {tuple(sb.shape)}")
        dist = torch.linalg.vector_norm(sa - sb, dim=1).mean()
        batch, channels, h, w = sa.shape
        rows = sa.permute(0, 2, 3, 1).reshape(batch, h * w, channels)
        reference = target.rate(h * w, channels)
        reg = (coding_rate(rows, target.lam) - reference).abs().mean()
        term = dist + weights.w_intrinsic_reg * reg
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no intrinsic levels given")
    return float(total) if numpy_in else total


def total_loss(batch_outputs: dict, weights: LossWeights, target: UniformityTarget):
    """Weighted combination of the relight objective's terms.

    `batch_outputs` carries: relit, recon, target (images), intrinsics_a,
    intrinsics_b (level lists), codes ((B, dim) extrinsic codes). Returns the
    scalar total plus a per-term breakdown of the weighted contributions.
    """
    required = ("relit", "recon", "target", "intrinsics_a", "intrinsics_b", "codes")
    missing = [k for k in required if k not in batch_outputs or batch_outputs[k] is None]
    if missing:
        raise ValueError(f"batch_outputs missing components: {missing}")

    relit = _to_bchw(batch_outputs["relit"])
    recon = _to_bchw(batch_outputs["recon"])
    clean = _to_bchw(batch_outputs["target"])
    codes = batch_outputs["codes"]
    if isinstance(codes, np.ndarray):
        codes = torch.from_numpy(np.ascontiguousarray(codes))
    if codes.ndim != 2:
        raise ValueError(f"codes must be (B, dim), got shape {tuple(codes.shape)}")

    pix_relight = pixel_loss(relit, clean, weights)
    pix_recon = pixel_loss(recon, clean, weights)
    intr = weights.w_intrinsic * intrinsic_loss(
        batch_outputs["intrinsics_a"], batch_outputs["intrinsics_b"], target, weights
    )
    extr = weights.w_extrinsic * uniformity_reg(codes, target)
    total = pix_relight + pix_recon + intr + extr

    def as_float(x):
        return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)

    breakdown = {
        "pixel_relight": as_float(pix_relight),
        "pixel_recon": as_float(pix_recon),
        "intrinsic": as_float(intr),
        "extrinsic": as_float(extr),
    }
    # report the float64 sum of the reported terms so the breakdown is
    # internally consistent regardless of the tensor dtype
    breakdown["total"] = sum(breakdown.values())
    return total, breakdown
