"""The relighting autoencoder.

The encoder maps an image to channel-normalized intrinsic feature maps (one per
resolution from half the input size down to the bottleneck) and a unit-norm
low-dimensional extrinsic code. The decoder rebuilds an image from the
intrinsics while the code modulates each level multiplicatively inside a
+/- alpha band (constrained scaling); alpha_override=0 silences the lighting
pathway entirely, which is how albedo falls out.

numpy interfaces use (H, W, C) float32 arrays; internal tensors are (B, C, H, W).
"""

import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


class DegenerateInterpolationError(ValueError):
    """Raised when an extrinsic blend collapses to the zero vector."""


@dataclass
class ModelConfig:
    base_resolution: int = 256
    blocks_per_level: list[int] = field(default_factory=lambda: [1, 2, 2, 4, 4, 4])
    channels_per_level: list[int] = field(default_factory=lambda: [32, 64, 128, 128, 256, 512])
    extrinsic_dim: int = 16
    alpha: float = 5e-3
    injection_mlp_hidden: int = 256
    extrinsic_head_hidden: int = 256
    seed: int = 0

    @property
    def n_levels(self) -> int:
        return len(self.blocks_per_level)

    @property
    def bottleneck_resolution(self) -> int:
        return self.base_resolution // (2 ** (self.n_levels - 1))

    def validate(self) -> "ModelConfig":
        if len(self.blocks_per_level) != len(self.channels_per_level):
            raise ValueError("blocks_per_level and channels_per_level must have equal length")
        if self.n_levels < 2:
            raise ValueError("need at least 2 resolution levels")
        if self.base_resolution % (2 ** (self.n_levels - 1)) != 0:
            raise ValueError(
                f"base_resolution {self.base_resolution} not divisible by 2^{self.n_levels - 1}"
            )
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.extrinsic_dim < 1 or self.injection_mlp_hidden < 1 or self.extrinsic_head_hidden < 1:
            raise ValueError("extrinsic_dim and hidden widths must be >= 1")
        for c in self.channels_per_level:
            if c % _num_groups(c) != 0:
                raise ValueError(f"channel count {c} incompatible with group normalization")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d).validate()


@dataclass
class IntrinsicFeatures:
    """Spatial feature maps (H_i, W_i, C_i), unit L2 norm along channels."""

    levels: list[np.ndarray]

    def validate(self, tol: float = 1e-5) -> "IntrinsicFeatures":
        for i, level in enumerate(self.levels):
            if level.ndim != 3:
                raise ValueError(f"level {i} must be (H, W, C), got {level.shape}")
            if not np.isfinite(level).all():
                raise ValueError(f"level {i} contains non-finite values")
            norms = np.linalg.norm(level, axis=-1)
            if np.abs(norms - 1.0).max() > tol:
                raise ValueError(f"level {i} channel vectors not unit norm")
        return self


@dataclass
class ExtrinsicCode:
    """Unit-norm lighting code."""

    code: np.ndarray

    def validate(self, tol: float = 1e-5) -> "ExtrinsicCode":
        if self.code.ndim != 1:
            raise ValueError(f"code must be 1D, got shape {self.code.shape}")
        if not np.isfinite(self.code).all():
            raise ValueError("code contains non-finite values")
        if abs(float(np.linalg.norm(self.code)) - 1.0) > tol:
            raise ValueError("code is not unit norm")
        return self


def _num_groups(channels: int) -> int:
    return min(32, channels)


class ResidualBlock(nn.Module):
    """Two 3x3 convs, each preceded by group norm + SiLU, with an identity skip."""

    def __init__(self, channels: int):
        super().__init__()
        groups = _num_groups(channels)
        self.norm1 = nn.GroupNorm(groups, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class UpsampleConv(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class InjectionMLP(nn.Module):
    """Maps the extrinsic code to per-channel modulation logits for one decoder level."""

    def __init__(self, extrinsic_dim: int, hidden: int, channels: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(extrinsic_dim, hidden), nn.SiLU(), nn.Linear(hidden, channels)
        )

    def forward(self, code):
        return self.net(code)


class ExtrinsicHead(nn.Module):
    """Per-location MLP on bottleneck features, then spatial mean and unit normalization."""

    def __init__(self, c_in: int, hidden: int, extrinsic_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(c_in, hidden, 1),
            nn.SiLU(),
            nn.Conv2d(hidden, hidden, 1),
            nn.SiLU(),
            nn.Conv2d(hidden, extrinsic_dim, 1),
        )

    def forward(self, x):
        return F.normalize(self.net(x).mean(dim=(2, 3)), dim=1)


class EncoderLevel(nn.Module):
    def __init__(self, channels: int, n_blocks: int, next_channels: int | None):
        super().__init__()
        self.blocks = nn.ModuleList(ResidualBlock(channels) for _ in range(n_blocks))
        self.down = (
            nn.Conv2d(channels, next_channels, 3, stride=2, padding=1)
            if next_channels is not None
            else None
        )


class DecoderLevel(nn.Module):
    def __init__(
        self,
        prev_channels: int | None,
        channels: int,
        n_blocks: int,
        has_skip: bool,
        extrinsic_dim: int,
        injection_hidden: int,
    ):
        super().__init__()
        self.up = UpsampleConv(prev_channels, channels) if prev_channels is not None else None
        self.fuse = nn.Conv2d(2 * channels, channels, 1) if has_skip else None
        self.inject = InjectionMLP(extrinsic_dim, injection_hidden, channels)
        self.blocks = nn.ModuleList(ResidualBlock(channels) for _ in range(n_blocks))


def constrained_scale_t(feature_map, code, alpha: float, head: nn.Module):
    """Tensor-side constrained scaling: F * (1 + alpha * tanh(head(code)))."""
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    if alpha == 0:
        return feature_map
    if code.ndim == 1:
        code = code[None]
    mod = head(code)
    if mod.shape[-1] != feature_map.shape[1]:
        raise ValueError(
            f"injection head emits {mod.shape[-1]} channels, feature map has {feature_map.shape[1]}"
        )
    gain = 1.0 + alpha * torch.tanh(mod)
    return feature_map * gain[:, :, None, None]


def constrained_scale(feature_map, code, alpha: float, head: nn.Module):
    """Constrained scaling on a numpy (H, W, C) feature map or a torch tensor.

    The head maps the extrinsic code to one modulation logit per channel; the
    resulting gain lives in [1 - alpha, 1 + alpha] and is broadcast over all
    spatial positions. alpha = 0 returns the input untouched.
    """
    if isinstance(feature_map, torch.Tensor):
        return constrained_scale_t(feature_map, _as_code_tensor(code), alpha, head)
    if feature_map.ndim != 3:
        raise ValueError(f"numpy feature map must be (H, W, C), got {feature_map.shape}")
    if alpha == 0:
        return feature_map
    t = torch.from_numpy(np.ascontiguousarray(feature_map)).permute(2, 0, 1)[None]
    with torch.no_grad():
        out = constrained_scale_t(t, _as_code_tensor(code), alpha, head)
    return out[0].permute(1, 2, 0).contiguous().numpy()


def _as_code_tensor(code) -> torch.Tensor:
    if isinstance(code, ExtrinsicCode):
        code = code.code
    if isinstance(code, np.ndarray):
        return torch.from_numpy(np.ascontiguousarray(code.astype(np.float32, copy=False)))
    return code


class RelightModel(nn.Module):
    """U-Net-style autoencoder with per-level extrinsic injection."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        ch = config.channels_per_level
        blocks = config.blocks_per_level
        levels = config.n_levels

        self.stem = nn.Conv2d(3, ch[0], 3, padding=1)
        self.encoder_levels = nn.ModuleList(
            EncoderLevel(ch[i], blocks[i], ch[i + 1] if i + 1 < levels else None)
            for i in range(levels)
        )
        self.extrinsic_head = ExtrinsicHead(
            ch[-1], config.extrinsic_head_hidden, config.extrinsic_dim
        )

        dec_ch = list(reversed(ch))
        dec_blocks = list(reversed(blocks))
        self.decoder_levels = nn.ModuleList(
            DecoderLevel(
                prev_channels=dec_ch[j - 1] if j > 0 else None,
                channels=dec_ch[j],
                n_blocks=dec_blocks[j],
                has_skip=0 < j < levels - 1,
                extrinsic_dim=config.extrinsic_dim,
                injection_hidden=config.injection_mlp_hidden,
            )
            for j in range(levels)
        )
        self.out_norm = nn.GroupNorm(_num_groups(ch[0]), ch[0])
        self.out_conv = nn.Conv2d(ch[0], 3, 3, padding=1)
        # keep the untrained decoder inside [0, 1] so the output clamp starts
        # with live gradients everywhere
        nn.init.normal_(self.out_conv.weight, std=1e-2)
        nn.init.constant_(self.out_conv.bias, 0.5)

    def encode_t(self, images: torch.Tensor):
        """(B, 3, H, W) -> (normalized intrinsic levels base/2..bottleneck, (B, dim) codes)."""
        if images.shape[-1] != self.config.base_resolution or images.shape[-2] != self.config.base_resolution:
            raise ValueError(
                f"expected {self.config.base_resolution}px inputs, got {tuple(images.shape[-2:])}"
            )
        x = self.stem(images)
        intrinsics = []
        for i, level in enumerate(self.encoder_levels):
            for block in level.blocks:
                x = block(x)
            if i >= 1:
                intrinsics.append(F.normalize(x, dim=1))
            if level.down is not None:
                x = level.down(x)
        code = self.extrinsic_head(x)
        return intrinsics, code

    def decode_t(self, intrinsics, code, alpha_override: float | None = None):
        """Rebuild an image from intrinsic levels and a code; output clamped to [0, 1]."""
        expected = self.config.n_levels - 1
        if len(intrinsics) != expected:
            raise ValueError(f"expected {expected} intrinsic levels, got {len(intrinsics)}")
        dec_ch = list(reversed(self.config.channels_per_level))
        for j, level in enumerate(intrinsics):
            want_c = self.config.channels_per_level[j + 1]
            want_res = self.config.base_resolution // (2 ** (j + 1))
            if level.shape[1] != want_c or level.shape[-1] != want_res or level.shape[-2] != want_res:
                raise ValueError(
                    f"intrinsic level {j} has shape {tuple(level.shape)}, "
                    f"expected ({want_c}, {want_res}, {want_res}) maps"
                )
        alpha = self.config.alpha if alpha_override is None else float(alpha_override)
        x = intrinsics[-1]
        for j, level in enumerate(self.decoder_levels):
            if level.up is not None:
                x = level.up(x)
            if level.fuse is not None:
                skip = intrinsics[len(intrinsics) - 1 - j]
                x = level.fuse(torch.cat([x, skip], dim=1))
            x = constrained_scale_t(x, code, alpha, level.inject)
            for block in level.blocks:
                x = block(x)
        out = self.out_conv(F.silu(self.out_norm(x)))
        return torch.clamp(out, 0.0, 1.0)


def init_model(config: ModelConfig) -> RelightModel:
    """Build a model with weights drawn deterministically from config.seed."""
    config.validate()
    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        model = RelightModel(config)
    model.eval()
    return model


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {image.shape}")
    arr = np.ascontiguousarray(image.astype(np.float32, copy=False))
    return torch.from_numpy(arr).permute(2, 0, 1)[None]


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    return t[0].permute(1, 2, 0).contiguous().numpy()


def encode(model: RelightModel, image: np.ndarray):
    """Encode one image into (IntrinsicFeatures, ExtrinsicCode)."""
    with torch.no_grad():
        levels, code = model.encode_t(image_to_tensor(image))
    feats = IntrinsicFeatures(
        levels=[lvl[0].permute(1, 2, 0).contiguous().numpy() for lvl in levels]
    )
    return feats, ExtrinsicCode(code=code[0].numpy())


def decode(
    model: RelightModel,
    intrinsics: IntrinsicFeatures,
    code,
    alpha_override: float | None = None,
) -> np.ndarray:
    """Decode intrinsics plus a code to an image; alpha_override=0 ignores the code."""
    level_tensors = [
        torch.from_numpy(np.ascontiguousarray(lvl)).permute(2, 0, 1)[None]
        for lvl in intrinsics.levels
    ]
    code_t = _as_code_tensor(code)
    if code_t.ndim == 1:
        code_t = code_t[None]
    with torch.no_grad():
        out = model.decode_t(level_tensors, code_t, alpha_override=alpha_override)
    return tensor_to_image(out)


def relight(model: RelightModel, input_image: np.ndarray, reference_image: np.ndarray) -> np.ndarray:
    """Render the input scene under the reference image's lighting."""
    res = model.config.base_resolution
    for name, img in (("input", input_image), ("reference", reference_image)):
        if img.shape[:2] != (res, res):
            raise ValueError(f"{name} image must be {res}x{res}, got {img.shape[:2]}")
    intrinsics, _ = encode(model, input_image)
    _, code = encode(model, reference_image)
    return decode(model, intrinsics, code)


def estimate_albedo(model: RelightModel, image: np.ndarray) -> np.ndarray:
    """Decode with the extrinsic pathway disabled; no reference image needed."""
    intrinsics, code = encode(model, image)
    return decode(model, intrinsics, code, alpha_override=0.0)


def interpolate_extrinsics(code_a, code_b, t: float) -> ExtrinsicCode:
    """Spherically blend two unit codes: normalize((1-t) a + t b).

    The endpoints return the input codes untouched so downstream decodes match
    plain relighting bit for bit.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must be in [0, 1], got {t}")
    a = code_a.code if isinstance(code_a, ExtrinsicCode) else np.asarray(code_a)
    b = code_b.code if isinstance(code_b, ExtrinsicCode) else np.asarray(code_b)
    if a.shape != b.shape:
        raise ValueError(f"code shape mismatch: {a.shape} vs {b.shape}")
    if t == 0.0:
        return ExtrinsicCode(code=a.copy())
    if t == 1.0:
        return ExtrinsicCode(code=b.copy())
    blend = (1.0 - t) * a.astype(np.float64) + t * b.astype(np.float64)
    norm = float(np.linalg.norm(blend))
    if norm < 1e-8:
        raise DegenerateInterpolationError(
            f"blend of the two codes at t={t} is (numerically) the zero vector"
        )
    return ExtrinsicCode(code=(blend / norm).astype(a.dtype))
