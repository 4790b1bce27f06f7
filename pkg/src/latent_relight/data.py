"""Scene ingestion, paired augmentation, noise warm-up, and a synthetic ground-truthed dataset.

Images are float32 numpy arrays of shape (H, W, 3) with values in [0, 1]; only
noise-corrupted encoder inputs may leave that range. Dataset layout on disk is
`<root>/<scene_id>/<lighting_id>.png` plus an optional `<root>/<scene_id>/albedo.png`
holding ground-truth albedo (synthetic scenes only).
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

ALBEDO_FILENAME = "albedo.png"


def load_image(path) -> np.ndarray:
    """Decode an 8-bit PNG to a float32 (H, W, 3) array in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except Exception as exc:
        raise IOError(f"cannot read image {path}: {exc}") from exc
    return arr / 255.0


def save_image(path, image: np.ndarray) -> None:
    """Write a [0, 1] float image as an 8-bit PNG."""
    path = Path(path)
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    try:
        Image.fromarray(data, mode="RGB").save(path)
    except Exception as exc:
        raise IOError(f"cannot write image {path}: {exc}") from exc


def require_image(image: np.ndarray, allow_out_of_range: bool = False) -> np.ndarray:
    """Validate the (H, W, 3) finite-float image contract."""
    if not isinstance(image, np.ndarray) or image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) array, got {getattr(image, 'shape', type(image))}")
    if not np.isfinite(image).all():
        raise ValueError("image contains non-finite values")
    if not allow_out_of_range and (image.min() < 0.0 or image.max() > 1.0):
        raise ValueError("image values outside [0, 1]")
    return image


def resize_image(image: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize to size x size."""
    out = cv2.resize(image.astype(np.float32), (size, size), interpolation=cv2.INTER_LINEAR)
    return np.ascontiguousarray(out)


@dataclass
class SceneRecord:
    """One scene directory: lighting id -> image path, plus optional GT albedo."""

    scene_id: str
    images: dict[str, Path]
    gt_albedo: Path | None = None

    @property
    def lighting_ids(self) -> list[str]:
        return sorted(self.images)


@dataclass
class PairSample:
    """Two images of the same scene under different lightings, pixel-aligned."""

    image_a: np.ndarray
    image_b: np.ndarray
    scene_id: str
    lighting_a: str
    lighting_b: str

    def validate(self) -> "PairSample":
        if self.image_a.shape != self.image_b.shape:
            raise ValueError("pair images must share dimensions")
        if self.lighting_a == self.lighting_b:
            raise ValueError("pair must use two distinct lightings")
        return self


@dataclass
class NoiseSchedule:
    """Gaussian-noise warm-up: log-normal sigma, active for an initial fraction of training."""

    warmup_fraction: float = 0.4
    log_mean: float = -1.2
    log_std: float = 1.2
    enabled: bool = True

    def validate(self) -> "NoiseSchedule":
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ValueError(f"warmup_fraction must be in [0, 1], got {self.warmup_fraction}")
        if self.log_std <= 0:
            raise ValueError(f"log_std must be > 0, got {self.log_std}")
        return self


@dataclass
class SyntheticSceneSpec:
    """Parameters of the Lambertian desk-scale dataset generator."""

    n_scenes: int = 32
    n_lights: int = 8
    image_size: int = 64
    n_albedo_regions: int = 6
    ambient: float = 0.25
    seed: int = 0

    def validate(self) -> "SyntheticSceneSpec":
        if self.n_lights < 2:
            raise ValueError(f"n_lights must be >= 2, got {self.n_lights}")
        if self.image_size < 16:
            raise ValueError(f"image_size must be >= 16, got {self.image_size}")
        if self.n_scenes < 1:
            raise ValueError("n_scenes must be >= 1")
        if not 0.0 <= self.ambient <= 1.0:
            raise ValueError(f"ambient must be in [0, 1], got {self.ambient}")
        return self


@dataclass
class JudgmentPoint:
    point_id: int
    x: float
    y: float


@dataclass
class JudgmentComparison:
    point1: int
    point2: int
    label: str  # "1", "2", or "E"
    weight: float


@dataclass
class JudgmentSet:
    """Pairwise relative-lightness judgments with confidence weights."""

    points: list[JudgmentPoint] = field(default_factory=list)
    comparisons: list[JudgmentComparison] = field(default_factory=list)

    def point_map(self) -> dict[int, JudgmentPoint]:
        return {p.point_id: p for p in self.points}

    def validate(self) -> "JudgmentSet":
        ids = set()
        for p in self.points:
            if p.point_id in ids:
                raise ValueError(f"duplicate point id {p.point_id}")
            ids.add(p.point_id)
            if not (0.0 <= p.x <= 1.0 and 0.0 <= p.y <= 1.0):
                raise ValueError(f"point {p.point_id} coordinates outside [0, 1]")
        for i, c in enumerate(self.comparisons):
            if c.point1 not in ids or c.point2 not in ids:
                raise ValueError(f"comparison {i} references unknown point id")
            if c.label not in ("1", "2", "E"):
                raise ValueError(f"comparison {i} has invalid label {c.label!r}")
            if c.weight < 0:
                raise ValueError(f"comparison {i} has negative weight {c.weight}")
        return self


def load_multi_illum(root_path) -> list[SceneRecord]:
    """Scan a multi-illumination dataset directory into SceneRecords.

    Scene directories with fewer than two lighting images are skipped with a
    warning. Lighting ids are the PNG stems, sorted lexicographically.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    records = []
    for scene_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        images = {}
        gt_albedo = None
        for png in sorted(scene_dir.glob("*.png")):
            if png.name == ALBEDO_FILENAME:
                gt_albedo = png
            else:
                images[png.stem] = png
        if len(images) < 2:
            log.warning("skipping scene %s: fewer than 2 lightings", scene_dir.name)
            continue
        dims = set()
        for path in [*images.values()] + ([gt_albedo] if gt_albedo else []):
            try:
                with Image.open(path) as im:
                    dims.add(im.size)
            except Exception as exc:
                raise IOError(f"cannot read image {path}: {exc}") from exc
        if len(dims) > 1:
            raise ValueError(f"scene {scene_dir.name} mixes image dimensions: {sorted(dims)}")
        records.append(SceneRecord(scene_id=scene_dir.name, images=images, gt_albedo=gt_albedo))
    return records


def sample_training_pair(scenes: list[SceneRecord], rng: np.random.Generator) -> PairSample:
    """Uniformly pick a scene, then two distinct lightings of it."""
    eligible = [s for s in scenes if len(s.images) >= 2]
    if not eligible:
        raise ValueError("no scene offers two or more lightings")
    scene = eligible[int(rng.integers(len(eligible)))]
    ids = scene.lighting_ids
    first, second = rng.choice(len(ids), size=2, replace=False)
    lighting_a, lighting_b = ids[int(first)], ids[int(second)]
    return PairSample(
        image_a=load_image(scene.images[lighting_a]),
        image_b=load_image(scene.images[lighting_b]),
        scene_id=scene.scene_id,
        lighting_a=lighting_a,
        lighting_b=lighting_b,
    ).validate()


def paired_crop_resize(
    pair: PairSample,
    ratio_min: float,
    ratio_max: float,
    out_size: int,
    rng: np.random.Generator,
) -> PairSample:
    """Apply one shared square crop to both images of a pair, then resize.

    The crop side is ratio * min(H, W) with the ratio uniform in
    [ratio_min, ratio_max] and the position uniform; sharing the window keeps
    the pair pixel-aligned for the intrinsic-consistency loss.
    """
    if not (0.0 < ratio_min <= ratio_max <= 1.0):
        raise ValueError(f"ratio bounds must satisfy 0 < min <= max <= 1, got [{ratio_min}, {ratio_max}]")
    if out_size < 8:
        raise ValueError(f"out_size must be >= 8, got {out_size}")
    h, w = pair.image_a.shape[:2]
    ratio = float(rng.uniform(ratio_min, ratio_max))
    side = int(round(ratio * min(h, w)))
    if side < 1:
        raise ValueError(f"crop side {side} smaller than one pixel")
    x0 = int(rng.integers(0, w - side + 1))
    y0 = int(rng.integers(0, h - side + 1))
    crop_a = pair.image_a[y0 : y0 + side, x0 : x0 + side]
    crop_b = pair.image_b[y0 : y0 + side, x0 : x0 + side]
    return PairSample(
        image_a=resize_image(crop_a, out_size),
        image_b=resize_image(crop_b, out_size),
        scene_id=pair.scene_id,
        lighting_a=pair.lighting_a,
        lighting_b=pair.lighting_b,
    )


def sample_noise_sigma(schedule: NoiseSchedule, rng: np.random.Generator) -> float:
    """Draw one log-normal noise level: ln(sigma) ~ N(log_mean, log_std^2)."""
    return float(np.exp(rng.normal(schedule.log_mean, schedule.log_std)))


def apply_noise(
    image: np.ndarray,
    schedule: NoiseSchedule,
    epoch_fraction: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Add warm-up Gaussian noise to an encoder input; identity after warm-up.

    The returned buffer may leave [0, 1]; losses always target clean images.
    """
    if not 0.0 <= epoch_fraction <= 1.0:
        raise ValueError(f"epoch_fraction must be in [0, 1], got {epoch_fraction}")
    if not schedule.enabled or epoch_fraction >= schedule.warmup_fraction:
        return image
    sigma = sample_noise_sigma(schedule, rng)
    noise = rng.standard_normal(image.shape)
    return (image + sigma * noise).astype(np.float32)


def _region_mask(size: int, rng: np.random.Generator) -> np.ndarray:
    """Random axis-aligned rectangle or ellipse mask."""
    yy, xx = np.mgrid[0:size, 0:size]
    cx, cy = rng.uniform(0, size, size=2)
    rx, ry = rng.uniform(size * 0.08, size * 0.4, size=2)
    if rng.random() < 0.5:
        return (np.abs(xx - cx) <= rx) & (np.abs(yy - cy) <= ry)
    return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0


def _random_albedo(size: int, n_regions: int, rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(0.15, 0.95, size=3)
    albedo = np.broadcast_to(base, (size, size, 3)).astype(np.float64).copy()
    for _ in range(n_regions):
        mask = _region_mask(size, rng)
        albedo[mask] = rng.uniform(0.05, 1.0, size=3)
    return albedo


def _random_normals(size: int, rng: np.random.Generator) -> np.ndarray:
    """Unit normal map from a smoothed random heightfield."""
    from scipy.ndimage import gaussian_filter

    height = gaussian_filter(rng.standard_normal((size, size)), sigma=size / 10.0)
    height *= size / (5.0 * max(np.abs(height).max(), 1e-9))
    gy, gx = np.gradient(height)
    normals = np.stack([-gx, -gy, np.ones_like(height)], axis=-1)
    normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
    return normals


def generate_synthetic_dataset(spec: SyntheticSceneSpec, out_path) -> list[SceneRecord]:
    """Render a Lambertian multi-illumination dataset with ground-truth albedo.

    Light directions and colors are drawn once per lighting slot and shared by
    every scene, so lighting ids name the same physical light across scenes
    (the property the 12-reference relighting protocol relies on). Per scene:
    a piecewise-constant random albedo, a normal map from a smoothed random
    heightfield, and one image per light rendered as
    clip(albedo * (ambient + (1 - ambient) * max(0, n . d_k) * c_k), 0, 1).
    """
    spec.validate()
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    directions = rng.standard_normal((spec.n_lights, 3))
    directions[:, 2] = np.abs(directions[:, 2]) + 0.15
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    colors = rng.uniform(0.25, 1.0, size=(spec.n_lights, 3))

    for s in range(spec.n_scenes):
        scene_dir = out / f"scene{s:03d}"
        scene_dir.mkdir(exist_ok=True)
        albedo = _random_albedo(spec.image_size, spec.n_albedo_regions, rng)
        normals = _random_normals(spec.image_size, rng)
        save_image(scene_dir / ALBEDO_FILENAME, albedo)
        for k in range(spec.n_lights):
            shade = np.maximum(normals @ directions[k], 0.0)[..., None]
            lit = albedo * (spec.ambient + (1.0 - spec.ambient) * shade * colors[k])
            save_image(scene_dir / f"light{k:02d}.png", np.clip(lit, 0.0, 1.0))
    return load_multi_illum(out)


def load_iiw_judgments(path) -> JudgmentSet:
    """Parse an IIW-schema judgment file (intrinsic_points / intrinsic_comparisons)."""
    path = Path(path)
    with open(path) as f:
        doc = json.load(f)
    points = [
        JudgmentPoint(point_id=int(p["id"]), x=float(p["x"]), y=float(p["y"]))
        for p in doc.get("intrinsic_points", [])
    ]
    ids = {p.point_id for p in points}
    comparisons = []
    for i, c in enumerate(doc.get("intrinsic_comparisons", [])):
        p1, p2 = int(c["point1"]), int(c["point2"])
        if p1 not in ids or p2 not in ids:
            raise ValueError(f"comparison {i} in {path.name} references unknown point id")
        weight = float(c["darker_score"])
        if weight < 0:
            raise ValueError(f"comparison {i} in {path.name} has negative weight {weight}")
        label = str(c["darker"])
        if label not in ("1", "2", "E"):
            raise ValueError(f"comparison {i} in {path.name} has invalid label {label!r}")
        comparisons.append(JudgmentComparison(point1=p1, point2=p2, label=label, weight=weight))
    return JudgmentSet(points=points, comparisons=comparisons).validate()
