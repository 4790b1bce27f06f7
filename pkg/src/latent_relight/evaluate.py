"""Quantitative evaluation: relighting RMSE/SSIM under the fixed 12-reference
protocol with least-squares color correction, WHDR against pairwise lightness
judgments with threshold tuning, and scale-invariant albedo error for
synthetic ground truth.

Metrics are computed in float64. Reports serialize to JSON with stable field
names.
"""

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .data import JudgmentSet, SceneRecord, load_image, resize_image
from .losses import ssim
from .model import RelightModel, decode, encode

DEFAULT_DELTA_GRID = tuple(round(0.02 * i, 2) for i in range(1, 31))


def rmse(pred: np.ndarray, target: np.ndarray) -> float:
    """Root mean squared difference over all pixel-channels."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.astype(np.float64) - target.astype(np.float64)
    return float(np.sqrt(np.mean(diff * diff)))


def color_correct(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Scale each predicted color channel by its least-squares fit to the target.

    k_c = <pred_c, target_c> / <pred_c, pred_c>; an all-zero channel is
    returned unchanged. The result is unclamped.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    p = pred.astype(np.float64)
    t = target.astype(np.float64)
    out = p.copy()
    for c in range(p.shape[-1]):
        denom = float((p[..., c] * p[..., c]).sum())
        if denom == 0.0:
            continue
        out[..., c] *= float((p[..., c] * t[..., c]).sum()) / denom
    return out


@dataclass
class EvalPair:
    scene: str
    input_lighting: str
    ref_scene: str
    ref_lighting: str


@dataclass
class RelightRow:
    scene: str
    input_lighting: str
    ref_scene: str
    ref_lighting: str
    raw_rmse: float
    raw_ssim: float
    corrected_rmse: float
    corrected_ssim: float


@dataclass
class RelightReport:
    rows: list[RelightRow]
    n_skipped: int
    n_refs: int
    seed: int
    aggregates: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "rows": [asdict(r) for r in self.rows],
            "n_skipped": self.n_skipped,
            "n_refs": self.n_refs,
            "seed": self.seed,
            "aggregates": self.aggregates,
        }

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)


def relight_eval_pairs(scenes: list[SceneRecord], n_refs: int, seed: int) -> list[EvalPair]:
    """The fixed input/reference pairing: a pure function of (seed, scene list).

    Every image of every scene is an input; each gets n_refs references drawn
    from other scenes under other lighting ids, so competing models are scored
    on identical pairs.
    """
    ordered = sorted(scenes, key=lambda s: s.scene_id)
    if len(ordered) < 2:
        raise ValueError("need at least two scenes to draw cross-scene references")
    rng = np.random.default_rng(seed)
    pairs = []
    for scene in ordered:
        others = [s for s in ordered if s.scene_id != scene.scene_id]
        for lighting in scene.lighting_ids:
            for _ in range(n_refs):
                ref_scene = others[int(rng.integers(len(others)))]
                candidates = [l for l in ref_scene.lighting_ids if l != lighting]
                if not candidates:
                    candidates = ref_scene.lighting_ids
                ref_lighting = candidates[int(rng.integers(len(candidates)))]
                pairs.append(EvalPair(scene.scene_id, lighting, ref_scene.scene_id, ref_lighting))
    return pairs


def eval_relight(
    model: RelightModel | None,
    scenes: list[SceneRecord],
    n_refs: int = 12,
    seed: int = 0,
    relight_fn=None,
) -> RelightReport:
    """Score relighting over the fixed pair list.

    Each prediction is compared to the input scene's true image under the
    reference's lighting id; pairs whose target lighting id is missing from
    the input scene are skipped and counted. `relight_fn(input_image,
    reference_image, pair)` overrides the model (used by baseline oracles);
    with a model, inputs are resized to its base resolution and per-image
    encodings are cached.
    """
    if model is None and relight_fn is None:
        raise ValueError("need a model or a relight_fn")
    by_id = {s.scene_id: s for s in scenes}
    pairs = relight_eval_pairs(scenes, n_refs, seed)
    size = model.config.base_resolution if model is not None else None

    image_cache: dict[tuple[str, str], np.ndarray] = {}

    def fetch(scene_id: str, lighting: str) -> np.ndarray:
        key = (scene_id, lighting)
        if key not in image_cache:
            img = load_image(by_id[scene_id].images[lighting])
            if size is not None and img.shape[:2] != (size, size):
                img = resize_image(img, size)
            image_cache[key] = img
        return image_cache[key]

    if relight_fn is None:
        encode_cache: dict[tuple[str, str], tuple] = {}

        def encoded(scene_id: str, lighting: str):
            key = (scene_id, lighting)
            if key not in encode_cache:
                encode_cache[key] = encode(model, fetch(scene_id, lighting))
            return encode_cache[key]

        def relight_fn(input_image, reference_image, pair):
            intrinsics, _ = encoded(pair.scene, pair.input_lighting)
            _, code = encoded(pair.ref_scene, pair.ref_lighting)
            return decode(model, intrinsics, code)

    rows = []
    n_skipped = 0
    for pair in pairs:
        input_scene = by_id[pair.scene]
        if pair.ref_lighting not in input_scene.images:
            n_skipped += 1
            continue
        input_image = fetch(pair.scene, pair.input_lighting)
        reference = fetch(pair.ref_scene, pair.ref_lighting)
        target = fetch(pair.scene, pair.ref_lighting)
        pred = relight_fn(input_image, reference, pair)
        corrected = color_correct(pred, target)
        rows.append(
            RelightRow(
                scene=pair.scene,
                input_lighting=pair.input_lighting,
                ref_scene=pair.ref_scene,
                ref_lighting=pair.ref_lighting,
                raw_rmse=rmse(pred, target),
                raw_ssim=ssim(pred.astype(np.float64), target.astype(np.float64)),
                corrected_rmse=rmse(corrected, target),
                corrected_ssim=ssim(corrected, target.astype(np.float64)),
            )
        )
    aggregates = {}
    if rows:
        aggregates = {
            "mean_raw_rmse": float(np.mean([r.raw_rmse for r in rows])),
            "mean_raw_ssim": float(np.mean([r.raw_ssim for r in rows])),
            "mean_corrected_rmse": float(np.mean([r.corrected_rmse for r in rows])),
            "mean_corrected_ssim": float(np.mean([r.corrected_ssim for r in rows])),
        }
    return RelightReport(rows=rows, n_skipped=n_skipped, n_refs=n_refs, seed=seed, aggregates=aggregates)


@dataclass
class WhdrResult:
    whdr: float
    delta: float
    n_comparisons: int
    total_weight: float

    def to_dict(self) -> dict:
        return asdict(self)


def lightness_from_image(image: np.ndarray) -> np.ndarray:
    """Per-pixel lightness: mean of the color channels."""
    return image.astype(np.float64).mean(axis=-1)


def classify_lightness(l1: float, l2: float, delta: float) -> str:
    """Three-way ratio classification: '1' first lighter, '2' second lighter, 'E' equal.

    A zero denominator counts as an infinite ratio (the nonzero side is
    lighter); two zeros are equal.
    """
    if l1 == 0.0 and l2 == 0.0:
        return "E"
    if l2 == 0.0:
        return "1"
    if l1 == 0.0:
        return "2"
    if l1 / l2 > 1.0 + delta:
        return "1"
    if l2 / l1 > 1.0 + delta:
        return "2"
    return "E"


def _point_pixel(x: float, y: float, height: int, width: int) -> tuple[int, int]:
    col = int(round(x * (width - 1)))
    row = int(round(y * (height - 1)))
    if not (0 <= row < height and 0 <= col < width):
        raise ValueError(f"judgment point ({x}, {y}) maps outside the image")
    return row, col


def whdr(lightness_map: np.ndarray, judgments: JudgmentSet, delta: float = 0.1) -> WhdrResult:
    """Weighted fraction of judgments the lightness map contradicts."""
    if delta < 0:
        raise ValueError(f"delta must be >= 0, got {delta}")
    if lightness_map.ndim != 2:
        raise ValueError("lightness_map must be 2D (use lightness_from_image first)")
    height, width = lightness_map.shape
    points = judgments.point_map()
    error_sum = 0.0
    weight_sum = 0.0
    for comp in judgments.comparisons:
        p1, p2 = points[comp.point1], points[comp.point2]
        r1 = float(lightness_map[_point_pixel(p1.x, p1.y, height, width)])
        r2 = float(lightness_map[_point_pixel(p2.x, p2.y, height, width)])
        if classify_lightness(r1, r2, delta) != comp.label:
            error_sum += comp.weight
        weight_sum += comp.weight
    value = error_sum / weight_sum if weight_sum > 0 else 0.0
    return WhdrResult(
        whdr=value,
        delta=delta,
        n_comparisons=len(judgments.comparisons),
        total_weight=weight_sum,
    )


def tune_delta(albedo_maps, judgment_sets, grid=DEFAULT_DELTA_GRID) -> float:
    """Grid value minimizing pooled weighted disagreement; ties go to the smaller delta."""
    if not albedo_maps or not judgment_sets or len(albedo_maps) != len(judgment_sets):
        raise ValueError("need equally many albedo maps and judgment sets")
    grid = sorted(grid)
    if not grid:
        raise ValueError("empty delta grid")
    lightness_maps = [
        m if m.ndim == 2 else lightness_from_image(m) for m in albedo_maps
    ]
    best_delta, best_err = None, None
    for delta in grid:
        pooled = 0.0
        for lmap, judgments in zip(lightness_maps, judgment_sets):
            result = whdr(lmap, judgments, delta)
            pooled += result.whdr * result.total_weight
        if best_err is None or pooled < best_err:
            best_delta, best_err = delta, pooled
    return float(best_delta)


def synthetic_albedo_error(pred: np.ndarray, gt: np.ndarray) -> float:
    """Scale-invariant relative error: min over k >= 0 of ||k pred - gt|| / ||gt||."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    p = pred.astype(np.float64).ravel()
    g = gt.astype(np.float64).ravel()
    g_norm = float(np.linalg.norm(g))
    if g_norm == 0.0:
        raise ValueError("ground truth albedo is all zero")
    pp = float(p @ p)
    k = max(float(p @ g) / pp, 0.0) if pp > 0.0 else 0.0
    return float(np.linalg.norm(k * p - g) / g_norm)
