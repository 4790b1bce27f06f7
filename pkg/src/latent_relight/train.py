"""Optimization loop: AdamW with noise warm-up, JSONL metrics, versioned checkpoints, bitwise resume.

Checkpoint container layout: an 8-byte magic, a little-endian uint64 header
length, a JSON header (format version, configs, step, per-param optimizer step
counters, RNG state, and an array table with name/dtype/shape/offset/crc32),
then the raw little-endian float32 array payloads in table order.
"""

import json
import math
import time
import zlib
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .data import NoiseSchedule, PairSample, apply_noise, paired_crop_resize, sample_training_pair
from .losses import LossWeights, UniformityTarget, total_loss
from .model import ModelConfig, RelightModel, image_to_tensor, init_model

CHECKPOINT_MAGIC = b"LATENTRL"
CHECKPOINT_VERSION = 1
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite; carries the offending breakdown."""

    def __init__(self, breakdown: dict):
        super().__init__(f"non-finite training loss; breakdown: {breakdown}")
        self.breakdown = breakdown


class IncompatibleCheckpointError(ValueError):
    """Checkpoint version or configuration does not match."""


class CorruptCheckpointError(ValueError):
    """Checkpoint fails magic, length, or checksum validation."""


@dataclass
class TrainConfig:
    batch_size: int = 256
    epochs: int = 1000
    learning_rate: float = 2e-4
    weight_decay: float = 1e-2
    noise: NoiseSchedule = field(default_factory=NoiseSchedule)
    seed: int = 0
    eval_every: int = 200
    out_dir: str = "runs/default"
    crop_ratio_min: float = 0.2
    crop_ratio_max: float = 1.0
    loss: LossWeights = field(default_factory=LossWeights)

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        self.noise.validate()
        self.loss.validate()
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["noise"] = NoiseSchedule(**d["noise"])
        d["loss"] = LossWeights(**d["loss"])
        return cls(**d).validate()


@dataclass
class Checkpoint:
    format_version: int
    model_config: ModelConfig
    train_config: TrainConfig
    step: int
    weights: dict[str, np.ndarray]
    optimizer_state: dict[str, np.ndarray]
    optimizer_steps: dict[str, int]
    rng_state: dict


def make_optimizer(model: RelightModel, config: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(),
        lr=config.learning_rate,
        weight_decay=config.weight_decay,
        betas=ADAM_BETAS,
        eps=ADAM_EPS,
    )


def train_step(
    model: RelightModel,
    optimizer: torch.optim.Optimizer,
    batch: list[PairSample],
    loss_weights: LossWeights,
    noise_schedule: NoiseSchedule,
    epoch_fraction: float,
    rng: np.random.Generator,
    targets: UniformityTarget,
) -> dict:
    """One optimization step over a batch of cropped pairs; returns the loss breakdown."""
    if not 0.0 <= epoch_fraction <= 1.0:
        raise ValueError(f"epoch_fraction must be in [0, 1], got {epoch_fraction}")
    noisy_a, noisy_b, clean_b = [], [], []
    for pair in batch:
        noisy_a.append(apply_noise(pair.image_a, noise_schedule, epoch_fraction, rng))
        noisy_b.append(apply_noise(pair.image_b, noise_schedule, epoch_fraction, rng))
        clean_b.append(pair.image_b)
    inputs_a = torch.cat([image_to_tensor(img) for img in noisy_a])
    inputs_b = torch.cat([image_to_tensor(img) for img in noisy_b])
    target_b = torch.cat([image_to_tensor(img) for img in clean_b])

    intrinsics_a, _ = model.encode_t(inputs_a)
    intrinsics_b, codes_b = model.encode_t(inputs_b)
    relit = model.decode_t(intrinsics_a, codes_b)
    recon = model.decode_t(intrinsics_b, codes_b)

    total, breakdown = total_loss(
        {
            "relit": relit,
            "recon": recon,
            "target": target_b,
            "intrinsics_a": intrinsics_a,
            "intrinsics_b": intrinsics_b,
            "codes": codes_b,
        },
        loss_weights,
        targets,
    )
    breakdown["noise_active"] = bool(
        noise_schedule.enabled and epoch_fraction < noise_schedule.warmup_fraction
    )
    if not math.isfinite(breakdown["total"]):
        raise TrainingDiverged(breakdown)

    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return breakdown


def snapshot(
    model: RelightModel,
    optimizer: torch.optim.Optimizer,
    model_config: ModelConfig,
    train_config: TrainConfig,
    step: int,
    rng: np.random.Generator,
) -> Checkpoint:
    """Freeze the current training state into a Checkpoint."""
    weights = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
    name_of = {p: n for n, p in model.named_parameters()}
    optim_arrays: dict[str, np.ndarray] = {}
    optim_steps: dict[str, int] = {}
    for param, state in optimizer.state.items():
        name = name_of[param]
        optim_arrays[f"{name}.exp_avg"] = state["exp_avg"].detach().cpu().numpy().copy()
        optim_arrays[f"{name}.exp_avg_sq"] = state["exp_avg_sq"].detach().cpu().numpy().copy()
        optim_steps[name] = int(state["step"].item() if torch.is_tensor(state["step"]) else state["step"])
    return Checkpoint(
        format_version=CHECKPOINT_VERSION,
        model_config=model_config,
        train_config=train_config,
        step=step,
        weights=weights,
        optimizer_state=optim_arrays,
        optimizer_steps=optim_steps,
        rng_state=rng.bit_generator.state,
    )


def restore(checkpoint: Checkpoint, model: RelightModel, optimizer: torch.optim.Optimizer) -> np.random.Generator:
    """Load a checkpoint into live model/optimizer objects; returns the restored data RNG."""
    state = {k: torch.from_numpy(v.copy()) for k, v in checkpoint.weights.items()}
    model.load_state_dict(state)
    if checkpoint.optimizer_steps:
        names = [n for n, _ in model.named_parameters()]
        opt_state = {}
        for idx, name in enumerate(names):
            if name not in checkpoint.optimizer_steps:
                continue
            opt_state[idx] = {
                "step": torch.tensor(float(checkpoint.optimizer_steps[name])),
                "exp_avg": torch.from_numpy(checkpoint.optimizer_state[f"{name}.exp_avg"].copy()),
                "exp_avg_sq": torch.from_numpy(checkpoint.optimizer_state[f"{name}.exp_avg_sq"].copy()),
            }
        optimizer.load_state_dict(
            {"state": opt_state, "param_groups": optimizer.state_dict()["param_groups"]}
        )
    rng = np.random.default_rng()
    rng.bit_generator.state = checkpoint.rng_state
    return rng


def save_checkpoint(path, checkpoint: Checkpoint) -> None:
    """Write the versioned container; arrays round-trip bit-exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = []
    payload = bytearray()
    for kind, arrays in (("weight", checkpoint.weights), ("optim", checkpoint.optimizer_state)):
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name])
            if arr.dtype != np.float32:
                raise ValueError(f"checkpoint array {name} must be float32, got {arr.dtype}")
            raw = arr.astype("<f4", copy=False).tobytes()
            table.append(
                {
                    "name": name,
                    "kind": kind,
                    "dtype": "<f4",
                    "shape": list(arr.shape),
                    "offset": len(payload),
                    "nbytes": len(raw),
                    "crc32": zlib.crc32(raw),
                }
            )
            payload.extend(raw)
    header = {
        "format_version": checkpoint.format_version,
        "model_config": checkpoint.model_config.to_dict(),
        "train_config": checkpoint.train_config.to_dict(),
        "step": checkpoint.step,
        "optimizer_steps": checkpoint.optimizer_steps,
        "rng_state": checkpoint.rng_state,
        "arrays": table,
        "payload_nbytes": len(payload),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(len(blob).to_bytes(8, "little"))
        f.write(blob)
        f.write(payload)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError(f"{path} is not a checkpoint (bad magic)")
    cursor = len(CHECKPOINT_MAGIC)
    header_len = int.from_bytes(raw[cursor : cursor + 8], "little")
    cursor += 8
    try:
        header = json.loads(raw[cursor : cursor + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header: {exc}") from exc
    cursor += header_len
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise IncompatibleCheckpointError(
            f"{path}: format version {header.get('format_version')} != {CHECKPOINT_VERSION}"
        )
    payload = raw[cursor:]
    if len(payload) != header["payload_nbytes"]:
        raise CorruptCheckpointError(
            f"{path}: payload truncated ({len(payload)} of {header['payload_nbytes']} bytes)"
        )
    weights: dict[str, np.ndarray] = {}
    optim: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        chunk = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(chunk) != entry["nbytes"]:
            raise CorruptCheckpointError(f"{path}: array {entry['name']} truncated")
        if zlib.crc32(chunk) != entry["crc32"]:
            raise CorruptCheckpointError(f"{path}: array {entry['name']} fails checksum")
        arr = np.frombuffer(chunk, dtype=entry["dtype"]).reshape(entry["shape"]).astype(np.float32)
        (weights if entry["kind"] == "weight" else optim)[entry["name"]] = arr
    rng_state = header["rng_state"]
    return Checkpoint(
        format_version=header["format_version"],
        model_config=ModelConfig.from_dict(header["model_config"]),
        train_config=TrainConfig.from_dict(header["train_config"]),
        step=int(header["step"]),
        weights=weights,
        optimizer_state=optim,
        optimizer_steps={k: int(v) for k, v in header["optimizer_steps"].items()},
        rng_state=rng_state,
    )


def _check_resume_compat(checkpoint: Checkpoint, model_config: ModelConfig, train_config: TrainConfig):
    if checkpoint.model_config.to_dict() != model_config.to_dict():
        raise IncompatibleCheckpointError("checkpoint model config differs from requested config")
    ours = train_config.to_dict()
    theirs = checkpoint.train_config.to_dict()
    ours.pop("out_dir")
    theirs.pop("out_dir")
    if ours != theirs:
        raise IncompatibleCheckpointError("checkpoint train config differs from requested config")


def steps_per_epoch(scenes, batch_size: int) -> int:
    total_images = sum(len(s.images) for s in scenes)
    return max(1, math.ceil(total_images / batch_size))


def fit(
    model_config: ModelConfig,
    train_config: TrainConfig,
    scenes,
    resume_from=None,
) -> Checkpoint:
    """Run the full training loop and return (and write) the final checkpoint.

    Pairs are sampled on the fly; an epoch is ceil(total images / batch size)
    steps. Resuming from a mid-run checkpoint reproduces the uninterrupted run
    bit for bit on one platform: all data-side randomness flows from a single
    numpy generator whose state is checkpointed.
    """
    model_config.validate()
    train_config.validate()
    if not scenes:
        raise ValueError("no training scenes")
    out_dir = Path(train_config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    model = init_model(model_config)
    optimizer = make_optimizer(model, train_config)
    targets = UniformityTarget(seed=train_config.seed, lam=train_config.loss.lambda_distortion)
    start_step = 0
    if resume_from is not None:
        checkpoint = resume_from if isinstance(resume_from, Checkpoint) else load_checkpoint(resume_from)
        _check_resume_compat(checkpoint, model_config, train_config)
        rng = restore(checkpoint, model, optimizer)
        start_step = checkpoint.step
    else:
        rng = np.random.default_rng(train_config.seed)

    per_epoch = steps_per_epoch(scenes, train_config.batch_size)
    total_steps = per_epoch * train_config.epochs
    t0 = time.monotonic()

    metrics_path = out_dir / "metrics.jsonl"
    mode = "a" if resume_from is not None else "w"
    with open(metrics_path, mode) as metrics:
        for step in range(start_step, total_steps):
            epoch_fraction = step / total_steps
            batch = []
            for _ in range(train_config.batch_size):
                pair = sample_training_pair(scenes, rng)
                batch.append(
                    paired_crop_resize(
                        pair,
                        train_config.crop_ratio_min,
                        train_config.crop_ratio_max,
                        model_config.base_resolution,
                        rng,
                    )
                )
            breakdown = train_step(
                model,
                optimizer,
                batch,
                train_config.loss,
                train_config.noise,
                epoch_fraction,
                rng,
                targets,
            )
            row = {"step": step, **breakdown, "wall_time": time.monotonic() - t0}
            metrics.write(json.dumps(row) + "\n")
            if train_config.eval_every and (step + 1) % train_config.eval_every == 0:
                save_checkpoint(
                    out_dir / "checkpoint_latest.lrck",
                    snapshot(model, optimizer, model_config, train_config, step + 1, rng),
                )
    final = snapshot(model, optimizer, model_config, train_config, total_steps, rng)
    save_checkpoint(out_dir / "checkpoint_final.lrck", final)
    return final


def model_from_checkpoint(checkpoint: Checkpoint) -> RelightModel:
    """Instantiate a model and load the checkpoint's weights into it."""
    model = init_model(checkpoint.model_config)
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in checkpoint.weights.items()})
    model.eval()
    return model
