"""Command-line entry point.

Subcommands: synth-data, train, relight, albedo, interpolate, eval-relight,
eval-whdr, inspect-checkpoint. Every run writes a RunManifest JSON (resolved
config, inputs, outputs, seed, tool version) before doing work, so a run can
be reproduced from its manifest. Exit codes: 0 success, 1 usage error, 2
runtime error.

Config files are TOML with [model], [train], [loss], [noise] tables; command
line flags win over file values. The LATENT_RELIGHT_SEED environment variable
supplies the default seed.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import __version__
from .data import (
    NoiseSchedule,
    SyntheticSceneSpec,
    generate_synthetic_dataset,
    load_iiw_judgments,
    load_image,
    load_multi_illum,
    resize_image,
    save_image,
)
from .evaluate import (
    WhdrResult,
    eval_relight,
    lightness_from_image,
    tune_delta,
    whdr,
)
from .losses import LossWeights
from .model import (
    ModelConfig,
    decode,
    encode,
    estimate_albedo,
    interpolate_extrinsics,
    relight,
)
from .train import TrainConfig, fit, load_checkpoint, model_from_checkpoint

log = logging.getLogger("latent_relight")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

GRID_SEPARATOR = 2
GRID_LABEL_BAND = 14


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: list[str]
    outputs: list[str]
    seed: int | None
    tool_version: str

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)


def _manifest_path(primary_output: Path) -> Path:
    if primary_output.suffix:
        return primary_output.with_name(primary_output.name + ".manifest.json")
    return primary_output / "manifest.json"


def _default_seed(flag_value, file_value=None) -> int:
    if flag_value is not None:
        return int(flag_value)
    if file_value is not None:
        return int(file_value)
    return int(os.environ.get("LATENT_RELIGHT_SEED", "0"))


def _load_toml(path) -> dict:
    if path is None:
        return {}
    with open(path, "rb") as f:
        return tomllib.load(f)


def _load_model_input(path, resolution: int) -> np.ndarray:
    img = load_image(path)
    if img.shape[:2] != (resolution, resolution):
        log.info("resizing %s from %s to %dpx", path, img.shape[:2], resolution)
        img = resize_image(img, resolution)
    return img


def render_grid(images, labels, out_path, ncols: int | None = None) -> None:
    """Tile images row-major into one labeled PNG with 2-pixel separators."""
    from PIL import Image, ImageDraw, ImageFont

    if not images:
        raise ValueError("render_grid needs at least one image")
    shape = images[0].shape
    for img in images:
        if img.shape != shape:
            raise ValueError("grid images must share dimensions")
    if labels is None:
        labels = [""] * len(images)
    if len(labels) != len(images):
        raise ValueError("one label per image required")
    n = len(images)
    ncols = n if ncols is None else max(1, min(ncols, n))
    nrows = (n + ncols - 1) // ncols
    h, w = shape[:2]
    cell_h = GRID_LABEL_BAND + h
    width = ncols * w + (ncols - 1) * GRID_SEPARATOR
    height = nrows * cell_h + (nrows - 1) * GRID_SEPARATOR
    canvas = Image.new("RGB", (width, height), (0, 0, 0))
    draw = ImageDraw.Draw(canvas)
    font = ImageFont.load_default()
    for idx, (img, label) in enumerate(zip(images, labels)):
        row, col = divmod(idx, ncols)
        x0 = col * (w + GRID_SEPARATOR)
        y0 = row * (cell_h + GRID_SEPARATOR)
        if label:
            draw.text((x0 + 2, y0 + 1), str(label), fill=(255, 255, 255), font=font)
        tile = Image.fromarray(
            np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8), mode="RGB"
        )
        canvas.paste(tile, (x0, y0 + GRID_LABEL_BAND))
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    canvas.save(out_path)


def _build_parser() -> _Parser:
    parser = _Parser(prog="latent-relight", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic multi-illumination dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=32)
    p.add_argument("--lights", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--regions", type=int, default=6)
    p.add_argument("--ambient", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("train", help="train a relighting model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="TOML config file")
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--base-resolution", type=int, default=None)
    p.add_argument("--eval-every", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")

    p = sub.add_parser("relight", help="relight an input image with a reference's lighting")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("albedo", help="estimate albedo (extrinsic pathway disabled)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("interpolate", help="sweep lighting between two references")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--ref-a", required=True)
    p.add_argument("--ref-b", required=True)
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval-relight", help="12-reference relighting evaluation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n-refs", type=int, default=12)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval-whdr", help="WHDR over albedo estimates")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", required=True, help="directory of input PNGs")
    p.add_argument("--judgments", required=True, help="directory of matching IIW JSON files")
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--tune", action="store_true", help="tune delta on this split first")
    p.add_argument("--out", required=True)

    p = sub.add_parser("inspect-checkpoint", help="describe and verify a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", default=None, help="optional JSON report path")
    return parser


def _cmd_synth_data(args) -> int:
    seed = _default_seed(args.seed)
    spec = SyntheticSceneSpec(
        n_scenes=args.scenes,
        n_lights=args.lights,
        image_size=args.size,
        n_albedo_regions=args.regions,
        ambient=args.ambient,
        seed=seed,
    ).validate()
    out = Path(args.out)
    RunManifest(
        command="synth-data",
        config=asdict(spec),
        inputs=[],
        outputs=[str(out)],
        seed=seed,
        tool_version=__version__,
    ).save(_manifest_path(out))
    records = generate_synthetic_dataset(spec, out)
    print(f"wrote {len(records)} scenes x {spec.n_lights} lightings to {out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    doc = _load_toml(args.config)
    model_kw = dict(doc.get("model", {}))
    train_kw = dict(doc.get("train", {}))
    if "loss" in doc:
        train_kw["loss"] = LossWeights(**doc["loss"])
    if "noise" in doc:
        train_kw["noise"] = NoiseSchedule(**doc["noise"])
    seed = _default_seed(args.seed, train_kw.pop("seed", None))
    if args.base_resolution is not None:
        model_kw["base_resolution"] = args.base_resolution
    for flag, key in (
        (args.batch_size, "batch_size"),
        (args.epochs, "epochs"),
        (args.lr, "learning_rate"),
        (args.weight_decay, "weight_decay"),
        (args.eval_every, "eval_every"),
    ):
        if flag is not None:
            train_kw[key] = flag
    model_config = ModelConfig(**{"seed": seed, **model_kw}).validate()
    train_config = TrainConfig(**{"seed": seed, **train_kw, "out_dir": str(args.out)}).validate()

    out = Path(args.out)
    RunManifest(
        command="train",
        config={"model": model_config.to_dict(), "train": train_config.to_dict()},
        inputs=[str(args.data)] + ([str(args.resume)] if args.resume else []),
        outputs=[str(out / "checkpoint_final.lrck"), str(out / "metrics.jsonl")],
        seed=seed,
        tool_version=__version__,
    ).save(_manifest_path(out))

    scenes = load_multi_illum(args.data)
    final = fit(model_config, train_config, scenes, resume_from=args.resume)
    print(f"trained {final.step} steps; checkpoint at {out / 'checkpoint_final.lrck'}")
    return EXIT_OK


def _cmd_relight(args) -> int:
    checkpoint = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(checkpoint)
    out = Path(args.out)
    RunManifest(
        command="relight",
        config={"model": checkpoint.model_config.to_dict()},
        inputs=[str(args.ckpt), str(args.input), str(args.ref)],
        outputs=[str(out)],
        seed=None,
        tool_version=__version__,
    ).save(_manifest_path(out))
    res = model.config.base_resolution
    result = relight(model, _load_model_input(args.input, res), _load_model_input(args.ref, res))
    save_image(out, result)
    print(f"wrote {out}")
    return EXIT_OK


def _cmd_albedo(args) -> int:
    checkpoint = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(checkpoint)
    out = Path(args.out)
    RunManifest(
        command="albedo",
        config={"model": checkpoint.model_config.to_dict(), "alpha_override": 0.0},
        inputs=[str(args.ckpt), str(args.input)],
        outputs=[str(out)],
        seed=None,
        tool_version=__version__,
    ).save(_manifest_path(out))
    image = _load_model_input(args.input, model.config.base_resolution)
    save_image(out, estimate_albedo(model, image))
    print(f"wrote {out}")
    return EXIT_OK


def _cmd_interpolate(args) -> int:
    if args.steps < 1:
        raise UsageError("--steps must be >= 1")
    checkpoint = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(checkpoint)
    out = Path(args.out)
    RunManifest(
        command="interpolate",
        config={"model": checkpoint.model_config.to_dict(), "steps": args.steps},
        inputs=[str(args.ckpt), str(args.input), str(args.ref_a), str(args.ref_b)],
        outputs=[str(out)],
        seed=None,
        tool_version=__version__,
    ).save(_manifest_path(out))
    res = model.config.base_resolution
    image = _load_model_input(args.input, res)
    intrinsics, _ = encode(model, image)
    _, code_a = encode(model, _load_model_input(args.ref_a, res))
    _, code_b = encode(model, _load_model_input(args.ref_b, res))
    frames, labels = [], []
    for t in np.linspace(0.0, 1.0, args.steps):
        code = interpolate_extrinsics(code_a, code_b, float(t))
        frames.append(decode(model, intrinsics, code))
        labels.append(f"t={t:.2f}")
    render_grid(frames, labels, out)
    print(f"wrote {out} ({args.steps} frames)")
    return EXIT_OK


def _cmd_eval_relight(args) -> int:
    seed = _default_seed(args.seed)
    checkpoint = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(checkpoint)
    out = Path(args.out)
    RunManifest(
        command="eval-relight",
        config={"model": checkpoint.model_config.to_dict(), "n_refs": args.n_refs},
        inputs=[str(args.ckpt), str(args.data)],
        outputs=[str(out)],
        seed=seed,
        tool_version=__version__,
    ).save(_manifest_path(out))
    scenes = load_multi_illum(args.data)
    report = eval_relight(model, scenes, n_refs=args.n_refs, seed=seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    print(json.dumps(report.aggregates, indent=2, sort_keys=True))
    print(f"wrote {out}")
    return EXIT_OK


def _cmd_eval_whdr(args) -> int:
    checkpoint = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(checkpoint)
    images_dir = Path(args.images)
    judgments_dir = Path(args.judgments)
    out = Path(args.out)
    RunManifest(
        command="eval-whdr",
        config={
            "model": checkpoint.model_config.to_dict(),
            "delta": args.delta,
            "tune": bool(args.tune),
        },
        inputs=[str(args.ckpt), str(images_dir), str(judgments_dir)],
        outputs=[str(out)],
        seed=None,
        tool_version=__version__,
    ).save(_manifest_path(out))

    stems = sorted(p.stem for p in images_dir.glob("*.png") if (judgments_dir / f"{p.stem}.json").exists())
    if not stems:
        raise FileNotFoundError(f"no PNG/JSON pairs found under {images_dir} / {judgments_dir}")
    res = model.config.base_resolution
    albedos, judgment_sets = [], []
    for stem in stems:
        image = _load_model_input(images_dir / f"{stem}.png", res)
        albedos.append(estimate_albedo(model, image))
        judgment_sets.append(load_iiw_judgments(judgments_dir / f"{stem}.json"))
    delta = tune_delta(albedos, judgment_sets) if args.tune else args.delta
    per_image = {}
    pooled_err = 0.0
    pooled_weight = 0.0
    for stem, albedo, judgments in zip(stems, albedos, judgment_sets):
        result = whdr(lightness_from_image(albedo), judgments, delta)
        per_image[stem] = result.to_dict()
        pooled_err += result.whdr * result.total_weight
        pooled_weight += result.total_weight
    report = {
        "delta": delta,
        "tuned": bool(args.tune),
        "per_image": per_image,
        "pooled_whdr": pooled_err / pooled_weight if pooled_weight > 0 else 0.0,
        "mean_whdr": float(np.mean([v["whdr"] for v in per_image.values()])),
    }
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    print(f"pooled WHDR {report['pooled_whdr']:.4f} at delta {delta}")
    print(f"wrote {out}")
    return EXIT_OK


def _cmd_inspect_checkpoint(args) -> int:
    checkpoint = load_checkpoint(args.ckpt)
    n_weights = sum(int(np.prod(a.shape)) for a in checkpoint.weights.values())
    info = {
        "path": str(args.ckpt),
        "format_version": checkpoint.format_version,
        "step": checkpoint.step,
        "n_weight_arrays": len(checkpoint.weights),
        "n_weight_scalars": n_weights,
        "n_optimizer_arrays": len(checkpoint.optimizer_state),
        "model_config": checkpoint.model_config.to_dict(),
        "train_config": checkpoint.train_config.to_dict(),
    }
    if args.out:
        out = Path(args.out)
        RunManifest(
            command="inspect-checkpoint",
            config={},
            inputs=[str(args.ckpt)],
            outputs=[str(out)],
            seed=None,
            tool_version=__version__,
        ).save(_manifest_path(out))
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w") as f:
            json.dump(info, f, indent=2, sort_keys=True)
    print(json.dumps(info, indent=2, sort_keys=True))
    return EXIT_OK


_COMMANDS = {
    "synth-data": _cmd_synth_data,
    "train": _cmd_train,
    "relight": _cmd_relight,
    "albedo": _cmd_albedo,
    "interpolate": _cmd_interpolate,
    "eval-relight": _cmd_eval_relight,
    "eval-whdr": _cmd_eval_whdr,
    "inspect-checkpoint": _cmd_inspect_checkpoint,
}


def dispatch(argv) -> int:
    """Parse argv and run one subcommand; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
