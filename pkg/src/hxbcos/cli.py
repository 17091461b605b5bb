"""``hxbcos`` command line: train, explain, neurons, pointing.

Exit codes: 0 success, 1 usage error, 2 runtime or data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("hxbcos")

RUN_FILE = "run.json"
DATA_DEFAULTS = {"data": "synth", "seed": 0, "num_per_class": 200}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hxbcos", description="Hypercomplex B-cos networks at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def data_flags(p, defaults=True):
        d = DATA_DEFAULTS if defaults else {k: None for k in DATA_DEFAULTS}
        p.add_argument("--data", default=d["data"], help='"synth" or a folder-per-class image directory')
        p.add_argument("--seed", type=int, default=d["seed"])
        p.add_argument("--num-per-class", type=int, default=d["num_per_class"],
                       help="synthetic images per class")

    p = sub.add_parser("train", help="train a model and write checkpoints plus metrics.jsonl")
    data_flags(p)
    p.add_argument("--variant", choices=("real", "ph", "quaternion"), default="ph")
    p.add_argument("--n", type=int, default=3)
    p.add_argument("--b-exp", type=float, default=2.0)
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--epochs", type=int, help="override the preset's total epochs")
    p.add_argument("--warmup", type=int, help="override the preset's warmup epochs")
    p.add_argument("--lr", type=float, help="override the preset's peak learning rate")
    p.add_argument("--image-size", type=int, help="override the preset's image size")
    p.add_argument("--dense", action="store_true", help="dense concatenation of stage inputs")
    p.add_argument("--out", required=True)

    p = sub.add_parser("explain", help="render explanation PNGs with completeness sidecars")
    data_flags(p, defaults=False)
    p.add_argument("--checkpoint", required=True)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--index", type=int, default=0, help="position in the test split")
    group.add_argument("--image", help="explain an image file instead")
    p.add_argument("--class", dest="target", default=None,
                   help='class index, or "all"; defaults to the predicted class')
    p.add_argument("--percentile", type=float, default=99.9)
    p.add_argument("--out", required=True)

    p = sub.add_parser("neurons", help="top activating test images for one neuron")
    data_flags(p, defaults=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--neuron", type=int, required=True)
    p.add_argument("--top-k", type=int, default=3)
    p.add_argument("--out", required=True)

    p = sub.add_parser("pointing", help="grid pointing game report")
    data_flags(p, defaults=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--method", choices=("inherent", "gradcam", "uniform"), default="inherent")
    p.add_argument("--num-grids", type=int, default=100)
    p.add_argument("--out", required=True, help="report JSON path")
    return parser


# helpers -------------------------------------------------------------------------------


def _load_data(data: str, image_size: int, seed: int, num_per_class: int):
    from .data import load_image_folder, synth_shapes

    if data == "synth":
        return synth_shapes(num_per_class, image_size, seed)
    if not Path(data).is_dir():
        raise UsageError(f"--data {data!r} is neither 'synth' nor a directory")
    return load_image_folder(data, image_size, seed=seed)


def _data_for_checkpoint(args, model):
    """Dataset flags fall back to the run.json written next to the checkpoint."""
    saved = {}
    run_file = Path(args.checkpoint).parent / RUN_FILE
    if run_file.exists():
        saved = json.loads(run_file.read_text())
    resolved = {k: getattr(args, k) if getattr(args, k) is not None else saved.get(k, v)
                for k, v in DATA_DEFAULTS.items()}
    manifest = _load_data(resolved["data"], model.config.image_size, resolved["seed"],
                          resolved["num_per_class"])
    if manifest.num_classes != model.config.num_classes:
        raise ValueError(f"dataset has {manifest.num_classes} classes, checkpoint {model.config.num_classes}")
    return manifest, resolved


def _load_model(path):
    from .models import load_checkpoint

    if not Path(path).is_file():
        raise UsageError(f"checkpoint {path} does not exist")
    return load_checkpoint(path)


def _on_white(img) -> np.ndarray:
    """Composite an explanation over white as 8-bit RGB."""
    a = img.alpha[..., None]
    rgb = img.rgb * a + (1 - a)
    return np.clip(np.floor(rgb * 255 + 0.5), 0, 255).astype(np.uint8)


def _to8(rgb_chw: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(rgb_chw.transpose(1, 2, 0) * 255 + 0.5), 0, 255).astype(np.uint8)


# commands ------------------------------------------------------------------------------


def cmd_train(args) -> int:
    from .models import ModelConfig, build_model
    from .training import PRESETS, preset, train

    overrides = {k: v for k, v in (("total_epochs", args.epochs), ("warmup_epochs", args.warmup),
                                   ("lr_max", args.lr)) if v is not None}
    cfg = preset(args.preset, seed=args.seed, **overrides)
    image_size = args.image_size or PRESETS[args.preset]["image_size"]
    manifest = _load_data(args.data, image_size, args.seed, args.num_per_class)
    quaternion = args.variant == "quaternion"
    config = ModelConfig(variant=args.variant, n=args.n, b=args.b_exp,
                         dense_connectivity=args.dense, input_channels=8 if quaternion else 6,
                         num_classes=manifest.num_classes, image_size=image_size, seed=args.seed,
                         class_names=tuple(manifest.class_names))
    model = build_model(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / RUN_FILE).write_text(json.dumps(
        {"data": args.data, "seed": args.seed, "num_per_class": args.num_per_class,
         "variant": args.variant, "n": config.n, "b": args.b_exp, "preset": args.preset}, indent=2) + "\n")

    def report(epoch, records):
        tr, te = records
        print(f"epoch {epoch:3d}  train loss {tr['loss']:.4f} acc {tr['accuracy']:.3f}  "
              f"test loss {te['loss']:.4f} acc {te['accuracy']:.3f}  lr {tr['lr']:.2e}", flush=True)

    state = train(model, manifest, cfg, out, pad_quaternion=quaternion, on_epoch=report)
    print(f"best test accuracy {state.best_accuracy:.3f} at epoch {state.best_epoch}; "
          f"checkpoints in {out}")
    return 0


def cmd_explain(args) -> int:
    from .data import encode_batch, read_image, resize_center_crop
    from .explain import collapse_rows, decode_color, render_png, write_sidecar

    model = _load_model(args.checkpoint)
    channels = model.config.input_channels
    if args.image:
        img = read_image(args.image)
        if img.shape[-2:] != (model.config.image_size,) * 2:
            img = resize_center_crop(img, model.config.image_size)
        name = Path(args.image).stem
    else:
        manifest, _ = _data_for_checkpoint(args, model)
        test = manifest.split("test")
        if not 0 <= args.index < len(test):
            raise UsageError(f"--index {args.index} out of range; test split has {len(test)} images")
        img = test[args.index].image
        name = f"test{args.index:04d}"
    x = encode_batch([img], channels)
    if x.shape[1] != channels:
        raise ValueError(f"checkpoint expects {channels} channels, image encodes to {x.shape[1]}")
    full = collapse_rows(model, x)
    k = model.config.num_classes
    if args.target is None:
        targets = [int(np.argmax(full.outputs))]
    elif args.target == "all":
        targets = list(range(k))
    else:
        try:
            targets = [int(args.target)]
        except ValueError:
            raise UsageError(f"--class must be an index or 'all', got {args.target!r}") from None
        if not 0 <= targets[0] < k:
            raise UsageError(f"--class {targets[0]} out of range [0, {k})")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    errors = full.completeness_error()
    names = model.config.class_names
    for t in targets:
        stem = f"{name}_class{t}"
        image = decode_color(full.rows[t], full.x, args.percentile)
        render_png(image, out / f"{stem}.png")
        write_sidecar(out / f"{stem}.json", t, full.outputs[t], errors[t], args.percentile)
        label = names[t] if t < len(names) else str(t)
        print(f"{stem}.png  class {t} ({label})  logit {full.outputs[t]:.6f}  "
              f"completeness_error {errors[t]:.3e}")
    return 0


def cmd_neurons(args) -> int:
    from PIL import Image

    from .data import encode_batch
    from .explain import contribution_map, decode_color, top_activating

    model = _load_model(args.checkpoint)
    if args.top_k < 1:
        raise UsageError("--top-k must be positive")
    manifest, _ = _data_for_checkpoint(args, model)
    hits = top_activating(model, manifest, args.layer, args.neuron, args.top_k)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for rank, hit in enumerate(hits):
        sample = manifest.samples[hit.sample_index]
        x = encode_batch([sample.image], model.config.input_channels)
        cmap = contribution_map(model, x, args.layer, args.neuron, hit.location)
        # crop to the unit's receptive field: rows vanish outside it
        support = np.abs(cmap.row).sum(axis=0) > 0
        ys, xs = np.nonzero(support)
        if len(ys):
            box = (slice(ys.min(), ys.max() + 1), slice(xs.min(), xs.max() + 1))
        else:
            box = (slice(None), slice(None))
        picture = _to8(sample.image)[box]
        overlay = _on_white(decode_color(cmap.row, x[0]))[box]
        panel = np.concatenate([picture, np.full((picture.shape[0], 2, 3), 255, np.uint8), overlay], axis=1)
        path = out / f"layer{args.layer}_neuron{args.neuron}_top{rank}.png"
        Image.fromarray(panel, "RGB").save(path)
        print(f"{path.name}  {hit.source_id}  activation {hit.value:.6f} at {hit.location}")
    return 0


def cmd_pointing(args) -> int:
    from .evaluation import build_grids, pointing_game

    model = _load_model(args.checkpoint)
    if args.num_grids < 1:
        raise UsageError("--num-grids must be positive")
    manifest, resolved = _data_for_checkpoint(args, model)
    grids = build_grids(model, manifest, args.num_grids, seed=resolved["seed"])
    report = pointing_game(model, grids, args.method)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write(out)
    print(f"{report.method}: localization accuracy {report.localization_accuracy:.4f} "
          f"over {report.num_grids} grids ({len(report.flagged)} flagged)")
    return 0


COMMANDS = {"train": cmd_train, "explain": cmd_explain, "neurons": cmd_neurons, "pointing": cmd_pointing}


def _limit_threads():
    value = os.environ.get("HX_THREADS")
    if not value:
        return None
    try:
        threads = int(value)
    except ValueError:
        raise UsageError(f"HX_THREADS must be an integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(threads, 1))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        limiter = _limit_threads()
        try:
            return COMMANDS[args.command](args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except UsageError as exc:
        print(f"hxbcos {args.command}: {exc}", file=sys.stderr)
        return 1
    except (ValueError, IndexError, OSError, RuntimeError, TypeError) as exc:
        print(f"hxbcos {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
