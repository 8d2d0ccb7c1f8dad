"""Command-line entry point.

Subcommands: gen-shapes, pretrain, train, eval, sweep, inspect. Each run is
driven by defaults, overridden by an optional JSON config file, overridden
by explicit flags; the fully resolved config is written next to the outputs
together with a manifest of content hashes. One seed governs a run; all
internal randomness is derived from it.

Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import configio
from .checkpoints import file_sha256, load_checkpoint, load_encoder, save_encoder
from .datasets import AugmentParams, load_image_folder, save_image_folder, split_classes
from .encoders import EncoderConfig, ResidualSpec, VitSpec, build_encoder
from .errors import ValidationError
from .evaluation import (
    IclPredictor,
    KnnPredictor,
    context_sweep,
    evaluate,
    precompute_embeddings,
    write_report_json,
)
from .icl import IclModel, IclModelConfig
from .pretraining import PretrainConfig, TripletParams, pretrain_encoder
from .shapes import ShapesSpec, generate_shapes
from .training import RegimeConfig, ScheduleParams, TrainConfig, train_icl

OUT_ENV_VAR = "CONTEXTSHOT_OUT"


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; the contract here is exit 1
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _add_common(parser: _Parser) -> None:
    parser.add_argument("--config", default=None, help="JSON config file; flags override its values")
    parser.add_argument("--out", default=None, help=f"output path (default: ${OUT_ENV_VAR}/<command>)")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threads", type=int, default=None, help="worker threads; results are invariant to this")


def _resolve(defaults: dict, config_path, args: argparse.Namespace) -> dict:
    """defaults <- config file <- explicit flags, rejecting unknown config keys."""
    resolved = dict(defaults)
    if config_path:
        data = configio.read_json(config_path)
        unknown = sorted(set(data) - set(defaults))
        if unknown:
            raise ValidationError(f"unknown config keys: {unknown}")
        resolved.update(data)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _out_dir(resolved: dict, command: str, file_ok: bool = False) -> Path:
    out = resolved.get("out")
    if out is None:
        root = os.environ.get(OUT_ENV_VAR)
        if not root:
            raise ValidationError(f"--out is required (or set ${OUT_ENV_VAR})")
        out = str(Path(root) / command)
        resolved["out"] = out
    path = Path(out)
    if file_ok and path.suffix == ".json":
        path.parent.mkdir(parents=True, exist_ok=True)
        return path
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_manifest(run_dir: Path) -> None:
    files = {}
    for path in sorted(run_dir.rglob("*")):
        if path.is_file() and path.name != "manifest.json":
            files[str(path.relative_to(run_dir)).replace(os.sep, "/")] = file_sha256(path)
    configio.write_json(run_dir / "manifest.json", {"files": files})


def _write_resolved(run_dir: Path, resolved: dict) -> None:
    configio.write_json(run_dir / "resolved_config.json", resolved)


# ---------------------------------------------------------------- gen-shapes

GEN_DEFAULTS = {"out": None, "seed": 1, "classes": 30, "per_class": 200, "size": 64}


def _cmd_gen_shapes(args) -> int:
    resolved = _resolve(GEN_DEFAULTS, args.config, args)
    run_dir = _out_dir(resolved, "shapes")
    spec = ShapesSpec(
        n_classes=int(resolved["classes"]),
        per_class=int(resolved["per_class"]),
        image_size=(int(resolved["size"]), int(resolved["size"])),
    )
    dataset = generate_shapes(spec, int(resolved["seed"]))
    save_image_folder(dataset, run_dir / "images")
    _write_resolved(run_dir, resolved)
    _write_manifest(run_dir)
    print(f"wrote {dataset.n_items} images over {dataset.n_classes} classes to {run_dir / 'images'}")
    return 0


# ------------------------------------------------------------------ pretrain

PRETRAIN_DEFAULTS = {
    "out": None,
    "data": None,
    "seed": 1,
    "encoder": "residual_cnn",
    "embed_dim": 64,
    "image_size": 64,
    "epochs": 30,
    "classes_per_batch": 8,
    "samples_per_class": 4,
    "lr": 1e-3,
    "weight_decay": 1e-5,
    "label_smoothing": 0.1,
    "triplet": False,
    "margin": 0.2,
    "triplet_weight": 0.5,
    "mining": "semi_hard",
    "augment": True,
    "val_fraction": 0.1,
    "vit_patch": 8,
    "vit_depth": 6,
    "vit_heads": 4,
    "vit_token_dim": 128,
    "vit_mlp_dim": 256,
}


def _cmd_pretrain(args) -> int:
    resolved = _resolve(PRETRAIN_DEFAULTS, args.config, args)
    if not resolved["data"]:
        raise ValidationError("--data is required")
    run_dir = _out_dir(resolved, "pretrain")
    size = int(resolved["image_size"])
    dataset = load_image_folder(resolved["data"], (size, size))

    enc_config = EncoderConfig(
        kind=resolved["encoder"],
        input_size=(size, size),
        embed_dim=int(resolved["embed_dim"]),
        vit=VitSpec(
            patch_size=int(resolved["vit_patch"]),
            depth=int(resolved["vit_depth"]),
            heads=int(resolved["vit_heads"]),
            token_dim=int(resolved["vit_token_dim"]),
            mlp_dim=int(resolved["vit_mlp_dim"]),
        ),
    )
    encoder = build_encoder(enc_config, int(resolved["seed"]))

    triplet = None
    if resolved["triplet"]:
        triplet = TripletParams(
            margin=float(resolved["margin"]),
            weight=float(resolved["triplet_weight"]),
            mining=resolved["mining"],
        )
    config = PretrainConfig(
        epochs=int(resolved["epochs"]),
        classes_per_batch=int(resolved["classes_per_batch"]),
        samples_per_class=int(resolved["samples_per_class"]),
        learning_rate=float(resolved["lr"]),
        weight_decay=float(resolved["weight_decay"]),
        label_smoothing=float(resolved["label_smoothing"]),
        triplet=triplet,
        augment=AugmentParams(target_size=(size, size)) if resolved["augment"] else None,
        val_fraction=float(resolved["val_fraction"]),
        seed=int(resolved["seed"]),
    )
    _, history = pretrain_encoder(dataset, encoder, config, metrics_path=run_dir / "metrics.jsonl")
    objective = "classification+triplet" if triplet else "classification"
    final_val = history[-1]["val_top1"]
    save_encoder(
        encoder, run_dir / "encoder.ckpt",
        pretrain_objective=objective, epochs=config.epochs, val_accuracy=final_val,
    )
    _write_resolved(run_dir, resolved)
    _write_manifest(run_dir)
    print(f"pretrained {resolved['encoder']} for {config.epochs} epochs, val top-1 "
          f"{'n/a' if final_val is None else f'{final_val:.3f}'}; checkpoint at {run_dir / 'encoder.ckpt'}")
    return 0


# --------------------------------------------------------------------- train

TRAIN_DEFAULTS = {
    "out": None,
    "data": None,
    "seed": 1,
    "encoder_ckpt": None,
    "encoder": "residual_cnn",
    "embed_dim": 64,
    "image_size": 64,
    "holdout_classes": 10,
    "regime": "frozen",
    "unfreeze_epoch": 0,
    "encoder_lr_mode": "constant",
    "body_lr_mode": "scheduled",
    "encoder_constant_lr": 1e-5,
    "epochs": 60,
    "samples_per_epoch": 1000,
    "batch_size": 8,
    "n": 5,
    "k": 5,
    "n_max": 10,
    "lr_max": 3e-4,
    "lr_min": 1e-5,
    "warmup_epochs": 5,
    "plateau_epochs": 1,
    "decay_epochs": None,
    "weight_decay": 1e-5,
    "label_smoothing": 0.1,
    "accumulation_steps": 1,
    "icl_layers": 4,
    "icl_heads": 8,
    "icl_feedforward": 256,
    "dropout": 0.1,
    "val_every": 5,
    "val_episodes": 200,
}


def _cmd_train(args) -> int:
    resolved = _resolve(TRAIN_DEFAULTS, args.config, args)
    if not resolved["data"]:
        raise ValidationError("--data is required")
    run_dir = _out_dir(resolved, "train")
    size = int(resolved["image_size"])
    dataset = load_image_folder(resolved["data"], (size, size))
    train_set, val_set = split_classes(dataset, int(resolved["holdout_classes"]), int(resolved["seed"]))

    if resolved["encoder_ckpt"]:
        encoder, _ = load_encoder(resolved["encoder_ckpt"])
        pretrained = True
    else:
        encoder = build_encoder(
            EncoderConfig(kind=resolved["encoder"], input_size=(size, size), embed_dim=int(resolved["embed_dim"])),
            int(resolved["seed"]),
        )
        pretrained = False

    decay = resolved["decay_epochs"]
    if decay is None:
        decay = max(1, int(resolved["epochs"]) - int(resolved["warmup_epochs"]) - int(resolved["plateau_epochs"]))
    schedule = ScheduleParams(
        lr_max=float(resolved["lr_max"]),
        lr_min=float(resolved["lr_min"]),
        warmup_epochs=int(resolved["warmup_epochs"]),
        plateau_epochs=int(resolved["plateau_epochs"]),
        decay_epochs=int(decay),
    )
    regime = RegimeConfig(
        encoder_pretrained=pretrained,
        encoder_mode=resolved["regime"],
        unfreeze_epoch=int(resolved["unfreeze_epoch"]),
        encoder_lr_mode=resolved["encoder_lr_mode"],
        body_lr_mode=resolved["body_lr_mode"],
        encoder_constant_lr=float(resolved["encoder_constant_lr"]),
    )
    config = TrainConfig(
        epochs=int(resolved["epochs"]),
        samples_per_epoch=int(resolved["samples_per_epoch"]),
        batch_size=int(resolved["batch_size"]),
        n=int(resolved["n"]),
        k=int(resolved["k"]),
        n_max=int(resolved["n_max"]),
        weight_decay=float(resolved["weight_decay"]),
        label_smoothing=float(resolved["label_smoothing"]),
        schedule=schedule,
        regime=regime,
        seed=int(resolved["seed"]),
        accumulation_steps=int(resolved["accumulation_steps"]),
        val_every=int(resolved["val_every"]),
        val_episodes=int(resolved["val_episodes"]),
    )
    model = IclModel(
        IclModelConfig(
            n_max=config.n_max,
            embed_dim=encoder.config.embed_dim,
            heads=int(resolved["icl_heads"]),
            layers=int(resolved["icl_layers"]),
            feedforward_dim=int(resolved["icl_feedforward"]),
            dropout=float(resolved["dropout"]),
        ),
        init_seed=int(resolved["seed"]),
    )
    paths, history = train_icl(
        model, encoder, train_set, config, val_set=val_set,
        out_dir=run_dir / "checkpoints", metrics_path=run_dir / "metrics.jsonl",
    )
    _write_resolved(run_dir, resolved)
    _write_manifest(run_dir)
    final = history[-1]
    val_str = "n/a" if final["val_acc"] is None else f"{final['val_acc']:.3f}"
    print(f"trained {config.epochs} epochs; final loss {final['train_loss']:.4f}, "
          f"val acc {val_str}; checkpoints in {run_dir / 'checkpoints'}")
    return 0


# ---------------------------------------------------------------------- eval

EVAL_DEFAULTS = {
    "out": None,
    "data": None,
    "model": None,
    "seed": 7,
    "n": 5,
    "k": 5,
    "tasks": 5000,
    "n_max": 10,
    "predictor": "icl",
    "knn_neighbors": 5,
    "encoder_ckpt": None,
    "threads": 1,
    "timestamp": False,
}


def _cmd_eval(args) -> int:
    resolved = _resolve(EVAL_DEFAULTS, args.config, args)
    if not resolved["data"]:
        raise ValidationError("--data is required")
    out = _out_dir(resolved, "eval", file_ok=True)

    predictor_kind = resolved["predictor"]
    if predictor_kind == "icl":
        if not resolved["model"]:
            raise ValidationError("--model is required for the icl predictor")
        model, encoder, _ = load_checkpoint(resolved["model"])
        model_id = file_sha256(resolved["model"])[:12]
        size = encoder.config.input_size
    elif predictor_kind == "knn":
        if not resolved["encoder_ckpt"]:
            raise ValidationError("--encoder-ckpt is required for the knn predictor")
        encoder, _ = load_encoder(resolved["encoder_ckpt"])
        model_id = file_sha256(resolved["encoder_ckpt"])[:12]
        size = encoder.config.input_size
    else:
        raise ValidationError(f"unknown predictor {predictor_kind!r}")

    dataset = load_image_folder(resolved["data"], tuple(size))
    table = precompute_embeddings(encoder, dataset)
    if predictor_kind == "icl":
        predictor = IclPredictor(model, encoder, embedding_table=table)
    else:
        predictor = KnnPredictor(encoder, int(resolved["knn_neighbors"]), embedding_table=table)

    report = evaluate(
        predictor, dataset,
        n=int(resolved["n"]), k=int(resolved["k"]), tasks=int(resolved["tasks"]),
        n_max=int(resolved["n_max"]), seed=int(resolved["seed"]),
        dataset_id=Path(resolved["data"]).name, model_id=model_id,
        threads=int(resolved["threads"]),
    )
    created = datetime.now(timezone.utc).isoformat() if resolved["timestamp"] else None
    if out.suffix == ".json":
        write_report_json(report, out, created_at=created)
    else:
        write_report_json(report, out / "report.json", created_at=created)
        _write_resolved(out, resolved)
        _write_manifest(out)
    print(f"{report.predictor} {report.n}-way {report.k}-shot over {report.tasks} tasks: {report.formatted()}")
    return 0


# --------------------------------------------------------------------- sweep

SWEEP_DEFAULTS = {
    "out": None,
    "data": None,
    "model": None,
    "seed": 7,
    "n": 5,
    "k_min": 1,
    "k_max": 10,
    "tasks": 2000,
    "n_max": 10,
    "threads": 1,
    "svg": True,
}


def _cmd_sweep(args) -> int:
    resolved = _resolve(SWEEP_DEFAULTS, args.config, args)
    if not resolved["data"] or not resolved["model"]:
        raise ValidationError("--data and --model are required")
    run_dir = _out_dir(resolved, "sweep")
    model, encoder, _ = load_checkpoint(resolved["model"])
    dataset = load_image_folder(resolved["data"], tuple(encoder.config.input_size))
    table = precompute_embeddings(encoder, dataset)
    predictor = IclPredictor(model, encoder, embedding_table=table)
    ks = list(range(int(resolved["k_min"]), int(resolved["k_max"]) + 1))
    sweep = context_sweep(
        predictor, dataset, n=int(resolved["n"]), k_values=ks, tasks=int(resolved["tasks"]),
        n_max=int(resolved["n_max"]), seed=int(resolved["seed"]),
        dataset_id=Path(resolved["data"]).name, model_id=file_sha256(resolved["model"])[:12],
        threads=int(resolved["threads"]),
    )
    sweep.to_csv(run_dir / "sweep.csv")
    if resolved["svg"]:
        sweep.to_svg(run_dir / "sweep.svg")
    _write_resolved(run_dir, resolved)
    _write_manifest(run_dir)
    for k, acc, se in sweep.rows:
        print(f"k={k}: {acc:.3f} +/- {se:.3f}")
    return 0


# ------------------------------------------------------------------- inspect


def _cmd_inspect(args) -> int:
    run_dir = Path(args.run)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise ValidationError(f"no manifest.json in {run_dir}")
    manifest = configio.read_json(manifest_path)
    failures = []
    for rel, recorded in manifest.get("files", {}).items():
        path = run_dir / rel
        if not path.exists():
            failures.append(f"missing: {rel}")
        elif file_sha256(path) != recorded:
            failures.append(f"hash mismatch: {rel}")
    for path in sorted(run_dir.rglob("*")):
        if path.is_file() and path.name != "manifest.json":
            rel = str(path.relative_to(run_dir)).replace(os.sep, "/")
            if rel not in manifest.get("files", {}):
                failures.append(f"untracked: {rel}")
    if failures:
        for f in failures:
            print(f, file=sys.stderr)
        return 1
    print(f"ok: {len(manifest.get('files', {}))} files verified in {run_dir}")
    return 0


# ------------------------------------------------------------------ dispatch


def build_parser() -> _Parser:
    parser = _Parser(prog="contextshot", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-shapes", parents=[], description="generate a synthetic shapes dataset")
    _add_common(p)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--per-class", dest="per_class", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.set_defaults(func=_cmd_gen_shapes)

    p = sub.add_parser("pretrain", description="supervised encoder pretraining")
    _add_common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--encoder", choices=["residual_cnn", "vit"], default=None)
    p.add_argument("--embed-dim", dest="embed_dim", type=int, default=None)
    p.add_argument("--image-size", dest="image_size", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--classes-per-batch", dest="classes_per_batch", type=int, default=None)
    p.add_argument("--samples-per-class", dest="samples_per_class", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=None)
    p.add_argument("--label-smoothing", dest="label_smoothing", type=float, default=None)
    p.add_argument("--triplet", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--margin", type=float, default=None)
    p.add_argument("--triplet-weight", dest="triplet_weight", type=float, default=None)
    p.add_argument("--mining", choices=["all", "semi_hard", "hardest_negative"], default=None)
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--val-fraction", dest="val_fraction", type=float, default=None)
    p.add_argument("--vit-patch", dest="vit_patch", type=int, default=None)
    p.add_argument("--vit-depth", dest="vit_depth", type=int, default=None)
    p.add_argument("--vit-heads", dest="vit_heads", type=int, default=None)
    p.add_argument("--vit-token-dim", dest="vit_token_dim", type=int, default=None)
    p.add_argument("--vit-mlp-dim", dest="vit_mlp_dim", type=int, default=None)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("train", description="episodic training of the in-context model")
    _add_common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--encoder-ckpt", dest="encoder_ckpt", default=None)
    p.add_argument("--encoder", choices=["residual_cnn", "vit"], default=None)
    p.add_argument("--embed-dim", dest="embed_dim", type=int, default=None)
    p.add_argument("--image-size", dest="image_size", type=int, default=None)
    p.add_argument("--holdout-classes", dest="holdout_classes", type=int, default=None)
    p.add_argument("--regime", choices=["frozen", "delayed", "joint"], default=None)
    p.add_argument("--unfreeze-epoch", dest="unfreeze_epoch", type=int, default=None)
    p.add_argument("--encoder-lr-mode", dest="encoder_lr_mode", choices=["constant", "scheduled"], default=None)
    p.add_argument("--body-lr-mode", dest="body_lr_mode", choices=["constant", "scheduled"], default=None)
    p.add_argument("--encoder-constant-lr", dest="encoder_constant_lr", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--samples-per-epoch", dest="samples_per_epoch", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--n-max", dest="n_max", type=int, default=None)
    p.add_argument("--lr-max", dest="lr_max", type=float, default=None)
    p.add_argument("--lr-min", dest="lr_min", type=float, default=None)
    p.add_argument("--warmup-epochs", dest="warmup_epochs", type=int, default=None)
    p.add_argument("--plateau-epochs", dest="plateau_epochs", type=int, default=None)
    p.add_argument("--decay-epochs", dest="decay_epochs", type=int, default=None)
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=None)
    p.add_argument("--label-smoothing", dest="label_smoothing", type=float, default=None)
    p.add_argument("--accumulation-steps", dest="accumulation_steps", type=int, default=None)
    p.add_argument("--icl-layers", dest="icl_layers", type=int, default=None)
    p.add_argument("--icl-heads", dest="icl_heads", type=int, default=None)
    p.add_argument("--icl-feedforward", dest="icl_feedforward", type=int, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--val-every", dest="val_every", type=int, default=None)
    p.add_argument("--val-episodes", dest="val_episodes", type=int, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", description="n-way k-shot evaluation")
    _add_common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--tasks", type=int, default=None)
    p.add_argument("--n-max", dest="n_max", type=int, default=None)
    p.add_argument("--predictor", choices=["icl", "knn"], default=None)
    p.add_argument("--knn-neighbors", dest="knn_neighbors", type=int, default=None)
    p.add_argument("--encoder-ckpt", dest="encoder_ckpt", default=None)
    p.add_argument("--timestamp", action=argparse.BooleanOptionalAction, default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", description="accuracy vs context length (k) sweep")
    _add_common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--k-min", dest="k_min", type=int, default=None)
    p.add_argument("--k-max", dest="k_max", type=int, default=None)
    p.add_argument("--tasks", type=int, default=None)
    p.add_argument("--n-max", dest="n_max", type=int, default=None)
    p.add_argument("--svg", action=argparse.BooleanOptionalAction, default=None)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("inspect", description="verify a run directory's manifest hashes")
    p.add_argument("--run", required=True)
    p.set_defaults(func=_cmd_inspect)

    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_usage(sys.stderr)
            return 1
        return args.func(args)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 2
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
