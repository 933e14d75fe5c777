"""Command-line entry point: ``protopart <subcommand> [flags]``.

Exit codes: 0 on success, 1 on a domain error (message on stderr), 2 on a
usage error.  Input files are only ever read.
"""

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import AUGMENT_OPS, augment_offline, load_dataset, read_ppm, save_dataset
from .exceptions import InvalidArgumentError, InvalidConfigError, ProtoPartError
from .explain import (
    ensemble_logits,
    explain_image,
    nearest_patches_to_prototype,
    nearest_prototypes_to_image,
    prune_prototypes,
    write_explanation,
)
from .gradcheck import gradient_check, worst
from .model import ConvBlock, ModelConfig, build_model
from .projection import verify_projection_theorem
from .synthetic import make_shapes
from .training import TrainConfig, push_stage, stage3_convex_last_layer, train_full

GRADCHECK_TOLERANCE = 1e-4

_TRAIN_KEYS = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
_MODEL_KEYS = ("input_shape", "blocks", "addon_channels", "prototype_shape", "n_classes", "prototypes_per_class", "epsilon")


# ---------------------------------------------------------------- config files


def _ints(text, sep=","):
    return tuple(int(v) for v in text.replace("x", sep).split(sep) if v.strip())


def _parse_blocks(text):
    # filters:kernel:stride:padding:pool[:pool_stride], comma separated
    blocks = []
    for entry in text.split(","):
        fields = _ints(entry, ":")
        if not 1 <= len(fields) <= 6:
            raise InvalidConfigError(f"bad block entry {entry!r}")
        blocks.append(ConvBlock(*fields))
    return tuple(blocks)


def _convert(key, value):
    try:
        if key in _TRAIN_KEYS:
            return int(value) if _TRAIN_KEYS[key] in (int, "int") else float(value)
        if key == "blocks":
            return _parse_blocks(value)
        if key in ("input_shape", "prototype_shape", "prototypes_per_class"):
            parsed = _ints(value)
            return parsed[0] if key == "prototypes_per_class" and len(parsed) == 1 else parsed
        if key == "epsilon":
            return float(value)
        return int(value)
    except ValueError as exc:
        raise InvalidConfigError(f"bad value for {key}: {value!r}") from exc


def parse_config(text):
    """Split ``key=value`` lines into (model overrides, train overrides)."""
    model, train = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (part.strip() for part in line.partition("="))
        if not sep:
            raise InvalidConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        if key in _TRAIN_KEYS:
            train[key] = _convert(key, value)
        elif key in _MODEL_KEYS:
            model[key] = _convert(key, value)
        else:
            raise InvalidConfigError(f"line {lineno}: unknown config key {key!r}")
    return model, train


def _read_config(path):
    if path is None:
        return {}, {}
    return parse_config(Path(path).read_text(encoding="utf-8"))


def _model_config(overrides, dataset):
    derived = {"input_shape": dataset.image_shape, "n_classes": dataset.n_classes}
    for key, value in derived.items():
        if key in overrides and tuple(np.atleast_1d(overrides[key])) != tuple(np.atleast_1d(value)):
            raise InvalidConfigError(f"config {key}={overrides[key]} disagrees with the dataset ({value})")
    return ModelConfig(**{**overrides, **derived})


def _train_config(overrides, seed):
    values = dict(overrides)
    if seed is not None:
        values["seed"] = seed
    return TrainConfig(**values).validate()


# ---------------------------------------------------------------- helpers


def _fmt(value):
    return repr(float(value))


def _check_classes(model, dataset):
    if dataset.n_classes != model.n_classes:
        raise InvalidArgumentError(f"dataset has {dataset.n_classes} classes, model has {model.n_classes}")


def _log(args):
    return None if args.quiet else print


# ---------------------------------------------------------------- subcommands


def cmd_train(args):
    dataset = load_dataset(args.data)
    model_overrides, train_overrides = _read_config(args.config)
    config = _train_config(train_overrides, args.seed)
    model = build_model(_model_config(model_overrides, dataset), seed=config.seed)
    train_full(model, dataset, config, log=_log(args), workers=args.workers)
    save_checkpoint(model, args.out)
    print(f"saved={args.out} prototypes={model.n_prototypes}")


def cmd_push(args):
    model = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    _check_classes(model, dataset)
    push_stage(model, dataset, workers=args.workers)
    for r in model.projection_records:
        print(
            f"prototype={r.prototype} class={r.class_index} image={r.image_index} row={r.row} col={r.col} "
            f"squared_distance={_fmt(r.squared_distance)} move={_fmt(r.move_distance)}"
        )
    save_checkpoint(model, args.out)


def cmd_last_layer(args):
    model = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    _check_classes(model, dataset)
    model_overrides, train_overrides = _read_config(args.config)
    if model_overrides and dataclasses.replace(model.config, **model_overrides) != model.config:
        raise InvalidConfigError(f"model keys {sorted(model_overrides)} disagree with the checkpoint")
    stage3_convex_last_layer(model, dataset, _train_config(train_overrides, args.seed), log=_log(args))
    save_checkpoint(model, args.out)


def cmd_eval(args):
    model = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    _check_classes(model, dataset)
    logits = model.predict_logits(dataset.images)
    if args.logits:
        for i, row in enumerate(logits):
            print(f"logits[{i}]=" + ",".join(_fmt(v) for v in row))
    acc = np.mean(np.argmax(logits, axis=1) == dataset.labels)
    print(f"accuracy={_fmt(acc)} n={len(dataset)}")


def cmd_explain(args):
    model = load_checkpoint(args.ckpt)
    image = read_ppm(args.image)
    explanation = explain_image(model, image, image_id=Path(args.image).name, percentile=args.percentile)
    report = write_explanation(explanation, image, args.out_dir)
    print(explanation.to_text(), end="")
    print(f"report={report}")


def cmd_nearest(args):
    model = load_checkpoint(args.ckpt)
    if args.prototype is not None:
        if args.data is None:
            raise InvalidArgumentError("--prototype needs --data")
        dataset = load_dataset(args.data)
        for rank, match in enumerate(nearest_patches_to_prototype(model, dataset, args.prototype, args.top, args.workers)):
            print(
                f"rank={rank} image={match.image_index} row={match.row} col={match.col} "
                f"class={match.class_index} squared_distance={_fmt(match.distance)}"
            )
    else:
        image = read_ppm(args.image)
        for rank, match in enumerate(nearest_prototypes_to_image(model, image, args.top)):
            t, l, b, r = match.box.as_tuple()
            print(
                f"rank={rank} prototype={match.prototype} class={match.class_index} "
                f"score={_fmt(match.score)} box=({t},{l},{b},{r})"
            )


def cmd_prune(args):
    model = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    _check_classes(model, dataset)
    pruned, report = prune_prototypes(model, dataset, args.z, args.tau, args.workers)
    print(report.to_text(), end="")
    save_checkpoint(pruned, args.out)


def cmd_verify_theorem(args):
    before = load_checkpoint(args.before)
    after = load_checkpoint(args.after)
    dataset = load_dataset(args.data)
    indices = range(len(dataset)) if args.index is None else [args.index]
    if args.index is not None and not 0 <= args.index < len(dataset):
        raise InvalidArgumentError(f"--index {args.index} out of range")
    met = holds = violated = 0
    for i in indices:
        label = int(dataset.labels[i]) if args.use_labels else None
        report = verify_projection_theorem(before, after, dataset.images[i], args.delta, label=label, image_id=i)
        if args.index is not None:
            print(report.to_text(), end="")
        else:
            print(f"image={i} verdict={report.verdict} margin_before={_fmt(report.margin_before)}")
        met += report.assumptions_hold
        holds += report.verdict == "bound holds"
        violated += report.verdict == "bound violated"
    print(f"images={len(indices)} assumptions_met={met} bound_holds={holds} bound_violated={violated}")
    if violated:
        raise ProtoPartError(f"projection bound violated on {violated} image(s)")


def cmd_ensemble(args):
    models = [load_checkpoint(p) for p in args.ckpt]
    dataset = load_dataset(args.data)
    for path, m in zip(args.ckpt, models):
        _check_classes(m, dataset)
        acc = np.mean(np.argmax(m.predict_logits(dataset.images), axis=1) == dataset.labels)
        print(f"model={path} accuracy={_fmt(acc)}")
    logits = ensemble_logits(models, dataset.images)
    acc = np.mean(np.argmax(logits, axis=1) == dataset.labels)
    print(f"ensemble accuracy={_fmt(acc)} n={len(dataset)}")


def cmd_augment(args):
    dataset = load_dataset(args.data)
    ops = tuple(op for op in args.ops.split(",") if op)
    out = augment_offline(dataset, ops, args.copies, args.seed)
    save_dataset(out, args.out)
    print(f"images={len(out)} originals={len(dataset)} saved={args.out}")


def cmd_gradcheck(args):
    results = gradient_check(args.seed, args.trials, args.step)
    w = worst(results)
    print(f"trials={args.trials} checks={len(results)} max_rel_error={_fmt(w.rel_error)} worst={w.parameter}@{w.trial}")
    if w.rel_error >= GRADCHECK_TOLERANCE:
        raise ProtoPartError(f"gradient mismatch {w.rel_error!r} >= {GRADCHECK_TOLERANCE}")


def cmd_synth(args):
    dataset = make_shapes(args.per_class, args.size, args.seed)
    save_dataset(dataset, args.out)
    print(f"images={len(dataset)} classes={dataset.n_classes} saved={args.out}")


# ---------------------------------------------------------------- parser


def build_parser():
    parser = argparse.ArgumentParser(prog="protopart", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(fn=fn)
        return p

    def workers(p):
        p.add_argument("--workers", type=int, default=1, help="threads for latent scans (default 1)")

    p = command("train", cmd_train, "full three-stage training")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--quiet", action="store_true")
    workers(p)

    p = command("push", cmd_push, "project prototypes onto training patches")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    workers(p)

    p = command("last-layer", cmd_last_layer, "run the convex last-layer stage only")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--quiet", action="store_true")

    p = command("eval", cmd_eval, "accuracy on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--logits", action="store_true", help="also print per-image logits")

    p = command("explain", cmd_explain, "per-prototype evidence for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--percentile", type=float, default=95.0)

    p = command("nearest", cmd_nearest, "latent-space nearest neighbours")
    p.add_argument("--ckpt", required=True)
    target = p.add_mutually_exclusive_group(required=True)
    target.add_argument("--prototype", type=int)
    target.add_argument("--image")
    p.add_argument("--data")
    p.add_argument("--top", type=int, default=5)
    workers(p)

    p = command("prune", cmd_prune, "remove prototypes dominated by other classes")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--z", type=int, default=6)
    p.add_argument("--tau", type=int, default=3)
    workers(p)

    p = command("verify-theorem", cmd_verify_theorem, "check the projection logit bound")
    p.add_argument("--before", required=True)
    p.add_argument("--after", required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int)
    p.add_argument("--use-labels", action="store_true", help="take c from the dataset labels instead of the prediction")

    p = command("ensemble", cmd_ensemble, "sum logits of several models")
    p.add_argument("--ckpt", action="append", required=True)
    p.add_argument("--data", required=True)

    p = command("augment", cmd_augment, "offline dataset augmentation")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--copies", type=int, default=1)
    p.add_argument("--ops", default=",".join(AUGMENT_OPS))
    p.add_argument("--seed", type=int, default=0)

    p = command("gradcheck", cmd_gradcheck, "finite-difference check of the stage-1 gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--step", type=float, default=1e-5)

    p = command("synth", cmd_synth, "generate the synthetic shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args.fn(args)
    except (ProtoPartError, OSError) as exc:
        print(f"protopart: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
