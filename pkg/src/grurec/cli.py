"""Command-line interface.

Machine-readable output goes to stdout as JSON; logs go to stderr.
Exit codes: 0 ok, 1 check failure, 2 config error, 3 data error,
4 numerical divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from grurec import __version__
from grurec.checkpoint import load_checkpoint, save_checkpoint
from grurec.data import AugmentSpec, label_vocabulary, load_dataset, save_dataset, split_user_dependent, synth_generate
from grurec.errors import ConfigError, DataError, GrurecError
from grurec.gradcheck import TOLERANCE, run_suite
from grurec.model import DEFAULT_WIDTHS, THREE_STACK_WIDTHS, ModelConfig, build_model, predict_proba
from grurec.tensor import SeededRng, dtype_for
from grurec.train import TrainConfig, evaluate, train, write_history

log = logging.getLogger("grurec")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj) + "\n")
    sys.stdout.flush()


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _seed(args) -> int:
    env = os.environ.get("GRUREC_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"GRUREC_SEED must be an integer, got {env!r}") from None
    return args.seed


def _load(path, require_label=True):
    try:
        return load_dataset(path, require_label=require_label)
    except OSError as e:
        raise DataError(f"cannot read {path}: {e.strerror}") from None


def _on_off(value: str) -> bool:
    v = value.lower()
    if v in ("on", "true", "1", "yes"):
        return True
    if v in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {value!r}")


def _widths(value: str) -> tuple:
    try:
        widths = tuple(int(w) for w in value.split(",") if w.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"--hidden expects a comma list of integers, got {value!r}") from None
    if not widths or any(w < 1 for w in widths):
        raise argparse.ArgumentTypeError("--hidden needs at least one positive width")
    return widths


def add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=500, help="maximum epochs")
    p.add_argument("--patience", type=int, default=50, help="epochs without validation gain before stopping")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--beta1", type=float, default=0.9)
    p.add_argument("--beta2", type=float, default=0.999)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--stacks", type=int, choices=(3, 5), default=5, help="encoder depth (ignored with --hidden)")
    p.add_argument("--hidden", type=_widths, default=None, help="comma list of encoder widths")
    p.add_argument("--fc", type=int, choices=(1, 2), default=2, help="number of FC layers")
    p.add_argument("--fc-width", type=int, default=None)
    p.add_argument("--attention", type=_on_off, default=True, metavar="{on,off}")
    p.add_argument("--scale", type=float, default=0.3, help="random scaling factor")
    p.add_argument("--translate", type=float, default=1.0, help="random translation factor")
    p.add_argument("--rotate", type=float, default=0.0, help="random yaw factor in radians (needs --point-layout)")
    p.add_argument("--point-layout", action="store_true", help="features are concatenated 3-D points")
    p.add_argument("--gpsr", type=_on_off, default=True, metavar="{on,off}")
    p.add_argument("--gpsr-n", type=float, default=0.1, help="resample count factor")
    p.add_argument("--gpsr-r", type=float, default=0.05, help="remove count factor")
    p.add_argument("--no-augment", action="store_true", help="disable all augmentation")
    p.add_argument("--precision", type=int, choices=(32, 64), default=32)
    p.add_argument("--threads", type=int, default=1, help=">1 parallelises augmentation")
    p.add_argument("--no-timing", action="store_true", help="write elapsed_s as null for byte-reproducible history")


def configs_from_args(args, input_dim: int, num_classes: int):
    widths = args.hidden if args.hidden is not None else (DEFAULT_WIDTHS if args.stacks == 5 else THREE_STACK_WIDTHS)
    mcfg = ModelConfig(
        input_dim=input_dim,
        num_classes=num_classes,
        encoder_widths=widths,
        use_attention=args.attention,
        fc_count=args.fc,
        fc_width=args.fc_width,
        dropout_rate=args.dropout,
    )
    mcfg.validate()
    aug = AugmentSpec.none() if args.no_augment else AugmentSpec(
        scale_factor=args.scale,
        translate_factor=args.translate,
        rotate_factor=args.rotate,
        gpsr=args.gpsr,
        gpsr_n_factor=args.gpsr_n,
        gpsr_r_factor=args.gpsr_r,
        point_layout=args.point_layout,
    )
    tcfg = TrainConfig(
        lr=args.lr,
        beta1=args.beta1,
        beta2=args.beta2,
        batch_size=args.batch_size,
        weight_decay=args.weight_decay,
        max_epochs=args.epochs,
        patience=args.patience,
        seed=_seed(args),
        augmentation=aug,
        precision=args.precision,
        threads=args.threads,
        timing=not args.no_timing,
    )
    tcfg.validate()
    aug.validate(input_dim)
    return mcfg, tcfg


def _manifest(command, mcfg, tcfg, inputs, outputs) -> dict:
    return {
        "tool": "grurec",
        "version": __version__,
        "command": command,
        "seed": tcfg.seed,
        "variant": {
            "stacks": len(mcfg.encoder_widths),
            "fc": mcfg.fc_count,
            "attention": "on" if mcfg.use_attention else "off",
        },
        "model_config": mcfg.to_dict() | {"fc_width": mcfg.resolved_fc_width},
        "train_config": tcfg.to_dict(),
        "inputs": {str(p): _digest(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
    }


# --------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    train_set = _load(args.data)
    val_set = _load(args.val) if args.val else None
    labels = label_vocabulary(train_set)
    mcfg, tcfg = configs_from_args(args, train_set[0].dim, len(labels))
    model = build_model(mcfg, SeededRng(tcfg.seed), dtype=dtype_for(tcfg.precision), labels=labels)
    log.info("training %d samples, %d classes, widths %s", len(train_set), len(labels), list(mcfg.encoder_widths))
    model, history = train(model, train_set, val_set, tcfg)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    hist_path = Path(args.history) if args.history else out.with_name(out.name + ".history.jsonl")
    man_path = Path(args.manifest) if args.manifest else out.with_name(out.name + ".manifest.json")
    save_checkpoint(model, out)
    write_history(history, hist_path)
    inputs = [args.data] + ([args.val] if args.val else [])
    manifest = _manifest("train", mcfg, tcfg, inputs, [out, hist_path])
    man_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    best = max(h.val_acc for h in history)
    _emit({"checkpoint": str(out), "history": str(hist_path), "manifest": str(man_path), "epochs": len(history),
           "best_val_acc": best, "final_train_acc": history[-1].train_acc})
    return EXIT_OK


def _load_model(path):
    try:
        return load_checkpoint(path)
    except OSError as e:
        raise DataError(f"cannot read model {path}: {e.strerror}") from None


def cmd_eval(args) -> int:
    model = _load_model(args.model)
    data = _load(args.data)
    _emit(evaluate(model, data).to_dict())
    return EXIT_OK


def cmd_predict(args) -> int:
    model = _load_model(args.model)
    samples = _load(args.input, require_label=False)
    probs = predict_proba(model, samples)
    for s, p in zip(samples, probs):
        _emit({"id": s.id, "label": model.labels[int(np.argmax(p))], "probs": [float(x) for x in p]})
    return EXIT_OK


def cmd_synth(args) -> int:
    seed = _seed(args)
    train_set, test_set = synth_generate(args.classes, args.train_per_class, args.test_per_class, args.dim,
                                         SeededRng(seed), subjects=args.subjects)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(train_set, out / "synth_train.jsonl")
    save_dataset(test_set, out / "synth_test.jsonl")
    _emit({"train": str(out / "synth_train.jsonl"), "test": str(out / "synth_test.jsonl"),
           "n_train": len(train_set), "n_test": len(test_set), "seed": seed})
    return EXIT_OK


def run_protocol_t(samples, T: int, mcfg_args, seed: int, log_each=None) -> dict:
    """Train and test one model per participant; ``mcfg_args`` is the parsed
    namespace holding the training flags."""
    labels = label_vocabulary(samples)
    splits = split_user_dependent(samples, T, seed)
    rows = []
    for split in splits:
        mcfg, tcfg = configs_from_args(mcfg_args, samples[0].dim, len(labels))
        model = build_model(mcfg, SeededRng(seed, "participant", split.subject), dtype=dtype_for(tcfg.precision), labels=labels)
        train(model, split.train, None, tcfg)
        acc = evaluate(model, split.test).accuracy
        rows.append({"subject": split.subject, "accuracy": acc, "n_train": len(split.train), "n_test": len(split.test)})
        if log_each is not None:
            log_each(rows[-1])
    return {
        "T": T,
        "seed": seed,
        "n_participants": len(rows),
        "participants": rows,
        "mean_accuracy": float(np.mean([r["accuracy"] for r in rows])),
    }


def cmd_protocol_t(args) -> int:
    samples = _load(args.data)
    seed = _seed(args)
    report = run_protocol_t(samples, args.T, args, seed, log_each=lambda r: log.info("participant %s: %.3f", r["subject"], r["accuracy"]))
    _emit(report)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_suite(seed=args.seed, trials=args.trials, model_trials=args.model_trials, perturb=args.perturb)
    failed = [r.component for r in results if not r.passed]
    _emit({
        "tolerance": TOLERANCE,
        "components": [{"component": r.component, "max_rel_error": r.max_rel_error, "passed": r.passed} for r in results],
        "passed": not failed,
    })
    if failed:
        sys.stderr.write(f"error: gradient check failed for: {', '.join(failed)}\n")
        return EXIT_CHECK
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="grurec", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"grurec {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a JSONL dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--val", default=None, help="validation JSONL (default: stratified 10%% of --data)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history", default=None)
    p.add_argument("--manifest", default=None)
    add_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="print accuracy/confusion metrics as JSON")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="one JSON line of class probabilities per sample")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("synth", help="write a synthetic gesture dataset")
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--train-per-class", type=int, default=20)
    p.add_argument("--test-per-class", type=int, default=20)
    p.add_argument("--dim", type=int, default=6)
    p.add_argument("--subjects", type=int, default=None, help="per-subject counts with subject ids")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("protocol-t", help="user-dependent T-samples-per-class protocol")
    p.add_argument("--data", required=True)
    p.add_argument("--T", type=int, required=True)
    add_training_flags(p)
    p.set_defaults(func=cmd_protocol_t)

    p = sub.add_parser("gradcheck", help="64-bit finite-difference check of every backward pass")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--model-trials", type=int, default=1)
    p.add_argument("--perturb", default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except GrurecError as e:
        log.error("%s", e)
        sys.stderr.write(f"error: {e}\n")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
