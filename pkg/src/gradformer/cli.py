"""Command-line entry point: ``gradformer {synth,train,eval,infer,gradcheck,params}``.

Exit status is 0 on success, 1 on runtime failure, 2 on usage errors.
Set ``GRADFORMER_THREADS`` to cap BLAS threads.
"""

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

from . import tensor as T
from .config import load_config
from .data_io import (load_checkpoint, load_split, read_image, save_checkpoint, synth_generate,
                      write_mask, write_tensor)
from .decoder import predict
from .errors import ConfigError, DimensionError, FormatError
from .metrics import MetricsReport
from .model import REFERENCE_PARAMS, build, count_parameters, parameter_groups
from .training import evaluate, train

logger = logging.getLogger("gradformer")

_LOSS_FLAGS = {"ce": "cross_entropy", "focal": "focal", "miou": "miou"}
_ATTENTION_FLAGS = {"diff": "differential", "simple": "simple"}


def _thread_limit():
    n = os.environ.get("GRADFORMER_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(int(n))


def cmd_synth(args, parser):
    if args.size <= 0 or args.size % 32:
        parser.error("size must be divisible by 32")
    splits = synth_generate(args.num, args.size, args.seed, args.out)
    print(" ".join(f"{k}={len(v)}" for k, v in splits.items()))


def cmd_train(args, parser):
    model_cfg, train_cfg = load_config(args.config)
    changes = {"epochs": args.epochs}
    if args.seed is not None:
        model_cfg = model_cfg.replace(seed=args.seed)
        changes["seed"] = args.seed
    if args.loss:
        changes["loss"] = _LOSS_FLAGS[args.loss]
    if args.lr is not None:
        changes["lr0"] = args.lr
    if args.attention:
        model_cfg = model_cfg.replace(attention=_ATTENTION_FLAGS[args.attention])
    train_cfg = train_cfg.replace(**changes).validate()
    train_set = load_split(args.data, "train")
    val_set = load_split(args.data, "val")
    model = build(model_cfg)
    out = Path(args.out)
    log_path = out.with_name(out.name + ".log")
    with open(log_path, "w", encoding="utf-8", newline="\n") as log_file:
        def log(line):
            log_file.write(line + "\n")
            log_file.flush()
            print(line, flush=True)

        result = train(model, train_set, val_set, train_cfg, log=log)
    model.load_state_dict(result.best_state)
    save_checkpoint(out, model, train_cfg)
    print(f"best_epoch={result.best_epoch} best_val_f1={result.best_f1:g} checkpoint={out}")


def cmd_eval(args, parser):
    model, _, _ = load_checkpoint(args.ckpt)
    dataset = load_split(args.data, args.split)
    report = MetricsReport.from_counts(evaluate(model, dataset))
    text = report.to_text()
    Path(args.report).write_bytes(text.encode("utf-8"))
    sys.stdout.write(text)


def cmd_infer(args, parser):
    model, _, _ = load_checkpoint(args.ckpt)
    pre, post = read_image(args.pre), read_image(args.post)
    if pre.shape != post.shape:
        raise DimensionError(f"pre image {pre.shape[1:]} and post image {post.shape[1:]} differ in size")
    if pre.shape[1] % 32 or pre.shape[2] % 32:
        raise DimensionError(f"image size {pre.shape[1]}x{pre.shape[2]} must be divisible by 32")
    with T.no_grad():
        logits = model(T.Tensor(pre[None]), T.Tensor(post[None]))
    write_mask(args.out, predict(logits)[0])
    if args.logits:
        write_tensor(args.logits, logits.data)


def cmd_gradcheck(args, parser):
    from .checks import check_model, suite

    failed = False
    for name, report in suite(tol=args.tol):
        if name == "model" and args.config != "tiny":
            model_cfg, _ = load_config(args.config)
            with T.float64_mode():
                report = check_model(model_cfg, tol=args.tol)
        status = "PASS" if report.passed else "FAIL"
        failed |= not report.passed
        print(f"{name:<18} max_rel_err={report.max_rel_error:.3e} {status}", flush=True)
    if failed:
        return 1
    return 0


def cmd_params(args, parser):
    model_cfg, _ = load_config(args.config)
    model = build(model_cfg)
    total = count_parameters(model)
    for group, n in parameter_groups(model).items():
        print(f"{group}={n}")
    print(f"tensors={len(model.parameters())}")
    print(f"total={total}")
    deviation = 100.0 * (total - REFERENCE_PARAMS) / REFERENCE_PARAMS
    print(f"reference=10.90M deviation={deviation:+.2f}%")


def build_parser():
    parser = argparse.ArgumentParser(prog="gradformer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a seeded synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num", type=int, required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train and keep the best-validation checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True, help="preset name (tiny/default) or config file")
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float, help="override the initial learning rate")
    p.add_argument("--loss", choices=sorted(_LOSS_FLAGS))
    p.add_argument("--attention", choices=sorted(_ATTENTION_FLAGS))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="micro-averaged metrics on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict a change mask for one image pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pre", required=True)
    p.add_argument("--post", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--logits")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="float64 finite-difference gradient suite")
    p.add_argument("--config", default="tiny")
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", help="parameter counts")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_params)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            status = args.func(args, parser)
    except (ConfigError, FormatError, DimensionError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"gradformer {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return status or 0


if __name__ == "__main__":
    sys.exit(main())
