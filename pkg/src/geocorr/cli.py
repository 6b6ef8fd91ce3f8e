"""``geocorr`` command line: datagen, train, eval, gradcheck, ablate, config.

Exit codes: 0 success, 2 validation failure, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import RunConfig, dump_config, load_config, parse_layers
from .data import build_dataset, read_dataset, write_dataset
from .errors import GeoCorrError, NumericalError
from .evaluation import ablation_sweep, evaluate, write_ablation_csv
from .gradcheck import LOSS_NAMES, TOLERANCE, run_gradcheck, wrong_sign_hook
from .model import init_model
from .trainer import train

log = logging.getLogger("geocorr")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3


def _overrides(args) -> dict:
    o: dict = {}

    def put(section, key, value):
        if value is not None:
            o.setdefault(section, {})[key] = value

    if getattr(args, "seed", None) is not None:
        o["seed"] = args.seed
    put("data", "num_train", getattr(args, "num_train", None))
    put("data", "num_test", getattr(args, "num_test", None))
    put("train", "epochs", getattr(args, "epochs", None))
    put("train", "peak_lr", getattr(args, "peak_lr", None))
    put("train", "lora_rank", getattr(args, "lora_rank", None))
    hl = getattr(args, "head_layers", None)
    put("train", "head_layers", list(parse_layers(hl)) if hl else None)
    put("loss", "lambda_c", getattr(args, "lambda_c", None))
    put("loss", "lambda_d", getattr(args, "lambda_d", None))
    put("eval", "num_sequences", getattr(args, "num_sequences", None))
    return o


def _config(args) -> RunConfig:
    return load_config(getattr(args, "config", None), _overrides(args))


def cmd_datagen(args) -> int:
    cfg = _config(args)
    out = Path(args.out or cfg.paths.data_dir)
    ds = build_dataset(cfg.data)
    write_dataset(ds, out)
    print(f"wrote {len(ds.split('train'))} train + {len(ds.split('test'))} test sequences to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    data_dir = Path(args.data or cfg.paths.data_dir)
    out = Path(args.out or cfg.paths.checkpoint_dir)
    ds = read_dataset(data_dir, splits=("train",))
    mcfg = cfg.model_config()
    model = init_model(mcfg, cfg.seed)
    res = train(model, ds.split("train"), cfg.train, cfg.loss, cfg.data.grammar, out_dir=out)
    last_geo = next((r for r in reversed(res.log) if r["kind"] == "geo"), res.log[-1])
    print(
        f"trained {len(res.log)} steps; final L_total={last_geo['L_total']:.4f} "
        f"L_LM={last_geo['L_LM']:.4f} L_corr={last_geo['L_corr']} L_depth={last_geo['L_depth']}"
    )
    print(f"checkpoint: {res.checkpoints[-1]}")
    return EXIT_OK


def _fmt(x) -> str:
    return "undefined" if x is None or not math.isfinite(x) else f"{x:.4f}"


def cmd_eval(args) -> int:
    cfg = _config(args)
    data_dir = Path(args.data or cfg.paths.data_dir)
    out = Path(args.out or cfg.paths.report_dir)
    if args.untrained:
        model = init_model(cfg.model_config(), cfg.seed)
    else:
        if not args.checkpoint:
            print("eval needs --checkpoint or --untrained", file=sys.stderr)
            return EXIT_VALIDATION
        model, _ = load_checkpoint(args.checkpoint)
    ds = read_dataset(data_dir, splits=("test",))
    report = evaluate(model, ds.split("test"), cfg.eval)
    paths = report.write(out)
    for name, src in (("qk", report.qk), ("head", report.head)):
        b = src.best
        if b is None:
            print(f"{name}: no layers")
            continue
        print(
            f"{name}: best layer {b.layer} PCK@{cfg.eval.pck_threshold:g}={_fmt(b.pck_mean)}"
            f"±{_fmt(b.pck_std)} rho={_fmt(b.rho)} Y(24)={_fmt(src.y_curve.get(24))}"
        )
    print(f"chance PCK={report.chance:.4f}; reports: {', '.join(str(p) for p in paths)}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    losses = tuple(args.loss) if args.loss else LOSS_NAMES
    res = run_gradcheck(
        losses=losses,
        analytic_hook=wrong_sign_hook if args.wrong_sign else None,
        include_closed_form=not args.loss,
    )
    for name, rep in res.reports.items():
        status = "PASS" if rep.passed(TOLERANCE) else "FAIL"
        print(f"{name:6s} max_rel_err={rep.max_rel_error:.3e} mean_rel_err={rep.mean_rel_error:.3e} {status}")
    if res.closed_form_gap is not None:
        status = "PASS" if res.closed_form_gap < 1e-8 else "FAIL"
        print(f"closed-form InfoNCE gradient max_abs_gap={res.closed_form_gap:.3e} {status}")
    return EXIT_OK if res.passed else EXIT_NUMERICAL


def _ablation_values(axis: str, raw: list[str], num_layers: int):
    if axis == "lora_rank":
        return [int(v) for v in raw]
    vals = []
    for v in raw:
        if v == "all":
            vals.append(tuple(range(1, num_layers + 1)))
        elif v == "last-quarter":
            k = max(1, num_layers // 4)
            vals.append(tuple(range(num_layers - k + 1, num_layers + 1)))
        else:
            vals.append(parse_layers(v))
    return vals


def cmd_ablate(args) -> int:
    cfg = _config(args)
    data_dir = Path(args.data or cfg.paths.data_dir)
    out = Path(args.out or cfg.paths.report_dir)
    ds = read_dataset(data_dir)
    base = cfg.model_config()
    values = _ablation_values(args.axis, args.values, base.num_layers)

    def train_fn(value):
        from dataclasses import replace

        tcfg = replace(cfg.train, **{args.axis: value})
        mcfg = replace(base, **{args.axis: value})
        model = init_model(mcfg, cfg.seed)
        return model, train(model, ds.split("train"), tcfg, cfg.loss, cfg.data.grammar).log

    rows = ablation_sweep(args.axis, values, train_fn, ds.split("test"), cfg.eval)
    path = write_ablation_csv(rows, out / f"ablation_{args.axis}.csv", args.axis)
    for r in rows:
        print(f"{args.axis}={r.value}: avg PCK={_fmt(r.avg_pck)} final L_corr={_fmt(r.final_l_corr)}")
    print(f"table: {path}")
    return EXIT_OK


def cmd_config(args) -> int:
    print(dump_config(_config(args)), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="geocorr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, out=True):
        sp.add_argument("--config", help="YAML run config")
        sp.add_argument("--seed", type=int)
        if data:
            sp.add_argument("--data", help="dataset directory")
        if out:
            sp.add_argument("--out", help="output directory")

    def training_flags(sp):
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--peak-lr", type=float)
        sp.add_argument("--lora-rank", type=int)
        sp.add_argument("--head-layers", help='layer range such as "2-4" or list "1,4"')
        sp.add_argument("--lambda-c", type=float)
        sp.add_argument("--lambda-d", type=float)

    sp = sub.add_parser("datagen", help="render the synthetic dataset")
    common(sp, data=False)
    sp.add_argument("--num-train", type=int)
    sp.add_argument("--num-test", type=int)
    sp.set_defaults(func=cmd_datagen)

    sp = sub.add_parser("train", help="train a model on the train split")
    common(sp)
    training_flags(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--untrained", action="store_true", help="evaluate the seed-initialised model")
    sp.add_argument("--num-sequences", type=int)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every loss on a micro model")
    sp.add_argument("--loss", action="append", choices=LOSS_NAMES, help="restrict to this loss (repeatable)")
    sp.add_argument("--wrong-sign", action="store_true", help="negative control: flip analytic gradients")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("ablate", help="train and score one model per value")
    common(sp)
    training_flags(sp)
    sp.add_argument("--axis", required=True, choices=("lora_rank", "head_layers"))
    sp.add_argument("--values", nargs="+", required=True, help='e.g. "4 8 16" or "all last-quarter 2-4"')
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("config", help="print the merged run config as YAML")
    common(sp, data=False, out=False)
    training_flags(sp)
    sp.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except GeoCorrError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
