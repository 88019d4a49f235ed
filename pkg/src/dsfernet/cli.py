"""Command-line entry point: ``dsfernet <subcommand> ...``.

Exit codes: 0 success, 2 configuration or shape error, 3 data error,
4 numeric failure (including a failed gradient check), 1 anything else
raised by the package.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import Optional, Sequence

from .config import PRESETS, RunConfig, load_config
from .errors import ConfigError, DataError, DsferError, NumericError

log = logging.getLogger("dsfernet")

METRIC_KEYS = ("P", "R", "F1", "OA", "IoU")


def _thread_limit():
    raw = os.environ.get("DSFER_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"DSFER_THREADS must be a positive integer, got {raw!r}") from None
    if n <= 0:
        raise ConfigError(f"DSFER_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _config(args) -> RunConfig:
    return load_config(args.config, args.set, args.preset)


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- subcommands

def cmd_synth(args) -> int:
    from .data import save_dataset, synth_generate

    if args.size % 16:
        raise ConfigError("--size must be divisible by 16")
    samples = synth_generate(args.seed, args.n, args.size, args.difficulty)
    save_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .train import evaluate, train

    cfg = _config(args)
    out = Path(args.out or cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_dict())
    result = train(cfg, out_dir=out)
    report = evaluate(result.best, "test", cfg, list(result.samples.values()))
    _write_json(out / "test_metrics.json", _report_payload(report, str(out / "best.ckpt")))
    print(f"best val F1 {100 * result.best.val_metrics['F1']:.2f} at iteration {result.best.iteration}")
    _print_metrics(report["metrics"])
    return 0


def _report_payload(report: dict, checkpoint: Optional[str]) -> dict:
    from .metrics import as_percentages

    return {
        "part": report["part"],
        "n_samples": report["n_samples"],
        "checkpoint": checkpoint,
        "iteration": report.get("iteration"),
        "confusion": report["confusion"],
        "metrics": {k: report["metrics"][k] for k in METRIC_KEYS},
        "percent": {k: as_percentages(report["metrics"])[k] for k in METRIC_KEYS},
    }


def _print_metrics(m: dict) -> None:
    for k in METRIC_KEYS:
        print(f"{k}: {100 * m[k]:.2f}")


def _score_prediction_dir(pred_dir: Path, cfg: RunConfig, part: str) -> dict:
    """Score binary prediction PNGs named ``<id>.png`` against the dataset labels."""
    from .data import read_label
    from .metrics import ConfusionCounts, confusion, metrics
    from .train import prepare_data

    by_id, split_ = prepare_data(cfg)
    ids = split_.part(part) if part != "all" else sorted(by_id)
    cc = ConfusionCounts()
    for sid in ids:
        path = pred_dir / f"{sid}.png"
        if not path.exists():
            raise DataError(f"sample {sid!r}: missing prediction {path}")
        pred = read_label(path)
        if pred.shape != by_id[sid].label.shape:
            raise DataError(f"sample {sid!r}: prediction {pred.shape} vs label {by_id[sid].label.shape}")
        cc = cc + confusion(pred, by_id[sid].label)
    return {"part": part, "n_samples": len(ids), "confusion": cc.as_dict(), "metrics": metrics(cc), "iteration": None}


def cmd_eval(args) -> int:
    from .train import evaluate

    cfg = _config(args)
    if args.pred_dir:
        report = _score_prediction_dir(Path(args.pred_dir), cfg, args.part)
        source = None
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint or --pred-dir")
        report = evaluate(args.checkpoint, args.part if args.part != "all" else "test", cfg)
        source = str(args.checkpoint)
    payload = _report_payload(report, source)
    _print_metrics(report["metrics"])
    if args.json:
        _write_json(Path(args.json), payload)
    return 0


def _load_net(path: str, cfg: Optional[RunConfig]):
    from .checkpoint import load_checkpoint
    from .train import net_from_checkpoint

    return net_from_checkpoint(load_checkpoint(path, expect=cfg))


def cmd_infer(args) -> int:
    from .data import read_image, read_label
    from .train import infer
    from .viz import save_infer

    cfg = _config(args) if (args.config or args.preset or args.set) else None
    net = _load_net(args.checkpoint, cfg)
    x1, x2 = read_image(Path(args.t1)), read_image(Path(args.t2))
    if x1.shape != x2.shape:
        raise DataError(f"t1 {x1.shape} and t2 {x2.shape} differ in size")
    label = read_label(Path(args.label)) if args.label else None
    result = infer(net, x1, x2, label)
    for kind, path in save_infer(result, args.out, Path(args.t1).stem).items():
        print(f"{kind}: {path}")
    return 0


def cmd_gradcheck(args) -> int:
    import time

    from .gradcheck import format_rows, run_suite

    start = time.perf_counter()
    rows = run_suite(args.scale)
    print(format_rows(rows))
    print(f"total {time.perf_counter() - start:.1f}s")
    if args.json:
        _write_json(Path(args.json), {
            "scale": args.scale,
            "rows": [{"name": r.name, "kind": r.kind, "max_rel_error": r.error, "passed": r.passed} for r in rows],
        })
    if not all(r.passed for r in rows):
        raise NumericError("gradient check failed: " + ", ".join(r.name for r in rows if not r.passed))
    return 0


def cmd_viz_hopfield(args) -> int:
    from .checkpoint import load_checkpoint
    from .train import load_samples, net_from_checkpoint
    from .viz import export_retrieval

    cfg = _config(args) if (args.config or args.preset or args.set) else None
    ckpt = load_checkpoint(args.checkpoint, expect=cfg)
    net = net_from_checkpoint(ckpt)
    samples = {s.id: s for s in load_samples(cfg or ckpt.config)}
    ids = args.sample_id or sorted(samples)[:1]
    for sid in ids:
        if sid not in samples:
            raise DataError(f"unknown sample id {sid!r}")
        for kind, path in export_retrieval(net, samples[sid], args.out).items():
            print(f"{sid} {kind}: {path}")
    return 0


def cmd_ablate(args) -> int:
    from .train import ablation, format_ablation_table

    cfg = _config(args)
    rows = ablation(cfg, seeds=args.seeds)
    print(format_ablation_table(rows))
    if args.json:
        _write_json(Path(args.json), {"rows": rows})
    return 0


def cmd_sweep_lambda(args) -> int:
    from .train import format_lambda_table, lambda_sweep

    cfg = _config(args)
    rows = lambda_sweep(cfg, args.lambdas)
    print(format_lambda_table(rows))
    if args.json:
        _write_json(Path(args.json), {"rows": rows})
    return 0


# ---------------------------------------------------------------- parser

def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--preset", choices=sorted(PRESETS), help="start from a named preset")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-key override applied after the config file, e.g. loss.lambda=0.5")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dsfernet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="materialise a synthetic dataset as PNG folders")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--difficulty", type=int, default=1, choices=[0, 1, 2])
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train and keep the best-validation checkpoint")
    _add_config_args(p)
    p.add_argument("--out", help="output directory (default: paths.out_dir)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint, or a folder of prediction PNGs")
    _add_config_args(p)
    p.add_argument("--checkpoint")
    p.add_argument("--pred-dir", help="binary prediction PNGs named <id>.png")
    p.add_argument("--part", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--json", help="write the report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict one image pair")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--t1", required=True)
    p.add_argument("--t2", required=True)
    p.add_argument("--label", help="optional ground truth for the confusion image")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and three composite graphs")
    p.add_argument("--scale", default="small", choices=["small", "large"])
    p.add_argument("--json")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("viz-hopfield", help="export retrieved-map panels for samples")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample-id", action="append", help="repeatable; default: first sample")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_viz_hopfield)

    p = sub.add_parser("ablate", help="train the four decoder/retrieval variants over seeds")
    _add_config_args(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--json")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-lambda", help="retrain for each dice weight and tabulate F1/OA")
    _add_config_args(p)
    p.add_argument("--lambdas", type=float, nargs="+", default=[0.0, 0.01, 0.1, 1.0, 10.0])
    p.add_argument("--json")
    p.set_defaults(func=cmd_sweep_lambda)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except DsferError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
