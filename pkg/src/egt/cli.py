"""Command-line entry point: ``egt <subcommand> ...``.

Reports go to files; progress goes to stderr.  Exit status is 0 on success,
1 for invalid input (flags, config, missing or malformed files) and 2 for
failures while running.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import tensor as T
from .config import load_config
from .data import Dataset, gen_synthetic, load_dataset, save_dataset
from .errors import ConfigError, FormatError
from .inference import ExitPolicy
from .model import load_checkpoint, model_new
from .report import (
    ConsistencyReport,
    ConsistencyRow,
    attention_consistency,
    consistency_table,
    efficiency_table,
    export_attention,
    model_label,
    write_json,
    write_summary,
)
from .train import MetricSink, train

log = logging.getLogger("egt")

DEFAULT_ALPHAS = "0,0.1,0.2,0.3,0.4,0.5"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="egt", description="Explanation-guided training for early-exit CNNs.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write synthetic train/test splits")
    g.add_argument("--out", required=True, help="output directory (train.egtd, test.egtd)")
    g.add_argument("--per-class", type=int, default=152)
    g.add_argument("--test-per-class", type=int, default=None, help="defaults to --per-class")
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--difficulty", choices=("easy", "mixed"), default="easy")

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--config")
    t.add_argument("--data", help="defaults to the config's data key")
    t.add_argument("--out-ckpt", required=True)
    t.add_argument("--metrics", required=True)

    s = sub.add_parser("sweep", help="train the baseline and every alpha, then tabulate consistency")
    s.add_argument("--config")
    s.add_argument("--data", help="defaults to the config's data key")
    s.add_argument("--alphas", default=DEFAULT_ALPHAS)
    s.add_argument("--out-dir", help="defaults to the config's out_dir key")

    e = sub.add_parser("eval", help="attention consistency and accuracy of one checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--tau", type=float, default=0.9)
    e.add_argument("--out-dir", help="defaults to the checkpoint's directory")

    b = sub.add_parser("bench", help="per-sample latency with and without early exits")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--tau", type=float, default=0.9)
    b.add_argument("--out-dir", help="defaults to the checkpoint's directory")

    x = sub.add_parser("export-attn", help="write attention heatmaps for selected samples")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--ids", required=True, help="comma-separated sample indices")
    x.add_argument("--out-dir", required=True)
    return p


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such file or directory: {path}")
    return p


def _load_split(data: str, split: str) -> Dataset:
    """``data`` is a gen-data directory or a single .egtd file."""
    p = _existing(data)
    if p.is_dir():
        p = _existing(str(p / f"{split}.egtd"))
    return load_dataset(p, split)


def _load_optional_split(data: str, split: str) -> Dataset | None:
    p = Path(data)
    if p.is_dir() and (p / f"{split}.egtd").exists():
        return load_dataset(p / f"{split}.egtd", split)
    return None


def _parse_floats(text: str, flag: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(flag, f"expected comma-separated numbers, got {text!r}") from None


def _from_config(flag_value: str | None, cfg, key: str) -> str:
    value = flag_value or getattr(cfg, key)
    if not value:
        raise ConfigError(key, f"no --{key.replace('_', '-')} flag and no {key!r} in the config")
    return value


def _out_dir(args) -> Path:
    out = Path(args.out_dir) if args.out_dir else Path(args.ckpt).resolve().parent
    out.mkdir(parents=True, exist_ok=True)
    return out


def _train_one(cfg, train_ds, test_ds, ckpt: Path, metrics: Path):
    with T.precision(cfg.precision), open(metrics, "w", newline="") as fh:
        model = model_new(cfg.model_config(), cfg.seed)
        train(model, train_ds, cfg.train_config(), MetricSink(fh), eval_dataset=test_ds,
              eval_every=cfg.eval_every, checkpoint_path=ckpt, checkpoint_every=cfg.checkpoint_every)
    return model


def cmd_gen_data(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_test = args.test_per_class or args.per_class
    # test split uses the next seed so it never repeats a training image stream
    for split, n, seed in (("train", args.per_class, args.seed), ("test", n_test, args.seed + 1)):
        ds = gen_synthetic(n, args.size, seed, args.difficulty, split)
        save_dataset(ds, out / f"{split}.egtd")
        log.info("wrote %s (%d samples)", out / f"{split}.egtd", len(ds))


def cmd_train(args) -> None:
    cfg = load_config(args.config)
    data = _from_config(args.data, cfg, "data")
    train_ds = _load_split(data, "train")
    test_ds = _load_optional_split(data, "test")
    Path(args.out_ckpt).parent.mkdir(parents=True, exist_ok=True)
    Path(args.metrics).parent.mkdir(parents=True, exist_ok=True)
    _train_one(cfg, train_ds, test_ds, Path(args.out_ckpt), Path(args.metrics))
    log.info("wrote %s", args.out_ckpt)


def cmd_sweep(args) -> None:
    base = load_config(args.config)
    alphas = _parse_floats(args.alphas, "alphas")
    if not alphas:
        raise ConfigError("alphas", "empty list")
    data = _from_config(args.data, base, "data")
    train_ds = _load_split(data, "train")
    test_ds = _load_optional_split(data, "test") or train_ds
    out = Path(_from_config(args.out_dir, base, "out_dir"))
    out.mkdir(parents=True, exist_ok=True)
    checkpoints = []
    for alpha in alphas:
        cfg = load_config(args.config, alpha=alpha)
        ckpt = out / f"alpha_{alpha:g}.egtc"
        log.info("training alpha=%g", alpha)
        _train_one(cfg, train_ds, test_ds, ckpt, out / f"metrics_alpha_{alpha:g}.csv")
        checkpoints.append((model_label(alpha), ckpt))
    policy = base.exit_policy()
    report = consistency_table(checkpoints, test_ds, policy)
    (out / "consistency.csv").write_text(report.to_csv())
    (out / "consistency.txt").write_text(report.to_text())
    # efficiency is reported for the largest alpha, mirroring the single-model timing table
    eff, _ = efficiency_table(checkpoints[alphas.index(max(alphas))][1], test_ds, policy)
    (out / "efficiency.txt").write_text(eff.to_text())
    write_summary(out / "summary.json", report, eff)
    log.info("\n%s", report.to_text())


def cmd_eval(args) -> None:
    model = load_checkpoint(_existing(args.ckpt))
    ds = _load_split(args.data, "test")
    res = attention_consistency(model, ds, ExitPolicy(args.tau))
    report = ConsistencyReport(threshold=args.tau)
    report.rows.append(ConsistencyRow(model_label(model.meta.get("alpha")), model.meta.get("alpha"),
                                      res.per_exit, res.average, 100.0 * res.accuracy))
    out = _out_dir(args)
    stem = Path(args.ckpt).stem
    (out / f"{stem}.eval.csv").write_text(report.to_csv())
    (out / f"{stem}.eval.txt").write_text(report.to_text())
    write_summary(out / f"{stem}.eval.json", report)
    log.info("\n%s", report.to_text())


def cmd_bench(args) -> None:
    model = load_checkpoint(_existing(args.ckpt))
    ds = _load_split(args.data, "test")
    eff, cmp = efficiency_table(model, ds, ExitPolicy(args.tau))
    out = _out_dir(args)
    stem = Path(args.ckpt).stem
    write_json(out / f"{stem}.bench.json", eff.to_dict())
    (out / f"{stem}.bench.txt").write_text(eff.to_text())
    cmp.with_exit.write_csv(out / f"{stem}.trace_with.csv")
    cmp.without_exit.write_csv(out / f"{stem}.trace_without.csv")
    log.info("\n%s", eff.to_text())


def cmd_export_attn(args) -> None:
    model = load_checkpoint(_existing(args.ckpt))
    ds = _load_split(args.data, "test")
    ids = [int(v) for v in _parse_floats(args.ids, "ids")]
    bad = [i for i in ids if not 0 <= i < len(ds)]
    if bad:
        raise ConfigError("ids", f"indices {bad} outside dataset of {len(ds)} samples")
    files = export_attention(model, ds, ids, args.out_dir)
    log.info("wrote %d files to %s", len(files), args.out_dir)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "export-attn": cmd_export_attn,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(asctime)s %(levelname)s %(message)s")
    try:
        args = _parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    threads = os.environ.get("EGT_THREADS")
    limit = threadpool_limits(int(threads)) if threads else contextlib.nullcontext()
    try:
        with limit:
            COMMANDS[args.command](args)
    except (ConfigError, FormatError, FileNotFoundError, IsADirectoryError) as exc:
        log.error("%s", exc)
        return 1
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        log.exception("%s failed: %s", args.command, exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
