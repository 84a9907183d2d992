"""Command-line front end: ``mts-lab {backtest,train,synthetic,ablate,report}``.

Any ``--section.key value`` (or ``--section.key=value``) flag overrides the
matching config entry. Exit codes: 0 success, 2 config error, 3 data error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

from . import pipeline
from .config import RunConfig, SEED_ENV, parse_override_value
from .data import write_ohlcv
from .errors import ConfigError, MalformedData, MTSError, NotFound
from .metrics import REFERENCE_RESULTS, format_table, parse_report, report_json
from .synthetic import KINDS, generate

log = logging.getLogger("mts_lab")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def split_overrides(extra: Sequence[str]) -> list[tuple[str, Any]]:
    out, i = [], 0
    extra = list(extra)
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise ConfigError(f"unrecognised argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"override {tok} needs a value")
            raw = extra[i + 1]
            i += 2
        out.append((key, parse_override_value(raw)))
    return out


def _config(args, extra) -> RunConfig:
    overrides = split_overrides(extra)
    if getattr(args, "seed", None) is not None:
        overrides.append(("seed", args.seed))
    if getattr(args, "output_dir", None):
        overrides.append(("output.dir", args.output_dir))
    return RunConfig.from_sources(args.config, overrides)


def cmd_backtest(args, extra) -> int:
    cfg = _config(args, extra)
    res = pipeline.run_backtest(cfg, args.variant)
    print(format_table({f"{res.info['agent']} ({res.variant})": res.report.values()}))
    print(f"outputs written to {res.out_dir}")
    return EXIT_OK


def cmd_train(args, extra) -> int:
    cfg = _config(args, extra)
    cfg.check_paths()
    panel = pipeline.market_panel(cfg)
    train, _ = pipeline.split_panel(cfg, panel)
    out = cfg.output_dir
    resume = Path(args.resume) if args.resume else None
    if resume is not None and not resume.is_file():
        raise ConfigError(f"checkpoint {resume} not found")
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_echo(out / "config.toml")
    trainer = pipeline.train_policy(cfg, train, args.variant, out, resume=resume)
    print(f"trained to update {trainer.update_index}; "
          f"{trainer.policy.num_parameters()} parameters; checkpoint {out / cfg['train.checkpoint']}")
    return EXIT_OK


def cmd_synthetic(args, extra) -> int:
    if args.days < 2:
        raise ConfigError("--days must be >= 2")
    series = generate(args.kind, args.days, seed=args.seed if args.seed is not None else _env_seed(),
                      n_stocks=args.stocks)
    out = Path(args.output_dir) / f"{args.kind}.csv"
    write_ohlcv(out, series)
    idx = series[-1].close
    print(f"{args.kind}: {args.days} days, {args.stocks} stocks + index {series[-1].ticker}")
    print(f"index cumulative return {idx[-1] / idx[0] - 1.0:.6%}")
    print(f"written to {out}")
    return EXIT_OK


def _env_seed() -> int:
    raw = os.environ.get(SEED_ENV, "")
    try:
        return int(raw) if raw else 0
    except ValueError as exc:
        raise ConfigError(f"{SEED_ENV}={raw!r} is not an integer") from exc


def cmd_ablate(args, extra) -> int:
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    bad = [v for v in variants if v not in pipeline.VARIANTS]
    if bad or not variants:
        raise ConfigError(f"unknown variant(s) {bad}; choose from {pipeline.VARIANTS}")
    cfg = _config(args, extra)
    pipeline.run_ablation(cfg, variants)
    print((cfg.output_dir / "ablation.txt").read_text(encoding="utf-8"), end="")
    return EXIT_OK


def cmd_report(args, extra) -> int:
    if extra:
        raise ConfigError(f"unrecognised arguments {list(extra)}")
    rows, reports = {}, {}
    for p in args.inputs:
        path = Path(p)
        if not path.is_file():
            raise NotFound(f"{path} does not exist")
        try:
            doc = parse_report(path.read_text(encoding="utf-8"))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise MalformedData(f"{path}: not a metrics report ({exc})") from exc
        for label, rep in doc["runs"].items():
            key = f"{path.parent.name}/{label}" if len(args.inputs) > 1 else label
            rows[key] = rep.values()
            reports[key] = rep
    table_rows = dict(rows)
    if args.reference:
        table_rows.update({f"published {k}": v for k, v in REFERENCE_RESULTS.items()})
    text = format_table(table_rows)
    print(text)
    if args.output_dir:
        out = Path(args.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text + "\n", encoding="utf-8")
        (out / "report.json").write_text(report_json(reports, include_reference=args.reference), encoding="utf-8")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mts-lab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", "-c", help="TOML run configuration")
        sp.add_argument("--seed", type=int, help=f"overrides the config seed (fallback ${SEED_ENV})")
        sp.add_argument("--output-dir", help="overrides output.dir")
        return sp

    b = with_config(sub.add_parser("backtest", help="train (if needed) and evaluate on the test window"))
    b.add_argument("--variant", default="full", choices=pipeline.VARIANTS)
    b.set_defaults(func=cmd_backtest)

    t = with_config(sub.add_parser("train", help="train a policy and write a checkpoint"))
    t.add_argument("--variant", default="full", choices=pipeline.VARIANTS)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("synthetic", help="write a synthetic market in the ingestion schema")
    s.add_argument("kind", choices=KINDS)
    s.add_argument("--days", type=int, default=100)
    s.add_argument("--seed", type=int)
    s.add_argument("--stocks", type=int, default=5)
    s.add_argument("--output-dir", default="runs/synthetic")
    s.set_defaults(func=cmd_synthetic)

    a = with_config(sub.add_parser("ablate", help="run the ablation variants side by side"))
    a.add_argument("--variants", default=",".join(pipeline.VARIANTS))
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", help="tabulate one or more metrics JSON files")
    r.add_argument("inputs", nargs="+")
    r.add_argument("--reference", action="store_true", help="append the published reference results")
    r.add_argument("--output-dir")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, extra)
    except MTSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
