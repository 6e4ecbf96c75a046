"""Command-line entry point: ``coldrec <command> [options] [--key value ...]``.

Exit codes: 0 success, 1 validation error, 2 data error, 3 training failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

from threadpoolctl import threadpool_limits

from .checkpoint import CheckpointError
from .data import DataError
from .experiment import (
    ConfigError,
    build_report,
    evaluate_all,
    evaluate_checkpoint,
    load_config,
    load_prepared,
    prepare,
    run_knn,
    run_sweep,
    train_all,
)
from .model import TrainingError
from .synth import SynthConfig, write_dataset

logger = logging.getLogger("coldrec")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAIN = 0, 1, 2, 3

# model settings used by the config that `synth` writes next to its data
SYNTH_MODEL = {"embedding_dim": 32, "max_seq_len": 32, "max_epochs": 40, "patience": 8}


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        # abbreviations would swallow config overrides such as --seeds
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def parse_overrides(extra: list[str]) -> list[tuple[str, str]]:
    pairs = []
    it = iter(extra)
    for tok in it:
        if not tok.startswith("--") or len(tok) < 3:
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            value = next(it, None)
            if value is None:
                raise ConfigError(f"override --{key} needs a value")
        pairs.append((key, value))
    return pairs


def _seeds(text: str | None) -> list[int] | None:
    if text is None:
        return None
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seed expects comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="coldrec", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True, help="experiment JSON config")
        return sp

    with_config("prepare", "preprocess, split and project content")
    sp = with_config("train", "train every configured seed")
    sp.add_argument("--seed", help="comma-separated subset of seeds")
    sp = with_config("evaluate", "evaluate trained checkpoints")
    sp.add_argument("--seed", help="comma-separated subset of seeds")
    sp.add_argument("--checkpoint", help="evaluate a single checkpoint file instead")
    sp.add_argument("--out", help="output directory for --checkpoint reports")
    sp = with_config("sweep", "delta_max sweep")
    sp.add_argument("--values", required=True, help="comma-separated delta_max values")
    with_config("knn", "content KNN baseline")
    sp = sub.add_parser("report", help="merge run summaries into a comparison table")
    sp.add_argument("runs", nargs="+", help="run directories containing summary.json")
    sp.add_argument("--out", help="directory for report.md and report.csv")
    sp = sub.add_parser("synth", help="write a synthetic dataset and a matching config")
    sp.add_argument("--out", required=True)
    sp.add_argument("--synth-config", help="JSON file with generator settings")
    return p


def cmd_synth(args, overrides) -> int:
    raw = {}
    if args.synth_config:
        raw = json.loads(Path(args.synth_config).read_text(encoding="utf-8"))
    names = {f.name for f in fields(SynthConfig)}
    for key, text in overrides:
        if key not in names:
            raise ConfigError(f"unknown generator setting --{key}")
        try:
            raw[key] = json.loads(text)
        except json.JSONDecodeError:
            raise ConfigError(f"--{key}: expected a number, got {text!r}") from None
    try:
        cfg = SynthConfig(**raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out)
    paths = write_dataset(cfg, out)
    exp = {
        "interactions": str(Path(paths["interactions"]).resolve()),
        "content": str(Path(paths["content"]).resolve()),
        "train_fraction": cfg.train_fraction,
        "model": dict(SYNTH_MODEL),
        "variant": "frozen_delta",
        "delta_max": 0.5,
        "seeds": [0, 1, 2, 3, 4],
        "output_dir": str((out / "runs").resolve()),
    }
    (out / "config.json").write_text(json.dumps(exp, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {out}/interactions.csv, content.txt, synth.json, config.json")
    return EXIT_OK


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = parse_overrides(extra)
    if args.command == "synth":
        return cmd_synth(args, overrides)
    if args.command == "report":
        if overrides:
            raise ConfigError("report takes no config overrides")
        md, table = build_report(args.runs)
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            (out / "report.md").write_text(md, encoding="utf-8")
            (out / "report.csv").write_text(table, encoding="utf-8")
        print(md, end="")
        return EXIT_OK

    cfg = load_config(args.config, overrides)
    if args.command == "prepare":
        _, _, stats = prepare(cfg)
        print(json.dumps(stats, indent=2, sort_keys=True))
    elif args.command == "train":
        for path in train_all(cfg, _seeds(args.seed)):
            print(path)
    elif args.command == "evaluate":
        if args.checkpoint:
            split, _ = load_prepared(cfg)
            report = evaluate_checkpoint(args.checkpoint, split, cfg.segmentation)
            out = Path(args.out) if args.out else Path(args.checkpoint).parent
            out.mkdir(parents=True, exist_ok=True)
            (out / "metrics.csv").write_text(report.to_csv(), encoding="utf-8")
            (out / "metrics.json").write_text(report.to_json(), encoding="utf-8")
            print(report.to_csv(), end="")
        else:
            summary = evaluate_all(cfg, _seeds(args.seed))
            for seg in ("cold_gt", "warm_gt", "total"):
                print(f"{seg:8s} HR@{summary.k} {summary.formatted(seg, 'hr'):>13s}  "
                      f"NDCG@{summary.k} {summary.formatted(seg, 'ndcg'):>13s}")
    elif args.command == "sweep":
        try:
            values = [float(v) for v in args.values.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"--values expects comma-separated numbers, got {args.values!r}") from None
        print(run_sweep(cfg, values))
    elif args.command == "knn":
        report = run_knn(cfg)
        print(report.to_csv(), end="")
    return EXIT_OK


def thread_count() -> int:
    text = os.environ.get("COLDREC_THREADS", "1")
    try:
        n = int(text)
    except ValueError:
        raise ConfigError(f"COLDREC_THREADS must be a positive integer, got {text!r}") from None
    if n < 1:
        raise ConfigError(f"COLDREC_THREADS must be a positive integer, got {text!r}")
    return n


def main(argv: list[str] | None = None) -> int:
    try:
        with threadpool_limits(limits=thread_count()):
            return run(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN


if __name__ == "__main__":
    sys.exit(main())
