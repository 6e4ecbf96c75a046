"""Experiment configuration and the prepare / train / evaluate / sweep / knn / report pipelines.

Artifacts live under ``output_dir``::

    prepared/   split.json, content.npy, coverage.npy, stats.json
    runs/<name>/seed_<s>/   checkpoint.srck, train_log.csv, metrics.csv, metrics.json
    runs/<name>/            summary.json, summary.csv
    knn/                    metrics.csv, metrics.json, summary.json
    sweep/sweep.csv
"""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import load_model, save_model
from .data import (
    ContentMatrix,
    CsvSchema,
    DataError,
    PreprocessOptions,
    SplitDataset,
    build_content,
    load_interactions,
    preprocess,
    read_content_file,
    temporal_split,
)
from .embeddings import Variant, init_table
from .evaluation import (
    MetricsReport,
    RunSummary,
    SegmentationSpec,
    build_eval_cases,
    evaluate,
    knn_recommender,
    summarize,
)
from .model import ModelConfig, SeqModel, train

logger = logging.getLogger(__name__)

DEFAULT_SEEDS = (0, 1, 2, 3, 4)
REPORT_SEGMENTS = ("cold_gt", "warm_gt", "total")


class ConfigError(ValueError):
    """Invalid experiment configuration or command-line usage."""


@dataclass
class ExperimentConfig:
    interactions: str | None = None
    content: str | None = None
    schema: CsvSchema = field(default_factory=CsvSchema)
    preprocess: PreprocessOptions = field(default_factory=PreprocessOptions)
    train_fraction: float = 0.9
    validation_user_fraction: float = 0.1
    split_seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    variant: str = "frozen_delta"
    delta_max: float | None = 0.5
    seeds: list[int] = field(default_factory=lambda: list(DEFAULT_SEEDS))
    output_dir: str = "runs"
    name: str | None = None
    segmentation: SegmentationSpec = field(default_factory=SegmentationSpec)

    def __post_init__(self):
        try:
            variant = Variant(self.variant)
        except ValueError:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of "
                              f"{[v.value for v in Variant]}") from None
        if variant is Variant.FROZEN_DELTA:
            if self.delta_max is None:
                raise ConfigError("variant frozen_delta requires delta_max")
            if not 0.0 <= self.delta_max < 1.0:
                raise ConfigError(f"delta_max must lie in [0, 1), got {self.delta_max}")
        elif self.delta_max is not None:
            raise ConfigError(f"delta_max is only valid for frozen_delta, not {variant.value}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"seeds must be distinct, got {self.seeds}")
        if any(not isinstance(s, int) or isinstance(s, bool) for s in self.seeds):
            raise ConfigError("seeds must be integers")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if not 0.0 < self.validation_user_fraction < 1.0:
            raise ConfigError("validation_user_fraction must lie in (0, 1)")

    @property
    def variant_enum(self) -> Variant:
        return Variant(self.variant)

    @property
    def run_name(self) -> str:
        if self.name:
            return self.name
        if self.variant_enum is Variant.FROZEN_DELTA:
            return f"frozen_delta_{self.delta_max:g}"
        return self.variant

    @property
    def root(self) -> Path:
        return Path(self.output_dir)

    @property
    def prepared_dir(self) -> Path:
        return self.root / "prepared"

    @property
    def run_dir(self) -> Path:
        return self.root / "runs" / self.run_name

    def to_dict(self) -> dict:
        d = asdict(self)
        d["segmentation"] = self.segmentation.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            for key, typ in (("schema", CsvSchema), ("preprocess", PreprocessOptions), ("model", ModelConfig)):
                if key in d and isinstance(d[key], dict):
                    d[key] = typ(**d[key])
            if "segmentation" in d:
                d["segmentation"] = SegmentationSpec.from_dict(d["segmentation"])
            if "seeds" in d:
                d["seeds"] = list(d["seeds"])
            return cls(**d)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def with_variant(self, variant: str, delta_max: float | None, name: str | None = None) -> "ExperimentConfig":
        d = self.to_dict()
        d.update(variant=variant, delta_max=delta_max, name=name)
        return ExperimentConfig.from_dict(d)


def apply_overrides(raw: dict, overrides: Sequence[tuple[str, str]]) -> dict:
    """Apply ``--key value`` overrides to a config document.

    Keys may be dotted (``model.dropout``) or bare leaf names when unique
    (``dropout``). Values are parsed as JSON, falling back to a plain string.
    """
    out = copy.deepcopy(raw)
    defaults = ExperimentConfig().to_dict()
    for key, text in overrides:
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        path = key.split(".")
        if len(path) == 1 and key not in defaults:
            owners = [sec for sec, sub in defaults.items() if isinstance(sub, dict) and key in sub]
            if len(owners) != 1:
                raise ConfigError(f"unknown or ambiguous override --{key}")
            path = [owners[0], key]
        node = out
        ref = defaults
        for part in path[:-1]:
            if not isinstance(ref, dict) or part not in ref:
                raise ConfigError(f"unknown override --{key}")
            ref = ref[part]
            node = node.setdefault(part, {})
        if not isinstance(ref, dict) or path[-1] not in ref:
            raise ConfigError(f"unknown override --{key}")
        node[path[-1]] = value
    return out


def load_config(path, overrides: Sequence[tuple[str, str]] = ()) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return ExperimentConfig.from_dict(apply_overrides(raw, overrides))


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- prepare

def dataset_stats(log, split: SplitDataset) -> dict:
    n_inter = len(log)
    users = log.num_users
    cold_gt = sum(1 for c in split.test_cases if c.ground_truth in split.cold_items)
    return {
        "users": users,
        "items": log.num_items,
        "interactions": n_inter,
        "avg_length": n_inter / users if users else 0.0,
        "cold_gt_percent": 100.0 * cold_gt / len(split.test_cases) if split.test_cases else 0.0,
        "test_cases": len(split.test_cases),
        "validation_cases": len(split.validation_cases),
        "warm_items": len(split.warm_items),
        "cold_items": len(split.cold_items),
    }


def prepare(cfg: ExperimentConfig) -> tuple[SplitDataset, ContentMatrix | None, dict]:
    if not cfg.interactions:
        raise ConfigError("config has no interactions path")
    log = load_interactions(cfg.interactions, cfg.schema)
    logger.info("loaded %d interactions", len(log))
    try:
        log = preprocess(log, cfg.preprocess)
    except DataError as exc:
        raise DataError(f"preprocess: {exc}") from None
    try:
        split = temporal_split(log, cfg.train_fraction, cfg.validation_user_fraction, cfg.split_seed)
    except DataError as exc:
        raise DataError(f"split: {exc}") from None
    content = None
    if cfg.content:
        try:
            content, _ = build_content(read_content_file(cfg.content), split, cfg.model.embedding_dim)
        except DataError as exc:
            raise DataError(f"content: {exc}") from None
    out = cfg.prepared_dir
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(out / "split.json", split.to_dict())
    for name in ("content.npy", "coverage.npy"):
        (out / name).unlink(missing_ok=True)
    if content is not None:
        np.save(out / "content.npy", content.vectors)
        np.save(out / "coverage.npy", content.coverage)
    stats = dataset_stats(log, split)
    _dump_json(out / "stats.json", stats)
    logger.info("prepared %d users, %d items, %.1f%% cold ground truth",
                stats["users"], stats["items"], stats["cold_gt_percent"])
    return split, content, stats


def load_prepared(cfg: ExperimentConfig) -> tuple[SplitDataset, ContentMatrix | None]:
    d = cfg.prepared_dir
    if not (d / "split.json").exists():
        raise DataError(f"no prepared split in {d}; run prepare first")
    split = SplitDataset.from_dict(json.loads((d / "split.json").read_text(encoding="utf-8")))
    content = None
    if (d / "content.npy").exists():
        vectors = np.load(d / "content.npy")
        coverage = np.load(d / "coverage.npy")
        content = ContentMatrix(vectors, coverage, source_dim=vectors.shape[1])
    return split, content


def _require_content(cfg: ExperimentConfig, content: ContentMatrix | None) -> None:
    if cfg.variant_enum is not Variant.ID_LEARNED and content is None:
        raise ConfigError(f"variant {cfg.variant} requires content, but none was prepared")
    if content is not None and content.dim != cfg.model.embedding_dim:
        raise ConfigError(f"prepared content has dim {content.dim}, model expects {cfg.model.embedding_dim}")


# ---------------------------------------------------------------- train / evaluate

def seed_dir(cfg: ExperimentConfig, seed: int) -> Path:
    return cfg.run_dir / f"seed_{seed}"


def train_seed(cfg: ExperimentConfig, seed: int, split: SplitDataset,
               content: ContentMatrix | None) -> SeqModel:
    _require_content(cfg, content)
    mcfg = replace(cfg.model, seed=seed)
    table = init_table(cfg.variant_enum, content, split.num_items, mcfg.embedding_dim,
                       delta_max=cfg.delta_max, seed=seed)
    model = SeqModel(mcfg, table, split.warm_items)
    out = seed_dir(cfg, seed)
    out.mkdir(parents=True, exist_ok=True)
    res = train(model, split, mcfg, log_path=out / "train_log.csv")
    logger.info("%s seed %d: best epoch %d of %d, val ndcg %s", cfg.run_name, seed,
                res.best_epoch, res.epochs_run, res.best_val_ndcg)
    save_model(out / "checkpoint.srck", model, cfg.to_dict(), split.item_ids, split.user_ids)
    return model


def train_all(cfg: ExperimentConfig, seeds: Sequence[int] | None = None) -> list[Path]:
    split, content = load_prepared(cfg)
    _require_content(cfg, content)
    paths = []
    for seed in seeds if seeds is not None else cfg.seeds:
        train_seed(cfg, seed, split, content)
        paths.append(seed_dir(cfg, seed) / "checkpoint.srck")
    return paths


def _write_report(out: Path, report: MetricsReport) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "metrics.json").write_text(report.to_json(), encoding="utf-8")


def evaluate_checkpoint(path, split: SplitDataset, segmentation: SegmentationSpec | None = None,
                        seed: int | None = None) -> MetricsReport:
    model, header = load_model(path)
    if header["item_ids"] != split.item_ids or header["user_ids"] != split.user_ids:
        raise DataError(f"{path}: index mappings differ from the prepared split (stale checkpoint)")
    if header["warm_items"] != sorted(split.warm_items):
        raise DataError(f"{path}: warm item set differs from the prepared split (stale checkpoint)")
    cases = build_eval_cases(split)
    k = model.config.eval_k
    return evaluate(lambda inputs, kk: model.recommend_batch(inputs, kk), cases, k, segmentation,
                    seed=model.config.seed if seed is None else seed)


def _write_summary(run_dir: Path, name: str, reports: list[MetricsReport], seg: SegmentationSpec) -> RunSummary:
    summary = summarize(reports)
    doc = {"name": name, "segmentation": seg.to_dict(), **summary.to_dict()}
    _dump_json(run_dir / "summary.json", doc)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["segment", "metric", "k", "mean", "std", "n"])
    for segment, metrics in summary.stats.items():
        for metric, (mean, std, n) in metrics.items():
            w.writerow([segment, metric, summary.k, "absent" if mean is None else repr(mean),
                        "" if std is None else repr(std), n])
    (run_dir / "summary.csv").write_text(buf.getvalue(), encoding="utf-8")
    return summary


def evaluate_all(cfg: ExperimentConfig, seeds: Sequence[int] | None = None) -> RunSummary:
    split, _ = load_prepared(cfg)
    reports = []
    for seed in seeds if seeds is not None else cfg.seeds:
        path = seed_dir(cfg, seed) / "checkpoint.srck"
        if not path.exists():
            raise DataError(f"missing checkpoint {path}; run train first")
        report = evaluate_checkpoint(path, split, cfg.segmentation, seed)
        _write_report(seed_dir(cfg, seed), report)
        reports.append(report)
    summary = _write_summary(cfg.run_dir, cfg.run_name, reports, cfg.segmentation)
    for seg in REPORT_SEGMENTS:
        logger.info("%s %s ndcg@%d %s", cfg.run_name, seg, summary.k, summary.formatted(seg, "ndcg"))
    return summary


def run_experiment(cfg: ExperimentConfig) -> RunSummary:
    """Train and evaluate every configured seed on already-prepared data."""
    train_all(cfg)
    return evaluate_all(cfg)


# ---------------------------------------------------------------- knn

def run_knn(cfg: ExperimentConfig) -> MetricsReport:
    split, content = load_prepared(cfg)
    if content is None:
        raise ConfigError("content required for the knn baseline")
    report = evaluate(knn_recommender(content), build_eval_cases(split), cfg.model.eval_k, cfg.segmentation)
    out = cfg.root / "knn"
    _write_report(out, report)
    _write_summary(out, "content_knn", [report], cfg.segmentation)
    return report


# ---------------------------------------------------------------- sweep

SWEEP_HEADER = ["delta_max", "total_ndcg_mean", "total_ndcg_std", "cold_ndcg_mean", "cold_ndcg_std", "n_seeds"]


def sweep_values(values: Sequence[float]) -> list[float]:
    uniq = sorted(set(float(v) for v in values))
    if len(uniq) < len(values):
        logger.warning("duplicate delta_max values removed: %s", list(values))
    if len(uniq) < 2:
        raise ConfigError("a sweep needs at least two distinct delta_max values")
    bad = [v for v in uniq if not 0.0 <= v < 1.0]
    if bad:
        raise ConfigError(f"delta_max values must lie in [0, 1): {bad}")
    return uniq


def run_sweep(cfg: ExperimentConfig, values: Sequence[float]) -> Path:
    """Train and evaluate every seed per delta_max; the CSV is rewritten after each point."""
    grid = sweep_values(values)
    out = cfg.root / "sweep"
    out.mkdir(parents=True, exist_ok=True)
    target = out / "sweep.csv"
    rows = []
    for v in grid:
        point = cfg.with_variant(Variant.FROZEN_DELTA.value, v)
        summary = run_experiment(point)
        t_mean, t_std, n = summary.stats["total"]["ndcg"]
        c_mean, c_std, _ = summary.stats["cold_gt"]["ndcg"]
        rows.append([repr(v), _cell(t_mean), _cell(t_std), _cell(c_mean), _cell(c_std), n])
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        w.writerows(rows)
        target.write_text(buf.getvalue(), encoding="utf-8")
    return target


def _cell(x):
    return "absent" if x is None else repr(x)


# ---------------------------------------------------------------- report

def load_summary(run_dir) -> dict:
    path = Path(run_dir) / "summary.json"
    if not path.exists():
        raise DataError(f"{run_dir}: no summary.json; evaluate the run first")
    return json.loads(path.read_text(encoding="utf-8"))


def build_report(run_dirs: Sequence) -> tuple[str, str]:
    """Merge run summaries into (markdown, csv). The best mean per column is marked; ties all marked."""
    if not run_dirs:
        raise ConfigError("report needs at least one run directory")
    docs = [load_summary(d) for d in run_dirs]
    k, seg = docs[0]["k"], docs[0]["segmentation"]
    for d, path in zip(docs[1:], run_dirs[1:]):
        if d["k"] != k:
            raise ConfigError(f"{path}: k={d['k']} differs from k={k}")
        if d["segmentation"] != seg:
            raise ConfigError(f"{path}: segmentation differs from the first run")
    summaries = [RunSummary.from_dict(d) for d in docs]
    columns = [(s, m) for s in REPORT_SEGMENTS for m in ("hr", "ndcg")]
    best = {}
    for col in columns:
        # compare at display precision so visibly equal values tie
        means = [round(s.stats[col[0]][col[1]][0], 3) for s in summaries if s.stats[col[0]][col[1]][0] is not None]
        best[col] = max(means) if means else None

    def is_best(s, col):
        mean = s.stats[col[0]][col[1]][0]
        return mean is not None and round(mean, 3) == best[col]

    head = ["run"] + [f"{s} {m.upper()}@{k}" for s, m in columns]
    md = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "segment", "metric", "k", "mean", "std", "n", "best"])
    for doc, s in zip(docs, summaries):
        cells = [doc["name"]]
        for col in columns:
            text = s.formatted(*col)
            cells.append(f"**{text}**" if is_best(s, col) else text)
            mean, std, n = s.stats[col[0]][col[1]]
            w.writerow([doc["name"], col[0], col[1], k, _cell(mean), "" if std is None else repr(std), n,
                        int(is_best(s, col))])
        md.append("| " + " | ".join(cells) + " |")
    return "\n".join(md) + "\n", buf.getvalue()
