"""Interaction logs, preprocessing, the global temporal split and content loading."""

from __future__ import annotations

import csv
import logging
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import PcaModel, fit_pca, pca_transform

logger = logging.getLogger(__name__)

CONTENT_MAGIC = b"CEM1"


class DataError(ValueError):
    """Bad input data or a preprocessing stage that left nothing behind."""


@dataclass(frozen=True, slots=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int
    weight: float | None = None


@dataclass
class InteractionLog:
    """Interactions in global (timestamp, file order) order with dense indices.

    Indices are assigned by first appearance in that order, so they are
    contiguous from 0 and stable for a given input.
    """

    interactions: list[Interaction]
    item_index: dict[str, int] = field(default_factory=dict)
    user_index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.item_index and not self.user_index:
            self.reindex()

    def reindex(self) -> None:
        self.item_index = {}
        self.user_index = {}
        for it in self.interactions:
            self.user_index.setdefault(it.user_id, len(self.user_index))
            self.item_index.setdefault(it.item_id, len(self.item_index))

    @classmethod
    def from_ordered(cls, interactions) -> "InteractionLog":
        return cls(list(interactions))

    def __len__(self) -> int:
        return len(self.interactions)

    @property
    def num_users(self) -> int:
        return len(self.user_index)

    @property
    def num_items(self) -> int:
        return len(self.item_index)

    def user_sequences(self) -> dict[str, list[Interaction]]:
        seqs: dict[str, list[Interaction]] = {}
        for it in self.interactions:
            seqs.setdefault(it.user_id, []).append(it)
        return seqs


@dataclass(frozen=True)
class CsvSchema:
    user_id: str = "user_id"
    item_id: str = "item_id"
    timestamp: str = "timestamp"
    weight: str | None = "weight"


def load_interactions(path, schema: CsvSchema | None = None) -> InteractionLog:
    schema = schema or CsvSchema()
    rows: list[Interaction] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in (schema.user_id, schema.item_id, schema.timestamp):
            if col not in header:
                if not header:
                    raise DataError(f"{path}: no interactions")
                raise DataError(f"{path}: missing required column {col!r}")
        has_weight = schema.weight is not None and schema.weight in header
        for line_no, row in enumerate(reader, start=2):
            try:
                user, item = row[schema.user_id], row[schema.item_id]
                if not user or not item:
                    raise ValueError("empty id")
                ts = int(row[schema.timestamp])
                if ts < 0:
                    raise ValueError("negative timestamp")
                w = None
                if has_weight and row[schema.weight] not in ("", None):
                    w = float(row[schema.weight])
            except (TypeError, ValueError) as exc:
                raise DataError(f"{path}: malformed row at line {line_no}: {exc}") from None
            rows.append(Interaction(user, item, ts, w))
    if not rows:
        raise DataError(f"{path}: no interactions")
    # stable sort keeps file order among equal timestamps
    rows.sort(key=lambda r: r.timestamp)
    return InteractionLog(rows)


def save_interactions(log: InteractionLog, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", "item_id", "timestamp", "weight"])
        for it in log.interactions:
            w.writerow([it.user_id, it.item_id, it.timestamp, "" if it.weight is None else repr(it.weight)])


# ---------------------------------------------------------------- preprocessing

@dataclass(frozen=True)
class PreprocessOptions:
    min_weight: float | None = None
    dedup_consecutive: bool = True
    n_core: int = 1
    user_sample_size: int | None = None
    sample_seed: int = 0


def _dedup_consecutive(rows: list[Interaction]) -> list[Interaction]:
    last: dict[str, str] = {}
    out = []
    for it in rows:
        if last.get(it.user_id) == it.item_id:
            continue
        last[it.user_id] = it.item_id
        out.append(it)
    return out


def _n_core(rows: list[Interaction], n: int) -> list[Interaction]:
    while True:
        users = Counter(it.user_id for it in rows)
        kept = [it for it in rows if users[it.user_id] >= n]
        items = Counter(it.item_id for it in kept)
        kept = [it for it in kept if items[it.item_id] >= n]
        if len(kept) == len(rows):
            return kept
        rows = kept


def preprocess(log: InteractionLog, opts: PreprocessOptions) -> InteractionLog:
    """Threshold, sample users, drop consecutive repeats, then n-core filter.

    Steps 3 and 4 alternate until neither changes anything: n-core removal
    can make two equal items adjacent, and a second dedup pass could then
    shrink counts below n again. Iterating keeps the whole pipeline idempotent.
    """
    rows = list(log.interactions)

    if opts.min_weight is not None:
        rows = [it for it in rows if it.weight is not None and it.weight >= opts.min_weight]
        if not rows:
            raise DataError("weight threshold removed every interaction")

    if opts.user_sample_size is not None:
        users = sorted({it.user_id for it in rows})
        if len(users) > opts.user_sample_size:
            rng = np.random.default_rng(opts.sample_seed)
            picked = rng.choice(len(users), size=opts.user_sample_size, replace=False)
            keep = {users[i] for i in picked}
            rows = [it for it in rows if it.user_id in keep]

    while True:
        before = len(rows)
        if opts.dedup_consecutive:
            rows = _dedup_consecutive(rows)
        if opts.n_core > 1:
            rows = _n_core(rows, opts.n_core)
            if not rows:
                raise DataError(f"{opts.n_core}-core filtering removed every interaction")
        if len(rows) == before:
            break
    return InteractionLog(rows)


# ---------------------------------------------------------------- split

@dataclass(frozen=True)
class Case:
    user: int
    input: tuple[int, ...]
    ground_truth: int


@dataclass
class SplitDataset:
    item_ids: list[str]
    user_ids: list[str]
    train_sequences: dict[int, list[int]]
    validation_cases: list[Case]
    test_cases: list[Case]
    warm_items: frozenset[int]
    cold_items: frozenset[int]
    boundary_timestamp: int

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    def train_frequency(self) -> np.ndarray:
        freq = np.zeros(self.num_items, dtype=np.int64)
        for seq in self.train_sequences.values():
            np.add.at(freq, seq, 1)
        return freq

    def to_dict(self) -> dict:
        def cases(cs):
            return [[c.user, list(c.input), c.ground_truth] for c in cs]

        return {
            "item_ids": self.item_ids,
            "user_ids": self.user_ids,
            "boundary_timestamp": self.boundary_timestamp,
            "train_sequences": {str(u): s for u, s in sorted(self.train_sequences.items())},
            "validation_cases": cases(self.validation_cases),
            "test_cases": cases(self.test_cases),
            "warm_items": sorted(self.warm_items),
            "cold_items": sorted(self.cold_items),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitDataset":
        def cases(raw):
            return [Case(int(u), tuple(inp), int(gt)) for u, inp, gt in raw]

        return cls(
            item_ids=list(d["item_ids"]),
            user_ids=list(d["user_ids"]),
            train_sequences={int(u): list(s) for u, s in d["train_sequences"].items()},
            validation_cases=cases(d["validation_cases"]),
            test_cases=cases(d["test_cases"]),
            warm_items=frozenset(d["warm_items"]),
            cold_items=frozenset(d["cold_items"]),
            boundary_timestamp=int(d["boundary_timestamp"]),
        )


def temporal_split(log: InteractionLog, train_fraction: float = 0.9,
                   validation_user_fraction: float = 0.1, seed: int = 0) -> SplitDataset:
    """Global temporal split at rank ceil(train_fraction * N).

    The first ``ceil(train_fraction * N)`` interactions in global order are
    training data. ``boundary_timestamp`` is the timestamp of the first
    interaction after the cut.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    if not 0.0 < validation_user_fraction < 1.0:
        raise ValueError(f"validation_user_fraction must lie in (0, 1), got {validation_user_fraction}")
    rows = log.interactions
    n = len(rows)
    cut = math.ceil(train_fraction * n)
    if cut >= n:
        raise DataError("temporal split leaves no post-boundary interactions")
    boundary = rows[cut].timestamp
    item = log.item_index
    user = log.user_index

    pre: dict[int, list[int]] = {}
    full: dict[int, list[int]] = {}
    test_users: set[int] = set()
    for pos, it in enumerate(rows):
        u, i = user[it.user_id], item[it.item_id]
        full.setdefault(u, []).append(i)
        if pos < cut:
            pre.setdefault(u, []).append(i)
        else:
            test_users.add(u)

    candidates = sorted(u for u, s in pre.items() if len(s) >= 2)
    n_val = int(round(validation_user_fraction * len(candidates)))
    rng = np.random.default_rng(seed)
    val_users = sorted(rng.choice(candidates, size=n_val, replace=False).tolist()) if n_val else []

    validation_cases = []
    train = {u: list(s) for u, s in pre.items()}
    for u in val_users:
        seq = pre[u]
        validation_cases.append(Case(u, tuple(seq[:-1]), seq[-1]))
        train[u] = seq[:-1]

    test_cases = []
    for u in sorted(test_users):
        seq = full[u]
        if len(seq) < 2:
            continue
        test_cases.append(Case(u, tuple(seq[:-1]), seq[-1]))
    if not test_cases:
        raise DataError("temporal split produced no test cases")

    warm = frozenset(i for s in train.values() for i in s)
    seen_eval = {i for c in validation_cases + test_cases for i in (*c.input, c.ground_truth)}
    cold = frozenset(seen_eval - warm)

    item_ids = [None] * log.num_items
    for k, v in item.items():
        item_ids[v] = k
    user_ids = [None] * log.num_users
    for k, v in user.items():
        user_ids[v] = k
    return SplitDataset(
        item_ids=item_ids,
        user_ids=user_ids,
        train_sequences={u: s for u, s in sorted(train.items()) if s},
        validation_cases=validation_cases,
        test_cases=test_cases,
        warm_items=warm,
        cold_items=cold,
        boundary_timestamp=boundary,
    )


# ---------------------------------------------------------------- content

@dataclass
class ContentMatrix:
    vectors: np.ndarray  # (num_items, m); rows outside coverage are zero
    coverage: np.ndarray  # bool mask over item indices
    source_dim: int

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def read_content_file(path) -> dict[str, np.ndarray]:
    """Read raw content vectors keyed by item id, text or ``CEM1`` binary."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == CONTENT_MAGIC:
        return _read_content_binary(path)
    out: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().split()
        try:
            count, dim = int(first[0]), int(first[1])
        except (IndexError, ValueError):
            raise DataError(f"{path}: bad header, expected '<num_items> <D>'") from None
        for line_no, line in enumerate(fh, start=2):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != dim + 1:
                raise DataError(f"{path}: line {line_no} has {len(parts) - 1} values, expected {dim}")
            try:
                out[parts[0]] = np.array([float(v) for v in parts[1:]])
            except ValueError:
                raise DataError(f"{path}: non-numeric value on line {line_no}") from None
    if len(out) != count:
        raise DataError(f"{path}: header announces {count} items, found {len(out)}")
    return out


def _read_content_binary(path: Path) -> dict[str, np.ndarray]:
    buf = path.read_bytes()
    count, dim = struct.unpack_from("<II", buf, 4)
    off = 12
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        key = buf[off:off + n].decode("utf-8")
        off += n
        out[key] = np.frombuffer(buf, dtype="<f8", count=dim, offset=off).astype(np.float64)
        off += 8 * dim
    return out


def write_content_file(vectors: dict[str, np.ndarray], path, binary: bool = False) -> None:
    dims = {len(v) for v in vectors.values()}
    if len(dims) != 1:
        raise ValueError("content vectors must share one dimension")
    dim = dims.pop()
    if binary:
        parts = [CONTENT_MAGIC, struct.pack("<II", len(vectors), dim)]
        for key, v in vectors.items():
            raw = key.encode("utf-8")
            parts += [struct.pack("<I", len(raw)), raw, np.asarray(v, dtype="<f8").tobytes()]
        Path(path).write_bytes(b"".join(parts))
        return
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(vectors)} {dim}\n")
        for key, v in vectors.items():
            fh.write(key + " " + " ".join(repr(float(x)) for x in v) + "\n")


def build_content(raw: dict[str, np.ndarray], split: SplitDataset, m: int,
                  pca: PcaModel | None = None) -> tuple[ContentMatrix, PcaModel]:
    """Standardize, PCA-project to ``m`` and unit-normalize content rows.

    Without a given ``pca`` the statistics are fit on warm items only.
    """
    missing = [split.item_ids[i] for i in sorted(split.cold_items) if split.item_ids[i] not in raw]
    if missing:
        raise DataError(f"cold items without content: {', '.join(missing[:20])}"
                        + (f" (+{len(missing) - 20} more)" if len(missing) > 20 else ""))
    if pca is None:
        warm_keys = [split.item_ids[i] for i in sorted(split.warm_items) if split.item_ids[i] in raw]
        if len(warm_keys) < 2:
            raise DataError("fewer than 2 warm items carry content; cannot fit PCA")
        pca = fit_pca(np.stack([raw[k] for k in warm_keys]), m)

    vectors = np.zeros((split.num_items, m))
    coverage = np.zeros(split.num_items, dtype=bool)
    for i, key in enumerate(split.item_ids):
        v = raw.get(key)
        if v is None:
            continue
        y = pca_transform(pca, v)
        norm = np.linalg.norm(y)
        if not norm > 0.0:
            raise DataError(f"content vector of item {key!r} projects to zero")
        vectors[i] = y / norm
        coverage[i] = True
    uncovered_warm = int((~coverage[sorted(split.warm_items)]).sum()) if split.warm_items else 0
    if uncovered_warm:
        logger.warning("%d warm items have no content and fall back to learned rows", uncovered_warm)
    return ContentMatrix(vectors, coverage, source_dim=pca.input_dim), pca


def load_content(path, split: SplitDataset, m: int, pca: PcaModel | None = None) -> ContentMatrix:
    return build_content(read_content_file(path), split, m, pca)[0]
