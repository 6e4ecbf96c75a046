"""SASRec-style causal transformer with tied item embeddings and full-softmax training."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import SplitDataset
from .embeddings import EmbeddingTable, Variant
from .numerics import AdamState, Tensor, adam_step
from .numerics import tensor as F

logger = logging.getLogger(__name__)

PAD = -1


class TrainingError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    embedding_dim: int = 64
    num_blocks: int = 2
    num_heads: int = 1
    dropout: float = 0.3
    max_seq_len: int = 64
    batch_size: int = 128
    learning_rate: float = 1e-3
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    cold_input_policy: str = "drop"  # IdLearned only: "drop" or "oov" (zero item vector)
    filter_seen: bool = False
    eval_k: int = 10

    def __post_init__(self):
        if self.embedding_dim % self.num_heads:
            raise ValueError(f"embedding_dim {self.embedding_dim} not divisible by num_heads {self.num_heads}")
        if self.max_seq_len < 2:
            raise ValueError("max_seq_len must be at least 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.cold_input_policy not in ("drop", "oov"):
            raise ValueError(f"unknown cold_input_policy {self.cold_input_policy!r}")
        for name in ("batch_size", "max_epochs", "num_blocks", "num_heads", "eval_k"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.patience < 0:
            raise ValueError("patience must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def _ln_params(prefix: str, m: int) -> dict[str, Tensor]:
    return {
        f"{prefix}.gain": Tensor(np.ones(m), requires_grad=True, name=f"{prefix}.gain"),
        f"{prefix}.bias": Tensor(np.zeros(m), requires_grad=True, name=f"{prefix}.bias"),
    }


class SeqModel:
    """Causal self-attention encoder; user state is the last position's output.

    Positions are aligned to the right edge of the ``max_seq_len`` window,
    so the most recent item always uses the last positional row and the
    amount of left padding never changes a result.
    """

    def __init__(self, config: ModelConfig, item_table: EmbeddingTable, warm_items):
        self.config = config
        self.item_table = item_table
        n = item_table.num_items
        self.warm_mask = np.zeros(n, dtype=bool)
        self.warm_mask[np.fromiter(warm_items, dtype=np.int64)] = True
        self.warm_index = np.flatnonzero(self.warm_mask)
        self._warm_pos = np.full(n, -1, dtype=np.int64)
        self._warm_pos[self.warm_index] = np.arange(len(self.warm_index))
        if item_table.variant is Variant.ID_LEARNED:
            self.candidate_mask = self.warm_mask.copy()
        else:
            self.candidate_mask = np.ones(n, dtype=bool)

        m, L = config.embedding_dim, config.max_seq_len
        if item_table.dim != m:
            raise ValueError(f"item table dim {item_table.dim} != embedding_dim {m}")
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
        p: dict[str, Tensor] = {}
        p["pos"] = Tensor(np.zeros((L, m)), requires_grad=True, name="pos")

        def dense(name, fan_in, fan_out):
            p[f"{name}.w"] = Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, fan_out)),
                                    requires_grad=True, name=f"{name}.w")
            p[f"{name}.b"] = Tensor(np.zeros(fan_out), requires_grad=True, name=f"{name}.b")

        for b in range(config.num_blocks):
            p.update(_ln_params(f"blocks.{b}.ln_att", m))
            for proj in ("q", "k", "v", "o"):
                dense(f"blocks.{b}.{proj}", m, m)
            p.update(_ln_params(f"blocks.{b}.ln_ffn", m))
            dense(f"blocks.{b}.ffn1", m, m)
            dense(f"blocks.{b}.ffn2", m, m)
        p.update(_ln_params("final_ln", m))
        self.params = p

    # ------------------------------------------------------------ parameters

    def named_tensors(self) -> dict[str, Tensor]:
        out = dict(self.params)
        out["item_table.base"] = self.item_table.base
        if self.item_table.delta is not None:
            out["item_table.delta"] = self.item_table.delta
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.params.values()) + self.item_table.parameters()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.named_tensors().items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, t in self.named_tensors().items():
            t.data[...] = snap[k]

    # ------------------------------------------------------------ inputs

    def prepare_input(self, seq: Sequence[int]) -> tuple[list[int], list[bool]]:
        """Apply the cold-input policy and truncate. Returns (ids, is_real)."""
        ids = [int(i) for i in seq]
        real = [True] * len(ids)
        if self.item_table.variant is Variant.ID_LEARNED:
            if self.config.cold_input_policy == "drop":
                ids = [i for i in ids if self.warm_mask[i]]
                real = [True] * len(ids)
            else:
                ids = [i if self.warm_mask[i] else PAD for i in ids]
        L = self.config.max_seq_len
        return ids[-L:], real[-L:]

    @staticmethod
    def pad_batch(prepared: Sequence[tuple[list[int], list[bool]]]) -> tuple[np.ndarray, np.ndarray]:
        width = max(len(ids) for ids, _ in prepared)
        idx = np.full((len(prepared), width), PAD, dtype=np.int64)
        real = np.zeros((len(prepared), width), dtype=bool)
        for r, (ids, flags) in enumerate(prepared):
            if ids:
                idx[r, width - len(ids):] = ids
                real[r, width - len(ids):] = flags
        return idx, real

    # ------------------------------------------------------------ forward

    def hidden(self, idx: np.ndarray, real: np.ndarray, training: bool = False,
               rng: np.random.Generator | None = None, items: Tensor | None = None) -> Tensor:
        """Hidden states (B, T, m) for left-padded index matrix ``idx``."""
        cfg = self.config
        p = self.params
        B, T = idx.shape
        m, H = cfg.embedding_dim, cfg.num_heads
        dh = m // H
        items = self.item_table.weight() if items is None else items
        keep = real[..., None].astype(np.float64)

        x = F.gather_rows(items, idx)
        x = F.add(x, F.index(p["pos"], slice(cfg.max_seq_len - T, cfg.max_seq_len)))
        x = F.mul(x, keep)
        x = F.dropout(x, cfg.dropout, rng, training)

        t = np.arange(T)
        allowed = (t[None, :] <= t[:, None])[None] & (real[:, None, :] | np.eye(T, dtype=bool)[None])
        blocked = ~allowed[:, None, :, :]

        for b in range(cfg.num_blocks):
            pre = f"blocks.{b}"
            h = F.layer_norm(x, p[f"{pre}.ln_att.gain"], p[f"{pre}.ln_att.bias"])

            def heads(name):
                z = F.add(F.matmul(h, p[f"{pre}.{name}.w"]), p[f"{pre}.{name}.b"])
                return F.transpose(F.reshape(z, (B, T, H, dh)), (0, 2, 1, 3))

            q, k, v = heads("q"), heads("k"), heads("v")
            att = F.mul(F.matmul(q, F.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
            att = F.softmax(F.masked_fill(att, blocked), axis=-1)
            ctx = F.reshape(F.transpose(F.matmul(att, v), (0, 2, 1, 3)), (B, T, m))
            o = F.add(F.matmul(ctx, p[f"{pre}.o.w"]), p[f"{pre}.o.b"])
            x = F.add(x, F.dropout(o, cfg.dropout, rng, training))

            h = F.layer_norm(x, p[f"{pre}.ln_ffn.gain"], p[f"{pre}.ln_ffn.bias"])
            f = F.relu(F.add(F.matmul(h, p[f"{pre}.ffn1.w"]), p[f"{pre}.ffn1.b"]))
            f = F.add(F.matmul(f, p[f"{pre}.ffn2.w"]), p[f"{pre}.ffn2.b"])
            x = F.add(x, F.dropout(f, cfg.dropout, rng, training))
            x = F.mul(x, keep)

        return F.layer_norm(x, p["final_ln.gain"], p["final_ln.bias"])

    def loss(self, inputs: np.ndarray, targets: np.ndarray, training: bool = False,
             rng: np.random.Generator | None = None) -> Tensor:
        """Mean cross-entropy of next-item targets against all warm items.

        ``inputs`` and ``targets`` are left-padded (B, T) item-index matrices;
        target ``PAD`` positions are ignored.
        """
        items = self.item_table.weight()
        real = inputs != PAD
        hs = self.hidden(inputs, real, training, rng, items=items)
        valid = np.flatnonzero((targets != PAD).reshape(-1))
        flat = F.index(F.reshape(hs, (-1, self.config.embedding_dim)), valid)
        warm = F.index(items, self.warm_index)
        logits = F.matmul(flat, F.transpose(warm))
        tgt = self._warm_pos[targets.reshape(-1)[valid]]
        if (tgt < 0).any():
            raise ValueError("training targets must be warm items")
        return F.cross_entropy(logits, tgt)

    # ------------------------------------------------------------ inference

    def encode_batch(self, seqs: Sequence[Sequence[int]]) -> np.ndarray:
        prepared = [self.prepare_input(s) for s in seqs]
        if any(not ids for ids, _ in prepared):
            raise ValueError("encode: empty input sequence after input policy")
        idx, real = self.pad_batch(prepared)
        return self.hidden(idx, real, training=False).data[:, -1, :]

    def encode(self, seq: Sequence[int]) -> np.ndarray:
        if len(seq) == 0:
            raise ValueError("encode: empty input sequence")
        return self.encode_batch([seq])[0]

    def score_items(self, h: np.ndarray, candidates=None) -> np.ndarray:
        """Inner-product scores ``h . e_i`` for the given candidates (default: policy set)."""
        E = self.item_table.matrix()
        if candidates is None:
            candidates = np.flatnonzero(self.candidate_mask)
        return E[np.asarray(candidates, dtype=np.int64)] @ h

    def recommend_batch(self, seqs: Sequence[Sequence[int]], k: int,
                        batch_size: int = 256) -> list[list[int]]:
        """Top-k candidate lists; rows whose input is empty after the policy get []."""
        if k < 1:
            raise ValueError("k must be >= 1")
        out: list[list[int]] = [[] for _ in seqs]
        live = [r for r, s in enumerate(seqs) if self.prepare_input(s)[0]]
        E = self.item_table.matrix()
        cand = np.flatnonzero(self.candidate_mask)
        Ec = E[cand]
        for start in range(0, len(live), batch_size):
            rows = live[start:start + batch_size]
            Hs = self.encode_batch([seqs[r] for r in rows])
            scores = Hs @ Ec.T
            if self.config.filter_seen:
                pos = np.full(len(E), -1)
                pos[cand] = np.arange(len(cand))
                for j, r in enumerate(rows):
                    seen = pos[np.asarray(seqs[r], dtype=np.int64)]
                    scores[j, seen[seen >= 0]] = -np.inf
            order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
            for j, r in enumerate(rows):
                ranked = order[j]
                if self.config.filter_seen:
                    ranked = ranked[np.isfinite(scores[j, ranked])]
                out[r] = cand[ranked].tolist()
        return out

    def recommend(self, seq: Sequence[int], k: int) -> list[int]:
        return self.recommend_batch([seq], k)[0]


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    best_epoch: int
    best_val_ndcg: float | None
    epochs_run: int
    steps: int
    history: list[dict] = field(default_factory=list)


def training_windows(split: SplitDataset, max_seq_len: int) -> list[list[int]]:
    return [s[-(max_seq_len + 1):] for _, s in sorted(split.train_sequences.items()) if len(s) >= 2]


def make_batch(windows: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(w) for w in windows) - 1
    inputs = np.full((len(windows), width), PAD, dtype=np.int64)
    targets = np.full((len(windows), width), PAD, dtype=np.int64)
    for r, w in enumerate(windows):
        n = len(w) - 1
        inputs[r, width - n:] = w[:-1]
        targets[r, width - n:] = w[1:]
    return inputs, targets


def validation_ndcg(model: SeqModel, cases, k: int) -> float:
    from .evaluation import ndcg_at_k, rank_in

    recs = model.recommend_batch([c.input for c in cases], k)
    return float(np.mean([ndcg_at_k(rank_in(r, c.ground_truth), k) for r, c in zip(recs, cases)]))


def train(model: SeqModel, split: SplitDataset, config: ModelConfig | None = None,
          log_path=None, on_step: Callable[[SeqModel, int], None] | None = None) -> TrainResult:
    """Adam on full cross-entropy with per-epoch validation and early stopping.

    Delta rows are clipped right after each optimizer step. The best
    validation epoch's parameters are restored before returning.
    """
    cfg = config or model.config
    windows = training_windows(split, cfg.max_seq_len)
    if not windows:
        raise TrainingError("no training sequences with at least two items")
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    drop_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
    state = AdamState(learning_rate=cfg.learning_rate)
    params = model.parameters()
    for prm in params:
        prm.zero_grad()
    clip = model.item_table.variant is Variant.FROZEN_DELTA
    val_cases = [c for c in split.validation_cases if c.input]

    best, best_epoch, best_snap, stale = -math.inf, 0, None, 0
    history, step, epoch = [], 0, 0
    log_fh = open(log_path, "w", newline="") if log_path else None
    writer = csv.writer(log_fh, lineterminator="\n") if log_fh else None
    if writer:
        writer.writerow(["epoch", "step", "loss", "val_ndcg10"])
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            order = shuffle_rng.permutation(len(windows))
            losses = []
            for start in range(0, len(order), cfg.batch_size):
                batch = [windows[i] for i in order[start:start + cfg.batch_size]]
                inputs, targets = make_batch(batch)
                loss = model.loss(inputs, targets, training=True, rng=drop_rng)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, step {step + 1}")
                loss.backward()
                adam_step(params, state)
                if clip:
                    model.item_table.clip_delta()
                step += 1
                losses.append(value)
                if on_step is not None:
                    on_step(model, step)
            val = validation_ndcg(model, val_cases, cfg.eval_k) if val_cases else None
            mean_loss = float(np.mean(losses))
            history.append({"epoch": epoch, "step": step, "loss": mean_loss, "val_ndcg10": val})
            if writer:
                writer.writerow([epoch, step, repr(mean_loss), "" if val is None else repr(val)])
            logger.debug("epoch %d loss %.5f val_ndcg %s", epoch, mean_loss, val)
            score = val if val is not None else -mean_loss
            if score > best:
                best, best_epoch, best_snap, stale = score, epoch, model.snapshot(), 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    finally:
        if log_fh:
            log_fh.close()
    model.restore(best_snap)
    return TrainResult(best_epoch=best_epoch, best_val_ndcg=best if val_cases else None,
                       epochs_run=epoch, steps=step, history=history)
