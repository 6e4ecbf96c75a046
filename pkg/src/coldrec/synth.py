"""Synthetic interaction logs whose next-item choices are partly predictable from content.

Each item has a latent vector ``z + r``: ``z`` is visible through its content
vector (a random linear map of ``z`` plus noise), ``r`` is a collaborative
residual that content cannot reveal. Users walk through items, preferring
items close to a mix of their taste vector and the previous item. A held-out
set of items is released only after the train/test boundary, so those items
become cold under the temporal split.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import Interaction, InteractionLog, save_interactions, write_content_file


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 2000
    n_items: int = 500
    n_cold: int = 50
    latent_dim: int = 16
    content_dim: int = 64
    n_clusters: int = 12
    cluster_spread: float = 0.7
    residual_scale: float = 0.2
    content_noise: float = 0.3
    popularity_scale: float = 0.1
    temperature: float = 3.0
    taste_weight: float = 0.4
    mean_length: float = 12.0
    min_length: int = 3
    max_length: int = 40
    cold_boost: float = 1.0
    span_min: float = 0.05
    span_max: float = 0.8
    train_fraction: float = 0.9
    seed: int = 0


@dataclass
class SynthData:
    log: InteractionLog
    content: dict[str, np.ndarray]
    held_out: list[str]
    item_latent: np.ndarray


def generate(cfg: SynthConfig = SynthConfig()) -> SynthData:
    if cfg.n_cold >= cfg.n_items:
        raise ValueError("n_cold must be smaller than n_items")
    rng = np.random.default_rng(cfg.seed)
    k = cfg.latent_dim
    centers = rng.standard_normal((cfg.n_clusters, k))
    cluster = rng.integers(cfg.n_clusters, size=cfg.n_items)
    z = centers[cluster] + cfg.cluster_spread * rng.standard_normal((cfg.n_items, k))
    r = cfg.residual_scale * rng.standard_normal((cfg.n_items, k))
    latent = (z + r) / math.sqrt(k)
    popularity = cfg.popularity_scale * rng.standard_normal(cfg.n_items)
    mixing = rng.standard_normal((k, cfg.content_dim))
    content = z @ mixing + cfg.content_noise * rng.standard_normal((cfg.n_items, cfg.content_dim))

    held = np.zeros(cfg.n_items, dtype=bool)
    held[rng.choice(cfg.n_items, size=cfg.n_cold, replace=False)] = True

    taste = (centers[rng.integers(cfg.n_clusters, size=cfg.n_users)]
             + cfg.cluster_spread * rng.standard_normal((cfg.n_users, k))) / math.sqrt(k)
    lengths = np.minimum(cfg.min_length + rng.poisson(cfg.mean_length - cfg.min_length, cfg.n_users),
                         cfg.max_length)
    starts = rng.uniform(0.0, 1.0, cfg.n_users)
    span = rng.uniform(cfg.span_min, cfg.span_max, cfg.n_users)

    events = []  # (time, user, step)
    for u in range(cfg.n_users):
        gaps = rng.exponential(1.0, lengths[u])
        times = starts[u] + span[u] * np.cumsum(gaps) / gaps.sum()
        events.extend((t, u, s) for s, t in enumerate(times))
    events.sort()
    n = len(events)
    cut = math.ceil(cfg.train_fraction * n)
    # integer timestamps are global ranks, so the split boundary is known here
    stamp = {(u, s): rank for rank, (_, u, s) in enumerate(events)}

    items_by_user: list[list[int]] = []
    for u in range(cfg.n_users):
        seq: list[int] = []
        prev = None
        for s in range(lengths[u]):
            ctx = taste[u] if prev is None else cfg.taste_weight * taste[u] + (1 - cfg.taste_weight) * latent[prev]
            logits = cfg.temperature * math.sqrt(k) * (latent @ ctx) + popularity
            if stamp[(u, s)] >= cut:
                logits = logits + cfg.cold_boost * held
            else:
                logits = np.where(held, -np.inf, logits)
            if prev is not None:
                logits[prev] = -np.inf
            p = np.exp(logits - logits.max())
            p /= p.sum()
            prev = int(rng.choice(cfg.n_items, p=p))
            seq.append(prev)
        items_by_user.append(seq)

    rows = [Interaction(f"u{u:05d}", f"i{items_by_user[u][s]:05d}", stamp[(u, s)]) for _, u, s in events]
    vectors = {f"i{i:05d}": content[i] for i in range(cfg.n_items)}
    return SynthData(InteractionLog(rows), vectors, [f"i{i:05d}" for i in np.flatnonzero(held)], latent)


def write_dataset(cfg: SynthConfig, out_dir) -> dict:
    """Write ``interactions.csv``, ``content.txt`` and ``synth.json`` into ``out_dir``."""
    import json

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = generate(cfg)
    save_interactions(data.log, out / "interactions.csv")
    write_content_file(data.content, out / "content.txt")
    meta = {"synth": asdict(cfg), "held_out": data.held_out}
    (out / "synth.json").write_text(json.dumps(meta, indent=2) + "\n")
    return {"interactions": str(out / "interactions.csv"), "content": str(out / "content.txt")}
