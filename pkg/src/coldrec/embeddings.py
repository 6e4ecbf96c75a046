"""Item representation tables and the delta-norm geometry helpers."""

from __future__ import annotations

import enum
import math

import numpy as np

from .data import ContentMatrix
from .numerics import Tensor
from .numerics import tensor as F


class Variant(str, enum.Enum):
    ID_LEARNED = "id_learned"
    CONTENT_INIT = "content_init"
    FROZEN_DELTA = "frozen_delta"


def min_cosine_similarity(delta_max: float) -> float:
    """Worst-case cos(c, c + d) for unit ``c`` and ``|d| <= delta_max``."""
    if not 0.0 <= delta_max < 1.0:
        raise ValueError(f"delta_max must lie in [0, 1), got {delta_max}")
    return math.sqrt(1.0 - delta_max * delta_max)


def adjusted_similarity(delta_norm: float, theta) -> float | np.ndarray:
    """cos(c, c + d) as a function of |d| and the triangle angle opposite c."""
    if not 0.0 <= delta_norm < 1.0:
        raise ValueError(f"delta_norm must lie in [0, 1), got {delta_norm}")
    s = np.sin(theta)
    return np.sqrt(1.0 - delta_norm * delta_norm * s * s)


def _truncated_normal(rng: np.random.Generator, shape, scale: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * scale


class EmbeddingTable:
    """Item embeddings ``e_i``.

    For ``FROZEN_DELTA`` the table is ``base + delta`` where ``base`` holds
    unit-norm content rows that never change and ``delta`` is trainable with
    row norms projected back into the ``delta_max`` ball after every step.
    Warm items without content get a learned base row; ``trainable_rows``
    marks those.
    """

    def __init__(self, variant: Variant, base: np.ndarray, delta: np.ndarray | None = None,
                 delta_max: float | None = None, trainable_rows: np.ndarray | None = None):
        self.variant = Variant(variant)
        n, m = base.shape
        if self.variant is Variant.FROZEN_DELTA:
            if delta_max is None or not 0.0 <= delta_max < 1.0:
                raise ValueError(f"frozen_delta needs delta_max in [0, 1), got {delta_max}")
            if delta is None:
                delta = np.zeros_like(base)
            if trainable_rows is None:
                trainable_rows = np.zeros(n, dtype=bool)
            self.trainable_rows = np.asarray(trainable_rows, dtype=bool)
            self.delta = Tensor(delta.copy(), requires_grad=True, name="item_table.delta")
            self.base = Tensor(base.copy(), requires_grad=bool(self.trainable_rows.any()),
                               name="item_table.base")
            self._row_mask = self.trainable_rows[:, None].astype(np.float64)
        else:
            if delta_max is not None:
                raise ValueError(f"delta_max only applies to frozen_delta, not {self.variant.value}")
            self.trainable_rows = np.ones(n, dtype=bool)
            self.base = Tensor(base.copy(), requires_grad=True, name="item_table.base")
            self.delta = None
        self.delta_max = delta_max

    @property
    def num_items(self) -> int:
        return self.base.shape[0]

    @property
    def dim(self) -> int:
        return self.base.shape[1]

    def parameters(self) -> list[Tensor]:
        params = [self.base] if self.base.requires_grad else []
        if self.delta is not None:
            params.append(self.delta)
        return params

    def weight(self) -> Tensor:
        """Differentiable full item matrix."""
        if self.variant is not Variant.FROZEN_DELTA:
            return self.base
        if not self.base.requires_grad:
            return F.add(Tensor(self.base.data), self.delta)
        # only uncovered rows of base see gradient
        frozen = Tensor(self.base.data * (1.0 - self._row_mask))
        return F.add(F.add(frozen, F.mul(self.base, self._row_mask)), self.delta)

    def matrix(self) -> np.ndarray:
        if self.delta is None:
            return self.base.data.copy()
        return self.base.data + self.delta.data

    def lookup(self, item: int) -> np.ndarray:
        if not 0 <= item < self.num_items:
            raise IndexError(f"item {item} out of range for {self.num_items} items")
        if self.delta is None:
            return self.base.data[item].copy()
        return self.base.data[item] + self.delta.data[item]

    def clip_delta(self) -> None:
        if self.variant is not Variant.FROZEN_DELTA:
            raise ValueError("clip_delta applies only to frozen_delta tables")
        clip_rows(self.delta.data, self.delta_max)

    def state(self) -> dict[str, np.ndarray]:
        out = {"base": self.base.data, "trainable_rows": self.trainable_rows.astype(np.float64)}
        if self.delta is not None:
            out["delta"] = self.delta.data
        return out


def clip_rows(rows: np.ndarray, max_norm: float) -> None:
    """In-place projection of every row onto the ball of radius ``max_norm``."""
    norms = np.linalg.norm(rows, axis=1)
    over = norms > max_norm
    if over.any():
        rows[over] *= (max_norm / norms[over])[:, None]


def init_table(variant: Variant | str, content: ContentMatrix | None, num_items: int, m: int,
               delta_max: float | None = None, seed: int = 0) -> EmbeddingTable:
    variant = Variant(variant)
    rng = np.random.default_rng(seed)
    learned = _truncated_normal(rng, (num_items, m), 1.0 / math.sqrt(m))
    if variant is Variant.ID_LEARNED:
        return EmbeddingTable(variant, learned)
    if content is None:
        raise ValueError(f"variant {variant.value} requires content embeddings")
    if content.vectors.shape != (num_items, m):
        raise ValueError(f"content matrix shape {content.vectors.shape} != ({num_items}, {m})")
    cov = content.coverage
    base = np.where(cov[:, None], content.vectors, learned)
    if variant is Variant.CONTENT_INIT:
        return EmbeddingTable(variant, base)
    return EmbeddingTable(variant, base, np.zeros_like(base), delta_max, trainable_rows=~cov)
