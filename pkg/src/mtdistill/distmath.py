"""Similarity and distribution algebra shared by every loss.

Covers temperature-scaled softmax similarity matrices, row-wise KL
divergence, deterministic top-k index selection, top-k gathering, and
ratio-preserving L1 row normalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ContractError

# Probabilities are clamped here before any logarithm; structural zeros in
# gated targets would otherwise produce infinities.
KL_EPS = 1e-8

UNIT_TOL = 1e-6
DIST_TOL = 1e-6


def softmax_rows_np(logits: np.ndarray) -> np.ndarray:
    """Plain numpy row softmax for constant (teacher-side) matrices."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def check_unit_rows(rows: np.ndarray, tol: float = UNIT_TOL, what: str = "matrix") -> None:
    norms = np.linalg.norm(rows, axis=1)
    bad = np.abs(norms - 1.0) > tol
    if bad.any():
        i = int(np.argmax(bad))
        raise ContractError(f"{what}: row {i} has norm {norms[i]:.8f}, expected 1 +- {tol}")


def check_distribution(rows: np.ndarray, tol: float = DIST_TOL, what: str = "matrix") -> None:
    if (rows < -tol).any():
        raise ContractError(f"{what}: negative probability entry")
    sums = rows.sum(axis=1)
    bad = np.abs(sums - 1.0) > tol
    if bad.any():
        i = int(np.argmax(bad))
        raise ContractError(f"{what}: row {i} sums to {sums[i]:.8f}, expected 1 +- {tol}")


@dataclass(frozen=True)
class TopKIndexSet:
    """Per-row indices of the k best-scoring columns, best first.

    Ties are broken toward the lowest column index so selection is
    reproducible. Selection is a constant during backward.
    """

    n: int
    m: int
    k: int
    indices: np.ndarray  # [n, k] int64

    def __post_init__(self):
        if self.indices.shape != (self.n, self.k):
            raise ContractError(f"top-k index shape {self.indices.shape} != ({self.n}, {self.k})")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= self.m):
            raise ContractError(f"top-k index out of range for {self.m} columns")

    def row(self, l: int) -> np.ndarray:
        return self.indices[l]


@dataclass
class SparseScoreMatrix:
    """Pair scores defined only on a top-k index set; elsewhere undefined.

    Reading an undefined entry is a contract error rather than a zero fill:
    the rescoring pipeline only ever materializes the selected pairs.
    """

    index_set: TopKIndexSet
    values: np.ndarray  # [n, k], each in [0, 1]

    def __post_init__(self):
        p = self.index_set
        if self.values.shape != (p.n, p.k):
            raise ContractError(f"sparse values shape {self.values.shape} != ({p.n}, {p.k})")
        if self.values.size and (self.values.min() < 0.0 or self.values.max() > 1.0):
            raise ContractError("sparse score outside [0, 1]")

    @property
    def n(self) -> int:
        return self.index_set.n

    @property
    def m(self) -> int:
        return self.index_set.m

    def entry(self, row: int, col: int) -> float:
        hits = np.nonzero(self.index_set.indices[row] == col)[0]
        if hits.size == 0:
            raise ContractError(f"undefined sparse entry ({row}, {col})")
        return float(self.values[row, hits[0]])


def similarity_distribution(img, txt, temperature) -> Tensor:
    """Row-stochastic softmax of the scaled inner-product matrix.

    `temperature` may be a positive float or a positive [1,1] tensor
    (learnable temperatures stay in the graph).
    """
    img, txt = dc.as_tensor(img), dc.as_tensor(txt)
    if img.shape[1] != txt.shape[1]:
        raise ContractError(
            f"similarity_distribution: dims differ, {img.shape} vs {txt.shape}")
    logits = dc.matmul(img, dc.transpose(txt))
    if isinstance(temperature, Tensor):
        if temperature.values.size != 1 or temperature.values[0, 0] <= 0.0:
            raise ContractError("similarity_distribution: temperature must be a positive scalar")
        scaled = dc.divide(logits, temperature)
    else:
        t = float(temperature)
        if t <= 0.0:
            raise ContractError(f"similarity_distribution: temperature {t} <= 0")
        scaled = dc.scale(logits, 1.0 / t)
    return dc.row_softmax(scaled)


def kl_rows(d, d_hat) -> Tensor:
    """Sum over rows of KL(d_row || d_hat_row); d_hat is the target.

    Both operands are clamped below at KL_EPS before the log, so one-hot
    targets and gated structural zeros stay finite.
    """
    d, d_hat = dc.as_tensor(d), dc.as_tensor(d_hat)
    if d.shape != d_hat.shape:
        raise ContractError(f"kl_rows: shape mismatch {d.shape} vs {d_hat.shape}")
    log_ratio = dc.sub(dc.log(dc.clamp_min(d, KL_EPS)), dc.log(dc.clamp_min(d_hat, KL_EPS)))
    return dc.total_sum(dc.mul(d, log_ratio))


def topk_indices(dist, k: int) -> TopKIndexSet:
    """Indices of the k largest entries per row (constant w.r.t. gradients)."""
    values = dist.values if isinstance(dist, Tensor) else np.asarray(dist, dtype=np.float64)
    if values.ndim != 2:
        raise ContractError(f"topk_indices: expected a matrix, got ndim={values.ndim}")
    n, m = values.shape
    if not 1 <= k <= m:
        raise ContractError(f"topk_indices: k={k} outside [1, {m}] for batch of {m} columns")
    # stable argsort on negated values keeps the lowest column first on ties
    order = np.argsort(-values, axis=1, kind="stable")
    return TopKIndexSet(n=n, m=m, k=k, indices=order[:, :k].astype(np.int64))


def gather_topk(d, p: TopKIndexSet):
    """Densify the selected entries: out[l, j] = d[l, p.indices[l][j]].

    Dense tensor input stays differentiable; sparse input must be defined
    exactly on p and returns its stored values.
    """
    if isinstance(d, SparseScoreMatrix):
        if not np.array_equal(d.index_set.indices, p.indices):
            raise ContractError("gather_topk: sparse matrix defined set differs from index set")
        return d.values.copy()
    if isinstance(d, Tensor):
        if p.n != d.shape[0] or p.m > d.shape[1]:
            raise ContractError(f"gather_topk: index set ({p.n},{p.m}) vs matrix {d.shape}")
        return dc.gather_cols(d, p.indices)
    arr = np.asarray(d, dtype=np.float64)
    if p.n != arr.shape[0]:
        raise ContractError(f"gather_topk: index set rows {p.n} vs matrix {arr.shape}")
    return arr[np.arange(p.n)[:, None], p.indices]


def l1_normalize_rows(m):
    """Divide each nonnegative row by its sum, preserving pairwise ratios."""
    if isinstance(m, Tensor):
        vals = m.values
    else:
        vals = np.asarray(m, dtype=np.float64)
        if vals.ndim == 1:
            vals = vals.reshape(1, -1)
    if (vals < 0.0).any():
        raise ContractError("l1_normalize_rows: negative entry")
    sums = vals.sum(axis=1)
    if (sums <= 0.0).any():
        i = int(np.argmax(sums <= 0.0))
        raise ContractError(f"l1_normalize_rows: row {i} sums to zero")
    if isinstance(m, Tensor):
        return dc.divide(m, dc.row_sum(m))
    return vals / sums[:, None]
