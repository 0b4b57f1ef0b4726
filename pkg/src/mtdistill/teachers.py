"""Frozen teacher layer: stored dual-encoder embeddings, a pair-scoring
oracle, and per-batch target construction.

Teacher outputs never enter the gradient graph; everything returned here is
plain numpy that the losses wrap as constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .distmath import (SparseScoreMatrix, TopKIndexSet, check_unit_rows,
                       softmax_rows_np, topk_indices)
from .errors import ContractError, CoverageError, IngestionError


@dataclass(frozen=True)
class PairOracleRecord:
    """One pair-scoring query result: matching score plus fused feature."""

    score: float
    feature: np.ndarray

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ContractError(f"pair score {self.score} outside [0, 1]")
        if not np.isfinite(self.feature).all():
            raise ContractError("pair feature contains non-finite values")


class DualTeacherBundle:
    """Frozen per-item embeddings of the dual-encoder teacher plus its
    softmax temperature.

    Rows are validated against `tol` (file payloads are float32) and then
    renormalized exactly in float64.
    """

    def __init__(self, image_ids, image_rows, text_ids, text_rows,
                 temperature: float, tol: float = 1e-4):
        image_rows = np.asarray(image_rows, dtype=np.float64)
        text_rows = np.asarray(text_rows, dtype=np.float64)
        if temperature <= 0.0:
            raise ContractError(f"dual teacher temperature {temperature} <= 0")
        if image_rows.shape[1] != text_rows.shape[1]:
            raise ContractError(
                f"dual teacher image dim {image_rows.shape[1]} != text dim {text_rows.shape[1]}")
        check_unit_rows(image_rows, tol, "dual teacher image rows")
        check_unit_rows(text_rows, tol, "dual teacher text rows")
        self.image_rows = image_rows / np.linalg.norm(image_rows, axis=1, keepdims=True)
        self.text_rows = text_rows / np.linalg.norm(text_rows, axis=1, keepdims=True)
        self.image_rows.setflags(write=False)
        self.text_rows.setflags(write=False)
        self.temperature = float(temperature)
        self._image_index = {int(i): r for r, i in enumerate(image_ids)}
        self._text_index = {int(i): r for r, i in enumerate(text_ids)}

    @property
    def dim(self) -> int:
        return self.image_rows.shape[1]

    def batch_rows(self, image_ids, text_ids) -> tuple[np.ndarray, np.ndarray]:
        try:
            img = self.image_rows[[self._image_index[int(i)] for i in image_ids]]
        except KeyError as e:
            raise IngestionError(f"dual teacher has no image id {e.args[0]}") from None
        try:
            txt = self.text_rows[[self._text_index[int(i)] for i in text_ids]]
        except KeyError as e:
            raise IngestionError(f"dual teacher has no text id {e.args[0]}") from None
        return img, txt


class SingleTeacherOracle(Protocol):
    """Deterministic pair oracle: same (image, text) query, same record."""

    backend: str

    @property
    def feature_dim(self) -> int: ...

    def query(self, image_id: int, text_id: int) -> PairOracleRecord: ...


class TableOracle:
    """Pair oracle backed by an exported score table; misses are hard errors."""

    backend = "table"

    def __init__(self, records: dict[tuple[int, int], PairOracleRecord], feature_dim: int):
        self._records = records
        self._dim = int(feature_dim)

    @property
    def feature_dim(self) -> int:
        return self._dim

    def query(self, image_id: int, text_id: int) -> PairOracleRecord:
        try:
            return self._records[(int(image_id), int(text_id))]
        except KeyError:
            raise CoverageError(
                f"score table has no record for pair (image={image_id}, text={text_id})") from None


@dataclass
class SyntheticOracleParams:
    """Everything needed to evaluate the synthetic pair oracle.

    Each sample id maps to an image-content latent and a caption latent;
    captions describe their image only approximately, so the two differ.
    """

    scale: float
    bias: float
    noise: float
    seed: int
    w1: np.ndarray  # [2*latent_dim, hidden]
    b1: np.ndarray  # [hidden]
    w2: np.ndarray  # [hidden, feature_dim]
    b2: np.ndarray  # [feature_dim]
    image_latents: dict[int, np.ndarray] = field(default_factory=dict)
    text_latents: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def latent_dim(self) -> int:
        return self.w1.shape[0] // 2

    @property
    def feature_dim(self) -> int:
        return self.w2.shape[1]


def _splitmix64(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z + np.uint64(0x9E3779B97F4A7C15)).astype(np.uint64)
        z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)).astype(np.uint64)
        z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)).astype(np.uint64)
        return z ^ (z >> np.uint64(31))


def _pair_unit_noise(seed: int, image_ids: np.ndarray, text_ids: np.ndarray
                     ) -> np.ndarray:
    """Deterministic standard-normal draw per (image, text) pair via a
    counter-based hash and Box-Muller; vectorizes over pairs."""
    with np.errstate(over="ignore"):
        h = _splitmix64(np.uint64(seed)
                        ^ _splitmix64(image_ids.astype(np.uint64))
                        ^ _splitmix64(~text_ids.astype(np.uint64)))
        u1 = ((_splitmix64(h) >> np.uint64(11)).astype(np.float64) + 1.0) / (2 ** 53 + 1)
        u2 = (_splitmix64(h ^ np.uint64(0xD1B54A32D192ED03)) >> np.uint64(11)
              ).astype(np.float64) / 2 ** 53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


class SyntheticOracle:
    """Latent-space pair oracle: score follows the true latent cosine with a
    small seeded perturbation, so it separates hard pairs more sharply than
    the noisy dual-teacher embeddings.

    Outputs are quantized to float32 so a table exported from this oracle
    reproduces it bit-exactly.
    """

    backend = "synthetic"

    def __init__(self, params: SyntheticOracleParams):
        self.params = params

    @property
    def feature_dim(self) -> int:
        return self.params.feature_dim

    def _rows(self, table: dict, sample_ids: np.ndarray, side: str) -> np.ndarray:
        try:
            return np.stack([table[int(i)] for i in sample_ids])
        except KeyError as e:
            raise CoverageError(
                f"synthetic oracle has no {side} latent for id {e.args[0]}") from None

    def query_many(self, image_ids, text_ids) -> list[PairOracleRecord]:
        p = self.params
        image_ids = np.asarray(image_ids, dtype=np.int64)
        text_ids = np.asarray(text_ids, dtype=np.int64)
        zi = self._rows(p.image_latents, image_ids, "image")
        zt = self._rows(p.text_latents, text_ids, "text")
        cos = (zi * zt).sum(axis=1) / (np.linalg.norm(zi, axis=1)
                                       * np.linalg.norm(zt, axis=1))
        logit = p.scale * cos + p.bias
        if p.noise > 0.0:
            logit = logit + p.noise * _pair_unit_noise(p.seed, image_ids, text_ids)
        scores = np.float32(1.0 / (1.0 + np.exp(-logit))).astype(np.float64)
        hidden = np.tanh(np.concatenate([zi, zt], axis=1) @ p.w1 + p.b1)
        features = np.tanh(hidden @ p.w2 + p.b2).astype(np.float32).astype(np.float64)
        return [PairOracleRecord(score=float(s), feature=f)
                for s, f in zip(scores, features)]

    def query(self, image_id: int, text_id: int) -> PairOracleRecord:
        return self.query_many([image_id], [text_id])[0]


def dual_stream_targets(bundle: DualTeacherBundle, image_ids, text_ids
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Target similarity distributions of the dual-stream teacher, both
    directions, as gradient-free numpy matrices."""
    img, txt = bundle.batch_rows(image_ids, text_ids)
    logits = img @ txt.T / bundle.temperature
    return softmax_rows_np(logits), softmax_rows_np(logits.T)


def single_stream_targets(oracle: SingleTeacherOracle, top_i2t: TopKIndexSet,
                          top_t2i: TopKIndexSet, image_ids, text_ids
                          ) -> tuple[SparseScoreMatrix, SparseScoreMatrix,
                                     dict[tuple[int, int], np.ndarray]]:
    """Rescore the selected pairs with the pair oracle.

    Returns sparse score matrices for both directions plus a cache of fused
    pair features keyed by in-batch (image_row, text_row); a pair appearing
    in both selections is queried exactly once.
    """
    image_ids = [int(i) for i in image_ids]
    text_ids = [int(i) for i in text_ids]
    n = len(image_ids)
    if top_i2t.n != n or top_t2i.n != n:
        raise ContractError("single_stream_targets: index sets do not match batch size")

    needed: set[tuple[int, int]] = set()
    for l in range(n):
        for m in top_i2t.indices[l]:
            needed.add((l, int(m)))
        for m in top_t2i.indices[l]:
            needed.add((int(m), l))

    pairs = sorted(needed)
    if hasattr(oracle, "query_many"):
        fetched = oracle.query_many([image_ids[a] for a, _ in pairs],
                                    [text_ids[b] for _, b in pairs])
    else:
        fetched = [oracle.query(image_ids[a], text_ids[b]) for a, b in pairs]
    records: dict[tuple[int, int], PairOracleRecord] = {}
    feature_cache: dict[tuple[int, int], np.ndarray] = {}
    for (a, b), rec in zip(pairs, fetched):
        records[(a, b)] = rec
        feature_cache[(a, b)] = rec.feature

    scores_i2t = np.zeros((n, top_i2t.k))
    for l in range(n):
        for j, m in enumerate(top_i2t.indices[l]):
            scores_i2t[l, j] = records[(l, int(m))].score
    scores_t2i = np.zeros((n, top_t2i.k))
    for l in range(n):
        for j, m in enumerate(top_t2i.indices[l]):
            scores_t2i[l, j] = records[(int(m), l)].score

    return (SparseScoreMatrix(index_set=top_i2t, values=scores_i2t),
            SparseScoreMatrix(index_set=top_t2i, values=scores_t2i),
            feature_cache)


@dataclass
class BatchTargets:
    """All frozen teacher context for one training batch.

    `pair_index` lists the union of both top-k selections as (image_row,
    text_row) pairs in lexicographic order; `pair_features` holds the
    matching oracle features row-for-row. Both are None when the loss
    configuration needs no pair oracle.
    """

    image_ids: list[int]
    text_ids: list[int]
    dual_image_rows: np.ndarray
    dual_text_rows: np.ndarray
    dual_temperature: float
    dual_i2t: np.ndarray
    dual_t2i: np.ndarray
    top_i2t: TopKIndexSet | None = None
    top_t2i: TopKIndexSet | None = None
    single_i2t: SparseScoreMatrix | None = None
    single_t2i: SparseScoreMatrix | None = None
    pair_index: np.ndarray | None = None     # [P, 2] int64
    pair_features: np.ndarray | None = None  # [P, feature_dim]

    @property
    def size(self) -> int:
        return len(self.image_ids)


def prepare_batch(bundle: DualTeacherBundle, image_ids, text_ids,
                  k: int | None = None,
                  oracle: SingleTeacherOracle | None = None) -> BatchTargets:
    """Build dual targets and, when requested, top-k selections and
    single-stream rescoring for one batch."""
    image_ids = [int(i) for i in image_ids]
    text_ids = [int(i) for i in text_ids]
    img, txt = bundle.batch_rows(image_ids, text_ids)
    dual_i2t, dual_t2i = dual_stream_targets(bundle, image_ids, text_ids)
    batch = BatchTargets(
        image_ids=image_ids, text_ids=text_ids,
        dual_image_rows=img, dual_text_rows=txt,
        dual_temperature=bundle.temperature,
        dual_i2t=dual_i2t, dual_t2i=dual_t2i,
    )
    if k is None:
        return batch
    batch.top_i2t = topk_indices(dual_i2t, k)
    batch.top_t2i = topk_indices(dual_t2i, k)
    if oracle is None:
        return batch
    single_i2t, single_t2i, cache = single_stream_targets(
        oracle, batch.top_i2t, batch.top_t2i, image_ids, text_ids)
    batch.single_i2t = single_i2t
    batch.single_t2i = single_t2i
    pairs = sorted(cache)
    batch.pair_index = np.asarray(pairs, dtype=np.int64).reshape(len(pairs), 2)
    batch.pair_features = np.stack([cache[p] for p in pairs])
    return batch
