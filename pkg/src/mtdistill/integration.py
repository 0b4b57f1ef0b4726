"""Learnable integration of the two frozen teachers.

Dual-teacher rows are projected per side; for pairs nominated by either
top-k selection, the pair oracle's fused feature is projected through a
gate and mixed in with a learnable weight before renormalization. Fusion is
pair-conditioned: entry (l, m) of any integrated similarity matrix uses
features fused with that specific pair's oracle feature, which reduces to
the plain projected rows for every non-selected pair.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import MlpParams, ParamStore, Tensor
from .errors import ConfigError, ContractError
from .teachers import BatchTargets, PairOracleRecord

log = logging.getLogger(__name__)


@dataclass
class IntegrationParams:
    """Gate projections (pair feature -> embed), per-side dual projections,
    mixing weight alpha, and the integrated softmax temperature (stored as a
    log so it stays positive)."""

    text_gate: MlpParams   # pair feature -> d, text side
    image_gate: MlpParams  # pair feature -> d, image side
    text_proj: MlpParams   # dual text row -> d
    image_proj: MlpParams  # dual image row -> d
    alpha: Tensor          # [1, 1]
    log_temperature: Tensor  # [1, 1]

    @property
    def embed_dim(self) -> int:
        return self.text_proj.out_dim

    @property
    def pair_feature_dim(self) -> int:
        return self.text_gate.in_dim

    def temperature(self) -> Tensor:
        return dc.exp(self.log_temperature)

    def register(self, store: ParamStore, prefix: str = "integration") -> None:
        store.add_mlp(f"{prefix}.text_gate", self.text_gate)
        store.add_mlp(f"{prefix}.image_gate", self.image_gate)
        store.add_mlp(f"{prefix}.text_proj", self.text_proj)
        store.add_mlp(f"{prefix}.image_proj", self.image_proj)
        store.add(f"{prefix}.alpha", self.alpha)
        store.add(f"{prefix}.log_temperature", self.log_temperature)


def init_integration(rng: np.random.Generator, pair_feature_dim: int, dual_dim: int,
                     embed_dim: int, temperature_init: float,
                     hidden: int | None = None, alpha_init: float = 0.5
                     ) -> IntegrationParams:
    """Fresh integration parameters; hidden width defaults to the embed dim,
    temperature starts at the dual teacher's."""
    if temperature_init <= 0.0:
        raise ConfigError(f"integration temperature init {temperature_init} <= 0")
    h = embed_dim if hidden is None else hidden
    return IntegrationParams(
        text_gate=dc.init_mlp(rng, pair_feature_dim, h, embed_dim, "text_gate"),
        image_gate=dc.init_mlp(rng, pair_feature_dim, h, embed_dim, "image_gate"),
        text_proj=dc.init_mlp(rng, dual_dim, h, embed_dim, "text_proj"),
        image_proj=dc.init_mlp(rng, dual_dim, h, embed_dim, "image_proj"),
        alpha=dc.parameter([[alpha_init]], "alpha"),
        log_temperature=dc.parameter([[math.log(temperature_init)]], "log_temperature"),
    )


def gated_project(pair_feature, side: str, params: IntegrationParams) -> Tensor:
    """Project a pair feature through the side's gate MLP; an absent pair
    (outside both top-k selections) yields an exact zero vector that sends
    no gradient into the gate weights."""
    if side == "text":
        mlp = params.text_gate
    elif side == "image":
        mlp = params.image_gate
    else:
        raise ContractError(f"gated_project: unknown side '{side}'")
    if pair_feature is None:
        return dc.constant(np.zeros((1, params.embed_dim)))
    feat = dc.as_tensor(pair_feature)
    if feat.shape != (1, params.pair_feature_dim):
        raise ContractError(
            f"gated_project: feature shape {feat.shape} != (1, {params.pair_feature_dim})")
    return dc.mlp_two_layer(feat, mlp)


def fused_pair_features(dual_image_row, dual_text_row,
                        pair_record: PairOracleRecord | None,
                        params: IntegrationParams) -> tuple[Tensor, Tensor]:
    """Fused (text, image) unit vectors for a single pair: projected dual
    rows plus alpha-weighted gated pair features, renormalized."""
    t_row = dc.constant(np.asarray(dual_text_row, dtype=np.float64).reshape(1, -1))
    i_row = dc.constant(np.asarray(dual_image_row, dtype=np.float64).reshape(1, -1))
    feature = None if pair_record is None else pair_record.feature.reshape(1, -1)
    text_pre = dc.add(dc.mlp_two_layer(t_row, params.text_proj),
                      dc.mul(params.alpha, gated_project(feature, "text", params)))
    image_pre = dc.add(dc.mlp_two_layer(i_row, params.image_proj),
                       dc.mul(params.alpha, gated_project(feature, "image", params)))
    _warn_zero_rows(text_pre.values, "fused text feature")
    _warn_zero_rows(image_pre.values, "fused image feature")
    return dc.l2_normalize_rows(text_pre), dc.l2_normalize_rows(image_pre)


def _warn_zero_rows(values: np.ndarray, what: str) -> None:
    zero = ~values.any(axis=1)
    if zero.any():
        log.warning("%s: %d all-zero row(s) before normalization; passed through as zero",
                    what, int(zero.sum()))


@dataclass
class FusedParts:
    """Shared forward pieces reused by every integrated distribution."""

    image_base: Tensor   # [n, d] normalized projected dual image rows
    text_base: Tensor    # [n, d] normalized projected dual text rows
    image_fused: Tensor  # [P, d] normalized pair-conditioned image features
    text_fused: Tensor   # [P, d] normalized pair-conditioned text features
    pair_rows: np.ndarray  # [P] image row of each selected pair
    pair_cols: np.ndarray  # [P] text row of each selected pair


def fused_parts(params: IntegrationParams, batch: BatchTargets) -> FusedParts:
    if batch.pair_index is None or batch.pair_features is None:
        raise ContractError("fused_parts: batch carries no cached pair features")
    image_proj = dc.mlp_two_layer(dc.constant(batch.dual_image_rows), params.image_proj)
    text_proj = dc.mlp_two_layer(dc.constant(batch.dual_text_rows), params.text_proj)

    rows = batch.pair_index[:, 0]
    cols = batch.pair_index[:, 1]
    features = dc.constant(batch.pair_features)
    text_pre = dc.add(dc.gather_rows(text_proj, cols),
                      dc.mul(params.alpha, dc.mlp_two_layer(features, params.text_gate)))
    image_pre = dc.add(dc.gather_rows(image_proj, rows),
                       dc.mul(params.alpha, dc.mlp_two_layer(features, params.image_gate)))
    _warn_zero_rows(text_pre.values, "fused text features")
    _warn_zero_rows(image_pre.values, "fused image features")
    return FusedParts(
        image_base=dc.l2_normalize_rows(image_proj),
        text_base=dc.l2_normalize_rows(text_proj),
        image_fused=dc.l2_normalize_rows(image_pre),
        text_fused=dc.l2_normalize_rows(text_pre),
        pair_rows=rows,
        pair_cols=cols,
    )


def _pairwise_logits(row_side: Tensor, col_side: Tensor,
                     row_fused: Tensor, col_fused: Tensor,
                     parts: FusedParts) -> Tensor:
    """Inner products of pair-conditioned features: a plain product of the
    base matrices, with the selected pairs' entries recomputed from their
    fused features and written over the top."""
    base = dc.matmul(row_side, dc.transpose(col_side))
    corrected = dc.row_sum(dc.mul(row_fused, col_fused))
    return dc.scatter_pairs(base, parts.pair_rows, parts.pair_cols, corrected)


def integrated_teacher_distributions(params: IntegrationParams, batch: BatchTargets,
                                     parts: FusedParts | None = None
                                     ) -> tuple[Tensor, Tensor]:
    """Similarity distributions of the integrated teacher, both directions.

    Gradients flow into the integration parameters only; the teacher rows
    and pair features are frozen constants.
    """
    parts = parts if parts is not None else fused_parts(params, batch)
    logits = _pairwise_logits(parts.image_base, parts.text_base,
                              parts.image_fused, parts.text_fused, parts)
    tau = params.temperature()
    i2t = dc.row_softmax(dc.divide(logits, tau))
    t2i = dc.row_softmax(dc.divide(dc.transpose(logits), tau))
    return i2t, t2i


def cross_feature_distributions(params: IntegrationParams, batch: BatchTargets,
                                student_image: Tensor, student_text: Tensor,
                                student_temperature: Tensor,
                                parts: FusedParts | None = None
                                ) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Cross student-teacher distributions at the averaged temperature:
    student image rows against fused text features, and fused image features
    against student text rows (each in both retrieval directions).

    Gradients reach both the student and the integration parameters.
    """
    parts = parts if parts is not None else fused_parts(params, batch)
    if student_image.shape[1] != params.embed_dim:
        raise ContractError(
            f"cross distributions: student dim {student_image.shape[1]} != fused dim "
            f"{params.embed_dim}")
    img_logits = _pairwise_logits(student_image, parts.text_base,
                                  dc.gather_rows(student_image, parts.pair_rows),
                                  parts.text_fused, parts)
    txt_logits = _pairwise_logits(parts.image_base, student_text,
                                  parts.image_fused,
                                  dc.gather_rows(student_text, parts.pair_cols), parts)
    tau = dc.scale(dc.add(params.temperature(), student_temperature), 0.5)
    img_i2t = dc.row_softmax(dc.divide(img_logits, tau))
    img_t2i = dc.row_softmax(dc.divide(dc.transpose(img_logits), tau))
    txt_i2t = dc.row_softmax(dc.divide(txt_logits, tau))
    txt_t2i = dc.row_softmax(dc.divide(dc.transpose(txt_logits), tau))
    return img_i2t, img_t2i, txt_i2t, txt_t2i
