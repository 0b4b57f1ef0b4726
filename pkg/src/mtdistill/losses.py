"""The full distillation loss taxonomy and the combined objective.

Every branch is a sum of row-wise KL terms against frozen teacher targets;
the configuration switch reproduces the complete ablation grid (ground
truth only, dual-teacher distribution distillation, top-k rescored
distillation, multi-teacher, and the feature-alignment variants).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .distmath import gather_topk, kl_rows, l1_normalize_rows
from .errors import ConfigError, ContractError
from .teachers import BatchTargets

TDD_CHOICES = ("none", "gt", "clip", "albef", "albef_plus_gt", "clip_plus_gt", "mt")
TFD_CHOICES = ("none", "clip_fa", "mt_fa")

DEFAULT_TOP_K = 11


@dataclass(frozen=True)
class LossConfig:
    """Which distribution-distillation and feature-distillation branches are
    active, plus the rescoring size k."""

    tdd: str = "mt"
    tfd: str = "mt_fa"
    k: int = DEFAULT_TOP_K

    def __post_init__(self):
        if self.tdd not in TDD_CHOICES:
            raise ConfigError(f"unknown tdd branch '{self.tdd}', expected one of {TDD_CHOICES}")
        if self.tfd not in TFD_CHOICES:
            raise ConfigError(f"unknown tfd branch '{self.tfd}', expected one of {TFD_CHOICES}")
        if self.tdd == "none" and self.tfd == "none":
            raise ConfigError("at least one of tdd/tfd must be enabled")
        if self.k < 1:
            raise ConfigError(f"k={self.k} must be positive")

    @property
    def needs_integration(self) -> bool:
        return self.tdd == "mt" or self.tfd == "mt_fa"

    @property
    def needs_oracle(self) -> bool:
        return self.tdd in ("albef", "albef_plus_gt", "mt") or self.tfd == "mt_fa"

    @property
    def needs_topk(self) -> bool:
        return self.needs_oracle

    def label(self) -> str:
        parts = []
        if self.tdd != "none":
            parts.append(self.tdd)
        if self.tfd != "none":
            parts.append(self.tfd)
        return "+".join(parts)


@dataclass
class LossInputs:
    """Every distribution a configured objective might consume.

    The harness fills only the fields the active branches need; a branch
    finding its field None raises a configuration error.
    """

    batch: BatchTargets
    student_i2t: Tensor
    student_t2i: Tensor
    integrated_i2t: Tensor | None = None
    integrated_t2i: Tensor | None = None
    cross_img_i2t: Tensor | None = None   # student image rows vs fused text
    cross_img_t2i: Tensor | None = None
    cross_txt_i2t: Tensor | None = None   # fused image vs student text rows
    cross_txt_t2i: Tensor | None = None
    raw_cross_img_i2t: Tensor | None = None  # student image rows vs raw dual text
    raw_cross_img_t2i: Tensor | None = None
    raw_cross_txt_i2t: Tensor | None = None
    raw_cross_txt_t2i: Tensor | None = None


def f_ds(out_i2t: Tensor, out_t2i: Tensor, target_i2t, target_t2i) -> Tensor:
    """Dual-teacher distribution distillation: KL of both directions against
    the dual targets."""
    return dc.add(kl_rows(out_i2t, target_i2t), kl_rows(out_t2i, target_t2i))


def _rescored_terms(out_i2t: Tensor, out_t2i: Tensor, batch: BatchTargets) -> Tensor:
    """KL between L1-renormalized top-k slices of the output and of the pair
    oracle's rescored targets, both directions."""
    if batch.top_i2t is None or batch.single_i2t is None:
        raise ConfigError("rescored loss terms need top-k selections and oracle scores")
    target_i2t = l1_normalize_rows(gather_topk(batch.single_i2t, batch.top_i2t))
    target_t2i = l1_normalize_rows(gather_topk(batch.single_t2i, batch.top_t2i))
    got_i2t = l1_normalize_rows(gather_topk(out_i2t, batch.top_i2t))
    got_t2i = l1_normalize_rows(gather_topk(out_t2i, batch.top_t2i))
    return dc.add(kl_rows(got_i2t, target_i2t), kl_rows(got_t2i, target_t2i))


def f_mt(out_i2t: Tensor, out_t2i: Tensor, batch: BatchTargets) -> Tensor:
    """Core multi-teacher loss: dual-target KL plus the rescored top-k KL."""
    return dc.add(f_ds(out_i2t, out_t2i, batch.dual_i2t, batch.dual_t2i),
                  _rescored_terms(out_i2t, out_t2i, batch))


def _identity_targets(n: int) -> np.ndarray:
    return np.eye(n)


def loss_tdd(config: LossConfig, inputs: LossInputs) -> Tensor | None:
    """Target distribution distillation branch of the objective."""
    batch = inputs.batch
    s_i2t, s_t2i = inputs.student_i2t, inputs.student_t2i
    branch = config.tdd
    if branch == "none":
        return None
    if branch == "gt":
        eye = _identity_targets(batch.size)
        return dc.add(kl_rows(s_i2t, eye), kl_rows(s_t2i, eye))
    if branch == "clip":
        return f_ds(s_i2t, s_t2i, batch.dual_i2t, batch.dual_t2i)
    if branch == "albef":
        return _rescored_terms(s_i2t, s_t2i, batch)
    if branch == "albef_plus_gt":
        eye = _identity_targets(batch.size)
        return dc.add(_rescored_terms(s_i2t, s_t2i, batch),
                      dc.add(kl_rows(s_i2t, eye), kl_rows(s_t2i, eye)))
    if branch == "clip_plus_gt":
        eye = _identity_targets(batch.size)
        return dc.add(f_ds(s_i2t, s_t2i, batch.dual_i2t, batch.dual_t2i),
                      dc.add(kl_rows(s_i2t, eye), kl_rows(s_t2i, eye)))
    if branch == "mt":
        if inputs.integrated_i2t is None or inputs.integrated_t2i is None:
            raise ConfigError("tdd branch 'mt' requires the integration module")
        return dc.add(f_mt(s_i2t, s_t2i, batch),
                      f_mt(inputs.integrated_i2t, inputs.integrated_t2i, batch))
    raise ConfigError(f"unhandled tdd branch '{branch}'")


def loss_tfd(config: LossConfig, inputs: LossInputs) -> Tensor | None:
    """Target feature distillation branch of the objective."""
    batch = inputs.batch
    branch = config.tfd
    if branch == "none":
        return None
    if branch == "clip_fa":
        needed = (inputs.raw_cross_img_i2t, inputs.raw_cross_img_t2i,
                  inputs.raw_cross_txt_i2t, inputs.raw_cross_txt_t2i)
        if any(t is None for t in needed):
            raise ConfigError("tfd branch 'clip_fa' requires raw cross distributions")
        return dc.add(
            f_ds(inputs.raw_cross_img_i2t, inputs.raw_cross_img_t2i,
                 batch.dual_i2t, batch.dual_t2i),
            f_ds(inputs.raw_cross_txt_i2t, inputs.raw_cross_txt_t2i,
                 batch.dual_i2t, batch.dual_t2i))
    if branch == "mt_fa":
        needed = (inputs.cross_img_i2t, inputs.cross_img_t2i,
                  inputs.cross_txt_i2t, inputs.cross_txt_t2i)
        if any(t is None for t in needed):
            raise ConfigError("tfd branch 'mt_fa' requires the integration module")
        return dc.add(f_mt(inputs.cross_img_i2t, inputs.cross_img_t2i, batch),
                      f_mt(inputs.cross_txt_i2t, inputs.cross_txt_t2i, batch))
    raise ConfigError(f"unhandled tfd branch '{branch}'")


def total_loss(config: LossConfig, inputs: LossInputs
               ) -> tuple[Tensor, dict[str, Tensor | None]]:
    """Sum of the configured branches; a disabled side contributes nothing."""
    if inputs.student_i2t.shape != inputs.student_t2i.shape:
        raise ContractError("total_loss: student distribution shapes differ")
    tdd = loss_tdd(config, inputs)
    tfd = loss_tfd(config, inputs)
    if tdd is None and tfd is None:
        raise ConfigError("total_loss: both branches disabled")
    if tdd is None:
        total = tfd
    elif tfd is None:
        total = tdd
    else:
        total = dc.add(tdd, tfd)
    return total, {"tdd": tdd, "tfd": tfd}
