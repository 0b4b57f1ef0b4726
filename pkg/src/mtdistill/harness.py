"""Training loop, optimizer, learning-rate schedule, and retrieval metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import ParamStore, Tensor, backward
from .distmath import similarity_distribution
from .errors import ConfigError, ContractError, NumericError
from .integration import (IntegrationParams, cross_feature_distributions,
                          fused_parts, init_integration,
                          integrated_teacher_distributions)
from .losses import LossConfig, LossInputs, total_loss
from .samples import SampleSet
from .student import Student, StudentConfig, student_distributions
from .teachers import (BatchTargets, DualTeacherBundle, SingleTeacherOracle,
                       prepare_batch)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    epochs: int = 100
    warmup_fraction: float = 0.05
    batch_size: int = 64
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    normalize_by_batch: bool = True
    precision: str = "double"

    def __post_init__(self):
        if self.loss.k > self.batch_size:
            raise ConfigError(
                f"k={self.loss.k} exceeds batch size {self.batch_size}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError(f"warmup_fraction {self.warmup_fraction} outside [0, 1)")
        if self.lr < 0 or self.weight_decay < 0 or self.epochs < 0:
            raise ConfigError("lr, weight_decay and epochs must be nonnegative")
        if self.precision not in ("double", "single"):
            raise ConfigError(f"precision must be double|single, got '{self.precision}'")

    @property
    def k(self) -> int:
        return self.loss.k


class AdamW:
    """Decoupled-weight-decay adaptive-moment optimizer with bias correction.

    Parameters whose names land in `decay_exempt` (biases, temperatures, the
    fusion weight) skip the decay term. Parameters without a gradient are
    left untouched.
    """

    def __init__(self, params: ParamStore, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0, decay_exempt: frozenset[str] = frozenset()):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.decay_exempt = decay_exempt
        self._m = {n: np.zeros_like(t.values) for n, t in params.items()}
        self._v = {n: np.zeros_like(t.values) for n, t in params.items()}
        self._t = 0

    def step(self, lr: float) -> None:
        self._t += 1
        bc1 = 1.0 - self.beta1 ** self._t
        bc2 = 1.0 - self.beta2 ** self._t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and name not in self.decay_exempt:
                update = update + self.weight_decay * p.values
            p.values = p.values - lr * update


def default_decay_exempt(params: ParamStore) -> frozenset[str]:
    return frozenset(
        n for n in params.names()
        if n.endswith((".b", ".b1", ".b2", ".alpha")) or "log_temperature" in n)


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear warmup to the configured rate, then cosine decay to zero."""
    if not 0 <= step < total_steps:
        raise ContractError(f"lr_at: step {step} outside [0, {total_steps})")
    warmup = int(config.warmup_fraction * total_steps)
    if step < warmup:
        return config.lr * step / warmup
    span = total_steps - warmup
    progress = (step - warmup) / span
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# Retrieval evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RetrievalReport:
    """Recall at 1/5/10. `ir_*` is image retrieval (text query ranks images),
    `tr_*` is text retrieval (image query ranks texts)."""

    ir_r1: float
    ir_r5: float
    ir_r10: float
    tr_r1: float
    tr_r5: float
    tr_r10: float
    image_retrieval_queries: int
    text_retrieval_queries: int

    def mean_r1(self) -> float:
        return 0.5 * (self.ir_r1 + self.tr_r1)

    def mean_all(self) -> float:
        return (self.ir_r1 + self.ir_r5 + self.ir_r10 +
                self.tr_r1 + self.tr_r5 + self.tr_r10) / 6.0

    def as_dict(self) -> dict:
        return {
            "ir_r1": self.ir_r1, "ir_r5": self.ir_r5, "ir_r10": self.ir_r10,
            "tr_r1": self.tr_r1, "tr_r5": self.tr_r5, "tr_r10": self.tr_r10,
            "image_retrieval_queries": self.image_retrieval_queries,
            "text_retrieval_queries": self.text_retrieval_queries,
        }


def _recall_at(order: np.ndarray, cand_groups: np.ndarray,
               query_groups: np.ndarray, k: int) -> float:
    top = cand_groups[order[:, :k]]
    hits = (top == query_groups[:, None]).any(axis=1)
    return float(hits.mean())


def retrieval_report(image_feats: np.ndarray, text_feats: np.ndarray,
                     image_groups: np.ndarray, text_groups: np.ndarray
                     ) -> RetrievalReport:
    """Rank by inner product with ties broken toward the lowest candidate
    index; a query counts as recalled when any top-K candidate shares its
    pair group."""
    n_img, n_txt = image_feats.shape[0], text_feats.shape[0]
    if n_img < 10 or n_txt < 10:
        raise ContractError(f"evaluation needs >= 10 items per side, got {n_img}/{n_txt}")
    scores_t2i = text_feats @ image_feats.T
    order_t2i = np.argsort(-scores_t2i, axis=1, kind="stable")
    scores_i2t = image_feats @ text_feats.T
    order_i2t = np.argsort(-scores_i2t, axis=1, kind="stable")
    image_groups = np.asarray(image_groups)
    text_groups = np.asarray(text_groups)
    return RetrievalReport(
        ir_r1=_recall_at(order_t2i, image_groups, text_groups, 1),
        ir_r5=_recall_at(order_t2i, image_groups, text_groups, 5),
        ir_r10=_recall_at(order_t2i, image_groups, text_groups, 10),
        tr_r1=_recall_at(order_i2t, text_groups, image_groups, 1),
        tr_r5=_recall_at(order_i2t, text_groups, image_groups, 5),
        tr_r10=_recall_at(order_i2t, text_groups, image_groups, 10),
        image_retrieval_queries=n_txt,
        text_retrieval_queries=n_img,
    )


def evaluate_retrieval(student: Student, split: SampleSet) -> RetrievalReport:
    if split.size == 0:
        raise ContractError("evaluate_retrieval: empty split")
    img = student.encode_images(split.image_raw).values
    txt = student.encode_texts(split.text_raw).values
    return retrieval_report(img, txt, split.pair_group, split.pair_group)


# ---------------------------------------------------------------------------
# Step construction
# ---------------------------------------------------------------------------

def build_step_loss(loss_cfg: LossConfig, student: Student,
                    integration: IntegrationParams | None,
                    batch: BatchTargets, image_raw: np.ndarray,
                    text_raw: np.ndarray, normalize_by_batch: bool = True
                    ) -> tuple[Tensor, dict[str, Tensor | None]]:
    """Forward pass of one training step: encode, build every distribution
    the configured branches need, and combine the losses."""
    image_feats = student.encode_images(image_raw)
    text_feats = student.encode_texts(text_raw)
    tau_s = student.temperature()
    s_i2t, s_t2i = student_distributions(image_feats, text_feats, tau_s)
    inputs = LossInputs(batch=batch, student_i2t=s_i2t, student_t2i=s_t2i)

    if loss_cfg.needs_integration:
        if integration is None:
            raise ConfigError(f"loss '{loss_cfg.label()}' requires the integration module")
        parts = fused_parts(integration, batch)
        if loss_cfg.tdd == "mt":
            inputs.integrated_i2t, inputs.integrated_t2i = \
                integrated_teacher_distributions(integration, batch, parts)
        if loss_cfg.tfd == "mt_fa":
            (inputs.cross_img_i2t, inputs.cross_img_t2i,
             inputs.cross_txt_i2t, inputs.cross_txt_t2i) = cross_feature_distributions(
                integration, batch, image_feats, text_feats, tau_s, parts)

    if loss_cfg.tfd == "clip_fa":
        if batch.dual_image_rows.shape[1] != image_feats.shape[1]:
            raise ConfigError(
                "clip_fa aligns student features directly with dual-teacher rows; "
                f"student embed dim {image_feats.shape[1]} must equal teacher dim "
                f"{batch.dual_image_rows.shape[1]}")
        avg_tau = dc.scale(dc.add(tau_s, dc.constant([[batch.dual_temperature]])), 0.5)
        dual_img = dc.constant(batch.dual_image_rows)
        dual_txt = dc.constant(batch.dual_text_rows)
        inputs.raw_cross_img_i2t = similarity_distribution(image_feats, dual_txt, avg_tau)
        inputs.raw_cross_img_t2i = similarity_distribution(dual_txt, image_feats, avg_tau)
        inputs.raw_cross_txt_i2t = similarity_distribution(dual_img, text_feats, avg_tau)
        inputs.raw_cross_txt_t2i = similarity_distribution(text_feats, dual_img, avg_tau)

    total, components = total_loss(loss_cfg, inputs)
    if normalize_by_batch:
        total = dc.scale(total, 1.0 / batch.size)
    return total, components


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    student: Student
    integration: IntegrationParams | None
    params: ParamStore
    epoch_records: list[dict]
    best_snapshot: dict
    best_epoch: int
    best_val_mean_r1: float
    final_val: RetrievalReport

    def restore_best(self) -> None:
        self.params.load(self.best_snapshot)


def _epoch_batches(train_set: SampleSet, batch_size: int, min_size: int,
                   rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled batches with at most one caption per pair group; a trailing
    batch smaller than min_size is dropped."""
    groups: dict[int, list[int]] = {}
    for i, g in enumerate(train_set.pair_group):
        groups.setdefault(int(g), []).append(i)
    chosen = []
    for g in sorted(groups):
        members = groups[g]
        chosen.append(members[rng.integers(len(members))] if len(members) > 1 else members[0])
    chosen = np.asarray(chosen, dtype=np.int64)
    rng.shuffle(chosen)
    batches = [chosen[i:i + batch_size] for i in range(0, len(chosen), batch_size)]
    return [b for b in batches if len(b) >= min_size]


def train(cfg: TrainConfig, train_set: SampleSet, val_set: SampleSet,
          bundle: DualTeacherBundle, oracle: SingleTeacherOracle | None = None,
          student_cfg: StudentConfig | None = None,
          integration_hidden: int | None = None,
          alpha_init: float = 0.5) -> TrainResult:
    """Run the full distillation loop and keep the checkpoint with the best
    validation mean R@1 (initialization included)."""
    with dc.precision(cfg.precision):
        return _train_impl(cfg, train_set, val_set, bundle, oracle,
                           student_cfg, integration_hidden, alpha_init)


def _train_impl(cfg, train_set, val_set, bundle, oracle, student_cfg,
                integration_hidden, alpha_init) -> TrainResult:
    loss_cfg = cfg.loss
    if loss_cfg.needs_oracle and oracle is None:
        raise ConfigError(f"loss '{loss_cfg.label()}' requires a pair oracle")
    if student_cfg is None:
        student_cfg = StudentConfig(image_input_dim=train_set.image_dim,
                                    text_input_dim=train_set.text_dim)
    student = Student(student_cfg, np.random.default_rng([cfg.seed, 1]))
    params = student.parameter_store()
    integration = None
    if loss_cfg.needs_integration:
        integration = init_integration(
            np.random.default_rng([cfg.seed, 2]),
            pair_feature_dim=oracle.feature_dim, dual_dim=bundle.dim,
            embed_dim=student_cfg.embed_dim, temperature_init=bundle.temperature,
            hidden=integration_hidden, alpha_init=alpha_init)
        integration.register(params)

    optimizer = AdamW(params, beta1=cfg.beta1, beta2=cfg.beta2,
                      weight_decay=cfg.weight_decay,
                      decay_exempt=default_decay_exempt(params))

    probe = _epoch_batches(train_set, cfg.batch_size, cfg.k + 1,
                           np.random.default_rng([cfg.seed, 3, 0]))
    steps_per_epoch = len(probe)
    if cfg.epochs > 0 and steps_per_epoch == 0:
        raise ConfigError("no usable batches: split smaller than k+1")
    total_steps = cfg.epochs * steps_per_epoch

    def snapshot_metric() -> float:
        return evaluate_retrieval(student, val_set).mean_r1()

    best_val = snapshot_metric()
    best_snapshot = params.snapshot()
    best_epoch = -1

    records: list[dict] = []
    step = 0
    need_topk = loss_cfg.needs_topk
    for epoch in range(cfg.epochs):
        rng_epoch = np.random.default_rng([cfg.seed, 3, epoch])
        sums = {"total": 0.0, "tdd": 0.0, "tfd": 0.0}
        seen = {"tdd": False, "tfd": False}
        last_lr = 0.0
        for index in _epoch_batches(train_set, cfg.batch_size, cfg.k + 1, rng_epoch):
            sub = train_set.take(index)
            batch = prepare_batch(bundle, sub.ids, sub.ids,
                                  k=cfg.k if need_topk else None,
                                  oracle=oracle if loss_cfg.needs_oracle else None)
            try:
                loss, components = build_step_loss(
                    loss_cfg, student, integration, batch,
                    sub.image_raw, sub.text_raw, cfg.normalize_by_batch)
            except NumericError as e:
                raise NumericError(f"training diverged at step {step}: {e}") from e
            params.zero_grad()
            backward(loss)
            last_lr = lr_at(step, total_steps, cfg)
            optimizer.step(last_lr)
            student.clamp_temperature()
            sums["total"] += loss.item()
            for key in ("tdd", "tfd"):
                t = components[key]
                if t is not None:
                    scale = 1.0 / batch.size if cfg.normalize_by_batch else 1.0
                    sums[key] += t.item() * scale
                    seen[key] = True
            step += 1
        val = evaluate_retrieval(student, val_set)
        record = {
            "epoch": epoch,
            "steps": steps_per_epoch,
            "lr": last_lr,
            "loss_total": sums["total"] / max(steps_per_epoch, 1),
            "loss_tdd": sums["tdd"] / max(steps_per_epoch, 1) if seen["tdd"] else None,
            "loss_tfd": sums["tfd"] / max(steps_per_epoch, 1) if seen["tfd"] else None,
            "val": val.as_dict(),
        }
        records.append(record)
        if val.mean_r1() > best_val:
            best_val = val.mean_r1()
            best_snapshot = params.snapshot()
            best_epoch = epoch

    final_val = evaluate_retrieval(student, val_set)
    return TrainResult(student=student, integration=integration, params=params,
                       epoch_records=records, best_snapshot=best_snapshot,
                       best_epoch=best_epoch, best_val_mean_r1=best_val,
                       final_val=final_val)
