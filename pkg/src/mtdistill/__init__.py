"""Distillation engine for lightweight dual-encoder image-text retrieval.

Trains a small two-tower student from two frozen heterogeneous teachers: a
dual-encoder embedding teacher and a pair-scoring teacher, fused through a
learnable gated integration module.
"""

from .diffcore import ParamStore, Tensor, backward, gradient_check
from .distmath import (SparseScoreMatrix, TopKIndexSet, gather_topk, kl_rows,
                       l1_normalize_rows, similarity_distribution, topk_indices)
from .harness import (AdamW, RetrievalReport, TrainConfig, evaluate_retrieval,
                      lr_at, retrieval_report, train)
from .losses import LossConfig, f_ds, f_mt, loss_tdd, loss_tfd, total_loss
from .student import Student, StudentConfig, student_distributions
from .teachers import (DualTeacherBundle, PairOracleRecord, SyntheticOracle,
                       TableOracle, dual_stream_targets, prepare_batch,
                       single_stream_targets)

__version__ = "0.1.0"
