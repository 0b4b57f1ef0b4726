"""The lightweight dual-encoder student over pre-extracted raw vectors."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import ParamStore, Tensor
from .errors import ConfigError, ContractError

TAU_MIN = 0.01
TAU_MAX = 1.0


@dataclass(frozen=True)
class StudentConfig:
    image_input_dim: int
    text_input_dim: int
    embed_dim: int = 64
    depth: int = 2
    hidden_multiple: int = 2
    temperature_init: float = 0.07

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"student depth {self.depth} must be >= 1")
        if not TAU_MIN <= self.temperature_init <= TAU_MAX:
            raise ConfigError(
                f"student temperature init {self.temperature_init} outside "
                f"[{TAU_MIN}, {TAU_MAX}]")


def _layer_dims(d_in: int, cfg: StudentConfig) -> list[tuple[int, int]]:
    hidden = cfg.hidden_multiple * cfg.embed_dim
    dims = [d_in] + [hidden] * (cfg.depth - 1) + [cfg.embed_dim]
    return list(zip(dims[:-1], dims[1:]))


class Student:
    """Per-side MLP encoders with row normalization and a learnable
    temperature kept in [0.01, 1.0] by post-step clamping."""

    def __init__(self, config: StudentConfig, rng: np.random.Generator):
        self.config = config
        self.image_layers = self._init_side(rng, config.image_input_dim, "image")
        self.text_layers = self._init_side(rng, config.text_input_dim, "text")
        self.log_temperature = dc.parameter([[math.log(config.temperature_init)]],
                                            "student.log_temperature")

    def _init_side(self, rng, d_in, side) -> list[tuple[Tensor, Tensor]]:
        layers = []
        for i, (a, b) in enumerate(_layer_dims(d_in, self.config)):
            s = 1.0 / math.sqrt(a)
            layers.append((dc.parameter(rng.uniform(-s, s, size=(a, b)), f"{side}.{i}.w"),
                           dc.parameter(np.zeros((1, b)), f"{side}.{i}.b")))
        return layers

    def _encode(self, raw: np.ndarray, layers, expected_dim: int, side: str) -> Tensor:
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim != 2 or raw.shape[1] != expected_dim:
            raise ContractError(
                f"{side} batch shape {raw.shape} does not match input dim {expected_dim}")
        x = dc.constant(raw)
        for i, (w, b) in enumerate(layers):
            x = dc.affine(x, w, b)
            if i < len(layers) - 1:
                x = dc.tanh(x)
        return dc.l2_normalize_rows(x)

    def encode_images(self, raw: np.ndarray) -> Tensor:
        return self._encode(raw, self.image_layers, self.config.image_input_dim, "image")

    def encode_texts(self, raw: np.ndarray) -> Tensor:
        return self._encode(raw, self.text_layers, self.config.text_input_dim, "text")

    def temperature(self) -> Tensor:
        return dc.exp(self.log_temperature)

    def clamp_temperature(self) -> None:
        self.log_temperature.values = np.clip(
            self.log_temperature.values, math.log(TAU_MIN), math.log(TAU_MAX))

    def parameter_store(self) -> ParamStore:
        store = ParamStore()
        for side, layers in (("image", self.image_layers), ("text", self.text_layers)):
            for i, (w, b) in enumerate(layers):
                store.add(f"student.{side}.{i}.w", w)
                store.add(f"student.{side}.{i}.b", b)
        store.add("student.log_temperature", self.log_temperature)
        return store

    def parameter_count(self) -> int:
        return self.parameter_store().count()


def student_distributions(image_feats: Tensor, text_feats: Tensor,
                          temperature: Tensor) -> tuple[Tensor, Tensor]:
    """Both retrieval-direction softmax distributions from one logit matrix;
    the text-to-image logits are exactly the transpose."""
    if image_feats.shape[1] != text_feats.shape[1]:
        raise ContractError(
            f"student_distributions: dims differ, {image_feats.shape} vs {text_feats.shape}")
    logits = dc.matmul(image_feats, dc.transpose(text_feats))
    i2t = dc.row_softmax(dc.divide(logits, temperature))
    t2i = dc.row_softmax(dc.divide(dc.transpose(logits), temperature))
    return i2t, t2i
