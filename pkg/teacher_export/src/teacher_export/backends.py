"""Teacher model backends.

A backend wraps one frozen dual-encoder teacher (per-item embeddings plus a
logit scale) and one frozen pair-scoring teacher (matching probability plus
a fused representation). `ToyBackend` is a fully deterministic stand-in
that genuinely recognizes the toy dataset's blob attributes from both
modalities; the Hugging Face backends drive real checkpoints and need the
`hf` extra plus downloaded weights.
"""

from __future__ import annotations

import re
from typing import Protocol

import numpy as np

from .datasets import IMAGE_SIZE, Sample


class TeacherBackend(Protocol):
    name: str

    @property
    def embed_dim(self) -> int: ...

    @property
    def pair_feature_dim(self) -> int: ...

    def logit_scale(self) -> float: ...

    def embed_images(self, samples: list[Sample]) -> np.ndarray: ...

    def embed_texts(self, samples: list[Sample]) -> np.ndarray: ...

    def score_pairs(self, images: list[Sample], texts: list[Sample]
                    ) -> tuple[np.ndarray, np.ndarray]: ...


def _l2n(rows: np.ndarray) -> np.ndarray:
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


_FLOAT = re.compile(r"-?\d+(?:\.\d+)?")

# attribute normalization ranges for the toy world: x, y, size, brightness
_ATTR_LO = np.array([4.0, 4.0, 1.5, 0.5])
_ATTR_HI = np.array([12.0, 12.0, 4.0, 1.0])


class ToyBackend:
    """Deterministic teacher over the blob toy set.

    The image side recovers blob position/size/brightness from pixel
    moments; the text side parses them from the caption. Both are projected
    through seeded random maps, mimicking a pretrained model that embeds
    two modalities into one space.
    """

    name = "toy"

    def __init__(self, seed: int = 0, embed_dim: int = 16, pair_dim: int = 8):
        rng = np.random.default_rng([seed, 500])
        self._embed_dim = embed_dim
        self._pair_dim = pair_dim
        self._trunk = rng.standard_normal((4, embed_dim)) / 2.0
        self._img_head = np.eye(embed_dim) + 0.05 * rng.standard_normal((embed_dim, embed_dim))
        self._txt_head = np.eye(embed_dim) + 0.05 * rng.standard_normal((embed_dim, embed_dim))
        self._pair_w1 = rng.standard_normal((8, pair_dim)) / np.sqrt(8)
        self._pair_w2 = rng.standard_normal((pair_dim, pair_dim)) / np.sqrt(pair_dim)
        self._logit_scale = 20.0

    @property
    def embed_dim(self) -> int:
        return self._embed_dim

    @property
    def pair_feature_dim(self) -> int:
        return self._pair_dim

    def logit_scale(self) -> float:
        return self._logit_scale

    def _image_attrs(self, image: np.ndarray) -> np.ndarray:
        grid = np.arange(IMAGE_SIZE, dtype=np.float64)
        rows, cols = np.meshgrid(grid, grid, indexing="ij")
        total = image.sum()
        y = float((rows * image).sum() / total)
        x = float((cols * image).sum() / total)
        var = ((rows - y) ** 2 + (cols - x) ** 2) * image
        size = float(np.sqrt(var.sum() / (2.0 * total)))
        bright = float(image.max())
        return np.array([x, y, size, bright])

    def _text_attrs(self, caption: str) -> np.ndarray:
        numbers = [float(v) for v in _FLOAT.findall(caption)]
        if len(numbers) < 4:
            raise ValueError(f"toy caption missing attributes: {caption!r}")
        return np.array(numbers[:4])

    def _normalize_attrs(self, attrs: np.ndarray) -> np.ndarray:
        return 2.0 * (attrs - _ATTR_LO) / (_ATTR_HI - _ATTR_LO) - 1.0

    def embed_images(self, samples: list[Sample]) -> np.ndarray:
        attrs = np.stack([self._normalize_attrs(self._image_attrs(s.image))
                          for s in samples])
        return _l2n(np.tanh(attrs @ self._trunk) @ self._img_head)

    def embed_texts(self, samples: list[Sample]) -> np.ndarray:
        attrs = np.stack([self._normalize_attrs(self._text_attrs(s.caption))
                          for s in samples])
        return _l2n(np.tanh(attrs @ self._trunk) @ self._txt_head)

    def score_pairs(self, images: list[Sample], texts: list[Sample]
                    ) -> tuple[np.ndarray, np.ndarray]:
        img_attrs = np.stack([self._normalize_attrs(self._image_attrs(s.image))
                              for s in images])
        txt_attrs = np.stack([self._normalize_attrs(self._text_attrs(s.caption))
                              for s in texts])
        gap = np.linalg.norm(img_attrs - txt_attrs, axis=1)
        scores = 1.0 / (1.0 + np.exp(-(3.0 - 4.0 * gap)))
        fused = np.tanh(np.tanh(np.concatenate([img_attrs, txt_attrs], axis=1)
                                @ self._pair_w1) @ self._pair_w2)
        return scores, fused

    # student-facing raw features (lower-level than the teacher embeddings)
    def raw_image_features(self, samples: list[Sample]) -> np.ndarray:
        pooled = []
        for s in samples:
            img = s.image.reshape(IMAGE_SIZE // 2, 2, IMAGE_SIZE // 2, 2)
            pooled.append(img.mean(axis=(1, 3)).reshape(-1))
        return np.stack(pooled)

    def raw_text_features(self, samples: list[Sample]) -> np.ndarray:
        # position-salted character-sum hashing; stable across interpreter runs
        out = np.zeros((len(samples), 32))
        for i, s in enumerate(samples):
            for j, token in enumerate(s.caption.split()):
                out[i, (sum(map(ord, token)) + 7 * j) % 32] += 1.0
        return out / np.maximum(out.sum(axis=1, keepdims=True), 1.0)


class HFDualBackend:
    """CLIP-class dual encoder via transformers; requires downloaded weights."""

    name = "hf-dual"

    def __init__(self, model_id: str = "openai/clip-vit-large-patch14"):
        import torch
        from transformers import CLIPModel, CLIPProcessor

        self._torch = torch
        self.model = CLIPModel.from_pretrained(model_id).eval()
        self.processor = CLIPProcessor.from_pretrained(model_id)
        self.model_id = model_id

    @property
    def embed_dim(self) -> int:
        return int(self.model.config.projection_dim)

    def logit_scale(self) -> float:
        return float(self.model.logit_scale.exp().item())

    def embed_images(self, samples: list[Sample]) -> np.ndarray:
        torch = self._torch
        images = [np.stack([s.image] * 3, axis=-1) for s in samples]
        inputs = self.processor(images=images, return_tensors="pt")
        with torch.no_grad():
            feats = self.model.get_image_features(**inputs)
        return _l2n(feats.double().numpy())

    def embed_texts(self, samples: list[Sample]) -> np.ndarray:
        torch = self._torch
        inputs = self.processor(text=[s.caption for s in samples],
                                return_tensors="pt", padding=True, truncation=True)
        with torch.no_grad():
            feats = self.model.get_text_features(**inputs)
        return _l2n(feats.double().numpy())


class HFPairBackend:
    """BLIP-class image-text matcher via transformers; emits the matching
    probability and the fused representation's pooled state."""

    name = "hf-pair"

    def __init__(self, model_id: str = "Salesforce/blip-itm-base-coco"):
        import torch
        from transformers import BlipForImageTextRetrieval, BlipProcessor

        self._torch = torch
        self.model = BlipForImageTextRetrieval.from_pretrained(model_id).eval()
        self.processor = BlipProcessor.from_pretrained(model_id)
        self.model_id = model_id

    def score_pairs(self, images: list[Sample], texts: list[Sample]
                    ) -> tuple[np.ndarray, np.ndarray]:
        torch = self._torch
        scores, fused = [], []
        for img, txt in zip(images, texts):
            pixel = np.stack([img.image] * 3, axis=-1)
            inputs = self.processor(images=pixel, text=txt.caption,
                                    return_tensors="pt", truncation=True)
            with torch.no_grad():
                out = self.model(**inputs, output_hidden_states=True)
            prob = torch.softmax(out.itm_score, dim=-1)[0, 1].item()
            cls = out.last_hidden_state[0, 0].double().numpy()
            scores.append(prob)
            fused.append(cls)
        return np.asarray(scores), np.stack(fused)


def make_backend(model: str, seed: int = 0):
    if model == "toy":
        return ToyBackend(seed=seed)
    if model.startswith("hf:"):
        return HFDualBackend(model.split(":", 1)[1])
    raise ValueError(f"unknown backend '{model}' (expected 'toy' or 'hf:<model-id>')")
