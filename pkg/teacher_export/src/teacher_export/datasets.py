"""Image-caption datasets: a standard folder layout (PNG images plus a
captions.jsonl) and a deterministic toy generator used by the self-tests."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_SIZE = 16


@dataclass
class Sample:
    sample_id: int
    image: np.ndarray  # [H, W] grayscale in [0, 1]
    caption: str


@dataclass
class FolderDataset:
    """Folder with `images/<id>.png` and a `captions.jsonl` of
    {"id": ..., "image": ..., "caption": ...} records."""

    root: Path
    samples: list[Sample]

    @classmethod
    def load(cls, root) -> "FolderDataset":
        root = Path(root)
        manifest = root / "captions.jsonl"
        if not manifest.exists():
            raise FileNotFoundError(f"{root}: no captions.jsonl")
        samples = []
        for line in manifest.read_text().splitlines():
            if not line.strip():
                continue
            record = json.loads(line)
            img = Image.open(root / record["image"]).convert("L")
            pixels = np.asarray(img, dtype=np.float64) / 255.0
            samples.append(Sample(sample_id=int(record["id"]), image=pixels,
                                  caption=record["caption"]))
        samples.sort(key=lambda s: s.sample_id)
        return cls(root=root, samples=samples)

    def __len__(self) -> int:
        return len(self.samples)

    def ids(self) -> list[int]:
        return [s.sample_id for s in self.samples]


def make_toy_dataset(n: int = 10, seed: int = 0) -> list[Sample]:
    """Gaussian-blob images whose captions spell out the blob attributes.
    A sane teacher can recover the attributes from either modality, so true
    pairs score above random ones."""
    rng = np.random.default_rng([seed, 400])
    samples = []
    grid = np.arange(IMAGE_SIZE, dtype=np.float64)
    rows, cols = np.meshgrid(grid, grid, indexing="ij")
    for i in range(n):
        x = float(rng.uniform(4.0, 12.0))
        y = float(rng.uniform(4.0, 12.0))
        size = float(rng.uniform(1.5, 4.0))
        bright = float(rng.uniform(0.5, 1.0))
        image = bright * np.exp(-((rows - y) ** 2 + (cols - x) ** 2) / (2 * size ** 2))
        caption = (f"blob at x {x:.1f} y {y:.1f} size {size:.1f} "
                   f"brightness {bright:.2f}")
        samples.append(Sample(sample_id=i, image=image, caption=caption))
    return samples


def write_dataset_folder(samples: list[Sample], root) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        name = f"images/{s.sample_id}.png"
        payload = np.clip(s.image * 255.0, 0, 255).astype(np.uint8)
        Image.fromarray(payload, mode="L").save(root / name)
        lines.append(json.dumps({"id": s.sample_id, "image": name,
                                 "caption": s.caption}, sort_keys=True))
    (root / "captions.jsonl").write_text("\n".join(lines) + "\n")
    return root
