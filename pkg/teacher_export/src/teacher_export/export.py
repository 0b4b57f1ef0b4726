"""Export routines: teacher embeddings, pair scores, and student-facing raw
features, all in the engine's wire formats with a hashed manifest."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from mtdistill.dataio import (write_pair_scores, write_samples,
                              write_teacher_features)
from mtdistill.samples import SampleSet
from mtdistill.teachers import PairOracleRecord

from .datasets import FolderDataset


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out_dir: Path, payload: dict, files: list[Path]) -> Path:
    payload = dict(payload)
    payload["files"] = {p.name: _sha256(p) for p in sorted(files)}
    path = out_dir / f"{payload['kind']}_manifest.json"
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return path


def export_dual(dataset: FolderDataset, backend, out_dir, batch_size: int = 16
                ) -> dict:
    """Run the dual-encoder teacher over every item and write one teacher
    feature file per side; the teacher's temperature is 1 / logit_scale."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = np.asarray(dataset.ids(), dtype=np.uint64)
    img_chunks, txt_chunks = [], []
    for lo in range(0, len(dataset), batch_size):
        chunk = dataset.samples[lo:lo + batch_size]
        img = backend.embed_images(chunk)
        txt = backend.embed_texts(chunk)
        if img_chunks and img.shape[1] != img_chunks[0].shape[1]:
            raise ValueError(
                f"image embedding dim changed across batches: "
                f"{img.shape[1]} vs {img_chunks[0].shape[1]}")
        img_chunks.append(img)
        txt_chunks.append(txt)
    images = np.concatenate(img_chunks)
    texts = np.concatenate(txt_chunks)
    temperature = 1.0 / backend.logit_scale()
    img_path = out / "teacher_images.mctf"
    txt_path = out / "teacher_texts.mctf"
    write_teacher_features(img_path, ids, images, temperature, "image")
    write_teacher_features(txt_path, ids, texts, temperature, "text")
    manifest_payload = {
        "kind": "dual",
        "model": backend.name,
        "n_items": len(dataset),
        "embed_dim": int(images.shape[1]),
        "temperature": temperature,
    }
    manifest = _write_manifest(out, manifest_payload, [img_path, txt_path])
    return {"images": img_path, "texts": txt_path, "manifest": manifest}


def _pair_list(dataset: FolderDataset, pairs) -> list[tuple[int, int]]:
    ids = set(dataset.ids())
    if pairs == "dense":
        ordered = sorted(ids)
        return [(i, t) for i in ordered for t in ordered]
    out = []
    for i, t in pairs:
        if i not in ids or t not in ids:
            raise ValueError(f"pair ({i}, {t}) references unknown ids")
        out.append((int(i), int(t)))
    return out


def export_pairs(dataset: FolderDataset, backend, out_dir, pairs="dense",
                 batch_size: int = 64) -> dict:
    """Score (image, text) pairs with the single-stream teacher. Scores are
    clamped into [0, 1]; the manifest reports how many needed clamping."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pair_list = _pair_list(dataset, pairs)
    by_id = {s.sample_id: s for s in dataset.samples}
    records = {}
    out_of_range = 0
    for lo in range(0, len(pair_list), batch_size):
        chunk = pair_list[lo:lo + batch_size]
        images = [by_id[i] for i, _ in chunk]
        texts = [by_id[t] for _, t in chunk]
        scores, fused = backend.score_pairs(images, texts)
        for key, score, feature in zip(chunk, scores, fused):
            clamped = min(max(float(score), 0.0), 1.0)
            out_of_range += clamped != float(score)
            records[key] = PairOracleRecord(score=clamped,
                                            feature=np.asarray(feature, dtype=np.float64))
    path = out / "pair_scores.mcps"
    write_pair_scores(path, records)
    manifest_payload = {
        "kind": "pairs",
        "model": backend.name,
        "n_records": len(records),
        "pair_feature_dim": int(next(iter(records.values())).feature.size),
        "dense": pairs == "dense",
        "out_of_range_scores": int(out_of_range),
    }
    manifest = _write_manifest(out, manifest_payload, [path])
    return {"pairs": path, "manifest": manifest}


def export_raw_features(dataset: FolderDataset, backend, out_dir) -> dict:
    """Write the student-facing raw feature vectors as a sample file; pair
    groups follow the dataset ids (one caption per image)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = np.asarray(dataset.ids(), dtype=np.int64)
    split = SampleSet(
        ids=ids,
        image_raw=backend.raw_image_features(dataset.samples),
        text_raw=backend.raw_text_features(dataset.samples),
        pair_group=ids.copy(),
    )
    path = out / "samples.mcds"
    write_samples(path, split)
    manifest_payload = {
        "kind": "raw",
        "model": backend.name,
        "n_items": len(dataset),
        "image_dim": split.image_dim,
        "text_dim": split.text_dim,
    }
    manifest = _write_manifest(out, manifest_payload, [path])
    return {"samples": path, "manifest": manifest}
