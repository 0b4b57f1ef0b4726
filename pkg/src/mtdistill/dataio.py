"""Wire formats, run configuration, and the synthetic world generator.

All multi-byte integers are little-endian; every file starts with a 4-byte
magic and a u32 version and is rejected on mismatch. Float payloads are
f32 (metrics are not precision-critical there) while temperatures and
oracle parameters are stored wide because they enter every softmax.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, FormatError, GenerationError
from .harness import RetrievalReport, TrainConfig, retrieval_report
from .losses import LossConfig
from .samples import SampleSet
from .student import StudentConfig
from .teachers import (DualTeacherBundle, PairOracleRecord, SyntheticOracle,
                       SyntheticOracleParams, TableOracle)

FORMAT_VERSION = 1
TEACHER_MAGIC = b"MCTF"
PAIR_MAGIC = b"MCPS"
DATASET_MAGIC = b"MCDS"
ORACLE_MAGIC = b"MCSO"
CHECKPOINT_MAGIC = b"MCKP"

_SIDE_CODES = {"image": 0, "text": 1}
_SIDE_NAMES = {v: k for k, v in _SIDE_CODES.items()}


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file while reading {what}")
    return buf


def _check_magic(f, expected: bytes, path) -> None:
    magic = _read_exact(f, 4, "magic")
    if magic != expected:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {expected!r}")
    version = struct.unpack("<I", _read_exact(f, 4, "version"))[0]
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")


# ---------------------------------------------------------------------------
# Teacher feature files
# ---------------------------------------------------------------------------

@dataclass
class TeacherFeatureData:
    ids: np.ndarray       # [n] u64, strictly increasing
    vectors: np.ndarray   # [n, dim] float64 (f32-valued)
    temperature: float
    side: str


def write_teacher_features(path, ids, vectors, temperature: float, side: str) -> None:
    if side not in _SIDE_CODES:
        raise ContractError(f"teacher side must be image|text, got '{side}'")
    if temperature <= 0.0:
        raise ContractError(f"teacher temperature {temperature} <= 0")
    ids = np.asarray(ids, dtype=np.uint64)
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] != ids.shape[0]:
        raise ContractError(f"teacher vectors shape {vectors.shape} vs {ids.shape[0]} ids")
    if ids.size > 1 and not (ids[1:] > ids[:-1]).all():
        raise ContractError("teacher ids must be strictly increasing")
    norms = np.linalg.norm(vectors, axis=1)
    if np.abs(norms - 1.0).max(initial=0.0) > 1e-4:
        raise ContractError("teacher vectors must be unit-norm within 1e-4 at write time")
    n, dim = vectors.shape
    rec = np.zeros(n, dtype=np.dtype([("id", "<u8"), ("vec", "<f4", (dim,))]))
    rec["id"] = ids
    rec["vec"] = vectors.astype("<f4")
    with open(path, "wb") as f:
        f.write(TEACHER_MAGIC)
        f.write(struct.pack("<IIId B", FORMAT_VERSION, n, dim, float(temperature),
                            _SIDE_CODES[side]))
        f.write(rec.tobytes())


def read_teacher_features(path) -> TeacherFeatureData:
    with open(path, "rb") as f:
        _check_magic(f, TEACHER_MAGIC, path)
        n, dim, temperature, side_code = struct.unpack(
            "<IId B", _read_exact(f, 4 + 4 + 8 + 1, "header"))
        if side_code not in _SIDE_NAMES:
            raise FormatError(f"{path}: unknown side code {side_code}")
        rec_dtype = np.dtype([("id", "<u8"), ("vec", "<f4", (dim,))])
        body = _read_exact(f, n * rec_dtype.itemsize, "records")
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after {n} records")
    rec = np.frombuffer(body, dtype=rec_dtype)
    ids = rec["id"].astype(np.uint64)
    vectors = rec["vec"].astype(np.float64)
    if ids.size > 1 and not (ids[1:] > ids[:-1]).all():
        raise FormatError(f"{path}: ids not strictly increasing")
    if not np.isfinite(vectors).all():
        raise FormatError(f"{path}: non-finite vector payload")
    if temperature <= 0.0:
        raise FormatError(f"{path}: non-positive temperature")
    return TeacherFeatureData(ids=ids, vectors=vectors,
                              temperature=temperature, side=_SIDE_NAMES[side_code])


# ---------------------------------------------------------------------------
# Pair score files
# ---------------------------------------------------------------------------

def write_pair_scores(path, records: dict[tuple[int, int], PairOracleRecord]) -> None:
    keys = sorted(records)
    if not keys:
        raise ContractError("pair score file needs at least one record")
    d_ss = records[keys[0]].feature.size
    rec_dtype = np.dtype([("image_id", "<u8"), ("text_id", "<u8"),
                          ("score", "<f4"), ("h", "<f4", (d_ss,))])
    body = np.zeros(len(keys), dtype=rec_dtype)
    for i, key in enumerate(keys):
        r = records[key]
        if r.feature.size != d_ss:
            raise ContractError(f"pair {key}: feature dim {r.feature.size} != {d_ss}")
        body[i] = (key[0], key[1], np.float32(r.score), r.feature.astype("<f4"))
    if (body["score"] < 0).any() or (body["score"] > 1).any():
        raise ContractError("pair score outside [0, 1]")
    with open(path, "wb") as f:
        f.write(PAIR_MAGIC)
        f.write(struct.pack("<IQI", FORMAT_VERSION, len(keys), d_ss))
        f.write(body.tobytes())


def read_pair_scores(path) -> tuple[dict[tuple[int, int], PairOracleRecord], int]:
    with open(path, "rb") as f:
        _check_magic(f, PAIR_MAGIC, path)
        n, d_ss = struct.unpack("<QI", _read_exact(f, 12, "header"))
        rec_dtype = np.dtype([("image_id", "<u8"), ("text_id", "<u8"),
                              ("score", "<f4"), ("h", "<f4", (d_ss,))])
        body = _read_exact(f, n * rec_dtype.itemsize, "records")
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after {n} records")
    rec = np.frombuffer(body, dtype=rec_dtype)
    if (rec["score"] < 0).any() or (rec["score"] > 1).any():
        raise FormatError(f"{path}: score outside [0, 1]")
    out: dict[tuple[int, int], PairOracleRecord] = {}
    for row in rec:
        key = (int(row["image_id"]), int(row["text_id"]))
        if key in out:
            raise FormatError(f"{path}: duplicate pair {key}")
        out[key] = PairOracleRecord(score=float(row["score"]),
                                    feature=row["h"].astype(np.float64))
    return out, int(d_ss)


# ---------------------------------------------------------------------------
# Raw sample files
# ---------------------------------------------------------------------------

def write_samples(path, split: SampleSet) -> None:
    n = split.size
    d_img, d_txt = split.image_dim, split.text_dim
    rec_dtype = np.dtype([("id", "<u8"), ("group", "<u8"),
                          ("img", "<f4", (d_img,)), ("txt", "<f4", (d_txt,))])
    body = np.zeros(n, dtype=rec_dtype)
    body["id"] = split.ids.astype(np.uint64)
    body["group"] = split.pair_group.astype(np.uint64)
    body["img"] = split.image_raw.astype("<f4")
    body["txt"] = split.text_raw.astype("<f4")
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<IIII", FORMAT_VERSION, n, d_img, d_txt))
        f.write(body.tobytes())


def read_samples(path) -> SampleSet:
    with open(path, "rb") as f:
        _check_magic(f, DATASET_MAGIC, path)
        n, d_img, d_txt = struct.unpack("<III", _read_exact(f, 12, "header"))
        rec_dtype = np.dtype([("id", "<u8"), ("group", "<u8"),
                              ("img", "<f4", (d_img,)), ("txt", "<f4", (d_txt,))])
        body = _read_exact(f, n * rec_dtype.itemsize, "records")
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after {n} records")
    rec = np.frombuffer(body, dtype=rec_dtype)
    return SampleSet(ids=rec["id"].astype(np.int64),
                     image_raw=rec["img"].astype(np.float64),
                     text_raw=rec["txt"].astype(np.float64),
                     pair_group=rec["group"].astype(np.int64))


# ---------------------------------------------------------------------------
# Synthetic oracle parameter files
# ---------------------------------------------------------------------------

def write_oracle_params(path, p: SyntheticOracleParams) -> None:
    ids = sorted(p.image_latents)
    if sorted(p.text_latents) != ids:
        raise ContractError("oracle image/text latent id sets differ")
    latent_dim = p.latent_dim
    hidden = p.w1.shape[1]
    feature_dim = p.feature_dim
    with open(path, "wb") as f:
        f.write(ORACLE_MAGIC)
        f.write(struct.pack("<IIIII", FORMAT_VERSION, latent_dim, hidden,
                            feature_dim, len(ids)))
        f.write(struct.pack("<dddQ", p.scale, p.bias, p.noise, p.seed))
        for arr in (p.w1, p.b1, p.w2, p.b2):
            f.write(np.asarray(arr, dtype="<f8").tobytes())
        for i in ids:
            f.write(struct.pack("<Q", i))
            f.write(np.asarray(p.image_latents[i], dtype="<f8").tobytes())
            f.write(np.asarray(p.text_latents[i], dtype="<f8").tobytes())


def read_oracle_params(path) -> SyntheticOracleParams:
    with open(path, "rb") as f:
        _check_magic(f, ORACLE_MAGIC, path)
        latent_dim, hidden, feature_dim, n_ids = struct.unpack(
            "<IIII", _read_exact(f, 16, "header"))
        scale, bias, noise, seed = struct.unpack("<dddQ", _read_exact(f, 32, "params"))

        def read_array(shape):
            count = int(np.prod(shape))
            return np.frombuffer(_read_exact(f, 8 * count, "weights"),
                                 dtype="<f8").reshape(shape).copy()

        w1 = read_array((2 * latent_dim, hidden))
        b1 = read_array((hidden,))
        w2 = read_array((hidden, feature_dim))
        b2 = read_array((feature_dim,))
        image_latents: dict[int, np.ndarray] = {}
        text_latents: dict[int, np.ndarray] = {}
        for _ in range(n_ids):
            (i,) = struct.unpack("<Q", _read_exact(f, 8, "latent id"))
            image_latents[int(i)] = read_array((latent_dim,))
            text_latents[int(i)] = read_array((latent_dim,))
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes")
    return SyntheticOracleParams(scale=scale, bias=bias, noise=noise, seed=int(seed),
                                 w1=w1, b1=b1, w2=w2, b2=b2,
                                 image_latents=image_latents,
                                 text_latents=text_latents)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def write_checkpoint(path, meta: dict, state: dict[str, np.ndarray]) -> None:
    meta_blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(meta_blob)))
        f.write(meta_blob)
        f.write(struct.pack("<I", len(state)))
        for name in sorted(state):
            blob = name.encode()
            arr = np.asarray(state[name], dtype="<f8")
            f.write(struct.pack("<H", len(blob)))
            f.write(blob)
            f.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
            f.write(arr.tobytes())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        _check_magic(f, CHECKPOINT_MAGIC, path)
        (meta_len,) = struct.unpack("<I", _read_exact(f, 4, "meta length"))
        meta = json.loads(_read_exact(f, meta_len, "meta"))
        (n_params,) = struct.unpack("<I", _read_exact(f, 4, "param count"))
        state: dict[str, np.ndarray] = {}
        for _ in range(n_params):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, name_len, "name").decode()
            rows, cols = struct.unpack("<II", _read_exact(f, 8, "shape"))
            data = np.frombuffer(_read_exact(f, 8 * rows * cols, name),
                                 dtype="<f8").reshape(rows, cols).copy()
            state[name] = data
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes")
    return meta, state


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GenerateConfig:
    """Synthetic world shape.

    Latents are clustered; cluster identity lives in the first
    `dual_visible_dims` coordinates while within-cluster identity is spread
    mostly over the remaining detail coordinates. The dual teacher embeds
    only the visible coordinates (a coarse-attribute model); the pair oracle
    scores with the full latent, so it separates clustermates the dual
    teacher confuses.
    """

    n_train: int = 2000
    n_val: int = 800
    n_test: int = 500
    latent_dim: int = 16
    dual_visible_dims: int = 10
    # how strongly the dual teacher perceives the detail coordinates;
    # 1.0 = full fidelity, 0.0 = completely blind
    detail_attenuation: float = 0.35
    n_clusters: int = 128
    cluster_spread: float = 0.35  # within-cluster spread, visible coords
    detail_spread: float = 0.35   # within-cluster spread, detail coords
    d_image_raw: int = 48
    d_text_raw: int = 40
    # matches the default student embed dim so clip_fa runs out of the box
    d_dual: int = 64
    d_pair_feature: int = 32
    image_noise: float = 0.25
    text_noise: float = 0.25
    # Training images may carry several captions of varying quality
    # (web-style alt-text): caption c of an image gets latent-level
    # imprecision caption_noise + c * caption_quality_step. Identity targets
    # treat every caption as a perfect match; the teachers grade each
    # caption's actual content. Val/test pairs are curated: one clean
    # caption per image.
    captions_per_image: int = 1
    caption_noise: float = 0.15
    caption_quality_step: float = 0.0
    # fraction of training captions whose content is swapped with another
    # image's (fluent but mismatched alt-text, the classic scraping defect)
    caption_corrupt_fraction: float = 0.65
    dual_noise: float = 0.2
    oracle_scale: float = 14.0
    oracle_bias: float = -11.0
    oracle_noise: float = 0.1
    dual_temperature: float = 0.09
    seed: int = 0

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigError("split sizes must be >= 1")
        if not 1 <= self.dual_visible_dims <= self.latent_dim:
            raise ConfigError(
                f"dual_visible_dims {self.dual_visible_dims} outside "
                f"[1, {self.latent_dim}]")
        if not 0.0 <= self.detail_attenuation <= 1.0:
            raise ConfigError(
                f"detail_attenuation {self.detail_attenuation} outside [0, 1]")
        if self.captions_per_image < 1:
            raise ConfigError("captions_per_image must be >= 1")
        for name in ("cluster_spread", "detail_spread", "image_noise",
                     "text_noise", "caption_noise", "caption_quality_step",
                     "dual_noise", "oracle_noise"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.caption_corrupt_fraction < 1.0:
            raise ConfigError(
                f"caption_corrupt_fraction {self.caption_corrupt_fraction} "
                "outside [0, 1)")
        if self.dual_temperature <= 0:
            raise ConfigError("dual_temperature must be > 0")


@dataclass(frozen=True)
class DataSection:
    world: str = "world"
    oracle: str = "synthetic"
    pair_scores: str | None = None

    def __post_init__(self):
        if self.oracle not in ("synthetic", "table"):
            raise ConfigError(f"oracle backend must be synthetic|table, got '{self.oracle}'")
        if self.oracle == "table" and not self.pair_scores:
            raise ConfigError("table oracle backend needs data.pair_scores")


@dataclass(frozen=True)
class StudentSection:
    embed_dim: int = 64
    depth: int = 2
    hidden_multiple: int = 2
    temperature_init: float = 0.07


@dataclass(frozen=True)
class IntegrationSection:
    hidden: int | None = None
    alpha_init: float = 0.5


@dataclass(frozen=True)
class TrainSection:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    epochs: int = 100
    warmup_fraction: float = 0.05
    batch_size: int = 64
    seed: int = 0
    normalize_by_batch: bool = True
    precision: str = "double"


@dataclass(frozen=True)
class LossSection:
    tdd: str = "mt"
    tfd: str = "mt_fa"
    k: int = 11


@dataclass(frozen=True)
class AblateSection:
    grid: tuple = (
        {"tdd": "gt", "tfd": "none"},
        {"tdd": "clip", "tfd": "none"},
        {"tdd": "mt", "tfd": "mt_fa"},
    )
    seeds: tuple = (0, 1, 2, 3, 4)


_SECTIONS = {
    "data": DataSection,
    "student": StudentSection,
    "integration": IntegrationSection,
    "train": TrainSection,
    "loss": LossSection,
    "generate": GenerateConfig,
    "ablate": AblateSection,
}


@dataclass
class RunConfig:
    data: DataSection
    student: StudentSection
    integration: IntegrationSection
    train: TrainSection
    loss: LossSection
    generate: GenerateConfig
    ablate: AblateSection
    base_dir: Path

    def loss_config(self) -> LossConfig:
        return LossConfig(tdd=self.loss.tdd, tfd=self.loss.tfd, k=self.loss.k)

    def train_config(self, seed: int | None = None,
                     loss: LossConfig | None = None) -> TrainConfig:
        t = self.train
        return TrainConfig(lr=t.lr, beta1=t.beta1, beta2=t.beta2,
                           weight_decay=t.weight_decay, epochs=t.epochs,
                           warmup_fraction=t.warmup_fraction, batch_size=t.batch_size,
                           seed=t.seed if seed is None else seed,
                           loss=loss if loss is not None else self.loss_config(),
                           normalize_by_batch=t.normalize_by_batch,
                           precision=t.precision)

    def student_config(self, image_dim: int, text_dim: int) -> StudentConfig:
        s = self.student
        return StudentConfig(image_input_dim=image_dim, text_input_dim=text_dim,
                             embed_dim=s.embed_dim, depth=s.depth,
                             hidden_multiple=s.hidden_multiple,
                             temperature_init=s.temperature_init)

    def world_dir(self) -> Path:
        return (self.base_dir / self.data.world).resolve()

    def canonical(self) -> dict:
        out = {}
        for name, section in _SECTIONS.items():
            value = asdict(getattr(self, name))
            if name == "ablate":
                value = {"grid": list(value["grid"]), "seeds": list(value["seeds"])}
            out[name] = value
        return out


def _build_section(cls, data: dict, where: str):
    allowed = {f.name for f in fields(cls)}
    for key in data:
        if key not in allowed:
            raise ConfigError(f"unknown config key '{where}.{key}'")
    if cls is AblateSection:
        kwargs = {}
        if "grid" in data:
            kwargs["grid"] = tuple(dict(entry) for entry in data["grid"])
        if "seeds" in data:
            kwargs["seeds"] = tuple(int(s) for s in data["seeds"])
        return cls(**kwargs)
    return cls(**data)


def config_from_dict(raw: dict, base_dir: Path) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config document must be a JSON object")
    for key in raw:
        if key not in _SECTIONS:
            raise ConfigError(f"unknown config section '{key}'")
    parts = {name: _build_section(cls, raw.get(name, {}), name)
             for name, cls in _SECTIONS.items()}
    cfg = RunConfig(base_dir=base_dir, **parts)
    cfg.loss_config()  # validate loss choices eagerly
    for i, entry in enumerate(cfg.ablate.grid):
        unknown = set(entry) - {"tdd", "tfd", "k"}
        if unknown:
            raise ConfigError(f"unknown key in ablate.grid[{i}]: {sorted(unknown)[0]}")
        LossConfig(**{"k": cfg.loss.k, **entry})
    return cfg


def parse_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: malformed JSON at byte {e.pos}: {e.msg}") from e
    return config_from_dict(raw, path.parent)


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(cfg.canonical(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def run_dir_name(cfg: RunConfig, seed: int) -> str:
    return f"{config_hash(cfg)}-s{seed}"


# ---------------------------------------------------------------------------
# Synthetic world
# ---------------------------------------------------------------------------

@dataclass
class World:
    splits: dict[str, SampleSet]
    bundle: DualTeacherBundle
    oracle: SyntheticOracle
    manifest: dict
    # as-written teacher payload (f32-valued), kept so write -> load -> write
    # reproduces identical bytes
    teacher_ids: np.ndarray
    dual_image_vectors: np.ndarray
    dual_text_vectors: np.ndarray

    @property
    def train(self) -> SampleSet:
        return self.splits["train"]

    @property
    def val(self) -> SampleSet:
        return self.splits["val"]

    @property
    def test(self) -> SampleSet:
        return self.splits["test"]


def _l2n(rows: np.ndarray) -> np.ndarray:
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def _f32(arr: np.ndarray) -> np.ndarray:
    # Quantize to f32 so in-memory worlds match their file round-trip exactly.
    return arr.astype(np.float32).astype(np.float64)


def _spearman(a: np.ndarray, b: np.ndarray) -> float:
    ra = np.argsort(np.argsort(a)).astype(np.float64)
    rb = np.argsort(np.argsort(b)).astype(np.float64)
    return float(np.corrcoef(ra, rb)[0, 1])


def _probe_pairs(rng: np.random.Generator, ids: np.ndarray, cluster: np.ndarray,
                 count: int) -> list[tuple[int, int]]:
    """Positives, same-cluster confusions, and random pairs for the probe."""
    n = len(ids)
    by_cluster: dict[int, list[int]] = {}
    for pos, c in enumerate(cluster):
        by_cluster.setdefault(int(c), []).append(pos)
    pairs: list[tuple[int, int]] = []
    while len(pairs) < count:
        a = int(rng.integers(n))
        pairs.append((a, a))
        mates = by_cluster[int(cluster[a])]
        if len(mates) > 1:
            b = a
            while b == a:
                b = int(mates[rng.integers(len(mates))])
            pairs.append((a, b))
        pairs.append((a, int(rng.integers(n))))
    return [(int(ids[a]), int(ids[b])) for a, b in pairs[:count]]


def generate_synthetic_world(cfg: GenerateConfig) -> World:
    """Build a deterministic desk-scale world: clustered latents, noisy raw
    features for the student, noisier dual-teacher embeddings, and a pair
    oracle whose scores track the true latent cosine more faithfully than
    the dual teacher does (enforced by a rank-correlation probe)."""
    n_images = cfg.n_train + cfg.n_val + cfg.n_test
    reps = cfg.captions_per_image
    n_train_rows = cfg.n_train * reps
    vis = cfg.dual_visible_dims
    rng = np.random.default_rng([cfg.seed, 100])
    centers = rng.standard_normal((cfg.n_clusters, cfg.latent_dim))
    assign = rng.integers(0, cfg.n_clusters, size=n_images)
    offsets = rng.standard_normal((n_images, cfg.latent_dim))
    offsets[:, :vis] *= cfg.cluster_spread
    offsets[:, vis:] *= cfg.detail_spread
    latents = centers[assign] + offsets

    # One row per (image, caption). Training images carry a quality ladder of
    # captions; val/test images one curated caption each.
    row_image = np.concatenate([
        np.repeat(np.arange(cfg.n_train), reps),
        np.arange(cfg.n_train, n_images),
    ]).astype(np.int64)
    total_rows = len(row_image)
    ids = np.arange(total_rows, dtype=np.int64)
    caption_level = np.zeros(total_rows)
    caption_level[:n_train_rows] = cfg.caption_noise + cfg.caption_quality_step * \
        np.tile(np.arange(reps, dtype=np.float64), cfg.n_train)

    caption_content = latents[row_image]
    n_corrupt = int(cfg.caption_corrupt_fraction * n_train_rows)
    if n_corrupt:
        corrupt = rng.permutation(n_train_rows)[:n_corrupt]
        donors = rng.integers(0, cfg.n_train, size=n_corrupt)
        caption_content = caption_content.copy()
        caption_content[corrupt] = latents[donors]
    captions = caption_content + caption_level[:, None] * rng.standard_normal(
        (total_rows, cfg.latent_dim))

    proj_img = rng.standard_normal((cfg.latent_dim, cfg.d_image_raw)) / np.sqrt(cfg.latent_dim)
    proj_txt = rng.standard_normal((cfg.latent_dim, cfg.d_text_raw)) / np.sqrt(cfg.latent_dim)
    # an image is featurized once; its rows share the extraction
    image_feats_by_image = latents @ proj_img + cfg.image_noise * rng.standard_normal(
        (n_images, cfg.d_image_raw))
    image_raw = _f32(image_feats_by_image[row_image])
    text_raw = _f32(captions @ proj_txt
                    + cfg.text_noise * rng.standard_normal((total_rows, cfg.d_text_raw)))

    # one shared projection into a common space, with independent per-side
    # noise; the teacher's view of the detail coordinates is attenuated, so
    # its fine-grained rankings are noise-dominated while its coarse
    # structure stays clean
    def teacher_view(source):
        view = source.copy()
        view[:, vis:] *= cfg.detail_attenuation
        return view

    dual_proj = rng.standard_normal((cfg.latent_dim, cfg.d_dual)) / np.sqrt(cfg.latent_dim)
    dual_img_by_image = _l2n(teacher_view(latents) @ dual_proj
                             + cfg.dual_noise * rng.standard_normal((n_images, cfg.d_dual)))
    dual_img = _f32(dual_img_by_image[row_image])
    dual_txt = _f32(_l2n(teacher_view(captions) @ dual_proj
                         + cfg.dual_noise * rng.standard_normal((total_rows, cfg.d_dual))))

    rng_mlp = np.random.default_rng([cfg.seed, 101])
    hidden = cfg.d_pair_feature
    w1 = rng_mlp.standard_normal((2 * cfg.latent_dim, hidden)) / np.sqrt(2 * cfg.latent_dim)
    b1 = np.zeros(hidden)
    w2 = rng_mlp.standard_normal((hidden, cfg.d_pair_feature)) / np.sqrt(hidden)
    b2 = np.zeros(cfg.d_pair_feature)

    # Probe set drawn from the validation range (held out from training).
    val_lo, val_hi = n_train_rows, n_train_rows + cfg.n_val
    probe_rng = np.random.default_rng([cfg.seed, 102])
    probe = _probe_pairs(probe_rng, ids[val_lo:val_hi],
                         assign[row_image[val_lo:val_hi]], 240)
    image_latents = latents[row_image]
    true_cos = np.array([
        float(image_latents[i] @ captions[j]
              / (np.linalg.norm(image_latents[i]) * np.linalg.norm(captions[j])))
        for i, j in probe])
    dual_dots = np.array([float(dual_img[i] @ dual_txt[j]) for i, j in probe])
    dual_rank = _spearman(dual_dots, true_cos)

    oracle = None
    oracle_rank = float("-inf")
    attempts = 0
    for attempt in range(10):
        attempts = attempt + 1
        seed = int(np.random.default_rng([cfg.seed, 103, attempt]).integers(2 ** 63))
        params = SyntheticOracleParams(
            scale=cfg.oracle_scale, bias=cfg.oracle_bias, noise=cfg.oracle_noise,
            seed=seed, w1=w1, b1=b1, w2=w2, b2=b2,
            image_latents={int(i): image_latents[i].copy() for i in ids},
            text_latents={int(i): captions[i].copy() for i in ids})
        candidate = SyntheticOracle(params)
        scores = np.array([candidate.query(i, j).score for i, j in probe])
        oracle_rank = _spearman(scores, true_cos)
        if oracle_rank > dual_rank:
            oracle = candidate
            break
    if oracle is None:
        raise GenerationError(
            f"pair oracle rank correlation {oracle_rank:.4f} did not beat the dual "
            f"teacher's {dual_rank:.4f} after 10 reseeds")

    bounds = {"train": (0, n_train_rows), "val": (val_lo, val_hi),
              "test": (val_hi, total_rows)}
    splits = {
        name: SampleSet(ids=ids[lo:hi], image_raw=image_raw[lo:hi],
                        text_raw=text_raw[lo:hi],
                        pair_group=row_image[lo:hi].copy())
        for name, (lo, hi) in bounds.items()
    }
    bundle = DualTeacherBundle(ids, dual_img, ids, dual_txt, cfg.dual_temperature)

    # measured at generation and recorded in the manifest; the ordering
    # experiments assert the student lands strictly below this
    lo, hi = bounds["test"]
    dual_report = retrieval_report(dual_img[lo:hi], dual_txt[lo:hi],
                                   row_image[lo:hi], row_image[lo:hi])

    manifest = {
        "schema": FORMAT_VERSION,
        "generate": asdict(cfg),
        "counts": {name: splits[name].size for name in splits},
        "probe": {"n_pairs": len(probe), "oracle_spearman": oracle_rank,
                  "dual_spearman": dual_rank, "attempts": attempts},
        "dual_teacher_test": dual_report.as_dict(),
    }
    return World(splits=splits, bundle=bundle, oracle=oracle, manifest=manifest,
                 teacher_ids=ids, dual_image_vectors=dual_img,
                 dual_text_vectors=dual_txt)


_WORLD_FILES = {
    "train": "train.mcds",
    "val": "val.mcds",
    "test": "test.mcds",
    "teacher_images": "teacher_images.mctf",
    "teacher_texts": "teacher_texts.mctf",
    "oracle": "oracle.mcso",
}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_world(world: World, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("train", "val", "test"):
        write_samples(out / _WORLD_FILES[name], world.splits[name])
    temperature = world.bundle.temperature
    write_teacher_features(out / _WORLD_FILES["teacher_images"], world.teacher_ids,
                           world.dual_image_vectors, temperature, "image")
    write_teacher_features(out / _WORLD_FILES["teacher_texts"], world.teacher_ids,
                           world.dual_text_vectors, temperature, "text")
    write_oracle_params(out / _WORLD_FILES["oracle"], world.oracle.params)
    manifest = dict(world.manifest)
    manifest["files"] = {name: _sha256(out / fname)
                         for name, fname in sorted(_WORLD_FILES.items())}
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return out


def load_world(world_dir) -> World:
    d = Path(world_dir)
    manifest_path = d / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"{d}: missing manifest.json (not a generated world?)")
    manifest = json.loads(manifest_path.read_text())
    for name, fname in _WORLD_FILES.items():
        expected = manifest.get("files", {}).get(name)
        if expected is not None and _sha256(d / fname) != expected:
            raise FormatError(f"{d / fname}: content hash does not match manifest")
    splits = {name: read_samples(d / _WORLD_FILES[name]) for name in ("train", "val", "test")}
    img = read_teacher_features(d / _WORLD_FILES["teacher_images"])
    txt = read_teacher_features(d / _WORLD_FILES["teacher_texts"])
    if img.side != "image" or txt.side != "text":
        raise FormatError(f"{d}: teacher files have swapped sides")
    if img.temperature != txt.temperature:
        raise FormatError(f"{d}: teacher temperature differs between sides")
    bundle = DualTeacherBundle(img.ids, img.vectors, txt.ids, txt.vectors, img.temperature)
    oracle = SyntheticOracle(read_oracle_params(d / _WORLD_FILES["oracle"]))
    return World(splits=splits, bundle=bundle, oracle=oracle, manifest=manifest,
                 teacher_ids=img.ids.astype(np.int64),
                 dual_image_vectors=img.vectors, dual_text_vectors=txt.vectors)


def load_table_oracle(path) -> TableOracle:
    records, d_ss = read_pair_scores(path)
    return TableOracle(records, d_ss)
