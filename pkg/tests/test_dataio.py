"""Wire format round-trips, config parsing contracts, and synthetic world
generation guarantees."""

import dataclasses
import json

import numpy as np
import pytest

from conftest import TINY_GEN
from mtdistill.dataio import (GenerateConfig, config_from_dict, config_hash,
                              generate_synthetic_world, load_world,
                              parse_run_config, read_checkpoint,
                              read_oracle_params, read_pair_scores,
                              read_samples, read_teacher_features,
                              write_checkpoint, write_oracle_params,
                              write_pair_scores, write_samples,
                              write_teacher_features, write_world)
from mtdistill.errors import (ConfigError, ContractError, FormatError,
                              GenerationError)
from mtdistill.samples import SampleSet
from mtdistill.teachers import PairOracleRecord


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return (x / np.linalg.norm(x, axis=1, keepdims=True)).astype(np.float32).astype(np.float64)


class TestTeacherFeatureFile:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        vectors = unit_rows(rng, 7, 5)
        ids = np.array([0, 3, 4, 7, 9, 12, 20], dtype=np.uint64)
        path = tmp_path / "t.mctf"
        write_teacher_features(path, ids, vectors, 0.055, "text")
        data = read_teacher_features(path)
        np.testing.assert_array_equal(data.ids, ids)
        np.testing.assert_array_equal(data.vectors, vectors)  # f32-valued input
        assert data.temperature == 0.055
        assert data.side == "text"

    def test_rejects_non_increasing_ids(self, tmp_path):
        rng = np.random.default_rng(1)
        with pytest.raises(ContractError, match="increasing"):
            write_teacher_features(tmp_path / "t.mctf", [2, 1], unit_rows(rng, 2, 3),
                                   1.0, "image")

    def test_rejects_non_unit_rows(self, tmp_path):
        with pytest.raises(ContractError, match="unit-norm"):
            write_teacher_features(tmp_path / "t.mctf", [0], [[3.0, 4.0]], 1.0, "image")

    def test_rejects_bad_magic_and_version(self, tmp_path):
        rng = np.random.default_rng(2)
        path = tmp_path / "t.mctf"
        write_teacher_features(path, [0, 1], unit_rows(rng, 2, 3), 1.0, "image")
        blob = bytearray(path.read_bytes())
        tampered = tmp_path / "bad_magic.mctf"
        tampered.write_bytes(b"XXXX" + bytes(blob[4:]))
        with pytest.raises(FormatError, match="magic"):
            read_teacher_features(tampered)
        tampered2 = tmp_path / "bad_version.mctf"
        blob[4] = 99
        tampered2.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="version"):
            read_teacher_features(tampered2)

    def test_rejects_truncation_and_trailing(self, tmp_path):
        rng = np.random.default_rng(3)
        path = tmp_path / "t.mctf"
        write_teacher_features(path, [0, 1], unit_rows(rng, 2, 3), 1.0, "image")
        blob = path.read_bytes()
        short = tmp_path / "short.mctf"
        short.write_bytes(blob[:-4])
        with pytest.raises(FormatError, match="truncated"):
            read_teacher_features(short)
        longer = tmp_path / "long.mctf"
        longer.write_bytes(blob + b"\x00")
        with pytest.raises(FormatError, match="trailing"):
            read_teacher_features(longer)


class TestPairScoreFile:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(4)
        records = {}
        for i in range(5):
            for j in range(3):
                feature = rng.standard_normal(6).astype(np.float32).astype(np.float64)
                records[(i, j)] = PairOracleRecord(
                    score=float(np.float32(rng.random())), feature=feature)
        path = tmp_path / "p.mcps"
        write_pair_scores(path, records)
        got, d_ss = read_pair_scores(path)
        assert d_ss == 6
        assert set(got) == set(records)
        for key in records:
            assert got[key].score == records[key].score
            np.testing.assert_array_equal(got[key].feature, records[key].feature)

    def test_score_range_enforced(self, tmp_path):
        with pytest.raises(ContractError):
            PairOracleRecord(score=1.5, feature=np.zeros(2))

    def test_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "p.mcps"
        write_pair_scores(path, {(0, 0): PairOracleRecord(score=0.5,
                                                          feature=np.zeros(2))})
        bad = tmp_path / "bad.mcps"
        bad.write_bytes(b"NOPE" + path.read_bytes()[4:])
        with pytest.raises(FormatError, match="magic"):
            read_pair_scores(bad)


class TestSampleAndOracleFiles:
    def test_samples_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        split = SampleSet(
            ids=np.arange(6, dtype=np.int64),
            image_raw=rng.standard_normal((6, 4)).astype(np.float32).astype(np.float64),
            text_raw=rng.standard_normal((6, 3)).astype(np.float32).astype(np.float64),
            pair_group=np.arange(6, dtype=np.int64))
        path = tmp_path / "s.mcds"
        write_samples(path, split)
        got = read_samples(path)
        np.testing.assert_array_equal(got.ids, split.ids)
        np.testing.assert_array_equal(got.image_raw, split.image_raw)
        np.testing.assert_array_equal(got.text_raw, split.text_raw)
        np.testing.assert_array_equal(got.pair_group, split.pair_group)

    def test_oracle_params_roundtrip(self, tiny_world, tmp_path):
        path = tmp_path / "o.mcso"
        write_oracle_params(path, tiny_world.oracle.params)
        got = read_oracle_params(path)
        p = tiny_world.oracle.params
        assert (got.scale, got.bias, got.noise, got.seed) == (p.scale, p.bias,
                                                              p.noise, p.seed)
        np.testing.assert_array_equal(got.w1, p.w1)
        np.testing.assert_array_equal(got.w2, p.w2)
        assert set(got.image_latents) == set(p.image_latents)
        for i in p.image_latents:
            np.testing.assert_array_equal(got.image_latents[i], p.image_latents[i])
            np.testing.assert_array_equal(got.text_latents[i], p.text_latents[i])

    def test_checkpoint_roundtrip(self, tmp_path):
        rng = np.random.default_rng(6)
        state = {"a.w": rng.standard_normal((3, 4)), "b": rng.standard_normal((1, 1))}
        meta = {"seed": 3, "loss": "mt+mt_fa"}
        path = tmp_path / "c.mckp"
        write_checkpoint(path, meta, state)
        got_meta, got_state = read_checkpoint(path)
        assert got_meta == meta
        for name in state:
            np.testing.assert_array_equal(got_state[name], state[name])


class TestRunConfig:
    def test_defaults_are_explicit(self, tmp_path):
        cfg = config_from_dict({}, tmp_path)
        canonical = cfg.canonical()
        assert canonical["train"]["lr"] == 1e-3
        assert canonical["train"]["epochs"] == 100
        assert canonical["loss"] == {"tdd": "mt", "tfd": "mt_fa", "k": 11}
        assert canonical["student"]["embed_dim"] == 64
        assert set(canonical) == {"data", "student", "integration", "train",
                                  "loss", "generate", "ablate"}

    def test_unknown_section_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="optimizer"):
            config_from_dict({"optimizer": {}}, tmp_path)

    def test_unknown_key_rejected_with_path(self, tmp_path):
        with pytest.raises(ConfigError, match="train.learning_rate"):
            config_from_dict({"train": {"learning_rate": 0.1}}, tmp_path)

    def test_malformed_json_names_byte_offset(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text('{"train": {"lr": }')
        with pytest.raises(FormatError, match="byte 17"):
            parse_run_config(path)

    def test_hash_stable_under_key_order(self, tmp_path):
        a = config_from_dict({"train": {"lr": 0.5, "epochs": 3}}, tmp_path)
        b = config_from_dict({"train": {"epochs": 3, "lr": 0.5}}, tmp_path)
        assert config_hash(a) == config_hash(b)
        c = config_from_dict({"train": {"lr": 0.25, "epochs": 3}}, tmp_path)
        assert config_hash(a) != config_hash(c)

    def test_table_backend_requires_pair_file(self, tmp_path):
        with pytest.raises(ConfigError, match="pair_scores"):
            config_from_dict({"data": {"oracle": "table"}}, tmp_path)

    def test_bad_ablate_grid_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="ablate.grid"):
            config_from_dict({"ablate": {"grid": [{"tdd": "gt", "oops": 1}]}},
                             tmp_path)


class TestSyntheticWorld:
    def test_same_seed_byte_identical_files(self, tmp_path):
        for sub in ("a", "b"):
            write_world(generate_synthetic_world(TINY_GEN), tmp_path / sub)
        for name in ("train.mcds", "val.mcds", "test.mcds", "teacher_images.mctf",
                     "teacher_texts.mctf", "oracle.mcso", "manifest.json"):
            assert (tmp_path / "a" / name).read_bytes() == \
                   (tmp_path / "b" / name).read_bytes(), name

    def test_world_roundtrip_through_files(self, tiny_world, tmp_path):
        out = write_world(tiny_world, tmp_path / "w")
        loaded = load_world(out)
        np.testing.assert_array_equal(loaded.train.ids, tiny_world.train.ids)
        np.testing.assert_array_equal(loaded.train.image_raw,
                                      tiny_world.train.image_raw)
        np.testing.assert_array_equal(loaded.bundle.image_rows,
                                      tiny_world.bundle.image_rows)
        # oracle answers identically after the round-trip
        for key in ((0, 0), (1, 5), (3, 2)):
            a = tiny_world.oracle.query(*key)
            b = loaded.oracle.query(*key)
            assert a.score == b.score
            np.testing.assert_array_equal(a.feature, b.feature)

    def test_manifest_hash_mismatch_detected(self, tiny_world, tmp_path):
        out = write_world(tiny_world, tmp_path / "w")
        blob = bytearray((out / "train.mcds").read_bytes())
        blob[-1] ^= 0xFF
        (out / "train.mcds").write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="hash"):
            load_world(out)

    def test_noise_free_world_has_perfect_dual_teacher(self):
        cfg = dataclasses.replace(TINY_GEN, image_noise=0.0, text_noise=0.0,
                                  caption_noise=0.0, caption_corrupt_fraction=0.0,
                                  dual_noise=0.0, oracle_noise=0.0)
        world = generate_synthetic_world(cfg)
        report = world.manifest["dual_teacher_test"]
        assert report["ir_r1"] == 1.0 and report["tr_r1"] == 1.0

    def test_default_world_dual_teacher_imperfect_but_strong(self, tiny_world):
        report = tiny_world.manifest["dual_teacher_test"]
        mean_r1 = 0.5 * (report["ir_r1"] + report["tr_r1"])
        assert 0.0 < mean_r1 < 1.0

    def test_probe_enforces_oracle_superiority(self, tiny_world):
        probe = tiny_world.manifest["probe"]
        assert probe["oracle_spearman"] > probe["dual_spearman"]

    def test_unbeatable_probe_raises_generation_error(self):
        # drown the oracle in noise: rank correlation cannot beat the teacher
        cfg = dataclasses.replace(TINY_GEN, oracle_noise=200.0, dual_noise=0.0)
        with pytest.raises(GenerationError, match="10 reseeds"):
            generate_synthetic_world(cfg)

    def test_oracle_scores_quantized_for_table_export(self, tiny_world):
        rec = tiny_world.oracle.query(0, 1)
        assert rec.score == float(np.float32(rec.score))
        np.testing.assert_array_equal(rec.feature,
                                      rec.feature.astype(np.float32).astype(np.float64))
