import json
import math
import os
import shutil

import numpy as np
import pytest
from scipy.linalg import hadamard

import dsp
from adapter import AdapterWeights, build_vocab
from dataset import build_dataset
from errors import ContractError, DimensionError, InputError, NumericError, UndefinedSimilarityError
from helpers import SR, tone
from metrics import (
    GENERATION_LOG,
    MelStatsEmbedder,
    PrecomputedEmbedder,
    ReferenceEncoderEmbedder,
    build_embedder,
    embedding_cosine_matrix,
    evaluate_run,
    frechet_distance,
    kl_pairs,
    matrix_sqrt_psd,
    mel_sim_max,
    same_cross_means,
)
from settings import build_config

CFG = dsp.DspConfig()


class TestMatrixSqrt:
    def test_identity(self):
        np.testing.assert_allclose(matrix_sqrt_psd(np.eye(3)), np.eye(3), atol=1e-15)

    def test_diagonal(self):
        np.testing.assert_allclose(matrix_sqrt_psd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-12)

    def test_reconstruction(self, rng):
        b = rng.normal((6, 4))
        a = b @ b.T
        s = matrix_sqrt_psd(a)
        assert np.linalg.norm(s @ s - a) / np.linalg.norm(a) < 1e-8

    def test_asymmetric(self):
        with pytest.raises(NumericError, match="symmetric"):
            matrix_sqrt_psd(np.array([[1.0, 0.5], [0.0, 1.0]]))

    def test_indefinite(self):
        with pytest.raises(NumericError, match="indefinite"):
            matrix_sqrt_psd(np.diag([1.0, -1.0]))


class TestFrechetDistance:
    def test_self_distance(self, rng):
        x = rng.normal((40, 5))
        assert frechet_distance(x, x) < 1e-8

    def test_symmetric(self, rng):
        x, y = rng.normal((50, 3)), rng.normal((60, 3)) * 2 + 1
        assert frechet_distance(x, y) == pytest.approx(frechet_distance(y, x), abs=1e-8)

    def test_one_dimensional_shift(self, rng):
        x = rng.normal(5000)
        y = rng.normal(5000) + 1.0
        closed = (x.mean() - y.mean()) ** 2 + (x.std(ddof=1) - y.std(ddof=1)) ** 2
        fd = frechet_distance(x, y)
        assert fd == pytest.approx(closed, rel=1e-9)
        assert fd == pytest.approx(1.0, abs=0.1)

    def test_diagonal_covariances_at_exact_moments(self):
        h = hadamard(4).astype(np.float64)[:, 1:]
        sx, sy = np.array([1.0, 2.0, 0.5]), np.array([3.0, 1.0, 0.5])
        mx, my = np.array([0.0, 1.0, 2.0]), np.array([1.0, 1.0, -1.0])
        x, y = h * sx + mx, h * sy + my
        sigma_x, sigma_y = sx * math.sqrt(4 / 3), sy * math.sqrt(4 / 3)
        closed = ((mx - my) ** 2).sum() + ((sigma_x - sigma_y) ** 2).sum()
        assert frechet_distance(x, y) == pytest.approx(closed, rel=1e-6)

    def test_needs_two_vectors(self, rng):
        with pytest.raises(ContractError):
            frechet_distance(rng.normal((1, 3)), rng.normal((5, 3)))

    def test_dimension_mismatch(self, rng):
        with pytest.raises(DimensionError):
            frechet_distance(rng.normal((4, 3)), rng.normal((4, 2)))


class TestKl:
    def test_identical(self):
        assert kl_pairs([[0.2, 0.8]], [[0.2, 0.8]]) == 0.0

    def test_hand_value(self):
        assert kl_pairs([[0.5, 0.5]], [[0.25, 0.75]]) == pytest.approx(0.143841, abs=1e-6)

    def test_mean_over_pairs(self):
        assert kl_pairs([[0.5, 0.5], [0.2, 0.8]], [[0.25, 0.75], [0.2, 0.8]]) == pytest.approx(0.143841 / 2, abs=1e-6)

    def test_non_negative(self, rng):
        for _ in range(10):
            p, q = np.abs(rng.normal(6)), np.abs(rng.normal(6))
            assert kl_pairs([p / p.sum()], [q / q.sum()]) >= 0.0

    def test_zero_q_is_floored(self):
        assert math.isfinite(kl_pairs([[0.5, 0.5]], [[1.0, 0.0]]))

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            kl_pairs([[1.0]], [])

    def test_not_a_distribution(self):
        with pytest.raises(ContractError):
            kl_pairs([[0.5, 0.6]], [[0.5, 0.5]])


class TestMelSimMax:
    def test_aligned_copy(self, rng):
        reference = tone(523.0, 2.0) + 0.05 * rng.normal(2 * SR)
        generated = 0.01 * rng.normal(int(10.24 * SR))
        generated[SR:3 * SR] = reference
        assert mel_sim_max(generated, reference, CFG) == pytest.approx(1.0, abs=1e-6)

    def test_copy_at_the_very_end(self, rng):
        reference = tone(523.0, 2.0) + 0.05 * rng.normal(2 * SR)
        generated = 0.01 * rng.normal(int(10.24 * SR))
        generated[-reference.size:] = reference
        assert mel_sim_max(generated, reference, CFG) == pytest.approx(1.0, abs=1e-6)

    def test_silence(self):
        assert mel_sim_max(np.zeros(int(10.24 * SR)), tone(440.0, 2.0), CFG) == 0.0

    def test_other_pitch_scores_lower(self):
        reference = tone(440.0, 2.0)
        same = mel_sim_max(tone(440.0, 10.24), reference, CFG)
        other = mel_sim_max(tone(880.0, 10.24), reference, CFG)
        assert 0.0 <= other < same <= 1.0 + 1e-12

    def test_silent_reference(self):
        with pytest.raises(UndefinedSimilarityError):
            mel_sim_max(tone(440.0, 4.0), np.zeros(2 * SR), CFG)

    def test_generated_too_short(self):
        with pytest.raises(ContractError):
            mel_sim_max(tone(440.0, 1.0), tone(440.0, 2.0), CFG)


class TestCosineMatrix:
    def test_self_diagonal(self, rng):
        x = rng.normal((4, 6))
        np.testing.assert_allclose(np.diag(embedding_cosine_matrix(x, x)), 1.0, atol=1e-12)

    def test_orthogonal_rows(self):
        m = embedding_cosine_matrix(np.array([[1.0, 0.0]]), np.array([[0.0, 2.0]]))
        assert m[0, 0] == 0.0

    def test_zero_row(self):
        with pytest.raises(UndefinedSimilarityError):
            embedding_cosine_matrix(np.array([[0.0, 0.0]]), np.array([[1.0, 0.0]]))

    def test_same_cross_means(self):
        matrix = np.array([[1.0, 0.8, 0.1], [0.8, 1.0, 0.3], [0.1, 0.3, 1.0]])
        same, cross = same_cross_means(matrix, ["a", "a", "b"], ["a", "a", "b"], skip_diagonal=True)
        assert same == pytest.approx(0.8)
        assert cross == pytest.approx(0.2)

    def test_no_cross_pairs(self):
        assert same_cross_means(np.ones((2, 2)), ["a", "a"], ["a", "a"], skip_diagonal=True) == (1.0, None)

    def test_unpaired_items_join_neither_mean(self):
        matrix = np.array([[1.0, 0.9, 0.2, 0.2],
                           [0.9, 1.0, 0.2, 0.2],
                           [0.2, 0.2, 1.0, 0.0],
                           [0.2, 0.2, 0.0, 1.0]])
        groups = ["a", "a", None, None]
        assert same_cross_means(matrix, groups, groups, skip_diagonal=True) == (pytest.approx(0.9), None)


class TestEmbedders:
    def test_mel_stats(self):
        assert MelStatsEmbedder(CFG)(tone(440.0, 1.0)).shape == (128,)

    def test_reference_encoder_windows_long_audio(self, rng):
        weights = AdapterWeights(build_vocab(["a"]), rng, d=8, heads=2, d_r=8, r_len=2,
                                 encoder_channels=(2, 4), dsp_cfg=dsp.DspConfig(hop=512, mel_bins=16))
        assert ReferenceEncoderEmbedder(weights)(tone(440.0, 10.24)).shape == (8,)

    def test_precomputed(self, tmp_path):
        path = tmp_path / "emb.jsonl"
        path.write_text(json.dumps({"path": "clips/a.wav", "vector": [1.0, 2.0]}) + "\n", encoding="utf-8")
        embedder = PrecomputedEmbedder(str(path))
        np.testing.assert_array_equal(embedder(None, "/elsewhere/a.wav"), [1.0, 2.0])
        with pytest.raises(InputError):
            embedder(None, "b.wav")

    def test_build_embedder(self):
        assert isinstance(build_embedder(build_config({"metrics.embedder": "mel_stats"})), MelStatsEmbedder)
        with pytest.raises(ContractError):
            build_embedder(build_config())
        with pytest.raises(InputError):
            build_embedder(build_config({"metrics.embedder": "precomputed"}))


class TestEvaluateRun:
    @pytest.fixture
    def built(self, corpus, tiny_cfg):
        build_dataset(corpus["test"], tiny_cfg.paths.dataset_dir, tiny_cfg, 0, "test")
        return os.path.join(tiny_cfg.paths.dataset_dir, "test")

    def test_self_comparison(self, built, tiny_cfg, tmp_path):
        report_path = str(tmp_path / "metrics.json")
        report = evaluate_run(os.path.join(built, "clips"), os.path.join(built, "index.jsonl"), tiny_cfg,
                              MelStatsEmbedder(tiny_cfg.dsp_config()), report_path)
        assert report["fd"] < 1e-6
        assert report["kl"] < 1e-9
        assert report["mel_sim_mean"] == pytest.approx(1.0, abs=1e-9)
        assert report["embedder"] == "mel_stats"
        assert all(f["reference"] == f["file"] for f in report["per_file"])
        with open(report_path, encoding="utf-8") as f:
            assert json.load(f)["per_file"] == report["per_file"]

    def test_rerun_is_byte_identical(self, built, tiny_cfg, tmp_path):
        outputs = []
        for name in ("a.json", "b.json"):
            evaluate_run(os.path.join(built, "clips"), os.path.join(built, "index.jsonl"), tiny_cfg,
                         MelStatsEmbedder(tiny_cfg.dsp_config()), str(tmp_path / name))
            outputs.append((tmp_path / name).read_bytes())
        assert outputs[0] == outputs[1]

    def test_generation_log_pairs_files(self, built, tiny_cfg, tmp_path):
        generated = tmp_path / "gen"
        generated.mkdir()
        clip = sorted(os.listdir(os.path.join(built, "clips")))[0]
        reference = os.path.join(built, "clips", clip)
        records = []
        for i in range(2):
            name = f"gen_{i}.wav"
            dsp.write_wav(str(generated / name), np.concatenate([dsp.read_wav(reference), np.zeros(SR)]))
            records.append({"file": name, "reference": reference})
        (generated / GENERATION_LOG).write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
        report = evaluate_run(str(generated), os.path.join(built, "index.jsonl"), tiny_cfg,
                              MelStatsEmbedder(tiny_cfg.dsp_config()))
        assert [f["reference"] for f in report["per_file"]] == [clip, clip]
        assert report["mel_sim_max"] == pytest.approx(1.0, abs=1e-9)
        assert report["same_ref_cos_mean"] == pytest.approx(1.0)
        assert report["cross_ref_cos_mean"] is None

    def test_unreadable_file_is_recorded(self, built, tiny_cfg, tmp_path):
        generated = tmp_path / "gen"
        shutil.copytree(os.path.join(built, "clips"), generated)
        (generated / "broken.wav").write_bytes(b"not a wav file")
        report = evaluate_run(str(generated), os.path.join(built, "index.jsonl"), tiny_cfg,
                              MelStatsEmbedder(tiny_cfg.dsp_config()))
        assert [e["file"] for e in report["errors"]] == ["broken.wav"]

    def test_empty_directory(self, built, tiny_cfg, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(InputError, match="no WAV files"):
            evaluate_run(str(tmp_path / "empty"), os.path.join(built, "index.jsonl"), tiny_cfg,
                         MelStatsEmbedder(tiny_cfg.dsp_config()))
