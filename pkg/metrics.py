"""Objective evaluation of generated audio.

Fréchet distance and paired KL are computed over a pluggable embedding
function; Mel-Sim takes the best reference-length window of each generated
file. ``evaluate_run`` writes a JSON report whose contents depend only on
the inputs, so reruns are byte-identical.
"""
import glob
import json
import logging
import os

import numpy as np
from joblib import Parallel, delayed
from scipy.linalg import eigh
from scipy.special import rel_entr, softmax

import adapter as adapter_mod
import dsp
from dataset import read_index
from errors import ContractError, DimensionError, InputError, NumericError, UndefinedSimilarityError

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-9
EIGEN_TOL = 1e-9
NULL_EIGEN_REL = 1e-12
Q_FLOOR = 1e-12
GENERATION_LOG = "generation.jsonl"


# ======================================
# MATRIX AND DISTRIBUTION METRICS
# ======================================

def matrix_sqrt_psd(a):
    """Symmetric square root of a PSD matrix via eigendecomposition.

    Eigenvalues in [-1e-9, 0) are clamped to zero; anything more negative,
    or asymmetry beyond 1e-9, raises NumericError.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"matrix_sqrt_psd: expected a square matrix, got {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a))) if a.size else 1.0)
    if np.max(np.abs(a - a.T)) > SYMMETRY_TOL * scale:
        raise NumericError("matrix_sqrt_psd: matrix is not symmetric")
    values, vectors = eigh((a + a.T) / 2.0)
    if values.size and values.min() < -EIGEN_TOL * scale:
        raise NumericError(f"matrix_sqrt_psd: matrix is indefinite (eigenvalue {values.min():.3e})")
    root = np.sqrt(np.clip(values, 0.0, None))
    return (vectors * root) @ vectors.T


def _embedding_set(x, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise DimensionError(f"{name}: expected an (n, d) embedding set, got {x.shape}")
    return x


def frechet_distance(x, y):
    """||mu_x - mu_y||^2 + Tr(Sx + Sy - 2 sqrt(sqrt(Sx) Sy sqrt(Sx)))."""
    x, y = _embedding_set(x, "frechet_distance"), _embedding_set(y, "frechet_distance")
    if x.shape[1] != y.shape[1]:
        raise DimensionError(f"frechet_distance: dimensions {x.shape[1]} and {y.shape[1]} differ")
    if x.shape[0] < 2 or y.shape[0] < 2:
        raise ContractError(f"frechet_distance: need >= 2 vectors per set, got {x.shape[0]} and {y.shape[0]}")
    mu_x, mu_y = x.mean(axis=0), y.mean(axis=0)
    sigma_x = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    sigma_y = np.atleast_2d(np.cov(y, rowvar=False, ddof=1))
    root_x = matrix_sqrt_psd(sigma_x)
    middle = root_x @ sigma_y @ root_x
    diff = mu_x - mu_y
    fd = float(diff @ diff + np.trace(sigma_x) + np.trace(sigma_y) - 2.0 * _trace_sqrt((middle + middle.T) / 2.0))
    return max(0.0, fd)


def _trace_sqrt(a):
    """Tr(sqrt(a)) for symmetric PSD ``a``; rounding-level eigenvalues count as zero."""
    values = eigh(a, eigvals_only=True)
    top = float(values.max()) if values.size else 0.0
    if values.size and values.min() < -EIGEN_TOL * max(1.0, abs(top)):
        raise NumericError(f"frechet_distance: covariance product is indefinite ({values.min():.3e})")
    values[values < NULL_EIGEN_REL * max(top, 0.0)] = 0.0
    return float(np.sqrt(values).sum())


def _prob_vector(p, name):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ContractError(f"{name}: not a probability vector")
    return p


def kl_pairs(p_list, q_list):
    """Mean over pairs of sum p * ln(p / max(q, 1e-12))."""
    if len(p_list) != len(q_list):
        raise ContractError(f"kl_pairs: {len(p_list)} P vectors vs {len(q_list)} Q vectors")
    if not p_list:
        raise ContractError("kl_pairs: no pairs")
    total = 0.0
    for p, q in zip(p_list, q_list):
        p, q = _prob_vector(p, "kl_pairs"), _prob_vector(q, "kl_pairs")
        if p.shape != q.shape:
            raise DimensionError(f"kl_pairs: sizes {p.shape} and {q.shape} differ")
        total += float(rel_entr(p, np.maximum(q, Q_FLOOR)).sum())
    return total / len(p_list)


def embedding_cosine_matrix(x, y):
    x, y = _embedding_set(x, "embedding_cosine_matrix"), _embedding_set(y, "embedding_cosine_matrix")
    if x.shape[1] != y.shape[1]:
        raise DimensionError(f"embedding_cosine_matrix: dimensions {x.shape[1]} and {y.shape[1]} differ")
    nx_, ny_ = np.linalg.norm(x, axis=1), np.linalg.norm(y, axis=1)
    if np.any(nx_ == 0) or np.any(ny_ == 0):
        raise UndefinedSimilarityError("embedding_cosine_matrix: zero-norm embedding row")
    return (x / nx_[:, None]) @ (y / ny_[:, None]).T


def same_cross_means(matrix, groups_x, groups_y, skip_diagonal=False):
    """Mean cosine over same-group and different-group pairs (None when empty).

    Items whose group is None have no pairing and join neither mean.
    """
    same, cross = [], []
    for i, gx in enumerate(groups_x):
        for j, gy in enumerate(groups_y):
            if (skip_diagonal and i == j) or gx is None or gy is None:
                continue
            (same if gx == gy else cross).append(matrix[i, j])
    return (float(np.mean(same)) if same else None, float(np.mean(cross)) if cross else None)


# ======================================
# MEL SIMILARITY
# ======================================

def mel_sim_max(generated, reference, cfg, hop_s=0.5):
    """Best mel cosine between the reference and any hop-spaced window of ``generated``."""
    generated = np.asarray(generated, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if generated.size < reference.size:
        raise ContractError(f"mel_sim_max: generated audio ({generated.size}) shorter than "
                            f"reference ({reference.size})")
    ref_mel = dsp.mel_spectrogram(reference, cfg)
    if not np.any(ref_mel.data):
        raise UndefinedSimilarityError("mel_sim_max: reference has a zero mel spectrogram")
    hop = max(1, int(round(hop_s * cfg.sample_rate)))
    last = generated.size - reference.size
    starts = list(range(0, last + 1, hop))
    if starts[-1] != last:
        starts.append(last)
    best = 0.0
    for start in starts:
        window = dsp.mel_spectrogram(generated[start:start + reference.size], cfg)
        if not np.any(window.data):
            continue
        best = max(best, dsp.mel_cosine(window, ref_mel))
    return best


# ======================================
# EMBEDDERS
# ======================================

class MelStatsEmbedder:
    """Weight-free: per-bin mean and std of the log-mel."""

    name = "mel_stats"

    def __init__(self, dsp_cfg):
        self.dsp_cfg = dsp_cfg

    def __call__(self, samples, path=None):
        mel = dsp.mel_spectrogram(samples, self.dsp_cfg).data
        return np.concatenate([mel.mean(axis=0), mel.std(axis=0)])


class ReferenceEncoderEmbedder:
    """Trained reference encoder, averaged over consecutive reference-length windows."""

    name = "reference_encoder"

    def __init__(self, adapter_weights):
        self.weights = adapter_weights

    def __call__(self, samples, path=None):
        n = self.weights.clip_samples
        samples = np.asarray(samples, dtype=np.float64)
        count = max(1, samples.size // n)
        windows = [dsp.pad_or_trim(samples[i * n:(i + 1) * n], n) for i in range(count)]
        return np.mean([adapter_mod.reference_vector(w, self.weights) for w in windows], axis=0)


class PrecomputedEmbedder:
    """Vectors read from a JSON-lines file of {path, vector}, matched by path then basename."""

    name = "precomputed"

    def __init__(self, embeddings_path):
        self.by_path, self.by_name = {}, {}
        for record in read_index(embeddings_path):
            vector = np.asarray(record["vector"], dtype=np.float64)
            self.by_path[os.path.normpath(record["path"])] = vector
            self.by_name[os.path.basename(record["path"])] = vector

    def __call__(self, samples, path=None):
        if path is not None:
            key = os.path.normpath(path)
            if key in self.by_path:
                return self.by_path[key]
            if os.path.basename(path) in self.by_name:
                return self.by_name[os.path.basename(path)]
        raise InputError(f"no precomputed embedding for {path}")


def build_embedder(cfg, adapter_weights=None):
    name = cfg.metrics.embedder
    if name == "mel_stats":
        return MelStatsEmbedder(cfg.dsp_config())
    if name == "precomputed":
        if not cfg.metrics.embeddings:
            raise InputError("metrics.embeddings must name a JSON-lines file for the precomputed embedder")
        return PrecomputedEmbedder(cfg.metrics.embeddings)
    if adapter_weights is None:
        raise ContractError("reference_encoder embedder needs trained adapter weights")
    return ReferenceEncoderEmbedder(adapter_weights)


# ======================================
# RUN EVALUATION
# ======================================

def _load_audio(path, sample_rate):
    try:
        return dsp.read_wav(path, sample_rate), None
    except InputError as e:
        logger.warning("%s", e)
        return None, str(e)


def _pairing(generated_dir, reference_records, index_dir):
    """generated file name -> reference path (absolute)."""
    pairs = {}
    log_path = os.path.join(generated_dir, GENERATION_LOG)
    if os.path.isfile(log_path):
        for record in read_index(log_path):
            pairs[record["file"]] = record["reference"]
    else:
        for record in reference_records:
            pairs.setdefault(os.path.basename(record["path"]), os.path.join(index_dir, record["path"]))
    return pairs


def evaluate_run(generated_dir, reference_index, cfg, embedder, report_path=None):
    """Score every WAV in ``generated_dir`` against the clips of ``reference_index``."""
    if not os.path.isdir(generated_dir):
        raise InputError(f"generated directory does not exist: {generated_dir}")
    if not os.path.isfile(reference_index):
        raise InputError(f"reference index does not exist: {reference_index}")
    files = sorted(glob.glob(os.path.join(generated_dir, "*.wav")))
    if not files:
        raise InputError(f"no WAV files in {generated_dir}")
    index_dir = os.path.dirname(os.path.abspath(reference_index))
    records = read_index(reference_index)
    if not records:
        raise InputError(f"reference index {reference_index} is empty")
    sr = cfg.dsp.sample_rate
    dsp_cfg = cfg.dsp_config()
    pairs = _pairing(generated_dir, records, index_dir)

    def embed_reference(record):
        path = os.path.join(index_dir, record["path"])
        audio, error = _load_audio(path, sr)
        return (None, error) if audio is None else (embedder(audio, path), None)

    def score_file(path):
        name = os.path.basename(path)
        audio, error = _load_audio(path, sr)
        if audio is None:
            return {"file": name, "error": error}
        result = {"file": name, "embedding": embedder(audio, path), "reference": None,
                  "mel_sim": None, "kl": None}
        ref_path = pairs.get(name)
        if ref_path is None:
            return result
        ref_path = ref_path if os.path.isabs(ref_path) else os.path.join(generated_dir, ref_path)
        ref_audio, ref_error = _load_audio(ref_path, sr)
        if ref_audio is None:
            result["error"] = ref_error
            return result
        result["reference"] = os.path.basename(ref_path)
        result["mel_sim"] = mel_sim_max(audio, ref_audio, dsp_cfg, cfg.metrics.hop_s)
        p = softmax(embedder(ref_audio, ref_path))
        q = softmax(result["embedding"])
        result["kl"] = kl_pairs([p], [q])
        return result

    n_jobs = cfg.metrics.n_jobs
    runner = Parallel(n_jobs=n_jobs, backend="threading") if n_jobs > 1 else None
    if runner:
        scored = runner(delayed(score_file)(f) for f in files)
        ref_results = runner(delayed(embed_reference)(r) for r in records)
    else:
        scored = [score_file(f) for f in files]
        ref_results = [embed_reference(r) for r in records]

    errors = [{"file": s["file"], "error": s["error"]} for s in scored if "error" in s]
    errors += [{"file": r["path"], "error": e} for r, (_, e) in zip(records, ref_results) if e]
    good = [s for s in scored if "embedding" in s]
    ref_vectors = [v for v, _ in ref_results if v is not None]
    if not good or not ref_vectors:
        raise InputError("evaluation has no readable generated or reference audio")

    gen_matrix = np.stack([s["embedding"] for s in good])
    fd = frechet_distance(gen_matrix, np.stack(ref_vectors)) if len(good) > 1 and len(ref_vectors) > 1 else None
    paired = [s for s in good if s["mel_sim"] is not None]
    sims = [s["mel_sim"] for s in paired]
    kls = [s["kl"] for s in paired]
    same, cross = None, None
    if len(good) > 1:
        cos = embedding_cosine_matrix(gen_matrix, gen_matrix)
        refs = [s["reference"] for s in good]
        same, cross = same_cross_means(cos, refs, refs, skip_diagonal=True)

    report = {
        "fd": fd,
        "kl": float(np.mean(kls)) if kls else None,
        "mel_sim_mean": float(np.mean(sims)) if sims else None,
        "mel_sim_max": float(np.max(sims)) if sims else None,
        "same_ref_cos_mean": same,
        "cross_ref_cos_mean": cross,
        "embedder": getattr(embedder, "name", type(embedder).__name__),
        "per_file": [{"file": s["file"], "reference": s["reference"], "mel_sim": s["mel_sim"], "kl": s["kl"]}
                     for s in good],
        "errors": errors,
    }
    if report_path:
        os.makedirs(os.path.dirname(os.path.abspath(report_path)), exist_ok=True)
        with open(report_path, "w", encoding="utf-8") as f:
            json.dump(report, f, indent=2, sort_keys=True)
    return report
