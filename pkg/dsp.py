"""Audio <-> mel-spectrogram transforms, short-time energy and Griffin-Lim.

All transforms are pure functions of (audio, config). Audio is mono float64
in [-1, 1] at 16 kHz; WAV files are 16-bit PCM.
"""
import functools
import logging
from dataclasses import dataclass

import librosa
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.io import wavfile

from errors import ConfigError, DimensionError, InputError, UndefinedSimilarityError

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
PCM_SCALE = 32768.0


# ======================================
# TYPES
# ======================================

@dataclass(frozen=True)
class DspConfig:
    sample_rate: int = SAMPLE_RATE
    fft_size: int = 1024
    hop: int = 160
    mel_bins: int = 64
    f_min: float = 0.0
    f_max: float = 8000.0
    window: str = "hann"

    def __post_init__(self):
        if self.fft_size < 2 or self.hop < 1 or self.mel_bins < 1:
            raise ConfigError(f"dsp: fft_size/hop/mel_bins must be positive, got "
                              f"{self.fft_size}/{self.hop}/{self.mel_bins}")
        if self.hop > self.fft_size:
            raise ConfigError(f"dsp: hop {self.hop} exceeds fft_size {self.fft_size}")
        if not 0 <= self.f_min < self.f_max <= self.sample_rate / 2:
            raise ConfigError(f"dsp: need 0 <= f_min < f_max <= {self.sample_rate / 2}, "
                              f"got f_min={self.f_min}, f_max={self.f_max}")

    def frames_for(self, n_samples):
        return (n_samples - self.fft_size) // self.hop + 1


@dataclass(frozen=True, eq=False)
class MelSpectrogram:
    """Rows are time frames, columns mel bins; values are log1p magnitudes."""
    data: np.ndarray
    sample_rate: int = SAMPLE_RATE
    hop: int = 160

    @property
    def frames(self):
        return self.data.shape[0]

    @property
    def bins(self):
        return self.data.shape[1]


# ======================================
# WAV I/O
# ======================================

def read_wav(path, sample_rate=SAMPLE_RATE):
    """Load a 16-bit PCM mono WAV as float64 samples in [-1, 1)."""
    try:
        rate, data = wavfile.read(path)
    except (OSError, ValueError) as e:
        raise InputError(f"cannot read WAV {path}: {e}") from e
    if rate != sample_rate:
        raise InputError(f"{path}: sample rate {rate} Hz, expected {sample_rate} Hz (resample beforehand)")
    if data.ndim != 1:
        raise InputError(f"{path}: {data.shape[1]} channels, expected mono")
    if data.dtype != np.int16:
        raise InputError(f"{path}: sample format {data.dtype}, expected 16-bit PCM")
    return data.astype(np.float64) / PCM_SCALE


def write_wav(path, samples, sample_rate=SAMPLE_RATE):
    pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * PCM_SCALE), -32768, 32767)
    wavfile.write(path, sample_rate, pcm.astype(np.int16))


def pad_or_trim(samples, length):
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size >= length:
        return samples[:length].copy()
    return np.concatenate([samples, np.zeros(length - samples.size)])


# ======================================
# SPECTRAL TRANSFORMS
# ======================================

def _check_frameable(audio, cfg):
    audio = np.asarray(audio, dtype=np.float64)
    if audio.ndim != 1 or audio.size < cfg.fft_size:
        raise InputError(f"audio of {audio.size} samples is shorter than one frame ({cfg.fft_size})")
    return audio


def stft_magnitude(audio, cfg):
    """Windowed magnitude spectrogram, frames x (fft_size/2 + 1), frames starting at sample 0."""
    audio = _check_frameable(audio, cfg)
    spec = librosa.stft(audio, n_fft=cfg.fft_size, hop_length=cfg.hop, window=cfg.window, center=False)
    return np.abs(spec).T


def mel_band_edges(cfg):
    """Hz positions of the mel_bins + 2 triangle corner points (HTK mel scale)."""
    return librosa.mel_frequencies(n_mels=cfg.mel_bins + 2, fmin=cfg.f_min, fmax=cfg.f_max, htk=True)


@functools.lru_cache(maxsize=16)
def _filterbank(cfg):
    bank = librosa.filters.mel(sr=cfg.sample_rate, n_fft=cfg.fft_size, n_mels=cfg.mel_bins,
                               fmin=cfg.f_min, fmax=cfg.f_max, htk=True, norm=None, dtype=np.float64)
    empty = np.flatnonzero(bank.sum(axis=1) <= 0)
    if empty.size:
        raise ConfigError(f"dsp: mel filters {empty.tolist()} cover no FFT bin; "
                          f"reduce mel_bins or raise fft_size")
    bank.setflags(write=False)
    return bank


def mel_filterbank(cfg):
    """Triangular mel filters, mel_bins x (fft_size/2 + 1), peak weight 1."""
    if not cfg.f_min < cfg.f_max:
        raise ConfigError(f"dsp: degenerate frequency range [{cfg.f_min}, {cfg.f_max}]")
    return _filterbank(cfg).copy()


def mel_spectrogram(audio, cfg):
    mel = np.log1p(stft_magnitude(audio, cfg) @ _filterbank(cfg).T)
    return MelSpectrogram(mel, cfg.sample_rate, cfg.hop)


def fit_frames(data, frames):
    """Zero-pad or crop a frames x bins matrix along time."""
    if data.shape[0] >= frames:
        return data[:frames].copy()
    pad = np.zeros((frames - data.shape[0], data.shape[1]))
    return np.concatenate([data, pad], axis=0)


# ======================================
# ENERGY
# ======================================

def short_time_energy(audio, frame=400, hop=160):
    """Mean of squared samples per frame; one partial frame if audio < frame."""
    audio = np.asarray(audio, dtype=np.float64)
    if audio.size == 0:
        raise InputError("short_time_energy: empty audio")
    if frame < 1 or hop < 1:
        raise InputError(f"short_time_energy: frame and hop must be >= 1, got {frame}/{hop}")
    if audio.size < frame:
        return np.array([np.mean(audio * audio)])
    frames = sliding_window_view(audio, frame)[::hop]
    return (frames * frames).mean(axis=1)


# ======================================
# PHASE RECONSTRUCTION
# ======================================

def _linear_magnitude(mel, cfg):
    """Non-negative least-squares inverse of the filterbank, (fft_size/2 + 1) x frames."""
    data = mel.data if isinstance(mel, MelSpectrogram) else np.asarray(mel, dtype=np.float64)
    bins = _filterbank(cfg).shape[0]
    if data.ndim != 2 or data.shape[1] != bins:
        raise DimensionError(f"griffin_lim: mel has shape {data.shape}, config has {bins} bins")
    power = np.expm1(np.maximum(data, 0.0)).T
    if not power.any():
        return np.zeros((cfg.fft_size // 2 + 1, data.shape[0]))
    return librosa.feature.inverse.mel_to_stft(power, sr=cfg.sample_rate, n_fft=cfg.fft_size, power=1.0,
                                               fmin=cfg.f_min, fmax=cfg.f_max, htk=True, norm=None)


def _phase_recovery(magnitude, cfg, iters, seed, momentum):
    # A frame grid starting at sample 0 is the centred grid of the audio with
    # fft_size/2 samples cut from the front, so the centred inverse never
    # divides by the vanishing window sum at the edges.
    frames = magnitude.shape[1]
    half = cfg.fft_size // 2
    inner = librosa.griffinlim(magnitude, n_iter=iters, hop_length=cfg.hop, n_fft=cfg.fft_size,
                               window=cfg.window, center=True, pad_mode="constant",
                               length=(frames - 1) * cfg.hop, momentum=momentum, init="random",
                               random_state=np.random.default_rng(seed))
    return np.pad(inner, (half, cfg.fft_size - half))


def griffin_lim(mel, cfg, iters, rng, length=None, momentum=0.99):
    """Reconstruct audio from a log1p mel: NNLS filterbank inverse, then Griffin-Lim.

    Phase starts seeded-random; ``momentum`` > 0 runs the accelerated update.
    ``length`` pads/trims the result; the natural length is
    fft_size + (frames - 1) * hop.
    """
    if iters < 1:
        raise ConfigError(f"griffin_lim: iters must be >= 1, got {iters}")
    magnitude = _linear_magnitude(mel, cfg)
    seed = rng.integers(1 << 32)
    if magnitude.any():
        audio = _phase_recovery(magnitude, cfg, iters, seed, momentum)
    else:
        audio = np.zeros(cfg.fft_size + (magnitude.shape[1] - 1) * cfg.hop)
    if length is not None:
        audio = pad_or_trim(audio, length)
    return audio


def griffin_lim_errors(mel, cfg, iters, rng, momentum=0.0):
    """Spectral distance |||STFT(x_k)| - target|| after k = 1..iters iterations.

    Every run restarts from the same seeded phase, so entry k is the error of
    the k-th iterate of one trajectory.
    """
    if iters < 1:
        raise ConfigError(f"griffin_lim: iters must be >= 1, got {iters}")
    magnitude = _linear_magnitude(mel, cfg)
    seed = rng.integers(1 << 32)
    errors = []
    for k in range(1, iters + 1):
        audio = _phase_recovery(magnitude, cfg, k, seed, momentum)
        errors.append(float(np.linalg.norm(stft_magnitude(audio, cfg).T - magnitude)))
    return errors


# ======================================
# SIMILARITY
# ======================================

def mel_cosine(a, b):
    """Cosine similarity of two flattened mel matrices."""
    x = a.data if isinstance(a, MelSpectrogram) else np.asarray(a, dtype=np.float64)
    y = b.data if isinstance(b, MelSpectrogram) else np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"mel_cosine: shapes {x.shape} and {y.shape} differ")
    nx_, ny_ = np.linalg.norm(x), np.linalg.norm(y)
    if nx_ == 0 or ny_ == 0:
        raise UndefinedSimilarityError("mel_cosine: zero-norm spectrogram")
    return float(np.dot(x.ravel(), y.ravel()) / (nx_ * ny_))
