"""Deterministic synthetic sound-event corpus for desk runs and tests.

Each entry is a 10.24 s recording of a faint noise floor with one or two
events of a single label, a caption and timestamped annotations. Manifests
are written per split with audio paths relative to the manifest.
"""
import json
import logging
import os

import numpy as np
from scipy.signal import butter, lfilter

import dsp
from numerics import SeededRng

logger = logging.getLogger(__name__)

LABELS = ("dog", "siren", "bell", "rain")
CAPTIONS = {
    "dog": ("a dog barks", "a small dog barking loudly"),
    "siren": ("a siren wails", "an emergency siren passing by"),
    "bell": ("a bell rings", "a church bell ringing"),
    "rain": ("rain falls", "heavy rain on a roof"),
}
DURATION_S = 10.24
NOISE_FLOOR = 0.003


# ======================================
# EVENT SYNTHESIS
# ======================================

def _dog(n, sr, rng):
    t = np.arange(n) / sr
    out = np.zeros(n)
    bark = int(0.25 * sr)
    for start in range(0, n, int(0.4 * sr)):
        seg = t[:min(bark, n - start)]
        env = np.exp(-seg * 12.0) * np.sin(np.pi * seg / (bark / sr)) ** 0.5
        f0 = 480.0 + 40.0 * rng.uniform()
        out[start:start + seg.size] = env * sum(np.sin(2 * np.pi * f0 * k * seg) / k for k in (1, 2, 3))
    return 0.5 * out


def _siren(n, sr, rng):
    t = np.arange(n) / sr
    freq = 900.0 + 300.0 * np.sin(2 * np.pi * (0.8 + 0.1 * rng.uniform()) * t)
    return 0.4 * np.sin(2 * np.pi * np.cumsum(freq) / sr)


def _bell(n, sr, rng):
    t = np.arange(n) / sr
    f0 = 660.0 + 60.0 * rng.uniform()
    partials = ((1.0, 1.0), (2.76, 0.5), (5.4, 0.25))
    return 0.5 * np.exp(-t * 1.5) * sum(a * np.sin(2 * np.pi * f0 * r * t) for r, a in partials)


def _rain(n, sr, rng):
    b, a = butter(2, 3000.0 / (sr / 2))
    return 0.3 * lfilter(b, a, rng.normal(n))


SYNTHS = {"dog": _dog, "siren": _siren, "bell": _bell, "rain": _rain}


def render_event(label, n, sample_rate, rng):
    """``n`` samples of the given label, peak-limited to 0.9."""
    audio = SYNTHS[label](n, sample_rate, rng)
    peak = float(np.max(np.abs(audio))) if n else 0.0
    return audio * (0.9 / peak) if peak > 0.9 else audio


def make_entry(label, rng, sample_rate=dsp.SAMPLE_RATE, duration_s=DURATION_S):
    """Audio plus annotations for one recording; events do not overlap."""
    n = int(round(duration_s * sample_rate))
    audio = NOISE_FLOOR * rng.normal(n)
    events = []
    cursor = 0.2
    for _ in range(1 + rng.integers(2)):
        length = round(1.0 + 3.0 * rng.random(), 2)
        start = round(cursor + rng.random(), 2)
        end = min(round(start + length, 2), duration_s)
        if end - start < 0.5:
            break
        a, b = int(round(start * sample_rate)), int(round(end * sample_rate))
        audio[a:b] += render_event(label, b - a, sample_rate, rng)
        events.append({"label": label, "start_s": start, "end_s": end})
        cursor = end + 0.3
    return np.clip(audio, -1.0, 1.0), events


def make_fixtures(out_dir, seed=0, counts=None, sample_rate=dsp.SAMPLE_RATE):
    """Write audio/<split>_<i>.wav and <split>.jsonl for each split.

    Returns split -> manifest path.
    """
    counts = counts or {"train": 8, "valid": 2, "test": 2}
    audio_dir = os.path.join(out_dir, "audio")
    os.makedirs(audio_dir, exist_ok=True)
    master = SeededRng(seed)
    manifests = {}
    for split, count in counts.items():
        path = os.path.join(out_dir, f"{split}.jsonl")
        with open(path, "w", encoding="utf-8") as f:
            for i in range(count):
                rng = master.child(f"fixture/{split}/{i}")
                label = LABELS[i % len(LABELS)]
                audio, events = make_entry(label, rng, sample_rate)
                name = f"{split}_{i:03d}.wav"
                dsp.write_wav(os.path.join(audio_dir, name), audio, sample_rate)
                caption = CAPTIONS[label][rng.integers(len(CAPTIONS[label]))]
                record = {"audio_path": f"audio/{name}", "caption": caption, "events": events}
                f.write(json.dumps(record, sort_keys=True) + "\n")
        manifests[split] = path
        logger.info("wrote %d %s fixture entries to %s", count, split, path)
    return manifests
