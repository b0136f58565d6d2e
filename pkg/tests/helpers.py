"""Test helpers shared across modules."""
import os

import numpy as np

from dataset import build_dataset
from fixtures import make_fixtures
from numerics import Parameter
from settings import build_config

SR = 16000
CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "config")


def tone(freq, seconds, amp=0.5, sr=SR):
    t = np.arange(int(round(seconds * sr))) / sr
    return amp * np.sin(2 * np.pi * freq * t)


def randomize(module, rng, scale=0.3):
    """Replace every parameter with random values (zero-initialised heads included)."""
    for p in module.parameters():
        p.data = rng.normal(p.shape) * scale
        p.zero_grad()


def param(rng, *shape, scale=1.0):
    return Parameter(rng.normal(shape) * scale)


def tiny_overrides(root):
    root = str(root)
    return {
        "paths.train_manifest": os.path.join(root, "fixtures", "train.jsonl"),
        "paths.valid_manifest": os.path.join(root, "fixtures", "valid.jsonl"),
        "paths.test_manifest": os.path.join(root, "fixtures", "test.jsonl"),
        "paths.dataset_dir": os.path.join(root, "dataset"),
        "paths.checkpoint_dir": os.path.join(root, "checkpoints"),
        "paths.output_dir": os.path.join(root, "generated"),
        "paths.report_dir": os.path.join(root, "reports"),
        "dsp.hop": "512",
        "dsp.mel_bins": "16",
        "dsp.griffin_lim_iters": "2",
        "codec.frames": "320",
        "codec.channels": "4",
        "model.d": "8",
        "model.heads": "2",
        "model.d_r": "8",
        "model.encoder_channels": "2,4,4,4",
        "model.t_dim": "8",
        "model.unet_channels": "4",
        "schedule.n_steps": "4",
        "schedule.beta_start": "0.01",
        "schedule.beta_end": "0.2",
        "train.codec_steps": "2",
        "train.diffusion_steps": "2",
        "train.batch": "2",
        "train.log_every": "1",
        "train.checkpoint_every": "1",
        "metrics.embedder": "mel_stats",
        "runtime.progress": "false",
    }


def prepare_run(root, extra=None):
    """Fixture corpus under ``root`` with its train and valid splits built."""
    cfg = build_config({**tiny_overrides(root), **(extra or {})})
    make_fixtures(os.path.join(str(root), "fixtures"), seed=0, counts={"train": 4, "valid": 2, "test": 2})
    for split, manifest in (("train", cfg.paths.train_manifest), ("valid", cfg.paths.valid_manifest)):
        build_dataset(manifest, cfg.paths.dataset_dir, cfg, cfg.train.seed, split)
    return cfg
