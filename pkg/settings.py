"""Run configuration: default tables, key=value file loading, validation.

A config file is flat ``section.key=value`` text (``#`` comments allowed).
Keys absent from the file fall back to the DEFAULT_* tables below; unknown
keys are rejected so typos fail before any side effect.
"""
import copy
import logging
import os

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from dsp import DspConfig
from errors import ConfigError, InputError

logger = logging.getLogger(__name__)

# ======================================
# DEFAULT CONFIGURATIONS
# ======================================
DEFAULT_PATHS = {
    "train_manifest": "data/fixtures/train.jsonl",
    "valid_manifest": "data/fixtures/valid.jsonl",
    "test_manifest": "",
    "dataset_dir": "runs/dataset",
    "checkpoint_dir": "runs/checkpoints",
    "output_dir": "runs/generated",
    "report_dir": "runs/reports",
}

DEFAULT_DSP = {
    "sample_rate": 16000,
    "fft_size": 1024,
    "hop": 160,              # 10 ms at 16 kHz
    "mel_bins": 64,
    "f_min": 0.0,
    "f_max": 8000.0,
    "griffin_lim_iters": 32,
    "griffin_lim_momentum": 0.99,  # 0 = plain Griffin-Lim
}

DEFAULT_DATASET = {
    "clip_seconds": 2.0,
    "min_remainder_seconds": 0.5,
    "ste_threshold": 1e-4,   # mean-square, full scale = 1.0
    "ste_frame": 400,
    "ste_hop": 160,
    "n_jobs": 1,
}

DEFAULT_MODEL = {
    "d": 64,
    "heads": 4,
    "r_len": 4,
    "d_r": 64,
    "encoder_channels": "8,16,32,32",
    "fusion": "cross_attention",
    "style_input": "timestep",   # or "text": style via U-Net cross-attention
    "t_dim": 64,
    "unet_channels": 16,
}

DEFAULT_CODEC = {
    "latent_channels": 4,
    "channels": 8,
    "frames": 1024,
    "beta_kl": 1e-3,
}

DEFAULT_SCHEDULE = {
    "n_steps": 200,
    "beta_start": 1e-4,
    "beta_end": 0.02,
}

DEFAULT_TRAIN = {
    "seed": 0,
    "codec_steps": 500,
    "diffusion_steps": 2000,
    "lr": 1e-3,
    "momentum": 0.9,
    "clip_norm": 1.0,
    "batch": 8,
    "p_drop": 0.10,
    "log_every": 10,
    "checkpoint_every": 200,
    "clip_seconds": 10.24,
}

DEFAULT_GENERATE = {
    "guidance": 3.0,
    "count": 1,
    "clip_seconds": 10.24,
}

DEFAULT_METRICS = {
    "hop_s": 0.5,
    "embedder": "reference_encoder",
    "embeddings": "",
    "n_jobs": 1,
}

DEFAULT_RUNTIME = {
    "debug": False,
    "progress": True,
}

DEFAULT_CONFIG = {
    "paths": DEFAULT_PATHS,
    "dsp": DEFAULT_DSP,
    "dataset": DEFAULT_DATASET,
    "model": DEFAULT_MODEL,
    "codec": DEFAULT_CODEC,
    "schedule": DEFAULT_SCHEDULE,
    "train": DEFAULT_TRAIN,
    "generate": DEFAULT_GENERATE,
    "metrics": DEFAULT_METRICS,
    "runtime": DEFAULT_RUNTIME,
}


# ======================================
# VALIDATED MODELS
# ======================================

class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class PathsConfig(_Section):
    train_manifest: str
    valid_manifest: str
    test_manifest: str = ""
    dataset_dir: str
    checkpoint_dir: str
    output_dir: str
    report_dir: str


class DspSection(_Section):
    sample_rate: int = Field(16000, gt=0)
    fft_size: int = Field(gt=1)
    hop: int = Field(gt=0)
    mel_bins: int = Field(gt=0)
    f_min: float = Field(ge=0)
    f_max: float = Field(gt=0)
    griffin_lim_iters: int = Field(gt=0)
    griffin_lim_momentum: float = Field(ge=0)


class DatasetSection(_Section):
    clip_seconds: float = Field(gt=0)
    min_remainder_seconds: float = Field(ge=0)
    ste_threshold: float = Field(ge=0)
    ste_frame: int = Field(ge=1)
    ste_hop: int = Field(ge=1)
    n_jobs: int = Field(ge=1)


class ModelSection(_Section):
    d: int = Field(gt=0)
    heads: int = Field(gt=0)
    r_len: int = Field(ge=1)
    d_r: int = Field(gt=0)
    encoder_channels: tuple[int, ...]
    fusion: str
    style_input: str
    t_dim: int = Field(gt=0)
    unet_channels: int = Field(gt=0)

    @field_validator("encoder_channels", mode="before")
    @classmethod
    def _split_channels(cls, value):
        if isinstance(value, str):
            return tuple(int(v) for v in value.split(",") if v.strip())
        return value

    @model_validator(mode="after")
    def _check_dims(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.t_dim % 2:
            raise ValueError(f"t_dim={self.t_dim} must be even")
        if self.fusion not in ("cross_attention", "concat"):
            raise ValueError(f"fusion must be cross_attention or concat, got {self.fusion}")
        if self.style_input not in ("timestep", "text"):
            raise ValueError(f"style_input must be timestep or text, got {self.style_input}")
        if not self.encoder_channels:
            raise ValueError("encoder_channels is empty")
        return self


class CodecSection(_Section):
    latent_channels: int = Field(gt=0)
    channels: int = Field(gt=0)
    frames: int = Field(gt=0)
    beta_kl: float = Field(ge=0)

    @model_validator(mode="after")
    def _check_frames(self):
        if self.frames % 8:
            raise ValueError(f"frames={self.frames} must be a multiple of 8 (4x codec, 2x U-Net)")
        return self


class ScheduleSection(_Section):
    n_steps: int = Field(ge=1)
    beta_start: float
    beta_end: float

    @model_validator(mode="after")
    def _check_bounds(self):
        if not 0 < self.beta_start < self.beta_end < 1:
            raise ValueError("need 0 < beta_start < beta_end < 1")
        return self


class TrainSection(_Section):
    seed: int = Field(ge=0)
    codec_steps: int = Field(ge=1)
    diffusion_steps: int = Field(ge=1)
    lr: float = Field(gt=0)
    momentum: float = Field(ge=0, lt=1)
    clip_norm: float = Field(ge=0)
    batch: int = Field(ge=1)
    p_drop: float = Field(ge=0, le=1)
    log_every: int = Field(ge=1)
    checkpoint_every: int = Field(ge=1)
    clip_seconds: float = Field(gt=0)


class GenerateSection(_Section):
    guidance: float = Field(ge=0)
    count: int = Field(ge=1)
    clip_seconds: float = Field(gt=0)


class MetricsSection(_Section):
    hop_s: float = Field(gt=0)
    embedder: str
    embeddings: str = ""
    n_jobs: int = Field(ge=1)

    @field_validator("embedder")
    @classmethod
    def _known_embedder(cls, value):
        if value not in ("reference_encoder", "mel_stats", "precomputed"):
            raise ValueError(f"unknown embedder {value}")
        return value


class RuntimeSection(_Section):
    debug: bool
    progress: bool


class RunConfig(_Section):
    paths: PathsConfig
    dsp: DspSection
    dataset: DatasetSection
    model: ModelSection
    codec: CodecSection
    schedule: ScheduleSection
    train: TrainSection
    generate: GenerateSection
    metrics: MetricsSection
    runtime: RuntimeSection

    @model_validator(mode="after")
    def _check_latent_grid(self):
        if self.dsp.mel_bins % 8:
            raise ValueError(f"dsp.mel_bins={self.dsp.mel_bins} must be a multiple of 8")
        return self

    def dsp_config(self):
        d = self.dsp
        return DspConfig(sample_rate=d.sample_rate, fft_size=d.fft_size, hop=d.hop,
                         mel_bins=d.mel_bins, f_min=d.f_min, f_max=d.f_max)

    def clip_samples(self):
        return int(round(self.dataset.clip_seconds * self.dsp.sample_rate))


# ======================================
# HELPER FUNCTIONS
# ======================================

def _flatten(nested):
    flat = {}
    for section, values in nested.items():
        for key, value in values.items():
            if isinstance(value, (list, tuple)):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            flat[f"{section}.{key}"] = value
    return flat


def _merge(nested, key, value, origin):
    section, _, name = key.partition(".")
    if not name or section not in nested or name not in nested[section]:
        raise ConfigError(f"{origin}: unknown config key '{key}'")
    if value is None:
        raise ConfigError(f"{origin}: key '{key}' has no value")
    nested[section][name] = value


def build_config(values=None, origin="<overrides>"):
    """Validate defaults overlaid with ``values`` (flat section.key mapping)."""
    nested = copy.deepcopy(DEFAULT_CONFIG)
    for key, value in (values or {}).items():
        _merge(nested, key, value, origin)
    try:
        cfg = RunConfig.model_validate(nested)
        cfg.dsp_config()
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"])
        raise ConfigError(f"{origin}: {where}: {first['msg']}") from e
    return cfg


def load_config(path, overrides=None):
    """Read a key=value config file over the defaults, then apply ``overrides``."""
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    values = dict(dotenv_values(path))
    values.update(overrides or {})
    cfg = build_config(values, origin=path)
    logger.debug("loaded config %s", path)
    return cfg


def save_config(path, cfg):
    """Write a config (RunConfig or nested dict) as sorted key=value lines."""
    nested = cfg.model_dump() if isinstance(cfg, RunConfig) else cfg
    flat = _flatten(nested)
    directory = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(directory, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for key in sorted(flat):
                f.write(f"{key}={flat[key]}\n")
    except OSError as e:
        raise InputError(f"cannot write config {path}: {e}") from e


def initialize_config(path):
    """Create the config with defaults if missing; add any keys it lacks.

    Returns True when the file was created or updated.
    """
    if not os.path.isfile(path):
        save_config(path, DEFAULT_CONFIG)
        return True
    existing = dict(dotenv_values(path))
    updated = False
    for key, value in _flatten(DEFAULT_CONFIG).items():
        if key not in existing:
            existing[key] = value
            updated = True
    if updated:
        nested = copy.deepcopy(DEFAULT_CONFIG)
        for key, value in existing.items():
            _merge(nested, key, value, path)
        save_config(path, nested)
    return updated


def require_paths(*paths):
    """Fail fast when an input path named by the config does not exist."""
    for path in paths:
        if not path or not os.path.exists(path):
            raise InputError(f"required path does not exist: {path or '<empty>'}")
