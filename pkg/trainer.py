"""Codec and diffusion training loops.

Each stage logs a CSV row (step, loss, lr) per logging interval, writes a
checkpoint every ``train.checkpoint_every`` steps and at the last step, and
records the checkpoint with the lowest validation loss in
``<stage>_best.json``.
"""
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from tqdm import tqdm

import dsp
import numerics as nx
from adapter import AdapterWeights, build_vocab
from checkpoint import join_prefix, load_checkpoint, save_checkpoint, split_prefix
from dataset import load_split_clips, parse_manifest, resolve_audio_path, sample_reference
from diffusion import DenoiserWeights, TrainingExample, build_schedule, diffusion_loss
from errors import ConfigError, DatasetError, InputError, MissingPrerequisiteError
from latentcodec import CodecWeights, decode, elbo_loss, encode, latent_scale, reparameterize
from layers import GradientDescent
from numerics import SeededRng

logger = logging.getLogger(__name__)

STAGES = ("codec", "diffusion")


@dataclass(eq=False)
class Example:
    """One manifest entry ready for training: framed mel, caption, reference clips."""
    mel: np.ndarray
    caption: str
    clips: list = field(default_factory=list)
    entry: int = 0


@dataclass
class TrainResult:
    stage: str
    steps: int
    initial_loss: float
    final_loss: float
    best_checkpoint: str
    best_valid_loss: float
    log_path: str


# ======================================
# PATHS AND MARKERS
# ======================================

def log_path(cfg, stage):
    return os.path.join(cfg.paths.checkpoint_dir, f"{stage}_log.csv")


def marker_path(cfg, stage):
    return os.path.join(cfg.paths.checkpoint_dir, f"{stage}_best.json")


def best_checkpoint(cfg, stage, hint):
    """Path of the selected checkpoint for ``stage``; MissingPrerequisiteError if none."""
    marker = marker_path(cfg, stage)
    if not os.path.isfile(marker):
        raise MissingPrerequisiteError(marker, hint)
    with open(marker, encoding="utf-8") as f:
        chosen = json.load(f)["checkpoint"]
    path = os.path.join(cfg.paths.checkpoint_dir, chosen)
    if not os.path.isfile(path):
        raise MissingPrerequisiteError(path, hint)
    return path


# ======================================
# DATA
# ======================================

def load_examples(cfg, split, manifest_path):
    """Manifest entries of ``split`` with 10.24 s framed mels and their built clips."""
    if not manifest_path:
        return []
    entries = parse_manifest(manifest_path)
    split_dir = os.path.join(cfg.paths.dataset_dir, split)
    try:
        clips = load_split_clips(split_dir, cfg.dsp.sample_rate)
    except DatasetError:
        if split == "train":
            raise
        logger.warning("no built %s split under %s; its entries carry no references", split, split_dir)
        clips = {}
    dsp_cfg = cfg.dsp_config()
    length = int(round(cfg.train.clip_seconds * cfg.dsp.sample_rate))
    examples = []
    for i, entry in enumerate(entries):
        try:
            audio = dsp.read_wav(resolve_audio_path(manifest_path, entry.audio_path), cfg.dsp.sample_rate)
        except InputError as e:
            logger.warning("entry %d skipped: %s", i, e)
            continue
        mel = dsp.mel_spectrogram(dsp.pad_or_trim(audio, length), dsp_cfg).data
        examples.append(Example(dsp.fit_frames(mel, cfg.codec.frames), entry.caption, clips.get(i, []), i))
    return examples


def _draw_batch(examples, size, rng):
    return [examples[rng.integers(len(examples))] for _ in range(size)]


class _LossLog:
    """Interval-averaged loss rows, written with pandas."""

    def __init__(self, every, lr):
        self.every, self.lr = every, lr
        self.rows, self._pending = [], []

    def add(self, step, loss):
        self._pending.append(loss)
        if step % self.every == 0:
            self.rows.append({"step": step, "loss": float(np.mean(self._pending)), "lr": self.lr})
            self._pending = []

    def write(self, path):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        pd.DataFrame(self.rows, columns=["step", "loss", "lr"]).to_csv(path, index=False, float_format="%.10g")


def _write_marker(cfg, stage, name, step, valid_loss):
    with open(marker_path(cfg, stage), "w", encoding="utf-8") as f:
        json.dump({"checkpoint": name, "step": step, "valid_loss": valid_loss}, f, indent=2, sort_keys=True)


def _run_loop(cfg, stage, n_steps, params, step_fn, valid_fn, save_fn):
    """Shared optimisation loop: step, log, checkpoint, keep the best."""
    opt = GradientDescent(params, cfg.train.lr, cfg.train.momentum, cfg.train.clip_norm or None)
    log = _LossLog(cfg.train.log_every, cfg.train.lr)
    os.makedirs(cfg.paths.checkpoint_dir, exist_ok=True)
    best_name, best_loss, initial = None, float("inf"), None
    for step in tqdm(range(1, n_steps + 1), desc=f"train {stage}", disable=not cfg.runtime.progress):
        opt.zero_grad()
        loss = step_fn()
        opt.step()
        initial = loss if initial is None else initial
        log.add(step, loss)
        if step % cfg.train.checkpoint_every == 0 or step == n_steps:
            valid = valid_fn()
            name = f"{stage}_step{step:06d}.ckpt"
            save_fn(os.path.join(cfg.paths.checkpoint_dir, name), step, valid)
            logger.info("%s step %d: train %.5f, valid %.5f", stage, step, loss, valid)
            if valid < best_loss:
                best_name, best_loss = name, valid
                _write_marker(cfg, stage, name, step, valid)
    path = log_path(cfg, stage)
    log.write(path)
    final = log.rows[-1]["loss"] if log.rows else loss
    return TrainResult(stage, n_steps, initial, final, best_name, best_loss, path)


# ======================================
# CODEC STAGE
# ======================================

def train_codec(cfg, seed=None):
    seed = cfg.train.seed if seed is None else seed
    rng = SeededRng(seed)
    train = load_examples(cfg, "train", cfg.paths.train_manifest)
    if not train:
        raise DatasetError(f"no usable training audio in {cfg.paths.train_manifest}")
    valid = load_examples(cfg, "valid", cfg.paths.valid_manifest)
    if not valid:
        logger.warning("no validation audio; selecting the codec checkpoint on training data")
        valid = train
    weights = CodecWeights.from_config(cfg, rng.child("init/codec"))
    batch_rng, noise_rng = rng.child("codec/batch"), rng.child("codec/noise")
    beta_kl = cfg.codec.beta_kl

    def objective(examples, noise):
        total = None
        for ex in examples:
            out = encode(ex.mel, weights)
            loss = elbo_loss(ex.mel, out, decode(reparameterize(out, noise), weights), beta_kl)
            total = loss if total is None else total + loss
        return total * (1.0 / len(examples))

    def step_fn():
        loss = objective(_draw_batch(train, cfg.train.batch, batch_rng), noise_rng)
        nx.backward(loss)
        return loss.item()

    def valid_fn():
        with nx.no_grad():
            return objective(valid, rng.child("codec/valid")).item()

    def save_fn(path, step, valid_loss):
        with nx.no_grad():
            weights.scale = latent_scale([encode(ex.mel, weights).mu for ex in train])
        meta = {"stage": "codec", "step": step, "valid_loss": valid_loss, **weights.meta()}
        save_checkpoint(path, join_prefix("codec", weights.state_dict()), meta)

    return _run_loop(cfg, "codec", cfg.train.codec_steps, weights.parameters(), step_fn, valid_fn, save_fn)


def load_codec(cfg, path=None):
    path = path or best_checkpoint(cfg, "codec", "run `train --stage codec` first")
    tensors, meta = load_checkpoint(path)
    weights = CodecWeights(SeededRng(0), meta["latent_channels"], meta["channels"], meta["frames"], meta["bins"])
    weights.load_state_dict(split_prefix(tensors, "codec"))
    weights.scale = float(meta["scale"])
    return weights


# ======================================
# DIFFUSION STAGE
# ======================================

def _latent_examples(examples, codec):
    """(z0, caption, clips) with z0 = scaled posterior mean; entries without clips dropped."""
    out = []
    with nx.no_grad():
        for ex in examples:
            if not ex.clips:
                continue
            out.append((encode(ex.mel, codec).mu.data * codec.scale, ex.caption, ex.clips))
    return out


def _to_batch(items, rng):
    return [TrainingExample(z0, caption, sample_reference(clips, "train", rng)[0].samples)
            for z0, caption, clips in items]


def train_diffusion(cfg, seed=None):
    seed = cfg.train.seed if seed is None else seed
    codec = load_codec(cfg)
    rng = SeededRng(seed)
    train_examples = load_examples(cfg, "train", cfg.paths.train_manifest)
    train = _latent_examples(train_examples, codec)
    if not train:
        raise DatasetError("no training entry has reference clips; run build-dataset first")
    valid = _latent_examples(load_examples(cfg, "valid", cfg.paths.valid_manifest), codec)
    if not valid:
        logger.warning("no validation entries with references; selecting on training data")
        valid = train
    vocab = build_vocab(ex.caption for ex in train_examples)
    adapter = AdapterWeights.from_config(cfg, vocab, rng.child("init/adapter"))
    denoiser = DenoiserWeights.from_config(cfg, rng.child("init/denoiser"))
    sched = build_schedule(cfg.schedule.n_steps, cfg.schedule.beta_start, cfg.schedule.beta_end)
    step_rng = rng.child("diffusion/step")
    p_drop = cfg.train.p_drop

    def step_fn():
        batch = _to_batch(_draw_batch(train, cfg.train.batch, step_rng), step_rng)
        loss = diffusion_loss(batch, sched, denoiser, adapter, step_rng, p_drop)
        nx.backward(loss)
        return loss.item()

    def valid_fn():
        fixed = rng.child("diffusion/valid")
        with nx.no_grad():
            return diffusion_loss(_to_batch(valid, fixed), sched, denoiser, adapter, fixed, 0.0).item()

    def save_fn(path, step, valid_loss):
        tensors = {**join_prefix("adapter", adapter.state_dict()), **join_prefix("denoiser", denoiser.state_dict())}
        meta = {"stage": "diffusion", "step": step, "valid_loss": valid_loss,
                "style_input": denoiser.style_input, **adapter.meta()}
        save_checkpoint(path, tensors, meta)

    params = adapter.parameters() + denoiser.parameters()
    return _run_loop(cfg, "diffusion", cfg.train.diffusion_steps, params, step_fn, valid_fn, save_fn)


def load_diffusion(cfg, path=None):
    path = path or best_checkpoint(cfg, "diffusion", "run `train --stage diffusion` first")
    tensors, meta = load_checkpoint(path)
    stored = meta.get("style_input", "timestep")
    if stored != cfg.model.style_input:
        raise ConfigError(f"{path}: checkpoint was trained with model.style_input={stored}, "
                          f"config has {cfg.model.style_input}")
    adapter = AdapterWeights.from_config(cfg, AdapterWeights.vocab_from_meta(meta), SeededRng(0))
    adapter.load_state_dict(split_prefix(tensors, "adapter"))
    denoiser = DenoiserWeights.from_config(cfg, SeededRng(0))
    denoiser.load_state_dict(split_prefix(tensors, "denoiser"))
    return adapter, denoiser


def train_stage(cfg, stage, seed=None):
    if stage == "codec":
        return train_codec(cfg, seed)
    return train_diffusion(cfg, seed)
