"""Inference with trained weights: guided generation and the sensitivity protocol."""
import json
import logging
import os
from dataclasses import dataclass

import numpy as np

import dsp
import numerics as nx
from adapter import style_embedding
from diffusion import NoiseSchedule, StyleCondition, build_schedule, sample
from latentcodec import CodecWeights, decode
from metrics import GENERATION_LOG, embedding_cosine_matrix, same_cross_means
from numerics import SeededRng
from trainer import load_codec, load_diffusion

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class ModelBundle:
    codec: CodecWeights
    adapter: object
    denoiser: object
    schedule: NoiseSchedule


def load_models(cfg):
    codec = load_codec(cfg)
    adapter, denoiser = load_diffusion(cfg)
    sched = build_schedule(cfg.schedule.n_steps, cfg.schedule.beta_start, cfg.schedule.beta_end)
    return ModelBundle(codec, adapter, denoiser, sched)


def load_reference(path, cfg):
    """Read a reference clip, cutting or zero-padding it to the clip length."""
    audio = dsp.read_wav(path, cfg.dsp.sample_rate)
    n = cfg.clip_samples()
    if audio.size != n:
        logger.warning("reference %s has %d samples; cut/padded to %d", path, audio.size, n)
        audio = dsp.pad_or_trim(audio, n)
    return audio


def style_vector(bundle, caption, reference):
    with nx.no_grad():
        return style_embedding(caption, reference, bundle.adapter).data


def sample_mel(bundle, style, cfg, rng, guidance=None):
    """Style vector -> guided latent sample -> decoded log-mel, frames x bins."""
    w = cfg.generate.guidance if guidance is None else guidance
    z = sample(bundle.codec.latent_shape, bundle.schedule, StyleCondition(nx.Tensor(style)),
               bundle.denoiser, w, rng.child("sample"))
    with nx.no_grad():
        return decode(z / bundle.codec.scale, bundle.codec).data


def synthesize(bundle, style, cfg, rng, guidance=None):
    """Sampled mel -> Griffin-Lim audio of generate.clip_seconds."""
    mel = sample_mel(bundle, style, cfg, rng, guidance)
    length = int(round(cfg.generate.clip_seconds * cfg.dsp.sample_rate))
    return dsp.griffin_lim(mel, cfg.dsp_config(), cfg.dsp.griffin_lim_iters, rng.child("vocoder"), length=length,
                           momentum=cfg.dsp.griffin_lim_momentum)


def generate_files(bundle, caption, reference_path, count, cfg, seed, out_dir):
    """Write ``count`` WAVs named gen_s<seed>_<i>.wav plus a generation.jsonl record per file."""
    os.makedirs(out_dir, exist_ok=True)
    style = style_vector(bundle, caption, load_reference(reference_path, cfg))
    master = SeededRng(seed)
    records = []
    for i in range(count):
        rng = master.child(f"generate/{i}")
        audio = synthesize(bundle, style, cfg, rng)
        name = f"gen_s{seed}_{i:03d}.wav"
        dsp.write_wav(os.path.join(out_dir, name), audio, cfg.dsp.sample_rate)
        records.append({"file": name, "caption": caption, "reference": os.path.abspath(reference_path),
                        "seed": rng.seed, "index": i})
        logger.info("wrote %s", name)
    with open(os.path.join(out_dir, GENERATION_LOG), "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + "\n")
    return records


def sensitivity(bundle, caption, reference_paths, repeats, cfg, seed, embedder):
    """Same- vs cross-reference cosine of style vectors and of generated-audio embeddings.

    Each reference is embedded ``repeats`` times and drives ``repeats``
    generations with distinct derived seeds.
    """
    master = SeededRng(seed)
    styles, audio_vectors, groups = [], [], []
    for r, path in enumerate(reference_paths):
        reference = load_reference(path, cfg)
        for k in range(repeats):
            style = style_vector(bundle, caption, reference)
            audio = synthesize(bundle, style, cfg, master.child(f"sensitivity/{r}/{k}"))
            styles.append(style)
            audio_vectors.append(embedder(audio))
            groups.append(r)
    style_same, style_cross = same_cross_means(embedding_cosine_matrix(np.stack(styles), np.stack(styles)),
                                               groups, groups, skip_diagonal=True)
    audio_same, audio_cross = same_cross_means(
        embedding_cosine_matrix(np.stack(audio_vectors), np.stack(audio_vectors)), groups, groups, skip_diagonal=True)

    def gap(same, cross):
        return None if same is None or cross is None else same - cross

    return {
        "caption": caption,
        "references": [os.path.basename(p) for p in reference_paths],
        "repeats": repeats,
        "style_same_cos_mean": style_same,
        "style_cross_cos_mean": style_cross,
        "style_gap": gap(style_same, style_cross),
        "audio_same_cos_mean": audio_same,
        "audio_cross_cos_mean": audio_cross,
        "audio_gap": gap(audio_same, audio_cross),
    }
