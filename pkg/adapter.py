"""Sound-event prompt adapter.

A reference clip is encoded into a short sequence of style vectors, the
caption into token embeddings, and the two are fused by residual multi-head
cross-attention (text queries, reference keys/values) before mean pooling
into a single style embedding.
"""
import logging
from dataclasses import dataclass

import numpy as np

import dsp
import numerics as nx
from errors import ContractError, DimensionError, InputError
from layers import Conv2d, Linear, Module
from numerics import Parameter

logger = logging.getLogger(__name__)

UNK = "<unk>"
POOL_EPS = 1e-5


def tokenize(caption):
    return caption.lower().split()


def build_vocab(captions):
    """Token -> id over all training captions; id 0 is reserved for UNK."""
    tokens = sorted({t for caption in captions for t in tokenize(caption)} - {UNK})
    return {UNK: 0, **{t: i + 1 for i, t in enumerate(tokens)}}


@dataclass(eq=False)
class TextEmbedding:
    e_t: nx.Tensor
    token_ids: list


# ======================================
# WEIGHTS
# ======================================

class ReferenceEncoder(Module):
    """Strided conv stack -> per-chunk mean/std pooling -> two dense layers."""

    def __init__(self, channels, d_r, r_len, rng):
        c_ins = (1,) + tuple(channels[:-1])
        self.convs = [Conv2d(c_in, c_out, 3, rng, stride=2, padding=1) for c_in, c_out in zip(c_ins, channels)]
        self.fc1 = Linear(2 * channels[-1], d_r, rng)
        self.fc2 = Linear(d_r, d_r, rng)
        self.r_len = r_len


class AdapterWeights(Module):
    def __init__(self, vocab, rng, d=64, heads=4, d_r=64, r_len=4, encoder_channels=(8, 16, 32, 32),
                 fusion="cross_attention", dsp_cfg=None, clip_samples=32000):
        if d % heads:
            raise ContractError(f"adapter: d={d} not divisible by heads={heads}")
        if fusion not in ("cross_attention", "concat"):
            raise ContractError(f"adapter: unknown fusion '{fusion}'")
        self.vocab = dict(vocab)
        self.d, self.heads, self.d_r = d, heads, d_r
        self.fusion = fusion
        self.dsp_cfg = dsp_cfg or dsp.DspConfig()
        self.clip_samples = clip_samples
        self.token_table = Parameter(rng.normal((len(self.vocab), d)) * 0.1)
        self.encoder = ReferenceEncoder(tuple(encoder_channels), d_r, r_len, rng)
        self.w_q = Parameter(rng.normal((d, d)) / np.sqrt(d))
        self.w_k = Parameter(rng.normal((d_r, d)) / np.sqrt(d_r))
        self.w_v = Parameter(rng.normal((d_r, d)) / np.sqrt(d_r))
        if fusion == "concat":
            self.w_c = Parameter(rng.normal((d + d_r, d)) / np.sqrt(d + d_r))

    @classmethod
    def from_config(cls, cfg, vocab, rng):
        m = cfg.model
        return cls(vocab, rng, d=m.d, heads=m.heads, d_r=m.d_r, r_len=m.r_len,
                   encoder_channels=m.encoder_channels, fusion=m.fusion,
                   dsp_cfg=cfg.dsp_config(), clip_samples=cfg.clip_samples())

    def meta(self):
        return {"vocab": sorted(self.vocab, key=self.vocab.get)}

    @staticmethod
    def vocab_from_meta(meta):
        return {token: i for i, token in enumerate(meta["vocab"])}


# ======================================
# OPERATIONS
# ======================================

def encode_reference(clip, weights):
    """Reference clip -> e_r of shape (r_len, d_r)."""
    samples = clip.samples if hasattr(clip, "samples") else np.asarray(clip, dtype=np.float64)
    if samples.shape != (weights.clip_samples,):
        raise ContractError(f"encode_reference: clip must have {weights.clip_samples} samples, got {samples.shape}")
    enc = weights.encoder
    mel = dsp.mel_spectrogram(samples, weights.dsp_cfg).data
    x = nx.Tensor(mel).reshape(1, *mel.shape)
    for conv in enc.convs:
        x = nx.silu(conv(x))
    feat = nx.mean(x, axis=2)
    c, t = feat.shape
    if t < enc.r_len:
        raise ContractError(f"encode_reference: {t} encoder frames cannot fill r_len={enc.r_len}")
    rows = []
    for chunk in np.array_split(np.arange(t), enc.r_len):
        seg = feat[:, int(chunk[0]):int(chunk[-1]) + 1]
        mu = nx.mean(seg, axis=1)
        spread = nx.mean(nx.square(seg - mu.reshape(c, 1)), axis=1)
        rows.append(nx.concat([mu, nx.sqrt(spread + POOL_EPS)]))
    pooled = nx.stack(rows)
    return enc.fc2(nx.silu(enc.fc1(pooled)))


def encode_text(caption, weights):
    tokens = tokenize(caption)
    if not tokens:
        raise InputError("encode_text: caption has no tokens")
    ids = [weights.vocab.get(t, 0) for t in tokens]
    return TextEmbedding(weights.token_table[ids], ids)


def cross_attend_fuse(e_t, e_r, weights, return_attention=False):
    """softmax(Q K^T / sqrt(d/h)) V per head, heads concatenated, plus e_t."""
    e_t = e_t.e_t if isinstance(e_t, TextEmbedding) else nx.as_tensor(e_t)
    e_r = nx.as_tensor(e_r)
    if e_t.ndim != 2 or e_t.shape[1] != weights.w_q.shape[0]:
        raise DimensionError(f"cross_attend_fuse: e_t {e_t.shape} vs W_q {weights.w_q.shape}")
    if e_r.ndim != 2 or e_r.shape[1] != weights.w_k.shape[0]:
        raise DimensionError(f"cross_attend_fuse: e_r {e_r.shape} vs W_k {weights.w_k.shape}")
    q, k, v = e_t @ weights.w_q, e_r @ weights.w_k, e_r @ weights.w_v
    dh = weights.d // weights.heads
    outputs, maps = [], []
    for h in range(weights.heads):
        cols = (slice(None), slice(h * dh, (h + 1) * dh))
        attn = nx.softmax_rows((q[cols] @ k[cols].T) / np.sqrt(dh))
        outputs.append(attn @ v[cols])
        maps.append(attn.data)
    fused = nx.concat(outputs, axis=1) + e_t
    return (fused, maps) if return_attention else fused


def mean_pool(x):
    x = nx.as_tensor(x)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ContractError(f"mean_pool: expected a non-empty (t_len, d) sequence, got {x.shape}")
    return nx.mean(x, axis=0)


def style_embedding(caption, reference, weights):
    """Caption + reference clip -> pooled style vector e_s of size d."""
    e_t = encode_text(caption, weights)
    e_r = encode_reference(reference, weights)
    if weights.fusion == "concat":
        joined = nx.concat([mean_pool(e_t.e_t), mean_pool(e_r)]).reshape(1, -1)
        return (joined @ weights.w_c).reshape(-1)
    return mean_pool(cross_attend_fuse(e_t, e_r, weights))


def reference_vector(samples, weights):
    """Global reference descriptor: e_r averaged over its sequence."""
    with nx.no_grad():
        return mean_pool(encode_reference(samples, weights)).data
