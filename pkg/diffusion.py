"""Latent DDPM conditioned on a style embedding.

The denoiser is a one-level U-Net over the latent grid. Its residual blocks
are modulated adaLN-Zero style: an MLP of concat(style, timestep features)
emits per-channel (gamma, beta, gate), with the final layer zero-initialised
so every block starts as the identity. The bottleneck attention block is
unmodulated. An absent style uses a learned null vector.
"""
import logging
from dataclasses import dataclass

import numpy as np

import adapter as adapter_mod
import numerics as nx
from errors import ConfigError, ContractError, DimensionError
from layers import Conv2d, ConvTranspose2d, LayerNorm, Linear, Module, channel_layer_norm
from numerics import Parameter

logger = logging.getLogger(__name__)


# ======================================
# NOISE SCHEDULE
# ======================================

@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def n_steps(self):
        return self.betas.size

    def alpha_bar(self, n):
        """1-indexed cumulative product; alpha_bar(0) is 1."""
        return 1.0 if n == 0 else float(self.alpha_bars[n - 1])

    def posterior_variance(self, n):
        beta = float(self.betas[n - 1])
        return beta * (1.0 - self.alpha_bar(n - 1)) / (1.0 - self.alpha_bar(n))


def schedule_from_betas(betas):
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 1 or betas.size < 1:
        raise ConfigError("schedule: need at least one beta")
    if not (np.all(betas > 0) and np.all(betas < 1) and np.all(np.diff(betas) > 0)):
        raise ConfigError("schedule: betas must be strictly increasing inside (0, 1)")
    return NoiseSchedule(betas, np.cumprod(1.0 - betas))


def build_schedule(n_steps, beta_start, beta_end):
    """Linear beta schedule from beta_start to beta_end over n_steps."""
    if n_steps < 1:
        raise ConfigError(f"schedule: n_steps must be >= 1, got {n_steps}")
    if not 0 < beta_start < beta_end < 1:
        raise ConfigError(f"schedule: need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    return schedule_from_betas(np.linspace(beta_start, beta_end, n_steps))


def _check_step(n, sched):
    if not 1 <= n <= sched.n_steps:
        raise ContractError(f"diffusion step {n} outside [1, {sched.n_steps}]")


def forward_diffuse(z0, n, sched, eps):
    """z_n = sqrt(alpha_bar_n) * z0 + sqrt(1 - alpha_bar_n) * eps."""
    _check_step(n, sched)
    z0, eps = nx.as_tensor(z0), nx.as_tensor(eps)
    if z0.shape != eps.shape:
        raise DimensionError(f"forward_diffuse: z0 {z0.shape} vs eps {eps.shape}")
    ab = sched.alpha_bar(n)
    return z0 * np.sqrt(ab) + eps * np.sqrt(1.0 - ab)


def timestep_embed(n, dim):
    """Sinusoidal embedding: sin half then cos half at geometric frequencies."""
    if dim % 2:
        raise ConfigError(f"timestep_embed: dim must be even, got {dim}")
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = float(n) * freqs
    return np.concatenate([np.sin(args), np.cos(args)])


# ======================================
# CONDITIONING
# ======================================

@dataclass(frozen=True, eq=False)
class StyleCondition:
    """A style embedding, or ABSENT when ``style`` is None."""
    style: object = None

    @property
    def absent(self):
        return self.style is None


ABSENT = StyleCondition()


class ResBlock(Module):
    """conv3 -> silu -> conv3 with an adaLN-Zero modulation head."""

    def __init__(self, channels, cond_dim, rng):
        self.channels = channels
        self.conv1 = Conv2d(channels, channels, 3, rng, padding=1)
        self.conv2 = Conv2d(channels, channels, 3, rng, padding=1)
        self.mod = Linear(cond_dim, 3 * channels, rng, zero=True)


def _resolve_style(style, null_style):
    if isinstance(style, StyleCondition):
        if style.absent:
            if null_style is None:
                raise ContractError("ABSENT style needs a null-condition vector")
            return null_style
        return style.style
    return style


def modulate(x, style, t_emb, block, null_style=None):
    """x + gate * Block(LN(x) * (1 + gamma) + beta), modulation from [style, t_emb].

    ``style=None`` modulates on the timestep embedding alone.
    """
    x = nx.as_tensor(x)
    c = block.channels
    if x.ndim != 3 or x.shape[0] != c:
        raise DimensionError(f"modulate: input {x.shape} does not have {c} channels")
    parts = [nx.as_tensor(t_emb)]
    if style is not None:
        parts.insert(0, nx.as_tensor(_resolve_style(style, null_style)))
    cond = nx.concat(parts)
    if cond.shape[0] != block.mod.weight.shape[0]:
        raise DimensionError(f"modulate: condition of size {cond.shape[0]}, block expects "
                             f"{block.mod.weight.shape[0]}")
    params = block.mod(nx.silu(cond))
    gamma = params[0:c].reshape(c, 1, 1)
    beta = params[c:2 * c].reshape(c, 1, 1)
    gate = params[2 * c:3 * c].reshape(c, 1, 1)
    h = channel_layer_norm(x) * (gamma + 1.0) + beta
    h = block.conv2(nx.silu(block.conv1(h)))
    return x + gate * h


class AttentionBlock(Module):
    """Single-head self-attention over the latent positions."""

    def __init__(self, channels, rng):
        self.norm = LayerNorm(channels)
        self.qkv = Linear(channels, 3 * channels, rng)
        self.proj = Linear(channels, channels, rng)

    def __call__(self, x):
        c, h, w = x.shape
        tokens = nx.transpose(x.reshape(c, h * w))
        qkv = self.qkv(self.norm(tokens))
        q, k, v = qkv[:, 0:c], qkv[:, c:2 * c], qkv[:, 2 * c:3 * c]
        attn = nx.softmax_rows((q @ k.T) / np.sqrt(c))
        out = self.proj(attn @ v)
        return x + nx.transpose(out).reshape(c, h, w)


class CrossAttentionBlock(Module):
    """Latent positions (queries) attend to context tokens of width ``context_dim``.

    The output projection starts at zero, so a fresh block is the identity.
    """

    def __init__(self, channels, context_dim, rng):
        self.channels = channels
        self.context_dim = context_dim
        self.norm = LayerNorm(channels)
        self.q = Linear(channels, channels, rng)
        self.kv = Linear(context_dim, 2 * channels, rng)
        self.proj = Linear(channels, channels, rng, zero=True)

    def __call__(self, x, context, return_attention=False):
        x = nx.as_tensor(x)
        c, h, w = x.shape
        context = nx.as_tensor(context)
        if context.ndim != 2 or context.shape[1] != self.context_dim:
            raise DimensionError(f"cross-attention: context {context.shape}, expected (tokens, {self.context_dim})")
        tokens = nx.transpose(x.reshape(c, h * w))
        q = self.q(self.norm(tokens))
        kv = self.kv(context)
        k, v = kv[:, 0:c], kv[:, c:2 * c]
        attn = nx.softmax_rows((q @ k.T) / np.sqrt(c))
        out = x + nx.transpose(self.proj(attn @ v)).reshape(c, h, w)
        return (out, attn.data) if return_attention else out


def style_context(style, null_style):
    """Context tokens for the text path: [style; null], or [null; null] when ABSENT.

    The null token is always present so positions can attend away from the style.
    """
    null_style = nx.as_tensor(null_style)
    d = null_style.shape[0]
    vec = nx.as_tensor(_resolve_style(style, null_style))
    if vec.shape != (d,):
        raise DimensionError(f"style_context: style of shape {vec.shape}, expected ({d},)")
    return nx.stack([vec, null_style])


STYLE_INPUTS = ("timestep", "text")


class DenoiserWeights(Module):
    """U-Net noise predictor; ``style_input`` picks where the style enters.

    timestep: style joins the timestep embedding in every residual block's modulation.
    text: residual blocks see the timestep alone and the style arrives through
    cross-attention after the mid self-attention.
    """

    def __init__(self, rng, latent_channels=4, d=64, t_dim=64, channels=16, style_input="timestep"):
        if t_dim % 2:
            raise ConfigError(f"denoiser: t_dim must be even, got {t_dim}")
        if style_input not in STYLE_INPUTS:
            raise ConfigError(f"denoiser: style_input must be one of {STYLE_INPUTS}, got {style_input}")
        self.latent_channels = latent_channels
        self.d, self.t_dim = d, t_dim
        self.style_input = style_input
        cond_dim = d + t_dim if style_input == "timestep" else t_dim
        ch = channels
        self.time_proj = Linear(t_dim, t_dim, rng)
        self.null_style = Parameter(rng.normal(d) * 0.02)
        self.in_conv = Conv2d(latent_channels, ch, 3, rng, padding=1)
        self.res_in = ResBlock(ch, cond_dim, rng)
        self.down = Conv2d(ch, 2 * ch, 3, rng, stride=2, padding=1)
        self.res_mid1 = ResBlock(2 * ch, cond_dim, rng)
        self.attn = AttentionBlock(2 * ch, rng)
        self.res_mid2 = ResBlock(2 * ch, cond_dim, rng)
        self.up = ConvTranspose2d(2 * ch, ch, 4, rng, stride=2, padding=1)
        self.merge = Conv2d(2 * ch, ch, 1, rng)
        self.res_out = ResBlock(ch, cond_dim, rng)
        self.out_conv = Conv2d(ch, latent_channels, 3, rng, padding=1, zero=True)
        self.cross_attn = CrossAttentionBlock(2 * ch, d, rng) if style_input == "text" else None

    @classmethod
    def from_config(cls, cfg, rng):
        return cls(rng, cfg.codec.latent_channels, cfg.model.d, cfg.model.t_dim, cfg.model.unet_channels,
                   cfg.model.style_input)

    def res_blocks(self):
        return [self.res_in, self.res_mid1, self.res_mid2, self.res_out]


def denoise(z, n, style, weights):
    """Predict the noise in latent ``z`` at step ``n``; output has z's shape."""
    z = nx.as_tensor(z)
    if z.ndim != 3 or z.shape[0] != weights.latent_channels:
        raise DimensionError(f"denoise: latent {z.shape} does not have {weights.latent_channels} channels")
    if z.shape[1] % 2 or z.shape[2] % 2:
        raise DimensionError(f"denoise: latent grid {z.shape[1:]} must be even on both axes")
    if not isinstance(style, StyleCondition):
        style = StyleCondition(style)
    t_emb = nx.silu(weights.time_proj(timestep_embed(n, weights.t_dim)))
    text = weights.style_input == "text"

    def block(x, res):
        return modulate(x, None if text else style, t_emb, res, weights.null_style)

    skip = block(weights.in_conv(z), weights.res_in)
    h = nx.silu(weights.down(skip))
    h = block(h, weights.res_mid1)
    h = weights.attn(h)
    if text:
        h = weights.cross_attn(h, style_context(style, weights.null_style))
    h = block(h, weights.res_mid2)
    h = nx.silu(weights.up(h))
    h = weights.merge(nx.concat([h, skip], axis=0))
    h = block(h, weights.res_out)
    return weights.out_conv(nx.silu(h))


# ======================================
# TRAINING OBJECTIVE
# ======================================

@dataclass(eq=False)
class TrainingExample:
    z0: np.ndarray
    caption: str
    reference: np.ndarray


def diffusion_loss(batch, sched, denoiser, adapter, rng, p_drop=0.10, stats=None):
    """Mean noise-prediction MSE over the batch, with condition dropout.

    Per example the draws are: step n, noise eps, dropout coin.
    ``stats`` (if given) counts dropped and conditioned examples.
    """
    if not batch:
        raise ContractError("training batch is empty")
    total = None
    for example in batch:
        n = rng.integers(sched.n_steps) + 1
        eps = rng.normal(np.shape(example.z0))
        if rng.random() < p_drop:
            style = ABSENT
            key = "dropped"
        else:
            style = StyleCondition(adapter_mod.style_embedding(example.caption, example.reference, adapter))
            key = "conditioned"
        if stats is not None:
            stats[key] = stats.get(key, 0) + 1
        z_n = forward_diffuse(example.z0, n, sched, eps)
        loss = nx.mse_loss(denoise(z_n, n, style, denoiser), eps)
        total = loss if total is None else total + loss
    return total * (1.0 / len(batch))


def training_step(batch, sched, denoiser, adapter, rng, p_drop=0.10, stats=None):
    """One forward/backward pass; gradients accumulate into the weights."""
    loss = diffusion_loss(batch, sched, denoiser, adapter, rng, p_drop, stats)
    nx.backward(loss)
    return loss.item()


# ======================================
# GUIDED SAMPLING
# ======================================

def guided_mix(cond, uncond, w):
    return w * np.asarray(cond) + (1.0 - w) * np.asarray(uncond)


def cfg_estimate(z, n, style, weights, w):
    """w * eps(z, style) + (1 - w) * eps(z, ABSENT)."""
    if not isinstance(style, StyleCondition):
        style = StyleCondition(style)
    with nx.no_grad():
        uncond = denoise(z, n, ABSENT, weights).data
        if style.absent:
            return uncond
        cond = denoise(z, n, style, weights).data
    return guided_mix(cond, uncond, w)


def sample(shape, sched, style, weights, w, rng):
    """Ancestral DDPM from z_N ~ N(0, I) down to z0_hat.

    Draw order: z_N first, then one standard-normal draw per step n > 1.
    """
    if w < 0:
        raise ContractError(f"sample: guidance scale must be >= 0, got {w}")
    if not isinstance(style, StyleCondition):
        style = StyleCondition(style)
    if not style.absent:
        style = StyleCondition(nx.Tensor(nx.as_tensor(style.style).data))
    z = rng.normal(shape)
    for n in range(sched.n_steps, 0, -1):
        eps_hat = cfg_estimate(z, n, style, weights, w)
        beta = float(sched.betas[n - 1])
        ab = sched.alpha_bar(n)
        mean = (z - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(1.0 - beta)
        if n > 1:
            z = mean + np.sqrt(sched.posterior_variance(n)) * rng.normal(shape)
        else:
            z = mean
    return z
