"""Mel-spectrogram VAE: 4x downsampling per axis into a small latent grid."""
import logging
from dataclasses import dataclass

import numpy as np

import numerics as nx
from dsp import MelSpectrogram
from errors import ContractError, DimensionError
from layers import Conv2d, ConvTranspose2d, Module

logger = logging.getLogger(__name__)

DOWNSAMPLE = 4


@dataclass(eq=False)
class CodecOutput:
    mu: nx.Tensor
    logvar: nx.Tensor

    def __post_init__(self):
        if self.mu.shape != self.logvar.shape:
            raise DimensionError(f"codec output: mu {self.mu.shape} vs logvar {self.logvar.shape}")


class CodecWeights(Module):
    def __init__(self, rng, latent_channels=4, channels=8, frames=1024, bins=64):
        if frames % DOWNSAMPLE or bins % DOWNSAMPLE:
            raise ContractError(f"codec: mel shape ({frames}, {bins}) not divisible by {DOWNSAMPLE}")
        self.latent_channels, self.channels = latent_channels, channels
        self.frames, self.bins = frames, bins
        self.scale = 1.0
        ch, c = channels, latent_channels
        self.enc_in = Conv2d(1, ch, 3, rng, padding=1)
        self.enc_down1 = Conv2d(ch, ch, 3, rng, stride=2, padding=1)
        self.enc_down2 = Conv2d(ch, 2 * ch, 3, rng, stride=2, padding=1)
        self.enc_head = Conv2d(2 * ch, 2 * c, 1, rng)
        self.dec_in = Conv2d(c, 2 * ch, 3, rng, padding=1)
        self.dec_up1 = ConvTranspose2d(2 * ch, ch, 4, rng, stride=2, padding=1)
        self.dec_up2 = ConvTranspose2d(ch, ch, 4, rng, stride=2, padding=1)
        self.dec_out = Conv2d(ch, 1, 3, rng, padding=1)

    @classmethod
    def from_config(cls, cfg, rng):
        return cls(rng, cfg.codec.latent_channels, cfg.codec.channels, cfg.codec.frames, cfg.dsp.mel_bins)

    @property
    def latent_shape(self):
        return (self.latent_channels, self.frames // DOWNSAMPLE, self.bins // DOWNSAMPLE)

    def meta(self):
        return {"scale": self.scale, "frames": self.frames, "bins": self.bins,
                "latent_channels": self.latent_channels, "channels": self.channels}


def _mel_data(mel):
    return mel.data if isinstance(mel, MelSpectrogram) else mel


def encode(mel, weights):
    x = nx.as_tensor(_mel_data(mel))
    if x.shape != (weights.frames, weights.bins):
        raise ContractError(f"encode: mel shape {x.shape}, codec expects {(weights.frames, weights.bins)}")
    h = nx.silu(weights.enc_in(x.reshape(1, *x.shape)))
    h = nx.silu(weights.enc_down1(h))
    h = nx.silu(weights.enc_down2(h))
    out = weights.enc_head(h)
    c = weights.latent_channels
    return CodecOutput(out[:c], out[c:])


def reparameterize(out, rng, eps=None):
    """z = mu + exp(logvar / 2) * eps, eps drawn from ``rng`` unless given."""
    if eps is None:
        eps = rng.normal(out.mu.shape)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != out.mu.shape:
        raise DimensionError(f"reparameterize: eps {eps.shape} vs mu {out.mu.shape}")
    return out.mu + nx.exp(out.logvar * 0.5) * eps


def decode(z, weights):
    z = nx.as_tensor(z)
    if z.shape != weights.latent_shape:
        raise ContractError(f"decode: latent shape {z.shape}, codec expects {weights.latent_shape}")
    h = nx.silu(weights.dec_in(z))
    h = nx.silu(weights.dec_up1(h))
    h = nx.silu(weights.dec_up2(h))
    return nx.softplus(weights.dec_out(h)).reshape(weights.frames, weights.bins)


def kl_term(out):
    """Mean per-element KL(N(mu, exp(logvar)) || N(0, 1))."""
    mu, logvar = out.mu, out.logvar
    return nx.mean((nx.square(mu) + nx.exp(logvar) - 1.0 - logvar) * 0.5)


def elbo_loss(mel, out, recon, beta_kl):
    return nx.mse_loss(recon, _mel_data(mel)) + kl_term(out) * beta_kl


def latent_scale(mus):
    """Reciprocal std over a set of posterior means; 1.0 when degenerate."""
    values = np.concatenate([np.ravel(m.data if isinstance(m, nx.Tensor) else m) for m in mus])
    std = float(values.std())
    return 1.0 / std if std > 1e-8 else 1.0
