"""Sentence VAE: GRU encoder/decoder with a standard normal prior."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nets import Module, RecurrentCoder


class SeqVae(Module):
    def __init__(self, vocab_size, latent_dim=16, embed_dim=32, hidden_dim=64,
                 max_len=64, dropout=0.0, kl_warmup_steps=2000, rng=None, word_dropout=0.0,
                 kl_max=1.0):
        rng = np.random.default_rng(0) if rng is None else rng
        self.latent_dim = latent_dim
        self.kl_warmup_steps = kl_warmup_steps
        self.kl_max = float(kl_max)
        self.encoder = RecurrentCoder("encoder", vocab_size, latent_dim, embed_dim,
                                      hidden_dim, max_len, rng, dropout)
        self.decoder = RecurrentCoder("decoder", vocab_size, latent_dim, embed_dim,
                                      hidden_dim, max_len, rng, dropout, word_dropout)

    def params(self):
        out = dict(self.encoder.params())
        out.update(self.decoder.params())
        return out

    def encoder_params(self):
        return self.encoder.params()

    def kl_weight(self, step):
        """Linear ramp 0 -> kl_max over kl_warmup_steps."""
        if self.kl_warmup_steps <= 0:
            return self.kl_max
        return self.kl_max * min(1.0, step / self.kl_warmup_steps)

    def encode_mean(self, seqs):
        mu, _ = self.encoder.encode_batch(seqs)
        return mu


def reparam_sample(mu, log_var, rng):
    """``mu + exp(log_var / 2) * eps`` with ``eps ~ N(0, I)``."""
    eps = Tensor(rng.standard_normal(mu.shape))
    return ad.add(mu, ad.mul(ad.exp(ad.scale(log_var, 0.5)), eps))


def kl_divergence(mu, log_var):
    """Closed-form KL(N(mu, diag exp(log_var)) || N(0, I)), averaged over rows."""
    B = mu.shape[0] if mu.data.ndim == 2 else 1
    inner = ad.sub(ad.add(ad.exp(log_var), ad.mul(mu, mu)), ad.add(log_var, 1.0))
    return ad.scale(ad.sum_(inner), 0.5 / B)


def recon_nll(model, z, seqs, rng=None):
    """Mean per-token NLL under teacher forcing (EOS counts as a token)."""
    logits, targets, weights = model.decoder.teacher_forced_logits(z, seqs, rng)
    return ad.scale(ad.cross_entropy(logits, targets, weights), 1.0 / weights.sum())


def vae_loss(model, batch, rng, kl_weight=1.0, dropout_rng=None):
    """Returns ``(loss, recon, kl)``; loss is a Tensor, the others floats."""
    if len(batch) == 0:
        raise ValueError("vae_loss: empty batch")
    if not 0.0 <= kl_weight <= 1.0:
        raise ValueError(f"vae_loss: kl_weight must be in [0, 1], got {kl_weight}")
    mu, log_var = model.encoder.encode_batch(batch, dropout_rng)
    z = reparam_sample(mu, log_var, rng)
    recon = recon_nll(model, z, batch, dropout_rng)
    kl = kl_divergence(mu, log_var)
    if kl_weight == 0.0:
        loss = recon
    else:
        loss = ad.add(recon, ad.scale(kl, kl_weight))
    return loss, recon.item(), kl.item()
