"""Velocity field MLP and GRU sequence coders."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PAD, BOS, EOS = 0, 1, 2


def uniform_init(rng, fan_in, shape, name):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def zeros_param(shape, name):
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


class Module:
    """Anything with named parameter Tensors."""

    def params(self):
        raise NotImplementedError

    def param_list(self):
        return list(self.params().values())

    def num_params(self):
        return sum(p.size for p in self.param_list())


class TimeEmbedding:
    """Sinusoidal embedding of t in [0, 1].

    ``t`` is multiplied by ``time_scale`` before the usual transformer
    frequencies are applied, otherwise most channels are flat on [0, 1].
    """

    def __init__(self, dim=32, base=10000.0, time_scale=100.0):
        if dim % 2:
            raise ValueError(f"time embedding dim must be even, got {dim}")
        self.dim = dim
        self.base = base
        self.time_scale = time_scale
        half = dim // 2
        self.freqs = base ** (-np.arange(half) / half)

    def __call__(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        ang = (t * self.time_scale)[:, None] * self.freqs[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class VelocityField(Module):
    """MLP ``v(z, t)`` on ``[z, embed(t)]`` with a zero-initialised last layer."""

    def __init__(self, latent_dim, hidden_dims=(256, 256), time_embed_dim=32,
                 activation="tanh", rng=None, time_scale=100.0):
        rng = np.random.default_rng(0) if rng is None else rng
        if activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {activation!r}")
        self.latent_dim = latent_dim
        self.hidden_dims = tuple(hidden_dims)
        self.activation = activation
        self.embed = TimeEmbedding(time_embed_dim, time_scale=time_scale)
        sizes = [latent_dim + time_embed_dim, *self.hidden_dims]
        self.weights, self.biases = [], []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.weights.append(uniform_init(rng, n_in, (n_in, n_out), f"vel.w{i}"))
            self.biases.append(uniform_init(rng, n_in, (n_out,), f"vel.b{i}"))
        k = len(self.hidden_dims)
        self.weights.append(zeros_param((sizes[-1], latent_dim), f"vel.w{k}"))
        self.biases.append(zeros_param((latent_dim,), f"vel.b{k}"))

    @property
    def input_dim(self):
        return self.latent_dim + self.embed.dim

    def params(self):
        out = {}
        for w, b in zip(self.weights, self.biases):
            out[w.name] = w
            out[b.name] = b
        return out

    def __call__(self, z, t):
        return velocity(self, z, t)


def velocity(field, z, t):
    """Evaluate the field on a ``[batch, d]`` state at time(s) ``t``.

    ``t`` is a float or one value per row; all values must lie in [0, 1].
    """
    z = z if isinstance(z, Tensor) else Tensor(z)
    if z.data.ndim != 2 or z.shape[1] != field.latent_dim:
        raise ad.ShapeError(f"velocity: expected [batch, {field.latent_dim}], got {z.shape}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0) or not np.isfinite(t).all():
        raise ValueError(f"velocity: t must lie in [0, 1], got {t}")
    if t.ndim == 0:
        t = np.full(z.shape[0], float(t))
    elif t.shape != (z.shape[0],):
        raise ad.ShapeError(f"velocity: t has shape {t.shape} for batch {z.shape[0]}")
    h = ad.concat([z, Tensor(field.embed(t))], axis=1)
    act = ad.tanh if field.activation == "tanh" else ad.relu
    last = len(field.weights) - 1
    for i, (w, b) in enumerate(zip(field.weights, field.biases)):
        h = ad.add_bias(ad.matmul(h, w), b)
        if i < last:
            h = act(h)
    return h


class GRUCell(Module):
    def __init__(self, input_dim, hidden_dim, rng, prefix):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        H = hidden_dim
        self.w = uniform_init(rng, H, (input_dim, 3 * H), f"{prefix}.w")
        self.u = uniform_init(rng, H, (H, 3 * H), f"{prefix}.u")
        self.b = uniform_init(rng, H, (3 * H,), f"{prefix}.b")

    def params(self):
        return {p.name: p for p in (self.w, self.u, self.b)}

    def project(self, x):
        """Input half of the gate pre-activations."""
        return ad.add_bias(ad.matmul(x, self.w), self.b)

    def step(self, xw, h):
        H = self.hidden_dim
        hu = ad.matmul(h, self.u)
        r = ad.sigmoid(ad.add(xw[:, :H], hu[:, :H]))
        zg = ad.sigmoid(ad.add(xw[:, H:2 * H], hu[:, H:2 * H]))
        n = ad.tanh(ad.add(xw[:, 2 * H:], ad.mul(r, hu[:, 2 * H:])))
        # (1 - z) * n + z * h
        return ad.add(n, ad.mul(zg, ad.sub(h, n)))


def _check_tokens(seqs, vocab_size, max_len):
    for s in seqs:
        if len(s) == 0:
            raise ValueError("empty token sequence")
        if len(s) > max_len:
            raise ValueError(f"sequence of length {len(s)} exceeds max length {max_len}")
        if min(s) < 0 or max(s) >= vocab_size:
            raise ValueError(f"token id out of vocabulary [0, {vocab_size}): {list(s)}")


def pad_batch(seqs, pad=PAD):
    T = max(len(s) for s in seqs)
    ids = np.full((len(seqs), T), pad, dtype=np.int64)
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
    return ids, lengths


class RecurrentCoder(Module):
    """Single-layer GRU; ``kind`` selects the encoder or decoder heads.

    The encoder maps tokens to ``(mu, log_var)``.  The decoder starts from
    ``tanh(z W + b)`` and sees ``[embed(prev token), z]`` at every step.
    """

    def __init__(self, kind, vocab_size, latent_dim, embed_dim=32, hidden_dim=64,
                 max_len=64, rng=None, dropout=0.0, word_dropout=0.0):
        if kind not in ("encoder", "decoder"):
            raise ValueError(f"unknown coder kind {kind!r}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.kind = kind
        self.vocab_size = vocab_size
        self.latent_dim = latent_dim
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.max_len = max_len
        self.dropout = dropout
        self.word_dropout = word_dropout
        p = "enc" if kind == "encoder" else "dec"
        self.embedding = Tensor(rng.normal(0, 0.1, (vocab_size, embed_dim)),
                                requires_grad=True, name=f"{p}.embed")
        in_dim = embed_dim + (latent_dim if kind == "decoder" else 0)
        self.cell = GRUCell(in_dim, hidden_dim, rng, f"{p}.gru")
        if kind == "encoder":
            self.w_mu = uniform_init(rng, hidden_dim, (hidden_dim, latent_dim), "enc.w_mu")
            self.b_mu = zeros_param((latent_dim,), "enc.b_mu")
            self.w_lv = uniform_init(rng, hidden_dim, (hidden_dim, latent_dim), "enc.w_lv")
            self.b_lv = zeros_param((latent_dim,), "enc.b_lv")
        else:
            self.w_init = uniform_init(rng, latent_dim, (latent_dim, hidden_dim), "dec.w_init")
            self.b_init = zeros_param((hidden_dim,), "dec.b_init")
            self.w_out = uniform_init(rng, hidden_dim, (hidden_dim, vocab_size), "dec.w_out")
            self.b_out = zeros_param((vocab_size,), "dec.b_out")

    def params(self):
        out = {self.embedding.name: self.embedding}
        out.update(self.cell.params())
        extra = ((self.w_mu, self.b_mu, self.w_lv, self.b_lv) if self.kind == "encoder"
                 else (self.w_init, self.b_init, self.w_out, self.b_out))
        out.update({p.name: p for p in extra})
        return out

    def _dropout(self, x, rng):
        if rng is None or self.dropout <= 0.0:
            return x
        keep = (rng.random(x.shape) >= self.dropout) / (1.0 - self.dropout)
        return ad.mul(x, Tensor(keep))

    # encoder ---------------------------------------------------------

    def encode_batch(self, seqs, rng=None):
        """``(mu, log_var)`` as ``[B, d]`` Tensors for a list of token lists."""
        assert self.kind == "encoder"
        _check_tokens(seqs, self.vocab_size, self.max_len)
        ids, lengths = pad_batch(seqs)
        B, T = ids.shape
        H = self.hidden_dim
        h = Tensor(np.zeros((B, H)))
        for t in range(T):
            emb = self._dropout(ad.embed_lookup(self.embedding, ids[:, t]), rng)
            h_new = self.cell.step(self.cell.project(emb), h)
            live = lengths > t
            if live.all():
                h = h_new
            else:
                m = Tensor(np.repeat(live[:, None].astype(np.float64), H, axis=1))
                h = ad.add(h, ad.mul(m, ad.sub(h_new, h)))
        mu = ad.add_bias(ad.matmul(h, self.w_mu), self.b_mu)
        log_var = ad.clip(ad.add_bias(ad.matmul(h, self.w_lv), self.b_lv), -8.0, 8.0)
        return mu, log_var

    # decoder ---------------------------------------------------------

    def _init_hidden(self, z):
        return ad.tanh(ad.add_bias(ad.matmul(z, self.w_init), self.b_init))

    def teacher_forced_logits(self, z, seqs, rng=None):
        """Logits ``[(T+1) * B, V]`` (time-major) plus targets and weights.

        Inputs are ``BOS x_1..x_T``; targets ``x_1..x_T EOS``.  Padding
        positions get weight 0.
        """
        assert self.kind == "decoder"
        _check_tokens(seqs, self.vocab_size, self.max_len)
        B = len(seqs)
        ids, lengths = pad_batch([[BOS, *s] for s in seqs])
        tgt, _ = pad_batch([[*s, EOS] for s in seqs])
        T = ids.shape[1]
        if rng is not None and self.word_dropout > 0.0:
            # blank out previous-token inputs so the decoder has to lean on z
            drop = rng.random(ids.shape) < self.word_dropout
            drop[:, 0] = False
            ids = np.where(drop, PAD, ids)
        h = self._init_hidden(z)
        hs = []
        for t in range(T):
            emb = self._dropout(ad.embed_lookup(self.embedding, ids[:, t]), rng)
            h = self.cell.step(self.cell.project(ad.concat([emb, z], axis=1)), h)
            hs.append(h)
        logits = ad.add_bias(ad.matmul(ad.concat(hs, axis=0), self.w_out), self.b_out)
        weights = (np.arange(T)[:, None] < lengths[None, :]).astype(np.float64).reshape(-1)
        return logits, tgt.T.reshape(-1), weights

    def greedy(self, z, max_len=None):
        """Greedy decode each row of ``z[B, d]``; stops at EOS or ``max_len``."""
        assert self.kind == "decoder"
        max_len = self.max_len if max_len is None else max_len
        z = z if isinstance(z, Tensor) else Tensor(np.atleast_2d(z))
        B = z.shape[0]
        H = self.hidden_dim
        h = self._init_hidden(z).data
        W, U, b = self.cell.w.data, self.cell.u.data, self.cell.b.data
        E = self.embedding.data
        zd = z.data
        prev = np.full(B, BOS)
        out = [[] for _ in range(B)]
        done = np.zeros(B, dtype=bool)
        for _ in range(max_len + 1):
            xw = np.concatenate([E[prev], zd], axis=1) @ W + b
            hu = h @ U
            r = 0.5 * (np.tanh(0.5 * (xw[:, :H] + hu[:, :H])) + 1.0)
            zg = 0.5 * (np.tanh(0.5 * (xw[:, H:2 * H] + hu[:, H:2 * H])) + 1.0)
            n = np.tanh(xw[:, 2 * H:] + r * hu[:, 2 * H:])
            h = n + zg * (h - n)
            tok = np.argmax(h @ self.w_out.data + self.b_out.data, axis=1)
            for i in np.flatnonzero(~done):
                if tok[i] == EOS or len(out[i]) >= max_len:
                    done[i] = True
                else:
                    out[i].append(int(tok[i]))
            if done.all():
                break
            prev = tok
        return out


def encode_seq(coder, tokens):
    """``(mu[d], log_var[d])`` for one sequence."""
    if len(tokens) == 0:
        raise ValueError("encode_seq: empty sequence")
    mu, lv = coder.encode_batch([list(tokens)])
    return mu[0], lv[0]


def decode_seq(coder, z, mode="greedy", tokens=None):
    """Greedy token ids, or teacher-forced logits ``[len(tokens), V]``.

    Teacher forcing returns one row per target token (the trailing EOS
    prediction is dropped so rows align with ``tokens``).
    """
    z = z if isinstance(z, Tensor) else Tensor(z)
    z2 = ad.reshape(z, (1, -1)) if z.data.ndim == 1 else z
    if z2.shape[1] != coder.latent_dim:
        raise ad.ShapeError(f"decode_seq: z has shape {z.shape}, latent dim {coder.latent_dim}")
    if mode == "greedy":
        return coder.greedy(z2)[0]
    if mode == "teacher_forced":
        if tokens is None:
            raise ValueError("decode_seq: teacher_forced mode needs tokens")
        logits, _, _ = coder.teacher_forced_logits(z2, [list(tokens)])
        return logits[:len(tokens)]
    raise ValueError(f"unknown decode mode {mode!r}")
