"""Training and sampling stages for the three desk-scale tasks.

``gauss2d``         pi_0 = N(0, I), pi_1 = N(mu1, sigma1^2 I); no VAE.
``length_control``  pi_0 = prior, pi_1 = latents of sentences of the target length.
``style_transfer``  pi_0 / pi_1 = latents of source / target style sentences.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import config as config_mod
from .autodiff import Tensor
from .checkpoint import Checkpoint, CheckpointError
from .corpus import generate_corpus
from .flow import FlowModel, flow_loss, transport
from .lexico import LexicoState, joint_step
from .nets import VelocityField
from .optim import Adam
from .vae import SeqVae, vae_loss

log = logging.getLogger(__name__)

METRICS_HEADER = ("step", "l_vae", "l_flow", "lambda", "wall_ms")


class TrainingDiverged(RuntimeError):
    def __init__(self, step, value):
        self.step = step
        super().__init__(f"training diverged at step {step} (loss {value:g})")


@dataclass
class TaskSpec:
    """Binds a config to its source/target domains."""

    config: dict

    @property
    def task(self):
        return self.config["task"]

    @property
    def uses_vae(self):
        return self.task != "gauss2d"

    @classmethod
    def from_config(cls, cfg):
        config_mod.validate(cfg)
        return cls(dict(cfg))

    def seeds(self):
        """Independent streams: corpus, init, training, sampling."""
        return np.random.SeedSequence(int(self.config["seed"])).spawn(4)

    def corpus(self):
        if not self.uses_vae:
            return None
        ss = self.seeds()[0]
        return generate_corpus(self.task, int(self.config["corpus_size"]),
                               np.random.default_rng(ss))

    def domains(self, corpus):
        """Train-split token lists for (vae, source, target); source is None for the prior."""
        cfg = self.config
        train, labels = corpus.split("train")
        if self.task == "length_control":
            target = [s for s, lab in zip(train, labels) if lab == cfg["target_length"]]
            return train, None, target
        source = [s for s, lab in zip(train, labels) if lab == cfg["source_style"]]
        target = [s for s, lab in zip(train, labels) if lab == cfg["target_style"]]
        return train, source, target


def build_models(spec, vocab_size=None):
    cfg = spec.config
    rng = np.random.default_rng(spec.seeds()[1])
    vae = None
    if spec.uses_vae:
        vae = SeqVae(vocab_size, cfg["latent_dim"], cfg["embed_dim"], cfg["rnn_hidden"],
                     cfg["max_len"], cfg["dropout"], cfg["kl_warmup_steps"], rng,
                     word_dropout=cfg["word_dropout"], kl_max=cfg["kl_max"])
    field_ = VelocityField(cfg["latent_dim"], config_mod.hidden_dims(cfg), cfg["time_embed_dim"],
                           cfg["activation"], rng, time_scale=cfg["time_scale"])
    return vae, FlowModel(field_, cfg["latent_dim"], cfg["steps"])


def _named_params(vae, flow):
    out = dict(vae.params()) if vae is not None else {}
    out.update(flow.params())
    return out


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    rows: list = field(default_factory=list)

    def metrics_csv(self, include_wall=True):
        return metrics_to_csv(self.rows, include_wall)


def metrics_to_csv(rows, include_wall=True):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = METRICS_HEADER if include_wall else METRICS_HEADER[:-1]
    w.writerow(header)
    for r in rows:
        w.writerow(r if include_wall else r[:-1])
    return buf.getvalue()


def _fmt(x):
    return "nan" if x is None else repr(float(x))


class Trainer:
    """Holds models, optimizer, lexico state and RNG for one training run."""

    def __init__(self, spec, checkpoint=None):
        self.spec = spec
        cfg = spec.config
        self.corpus = spec.corpus()
        vocab_size = self.corpus.vocab_size if self.corpus is not None else None
        self.vae, self.flow = build_models(spec, vocab_size)
        self.named = _named_params(self.vae, self.flow)
        self.params = list(self.named.values())
        self.optimizer = Adam(self.params, lr=cfg["lr"])
        if cfg["constraint"] == "running_min":
            c_mode, c = "running_min", float(cfg["constraint_init"])
        else:
            c_mode, c = "fixed", float(cfg["constraint"])
        self.state = LexicoState.from_mode_string(cfg["mode"], lr=cfg["lr"], c=c, c_mode=c_mode)
        self.rng = np.random.default_rng(spec.seeds()[2])
        if self.corpus is not None:
            self.vae_pool, self.source_pool, self.target_pool = spec.domains(self.corpus)
            if not self.target_pool or (self.source_pool is not None and not self.source_pool):
                raise ValueError("empty source or target domain in the training split")
        if checkpoint is not None:
            self._restore(checkpoint)

    # ------------------------------------------------------------ state

    def checkpoint(self):
        arrays = {name: p.data for name, p in self.named.items()}
        arrays.update(self.optimizer.state_arrays())
        state = {
            "config": self.spec.config,
            "step": self.state.step,
            "adam_t": self.optimizer.t,
            "lexico": self.state.to_dict(),
            "rng": self.rng.bit_generator.state,
            "corpus_hash": self.corpus.content_hash() if self.corpus is not None else None,
            "vocab": self.corpus.vocab if self.corpus is not None else None,
        }
        return Checkpoint({k: np.array(v) for k, v in arrays.items()}, state)

    def _restore(self, ckpt):
        st = ckpt.state
        if self.corpus is not None and st.get("corpus_hash") != self.corpus.content_hash():
            raise CheckpointError("checkpoint corpus hash does not match the regenerated corpus")
        load_params(self.named, ckpt.arrays)
        self.optimizer.load_state_arrays(ckpt.arrays, st["adam_t"])
        self.state = LexicoState.from_dict(st["lexico"])
        self.rng.bit_generator.state = st["rng"]

    # ------------------------------------------------------------ steps

    def _phase(self):
        """``joint``, or ``vae``/``flow`` for the two halves of separate training."""
        if self.state.mode != "separate" or self.vae is None:
            return "joint"
        return "vae" if self.state.step < self.spec.config["iterations"] else "flow"

    def total_iterations(self):
        n = int(self.spec.config["iterations"])
        return 2 * n if self.state.mode == "separate" and self.vae is not None else n

    def _pick(self, pool, n):
        idx = self.rng.integers(len(pool), size=n)
        return [pool[i] for i in idx]

    def _loss_fns(self):
        cfg = self.spec.config
        B = cfg["batch_size"]
        d = cfg["latent_dim"]
        rng = self.rng
        phase = self._phase()
        flow = self.flow
        if self.vae is None:
            mu1 = np.asarray(config_mod.gauss_mu1(cfg))
            z0 = rng.standard_normal((B, d))
            z1 = mu1 + cfg["gauss_sigma1"] * rng.standard_normal((B, d))
            return None, lambda: flow_loss(flow, Tensor(z0), Tensor(z1), rng)

        vae = self.vae
        detach = self.state.mode == "separate"
        vae_fn = flow_fn = None
        if phase in ("joint", "vae"):
            batch = self._pick(self.vae_pool, B)
            kw = vae.kl_weight(self.state.step)

            def vae_fn():
                return vae_loss(vae, batch, rng, kw, dropout_rng=rng)[0]

        if phase in ("joint", "flow"):
            x1 = self._pick(self.target_pool, B)
            x0 = self._pick(self.source_pool, B) if self.source_pool is not None else None
            prior = rng.standard_normal((B, d)) if x0 is None else None

            def flow_fn():
                z1 = vae.encode_mean(x1)
                z0 = Tensor(prior) if x0 is None else vae.encode_mean(x0)
                if detach:
                    z0, z1 = z0.detach(), z1.detach()
                return flow_loss(flow, z0, z1, rng)

        return vae_fn, flow_fn

    def step(self):
        vae_fn, flow_fn = self._loss_fns()
        t0 = time.perf_counter()
        step = self.state.step
        losses = joint_step(self.params, vae_fn, flow_fn, self.state, self.optimizer)
        wall = (time.perf_counter() - t0) * 1000.0
        if losses is None:
            return (step, "nan", "nan", "nan", f"{wall:.3f}")
        limit = self.spec.config["divergence_limit"]
        for v in (losses.l_vae, losses.l_flow):
            if v > limit:
                raise TrainingDiverged(step, v)
        return (step, _fmt(losses.l_vae), _fmt(losses.l_flow),
                _fmt(self.state.lambda_history[-1]), f"{wall:.3f}")

    def run(self, until=None, on_checkpoint=None, on_row=None):
        until = self.total_iterations() if until is None else until
        every = int(self.spec.config["checkpoint_every"])
        rows = []
        while self.state.step < until:
            row = self.step()
            rows.append(row)
            if on_row is not None:
                on_row(row)
            if every and on_checkpoint is not None and self.state.step % every == 0:
                on_checkpoint(self.checkpoint(), self.state.step)
        return rows


def load_params(named, arrays):
    for name, p in named.items():
        if name not in arrays:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
        if arrays[name].shape != p.data.shape:
            raise CheckpointError(f"shape mismatch for {name}: {arrays[name].shape} vs {p.data.shape}")
        p.data = np.array(arrays[name])


def train(cfg, iterations=None, resume=None, on_checkpoint=None, on_row=None):
    """Run the training stage; returns the final checkpoint and per-step rows.

    ``iterations`` overrides the total step count (useful for resuming to an
    intermediate point); ``resume`` continues from an earlier checkpoint.
    """
    spec = TaskSpec.from_config(cfg)
    trainer = Trainer(spec, resume)
    rows = trainer.run(iterations, on_checkpoint, on_row)
    return TrainResult(trainer.checkpoint(), rows)


# ---------------------------------------------------------------- sampling


@dataclass
class SampleResult:
    outputs: list
    trajectory: object
    z_start: np.ndarray
    endpoints: np.ndarray
    sources: list = field(default_factory=list)


def models_from_checkpoint(ckpt):
    """Fresh model objects holding copies of the checkpoint parameters."""
    spec = TaskSpec.from_config(ckpt.state["config"])
    vocab = ckpt.state.get("vocab")
    vae, flow = build_models(spec, len(vocab) if vocab else None)
    load_params(_named_params(vae, flow), ckpt.arrays)
    return spec, vae, flow


def _start_points(spec, vae, corpus, n, direction, rng):
    cfg = spec.config
    d = cfg["latent_dim"]
    if spec.task == "gauss2d":
        if direction == "forward":
            return rng.standard_normal((n, d)), []
        mu1 = np.asarray(config_mod.gauss_mu1(cfg))
        return mu1 + cfg["gauss_sigma1"] * rng.standard_normal((n, d)), []
    if spec.task == "length_control":
        if direction == "forward":
            return rng.standard_normal((n, d)), []
        pool, labels = corpus.split("test")
        pool = [s for s, lab in zip(pool, labels) if lab == cfg["target_length"]]
    else:
        label = cfg["source_style"] if direction == "forward" else cfg["target_style"]
        pool, _ = corpus.split("test", label=label)
    picks = [pool[i] for i in rng.integers(len(pool), size=n)]
    return vae.encode_mean(picks).data, picks


def sample(ckpt, n, steps=None, direction="forward", seed=None, no_flow=False, corpus=None):
    """Sample stage: start points -> Euler transport -> greedy decode.

    ``no_flow`` decodes the start latents directly (the ablation without the
    latent flow).  The checkpoint is never modified.
    """
    spec, vae, flow = models_from_checkpoint(ckpt)
    steps = spec.config["steps"] if steps is None else steps
    if steps < 1:
        raise ValueError(f"sample: steps must be >= 1, got {steps}")
    if n == 0:
        return SampleResult([], None, np.zeros((0, spec.config["latent_dim"])),
                            np.zeros((0, spec.config["latent_dim"])))
    seed_seq = spec.seeds()[3] if seed is None else np.random.SeedSequence(seed)
    rng = np.random.default_rng(seed_seq)
    if spec.uses_vae and corpus is None:
        corpus = spec.corpus()
    z_start, sources = _start_points(spec, vae, corpus, n, direction, rng)
    traj = None
    if no_flow:
        end = z_start
    else:
        traj = transport(flow, z_start, direction, steps)
        end = traj.endpoint
    outputs = vae.decoder.greedy(end) if vae is not None else end
    return SampleResult(outputs, traj, z_start, end, sources)

