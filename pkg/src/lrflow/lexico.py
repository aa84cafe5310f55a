"""Lexicographic joint optimisation of the VAE and flow objectives.

Each step descends ``g_vae + lambda_s * g_flow`` where ``lambda_s`` is the
smallest non-negative multiplier that makes the combined direction decrease
the flow loss at rate ``phi = l_flow - c``:

    lambda_s = max((phi - g_vae . g_flow) / ||g_flow||^2, 0)
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

log = logging.getLogger(__name__)

DEGENERATE_NORM_SQ = 1e-12
MODES = ("lexico", "fixed", "separate")


@dataclass
class JointLosses:
    l_vae: float
    l_flow: float
    g_vae: np.ndarray
    g_flow: np.ndarray

    def __post_init__(self):
        if self.g_vae.shape != self.g_flow.shape:
            raise ValueError(f"gradient lengths differ: {self.g_vae.shape} vs {self.g_flow.shape}")


@dataclass
class LexicoState:
    """Optimizer bookkeeping for the joint update.

    ``c_mode`` is ``"running_min"`` (``c <- min(c, l_flow)`` after each step)
    or ``"fixed"``.  With the default ``c = 0`` the running minimum never
    moves because flow losses are non-negative; start from ``c = inf`` to
    track the best observed loss instead.
    """

    lr: float = 1e-5
    mode: str = "lexico"
    fixed_lambda: float = 1.0
    c: float = 0.0
    c_mode: str = "running_min"
    step: int = 0
    lambda_history: list = field(default_factory=list)
    incidents: list = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.c_mode not in ("running_min", "fixed"):
            raise ValueError(f"unknown c_mode {self.c_mode!r}")
        if self.lr < 0:
            raise ValueError("step size must be non-negative")

    @classmethod
    def from_mode_string(cls, text, **kwargs):
        """Parse ``lexico``, ``separate`` or ``fixed_lambda:<value>``."""
        if text.startswith("fixed_lambda:") or text.startswith("fixed:"):
            lam = float(text.split(":", 1)[1])
            if lam < 0:
                raise ValueError("fixed lambda must be non-negative")
            return cls(mode="fixed", fixed_lambda=lam, **kwargs)
        return cls(mode=text, **kwargs)

    @property
    def mode_label(self):
        return f"fixed_lambda:{self.fixed_lambda:g}" if self.mode == "fixed" else self.mode

    def to_dict(self):
        return {
            "lr": self.lr, "mode": self.mode, "fixed_lambda": self.fixed_lambda,
            "c": self.c, "c_mode": self.c_mode, "step": self.step,
            "lambda_history": list(self.lambda_history), "incidents": list(self.incidents),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def compute_lambda(losses, c):
    """Returns ``(lambda_s, degenerate)``."""
    g_f = losses.g_flow
    nsq = float(g_f @ g_f)
    if nsq < DEGENERATE_NORM_SQ:
        return 0.0, True
    phi = losses.l_flow - c
    return max((phi - float(losses.g_vae @ g_f)) / nsq, 0.0), False


def flatten(grads):
    return np.concatenate([g.reshape(-1) for g in grads]) if grads else np.zeros(0)


def unflatten(vec, params):
    out, i = [], 0
    for p in params:
        out.append(vec[i:i + p.size].reshape(p.shape))
        i += p.size
    return out


def _loss_and_grads(loss_fn, params):
    if loss_fn is None:
        return 0.0, np.zeros(sum(p.size for p in params))
    with ad.Tape() as tape:
        loss = loss_fn()
    grads = tape.backward(loss)
    return loss.item(), flatten(ad.grads_for(params, grads))


def joint_step(params, vae_loss_fn, flow_loss_fn, state, optimizer=None):
    """One joint update over the shared ``params`` list.

    ``vae_loss_fn``/``flow_loss_fn`` build their scalar losses (each on its
    own tape); either may be ``None``.  With ``optimizer=None`` the update is
    plain ``theta - lr * (g_vae + lambda * g_flow)``; otherwise the combined
    gradient is handed to the optimizer (e.g. Adam) with ``state.lr``.

    Returns the :class:`JointLosses` of the step, or ``None`` when the step
    was skipped because something went non-finite (``lr`` is then halved).
    """
    try:
        l_vae, g_vae = _loss_and_grads(vae_loss_fn, params)
        l_flow, g_flow = _loss_and_grads(flow_loss_fn, params)
        if not (np.isfinite(g_vae).all() and np.isfinite(g_flow).all()):
            raise ad.NonFiniteError("non-finite gradient")
    except (ad.NonFiniteError, FloatingPointError) as e:
        state.incidents.append({"step": state.step, "error": str(e), "lr": state.lr})
        log.warning("step %d skipped (%s); halving lr to %g", state.step, e, state.lr / 2)
        state.lr /= 2.0
        state.step += 1
        return None
    losses = JointLosses(l_vae, l_flow, g_vae, g_flow)

    if state.mode == "lexico":
        if math.isinf(state.c):
            state.c = l_flow
        lam, _ = compute_lambda(losses, state.c)
        if state.c_mode == "running_min":
            state.c = min(state.c, l_flow)
    elif state.mode == "fixed":
        lam = state.fixed_lambda
    else:
        # separate: the two losses touch disjoint parameters, so each set
        # simply follows its own gradient
        lam = 1.0

    combined = g_vae + lam * g_flow if lam != 0.0 else g_vae
    if not math.isfinite(lam) or not np.isfinite(combined).all():
        state.incidents.append({"step": state.step, "error": "non-finite update", "lr": state.lr})
        state.lr /= 2.0
        state.step += 1
        return None
    grads = unflatten(combined, params)
    if optimizer is None:
        if state.lr != 0.0:
            for p, g in zip(params, grads):
                p.data = p.data - state.lr * g
    else:
        optimizer.step(grads, lr=state.lr)
    state.lambda_history.append(lam)
    state.step += 1
    return losses
