"""Rectified-flow objective and Euler transport in latent space."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nets import velocity


class TransportError(FloatingPointError):
    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite state at Euler step {step}")


class FlowModel:
    def __init__(self, field, latent_dim=None, default_steps=10):
        latent_dim = field.latent_dim if latent_dim is None else latent_dim
        if field.latent_dim != latent_dim:
            raise ValueError(f"field latent dim {field.latent_dim} != {latent_dim}")
        if default_steps < 1:
            raise ValueError("default_steps must be >= 1")
        self.field = field
        self.latent_dim = latent_dim
        self.default_steps = default_steps

    def params(self):
        return self.field.params()

    def velocity(self, z, t):
        # the field may be any callable(z, t) -> Tensor; VelocityField is the usual one
        if hasattr(self.field, "weights"):
            return velocity(self.field, z, t)
        return self.field(z, t)


@dataclass
class Trajectory:
    """Euler states; ``times[k]`` is the fraction k/N of the path covered.

    For ``direction == "backward"`` the ODE time at state k is ``1 - times[k]``.
    """

    states: np.ndarray
    times: np.ndarray
    direction: str = "forward"

    @property
    def endpoint(self):
        return self.states[-1]


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def flow_loss(model, z0, z1, rng=None, t=None):
    """Mean over the batch of ``||v(z_t, t) - (z1 - z0)||^2``.

    One ``t ~ U[0, 1]`` per row unless ``t`` is given.  Gradients reach
    ``z0``/``z1`` if they are attached to the tape; detach them to train the
    field alone.
    """
    z0, z1 = _as_tensor(z0), _as_tensor(z1)
    if z0.shape != z1.shape or z0.data.ndim != 2:
        raise ad.ShapeError(f"flow_loss: z0 {z0.shape} and z1 {z1.shape} must match as [batch, d]")
    B, d = z0.shape
    if t is None:
        t = rng.uniform(0.0, 1.0, size=B)
    t = np.asarray(t, dtype=np.float64)
    tt = Tensor(np.repeat(t[:, None], d, axis=1))
    zt = ad.add(ad.mul(tt, z1), ad.mul(Tensor(1.0 - tt.data), z0))
    resid = ad.sub(model.velocity(zt, t), ad.sub(z1, z0))
    return ad.scale(ad.sum_sq(resid), 1.0 / B)


def transport(model, z_start, direction="forward", steps=None):
    """Euler-integrate the flow from ``z_start`` (``[batch, d]``).

    Forward: ``z <- z + v(z, k/N) / N`` for k = 0..N-1.
    Backward: ``z <- z - v(z, k/N) / N`` for k = N..1.
    """
    steps = model.default_steps if steps is None else steps
    if steps < 1:
        raise ValueError(f"transport: steps must be >= 1, got {steps}")
    if direction not in ("forward", "backward"):
        raise ValueError(f"unknown direction {direction!r}")
    z = np.array(z_start.data if isinstance(z_start, Tensor) else z_start, dtype=np.float64)
    states = np.empty((steps + 1, *z.shape))
    states[0] = z
    dt = 1.0 / steps
    for k in range(steps):
        if direction == "forward":
            t, sign = k / steps, 1.0
        else:
            t, sign = (steps - k) / steps, -1.0
        try:
            v = model.velocity(Tensor._wrap(z, "transport"), t).data
        except ad.NonFiniteError as e:
            raise TransportError(k) from e
        z = z + sign * dt * v
        if not np.isfinite(z).all():
            raise TransportError(k + 1)
        states[k + 1] = z
    return Trajectory(states, np.arange(steps + 1) / steps, direction)


def straightness(model, z0, steps_fine=100):
    """Mean of ``||v(z_t, t) - (z_1 - z_0)||^2`` along the simulated path."""
    traj = transport(model, z0, "forward", steps_fine)
    disp = traj.states[-1] - traj.states[0]
    total = 0.0
    for k in range(steps_fine):
        v = model.velocity(Tensor(traj.states[k]), k / steps_fine).data
        total += np.mean(np.sum((v - disp) ** 2, axis=-1))
    return total / steps_fine


def analytic_gauss_velocity(mu1, sigma1, z, t):
    """Exact ``E[z1 - z0 | z_t = z]`` for ``z0 ~ N(0, I)``, ``z1 ~ N(mu1, sigma1^2 I)``.

    ``z`` may be ``[d]`` or ``[batch, d]``; ``t`` a float or one per row.
    """
    mu1 = np.asarray(mu1, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if sigma1 < 0:
        raise ValueError("sigma1 must be non-negative")
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if sigma1 == 0 and np.any(t == 1):
        raise ValueError("degenerate: t = 1 with sigma1 = 0")
    if z.ndim == 2 and t.ndim == 1:
        t = t[:, None]
    a = t * sigma1 ** 2
    b = 1.0 - t
    s = t * t * sigma1 ** 2 + (1.0 - t) ** 2
    centred = z - t * mu1
    e1 = mu1 + (a / s) * centred
    e0 = (b / s) * centred
    return e1 - e0
