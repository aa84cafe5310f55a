"""Latent rectified flow for controllable text generation, at desk scale.

A numpy reverse-mode autodiff engine drives a GRU sentence VAE and an MLP
velocity field; the two are trained jointly under a lexicographic
(prioritised) two-loss optimizer and sampled with an Euler ODE solver.
"""

__version__ = "0.1.0"
