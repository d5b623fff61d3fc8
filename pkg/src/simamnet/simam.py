"""SimAM: parameter-free attention from a closed-form per-neuron energy.

For each sample and channel with M = H*W spatial positions::

    d_t = (t - mean)^2
    v   = sum(d_t) / (M - 1)
    e_t = d_t / (4 (v + lambda)) + 0.5
    out = t * sigmoid(e_t)

Neurons that stand out from their channel's spatial mean get larger weights.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import _kernels as _k
from .tensor import Tensor, TensorError, add, make_op

__all__ = ["Placement", "SimAMConfig", "simam_forward", "simam_weights", "apply_placement"]


class Placement(str, enum.Enum):
    PER_BLOCK_ADDITIVE = "per_block_additive"   # F + x + simam(x)
    PER_BLOCK_RESIDUAL = "per_block_residual"   # simam(F) + x
    AFTER_STAGE2 = "after_stage2"               # once, on the first residual stage output
    NONE = "none"


@dataclass(frozen=True)
class SimAMConfig:
    lam: float = 1e-4
    placement: Placement = Placement.PER_BLOCK_ADDITIVE

    def __post_init__(self):
        object.__setattr__(self, "placement", Placement(self.placement))
        if not self.lam > 0:
            raise ValueError(f"SimAM lambda must be > 0, got {self.lam}")


def _check_input(x: np.ndarray) -> None:
    if x.ndim != 4:
        raise TensorError(f"simam expects [N,C,H,W], got {list(x.shape)}")
    if x.shape[2] * x.shape[3] < 2:
        raise TensorError(f"simam needs H*W >= 2, got {x.shape[2]}x{x.shape[3]}")


def _weights(x: np.ndarray, lam: float):
    e, mean, denom = _k.simam_energy(x, lam)
    # sigmoid(e) = (1 + tanh(e / 2)) / 2, computed in place
    e *= 0.5
    np.tanh(e, out=e)
    e += 1.0
    e *= 0.5
    return e, mean, denom


def simam_weights(x: np.ndarray, lam: float = 1e-4) -> np.ndarray:
    """Attention weights sigmoid(e_t) for an [N, C, H, W] array."""
    _check_input(x)
    return _weights(x, lam)[0]


def simam_forward(x: Tensor, cfg: SimAMConfig | None = None, lam: float | None = None) -> Tensor:
    """Apply SimAM to ``x``; ``lam`` overrides the config's regularizer."""
    if lam is None:
        lam = (cfg or SimAMConfig()).lam
    xd = x.data
    _check_input(xd)
    s, mean, denom = _weights(xd, lam)
    out = xd * s

    def bw(g):
        return (_k.simam_bwd(xd, g, s, mean, denom),)

    return make_op("simam", out, (x,), bw)


def apply_placement(block_out: Tensor, shortcut: Tensor, cfg: SimAMConfig) -> Tensor:
    """Combine the residual branch with the shortcut per the placement mode.

    ``after_stage2`` and ``none`` both give the plain sum here; the stage-level
    attention for ``after_stage2`` is applied by the network forward.
    """
    if block_out.shape != shortcut.shape:
        raise TensorError(
            f"residual shapes differ: {list(block_out.shape)} vs {list(shortcut.shape)}")
    mode = cfg.placement
    if mode is Placement.PER_BLOCK_ADDITIVE:
        return add(add(block_out, shortcut), simam_forward(shortcut, cfg))
    if mode is Placement.PER_BLOCK_RESIDUAL:
        return add(simam_forward(block_out, cfg), shortcut)
    return add(block_out, shortcut)
