"""Structured losses between joint configurations.

``fk`` compares two configurations through a (possibly biased) forward model:
squared position distance plus squared circle distance of the orientation
angles. ``radians`` applies the circle distance to the joint angles directly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kinematics import KinematicChain, wrap_signed

LOSS_KINDS = ("fk", "radians")


def circle_dist_sq(y, z) -> np.ndarray:
    """Squared geodesic distance on the torus, summed over the last axis."""
    d = np.abs(np.asarray(y, dtype=float) - np.asarray(z, dtype=float))
    d = np.mod(d, 2.0 * np.pi)
    return np.sum(np.minimum(d, 2.0 * np.pi - d) ** 2, axis=-1)


@dataclass(frozen=True, eq=False)
class LossSpec:
    kind: str = "fk"
    chain: KinematicChain | None = None
    position_weight: float = 1.0
    orientation_weight: float = 1.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if self.kind == "fk" and self.chain is None:
            raise ValueError("the fk loss needs a chain")
        if self.position_weight < 0 or self.orientation_weight < 0:
            raise ValueError("loss weights must be non-negative")


def fk_loss(spec: LossSpec, y, y_i) -> float:
    chain = spec.chain
    a, b = chain.forward(y), chain.forward(y_i)
    pos = np.sum((a.position - b.position) ** 2)
    orn = circle_dist_sq(a.orientation, b.orientation)
    return float(spec.position_weight * pos + spec.orientation_weight * orn)


def radians_loss(y, y_i) -> float:
    y, y_i = np.asarray(y, dtype=float), np.asarray(y_i, dtype=float)
    if y.shape != y_i.shape:
        raise ValueError(f"configuration lengths differ: {y.shape} vs {y_i.shape}")
    return float(circle_dist_sq(y, y_i))


class WeightedObjective:
    """``F(y) = sum_i alpha_i * loss(y, y_i)`` with its analytic gradient.

    For the fk loss the training configurations only enter through their
    poses, so those are computed once (or passed in as ``targets``).
    Negative weights are kept; the objective may be nonconvex.
    """

    def __init__(self, spec: LossSpec, alpha, ys, targets=None):
        self.spec = spec
        self.alpha = np.asarray(alpha, dtype=float)
        ys = np.atleast_2d(np.asarray(ys, dtype=float))
        if self.alpha.shape != (ys.shape[0],):
            raise ValueError(f"alpha has shape {self.alpha.shape}, expected ({ys.shape[0]},)")
        self.ys = ys
        if spec.kind == "fk":
            chain = spec.chain
            if ys.shape[1] != chain.n_joints:
                raise ValueError(f"configurations have {ys.shape[1]} joints, chain has {chain.n_joints}")
            if targets is None:
                targets = chain.forward_array(ys)
            self.pos_dim = chain.pos_dim
            self.target_pos = targets[:, : self.pos_dim]
            self.target_orn = targets[:, self.pos_dim :]

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        if self.spec.kind == "radians":
            if y.shape != (self.ys.shape[1],):
                raise ValueError(f"expected {self.ys.shape[1]} joint angles, got {y.shape}")
            d = wrap_signed(y - self.ys)
            value = float(self.alpha @ np.sum(d**2, axis=1))
            return value, 2.0 * (self.alpha @ d)

        spec = self.spec
        chain = spec.chain
        pose, jac, _ = chain.pose_and_jacobian(y)
        p, o = pose[: self.pos_dim], pose[self.pos_dim :]
        wp, wo = spec.position_weight, spec.orientation_weight

        dp = p - self.target_pos
        do = wrap_signed(o - self.target_orn)
        value = wp * (self.alpha @ np.sum(dp**2, axis=1)) + wo * (self.alpha @ np.sum(do**2, axis=1))
        grad = 2.0 * wp * (jac[: self.pos_dim].T @ (self.alpha @ dp))
        grad += 2.0 * wo * (jac[self.pos_dim :].T @ (self.alpha @ do))
        return float(value), grad


def weighted_objective(spec: LossSpec, alpha, ys, y):
    """Value and gradient of ``sum_i alpha_i * loss(y, ys[i])``."""
    return WeightedObjective(spec, alpha, ys)(y)
