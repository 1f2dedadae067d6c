"""Model-based iterative IK: damped least squares and selective damping.

The solver trusts whatever chain it is given, biased or not. Residuals are
reported against a separate evaluation chain (the nominal model by default),
which is how a misspecified model shows up as tracking error.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array

from .kinematics import KinematicChain, clamp_to_box, wrap_signed
from .loss import circle_dist_sq


class SingularJacobianError(np.linalg.LinAlgError):
    """``J J^T`` is singular and no damping was requested."""


@dataclass(frozen=True)
class DlsConfig:
    damping: float = 0.1
    max_iters: int = 500
    position_tolerance: float = 1e-5
    orientation_tolerance: float = 1e-5
    step_clamp: float = 0.2
    selective: bool = False

    def __post_init__(self):
        if self.damping < 0 or self.step_clamp <= 0:
            raise ValueError("damping must be >= 0 and step_clamp > 0")
        if self.position_tolerance < 0 or self.orientation_tolerance < 0:
            raise ValueError("tolerances must be non-negative")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")


@dataclass
class IKResult:
    y: np.ndarray
    converged: bool
    iterations: int
    position_error: float
    orientation_error: float
    history: list = field(default_factory=list, repr=False)


def pose_error(chain: KinematicChain, target, y) -> np.ndarray:
    """Stacked position error and signed wrapped angle error ``target - g(y)``."""
    t = np.asarray(getattr(target, "vector", target), dtype=float)
    p = chain.forward_array(y)[0]
    d = chain.pos_dim
    return np.concatenate([t[:d] - p[:d], wrap_signed(t[d:] - p[d:])])


def _clamp_max_abs(w, bound):
    m = np.max(np.abs(w))
    return w if m <= bound else w * (bound / m)


def _dls_step(jac, e, damping):
    m = jac.shape[0]
    A = jac @ jac.T + damping**2 * np.eye(m)
    try:
        if damping == 0.0 and np.linalg.matrix_rank(A) < m:
            raise np.linalg.LinAlgError("rank deficient")
        return jac.T @ np.linalg.solve(A, e)
    except np.linalg.LinAlgError:
        raise SingularJacobianError("singular Jacobian with zero damping; raise damping") from None


def _sdls_step(jac, e, pos_dim, gamma_max):
    # Buss & Kim selectively damped least squares, one end effector split
    # into a position block and an orientation block.
    U, s, Vt = np.linalg.svd(jac, full_matrices=False)
    col_norms = np.linalg.norm(jac[:pos_dim], axis=0) + np.linalg.norm(jac[pos_dim:], axis=0)
    step = np.zeros(jac.shape[1])
    tol = s[0] * 1e-10 if s.size else 0.0
    for i, sv in enumerate(s):
        if sv <= tol:
            continue
        u, v = U[:, i], Vt[i]
        n_i = np.linalg.norm(u[:pos_dim]) + np.linalg.norm(u[pos_dim:])
        m_i = np.sum(np.abs(v) * col_norms) / sv
        gamma = min(1.0, n_i / m_i) * gamma_max if m_i > 0 else gamma_max
        step += _clamp_max_abs((u @ e) / sv * v, gamma)
    return _clamp_max_abs(step, gamma_max)


def solve_ik(chain: KinematicChain, target, start, cfg: DlsConfig | None = None, eval_chain=None) -> IKResult:
    """Iterate ``y <- clamp(y + step)`` until the pose error is within tolerance.

    ``chain`` is the model the solver believes; ``eval_chain`` (default: its
    nominal version) is used for the reported residual.
    """
    cfg = cfg or DlsConfig()
    eval_chain = eval_chain if eval_chain is not None else chain.nominal()
    target = np.asarray(getattr(target, "vector", target), dtype=float)
    y = np.asarray(start, dtype=float)
    if y.shape != (chain.n_joints,):
        raise ValueError(f"start must have {chain.n_joints} joint angles, got shape {y.shape}")
    y = clamp_to_box(y, chain.box)
    d = chain.pos_dim
    history = []
    converged = False
    it = 0
    for it in range(cfg.max_iters + 1):
        pose, jac, _ = chain.pose_and_jacobian(y)
        e = np.concatenate([target[:d] - pose[:d], wrap_signed(target[d:] - pose[d:])])
        history.append(float(np.linalg.norm(e)))
        if np.linalg.norm(e[:d]) <= cfg.position_tolerance and np.max(np.abs(e[d:])) <= cfg.orientation_tolerance:
            converged = True
            break
        if it == cfg.max_iters:
            break
        if cfg.selective:
            step = _sdls_step(jac, e, d, cfg.step_clamp)
        else:
            step = _clamp_max_abs(_dls_step(jac, e, cfg.damping), cfg.step_clamp)
        y = clamp_to_box(y + step, chain.box)
    realized = eval_chain.forward_array(y)[0]
    pos_err = float(np.linalg.norm(realized[:d] - target[:d]))
    orn_err = float(np.sqrt(circle_dist_sq(realized[d:], target[d:])))
    return IKResult(y, converged, it, pos_err, orn_err, history)


class DampedLeastSquaresIK(BaseEstimator):
    """Estimator-style wrapper around :func:`solve_ik`.

    ``fit`` only validates; the method has no training phase. ``start``
    defaults to the middle of the joint box.
    """

    def __init__(self, chain=None, damping=0.1, max_iters=500, position_tolerance=1e-5,
                 orientation_tolerance=1e-5, step_clamp=0.2, selective=False, start=None):
        self.chain = chain
        self.damping = damping
        self.max_iters = max_iters
        self.position_tolerance = position_tolerance
        self.orientation_tolerance = orientation_tolerance
        self.step_clamp = step_clamp
        self.selective = selective
        self.start = start

    @property
    def config(self) -> DlsConfig:
        return DlsConfig(self.damping, self.max_iters, self.position_tolerance,
                         self.orientation_tolerance, self.step_clamp, self.selective)

    def fit(self, X=None, Y=None):
        if not isinstance(self.chain, KinematicChain):
            raise TypeError("DampedLeastSquaresIK needs a KinematicChain as `chain`")
        self.config  # validates
        self.n_features_in_ = self.chain.pose_dim
        return self

    def _default_start(self):
        return self.chain.box.midpoint if self.start is None else np.asarray(self.start, dtype=float)

    def predict_one(self, x, start=None) -> IKResult:
        start = self._default_start() if start is None else start
        return solve_ik(self.chain, x, start, self.config)

    def predict(self, X) -> np.ndarray:
        X = check_array(X, dtype=np.float64)
        return np.array([self.predict_one(x).y for x in X])
