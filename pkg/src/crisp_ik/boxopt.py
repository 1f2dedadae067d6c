"""Box-constrained limited-memory quasi-Newton minimization.

Thin contract over SciPy's L-BFGS-B: inputs are validated, the start is
projected into the box, the accepted-iterate history is recorded and the
termination reason is normalized.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize as _scipy_minimize

from .kinematics import JointBox, clamp_to_box

logger = logging.getLogger(__name__)

TERMINATIONS = ("gradient", "objective", "max_iters")


class NonFiniteObjectiveError(FloatingPointError):
    """The objective is not finite at the starting point."""


@dataclass(frozen=True)
class OptimizerConfig:
    max_iters: int = 200
    gradient_tolerance: float = 1e-8
    objective_tolerance: float = 1e-12
    memory: int = 10

    def __post_init__(self):
        for name in ("max_iters", "gradient_tolerance", "objective_tolerance", "memory"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class OptResult:
    minimizer: np.ndarray
    value: float
    iterations: int
    converged: bool
    termination: str
    message: str = ""
    start_clamped: bool = False
    history: list = field(default_factory=list, repr=False)


def _termination(message: str, nit: int, cfg: OptimizerConfig):
    m = message.upper()
    if "PROJECTED_GRADIENT" in m or "PROJECTED GRADIENT" in m:
        return "gradient", True
    if "REL_REDUCTION" in m or "REL REDUCTION" in m:
        return "objective", True
    if nit >= cfg.max_iters or "LIMIT" in m:
        return "max_iters", False
    # Line-search failures happen at numerically flat minima.
    return "objective", False


def minimize(objective, box: JointBox, start, cfg: OptimizerConfig | None = None) -> OptResult:
    """Minimize ``objective(y) -> (value, gradient)`` over ``box`` from ``start``."""
    cfg = cfg or OptimizerConfig()
    start = np.asarray(start, dtype=float)
    if start.shape != (box.n_joints,):
        raise ValueError(f"start has shape {start.shape}, expected ({box.n_joints},)")
    x0 = clamp_to_box(start, box)
    clamped = not np.array_equal(x0, start)
    if clamped:
        logger.debug("start outside the box; clamped")

    f0, g0 = objective(x0)
    if not np.isfinite(f0) or not np.all(np.isfinite(g0)):
        raise NonFiniteObjectiveError(f"objective is not finite at the start point {x0}")

    history = [float(f0)]
    best = {"x": x0.copy(), "f": float(f0), "bad": 0}

    def guarded(y):
        f, g = objective(y)
        if not np.isfinite(f) or not np.all(np.isfinite(g)):
            # Report the trial point as infinitely bad so the line search backs off.
            best["bad"] += 1
            return np.inf, np.zeros_like(y)
        if f < best["f"]:
            best["x"], best["f"] = np.array(y, dtype=float), float(f)
        return f, g

    def record(intermediate_result):
        history.append(float(intermediate_result.fun))

    res = _scipy_minimize(
        guarded,
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=box.bounds(),
        callback=record,
        options={
            "maxiter": cfg.max_iters,
            "maxcor": cfg.memory,
            "gtol": cfg.gradient_tolerance,
            "ftol": cfg.objective_tolerance,
            "maxfun": 20 * cfg.max_iters,
        },
    )
    x = clamp_to_box(res.x, box)
    value = float(res.fun)
    if not np.array_equal(x, res.x):
        value = float(objective(x)[0])
    if not np.isfinite(value) or value > best["f"]:
        # Never hand back something worse than the best feasible point seen.
        x, value = clamp_to_box(best["x"], box), best["f"]
    message = res.message if isinstance(res.message, str) else res.message.decode()
    termination, converged = _termination(message, res.nit, cfg)
    if best["bad"]:
        logger.debug("objective was non-finite at %d trial points", best["bad"])
        message = f"{message}; non-finite objective at {best['bad']} trial points"
        termination, converged = "max_iters", False
    return OptResult(x, value, int(res.nit), converged, termination, message, clamped, history)
