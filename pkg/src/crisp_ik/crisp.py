"""Kernel-weighted structured predictor for inverse kinematics.

Training factorizes ``K + n * lam * I`` for the Gram matrix of the training
poses. Prediction computes the weights ``alpha(x)`` for a query pose and
minimizes ``sum_i alpha_i(x) * loss(y, y_i)`` over the joint box.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_consistent_length, check_is_fitted

from .boxopt import OptimizerConfig, OptResult, minimize
from .kernel import KernelSpec, cross_kernel, embed_poses, factorize, gram, weights
from .kinematics import KinematicChain, parse_chain, wrap_angle
from .loss import LossSpec, WeightedObjective, circle_dist_sq

MODEL_MAGIC = b"CRISPIK-MODEL"
MODEL_VERSION = 1


class ModelFileError(ValueError):
    """Model file is corrupted, truncated or from another format version."""


@dataclass
class Prediction:
    """Predicted configuration with optimizer diagnostics and the weights used."""

    y: np.ndarray
    result: OptResult
    alpha: np.ndarray


def realized_errors(chain: KinematicChain, X_target, Y_pred):
    """Per-row position and orientation error of ``chain`` poses at ``Y_pred``."""
    X_target = np.atleast_2d(X_target)
    realized = chain.forward_array(Y_pred)
    d = chain.pos_dim
    pos = np.linalg.norm(realized[:, :d] - X_target[:, :d], axis=1)
    orn = np.sqrt(circle_dist_sq(realized[:, d:], X_target[:, d:]))
    return pos, orn, realized


def dataset_digest(X, Y) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(X, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(Y, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


class CRiSP(BaseEstimator):
    """Structured inverse-kinematics estimator.

    Parameters
    ----------
    chain : KinematicChain
        Forward model used by the ``fk`` loss (may be biased). Its joint box
        constrains every prediction.
    kernel : {"gaussian", "laplacian", "linear"}, default="gaussian"
    sigma : float, default=1.0
        Kernel bandwidth, ignored by the linear kernel.
    lam : float or None, default=None
        Regularization. ``None`` means ``n ** -0.5``.
    loss : {"fk", "radians"}, default="fk"
    position_weight, orientation_weight : float, default=1.0
        Weights of the two terms of the ``fk`` loss.
    n_starts : int, default=5
        One-shot queries start the optimizer from the training
        configurations with the largest weights and keep the best result.
    max_iters, gradient_tolerance, objective_tolerance, memory
        Optimizer settings, see :class:`~crisp_ik.boxopt.OptimizerConfig`.

    Attributes
    ----------
    X_fit_, Y_fit_ : ndarray
        Training poses ``(n, d + c)`` and configurations ``(n, J)``.
    factor_ : GramFactor
    lam_ : float
    provenance_ : dict
    """

    def __init__(
        self,
        chain=None,
        kernel="gaussian",
        sigma=1.0,
        lam=None,
        loss="fk",
        position_weight=1.0,
        orientation_weight=1.0,
        n_starts=5,
        max_iters=200,
        gradient_tolerance=1e-8,
        objective_tolerance=1e-12,
        memory=10,
    ):
        self.chain = chain
        self.kernel = kernel
        self.sigma = sigma
        self.lam = lam
        self.loss = loss
        self.position_weight = position_weight
        self.orientation_weight = orientation_weight
        self.n_starts = n_starts
        self.max_iters = max_iters
        self.gradient_tolerance = gradient_tolerance
        self.objective_tolerance = objective_tolerance
        self.memory = memory

    @property
    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(self.max_iters, self.gradient_tolerance, self.objective_tolerance, self.memory)

    def _validate_X(self, X, chain):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != chain.pose_dim:
            raise ValueError(f"poses must have {chain.pose_dim} columns, got {X.shape[1]}")
        X = X.copy()
        X[:, chain.pos_dim :] = wrap_angle(X[:, chain.pos_dim :])
        return X

    def fit(self, X, Y):
        chain = self.chain
        if not isinstance(chain, KinematicChain):
            raise TypeError("CRiSP needs a KinematicChain as `chain`")
        if self.n_starts < 1:
            raise ValueError("n_starts must be at least 1")
        X = self._validate_X(X, chain)
        Y = check_array(Y, dtype=np.float64)
        check_consistent_length(X, Y)
        if Y.shape[1] != chain.n_joints:
            raise ValueError(f"configurations must have {chain.n_joints} columns, got {Y.shape[1]}")
        box = chain.box
        outside = np.any((Y < box.lower) | (Y > box.upper), axis=1)
        if np.any(outside):
            raise ValueError(f"training configuration {int(np.argmax(outside))} lies outside the joint box")

        n = X.shape[0]
        lam = n**-0.5 if self.lam is None else float(self.lam)
        self.kernel_spec_ = KernelSpec(self.kernel, float(self.sigma))
        self.loss_spec_ = LossSpec(
            self.loss, chain if self.loss == "fk" else None, self.position_weight, self.orientation_weight
        )
        self.X_fit_ = X
        self.Y_fit_ = Y
        self.lam_ = lam
        self.embedded_ = embed_poses(X, chain.pos_dim)
        K = gram(self.kernel_spec_, self.embedded_)
        self.factor_ = factorize(K, n, lam, overwrite=True)
        del K
        self.targets_ = chain.forward_array(Y) if self.loss == "fk" else None
        self.n_features_in_ = X.shape[1]
        self.provenance_ = {"dataset_hash": dataset_digest(X, Y), "n": n, "chain": chain.digest()}
        return self

    def weights(self, X) -> np.ndarray:
        """Weights ``alpha(x)`` for each query row, shape ``(m, n)``."""
        check_is_fitted(self, "factor_")
        X = self._validate_X(np.atleast_2d(X), self.chain)
        kx = cross_kernel(self.kernel_spec_, embed_poses(X, self.chain.pos_dim), self.embedded_)
        return weights(self.factor_, kx.T).T

    def objective(self, alpha) -> WeightedObjective:
        return WeightedObjective(self.loss_spec_, alpha, self.Y_fit_, self.targets_)

    def predict_one(self, x, start=None, alpha=None) -> Prediction:
        """Predict one configuration.

        With ``start`` the optimizer runs once from there (trajectory warm
        start). Without it, it runs from the ``n_starts`` training
        configurations with the largest weights and keeps the lowest value.
        """
        check_is_fitted(self, "factor_")
        if alpha is None:
            alpha = self.weights(x)[0]
        objective = self.objective(alpha)
        box = self.chain.box
        cfg = self.optimizer_config
        if start is not None:
            starts = [np.asarray(start, dtype=float)]
        else:
            k = min(self.n_starts, alpha.shape[0])
            order = np.argsort(-alpha, kind="stable")[:k]
            starts = self.Y_fit_[order]
        best = None
        for s in starts:
            res = minimize(objective, box, s, cfg)
            if best is None or res.value < best.value:
                best = res
        return Prediction(best.minimizer, best, alpha)

    def with_loss_chain(self, chain: KinematicChain) -> "CRiSP":
        """Copy of this fitted model whose loss uses ``chain``.

        The weights depend only on the poses, so the Gram factor is shared;
        only the training-pose targets of the fk loss are recomputed.
        """
        check_is_fitted(self, "factor_")
        if chain.n_joints != self.chain.n_joints or chain.pose_dim != self.chain.pose_dim:
            raise ValueError("replacement chain has different dimensions")
        model = copy.copy(self)
        model.chain = chain
        model.loss_spec_ = LossSpec(
            self.loss, chain if self.loss == "fk" else None, self.position_weight, self.orientation_weight
        )
        model.targets_ = chain.forward_array(self.Y_fit_) if self.loss == "fk" else None
        model.provenance_ = {**self.provenance_, "chain": chain.digest()}
        return model

    def predict(self, X) -> np.ndarray:
        """One-shot (multi-start) predictions for each pose row."""
        check_is_fitted(self, "factor_")
        alphas = self.weights(X)
        return np.array([self.predict_one(None, alpha=a).y for a in alphas])

    def score(self, X, Y=None) -> float:
        """Negative of position RMSE plus orientation RMSE on the nominal chain.

        ``Y`` is ignored: any configuration that reaches the pose is correct.
        """
        X = self._validate_X(X, self.chain)
        pos, orn, _ = realized_errors(self.chain.nominal(), X, self.predict(X))
        return -float(np.sqrt(np.mean(pos**2)) + np.sqrt(np.mean(orn**2)))


def train(dataset, kernel: KernelSpec, lam, loss: LossSpec, box=None, **options) -> CRiSP:
    """Fit a :class:`CRiSP` model on ``dataset`` (anything with ``X`` and ``Y``).

    For the radians loss, ``loss.chain`` may be None; the chain then has to
    come from ``options["chain"]``. ``box`` must match the chain's box.
    """
    chain = options.pop("chain", None) or loss.chain
    if chain is None:
        raise ValueError("a chain is needed for the joint box")
    if box is not None and not (
        np.array_equal(box.lower, chain.box.lower) and np.array_equal(box.upper, chain.box.upper)
    ):
        raise ValueError("box differs from the chain's joint limits")
    model = CRiSP(
        chain=chain,
        kernel=kernel.family,
        sigma=kernel.sigma,
        lam=lam,
        loss=loss.kind,
        position_weight=loss.position_weight,
        orientation_weight=loss.orientation_weight,
        **options,
    )
    return model.fit(dataset.X, dataset.Y)


@dataclass
class SelectionResult:
    """Outcome of a grid search: the chosen point, its model and every row scored."""

    kernel: KernelSpec
    lam: float
    model: CRiSP
    table: list = field(default_factory=list)


def select_hyperparameters(train_set, validation, grid, loss: LossSpec, box=None, **options) -> SelectionResult:
    """Grid search over ``(KernelSpec, lam)`` pairs on a validation set.

    Each point is scored by position RMSE plus orientation RMSE of one-shot
    predictions, measured on the nominal chain. The lowest score wins; ties
    go to the larger ``lam`` and then the larger ``sigma``. A point whose
    training or prediction fails gets ``score = inf`` and its error message.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("the grid is empty")
    chain = options.get("chain") or loss.chain
    if chain is None:
        raise ValueError("a chain is needed for the joint box")
    nominal = chain.nominal()
    table, models = [], []
    for spec, lam in grid:
        row = {"family": spec.family, "sigma": spec.sigma, "lam": float(lam),
               "pos_rmse": float("nan"), "orn_rmse": float("nan"), "score": float("inf"), "error": ""}
        model = None
        try:
            model = train(train_set, spec, lam, loss, box, **dict(options))
            pos, orn, _ = realized_errors(nominal, validation.X, model.predict(validation.X))
            row["pos_rmse"] = float(np.sqrt(np.mean(pos**2)))
            row["orn_rmse"] = float(np.sqrt(np.mean(orn**2)))
            row["score"] = row["pos_rmse"] + row["orn_rmse"]
            if not np.isfinite(row["score"]):
                row["score"] = float("inf")
                row["error"] = "non-finite score"
        except Exception as exc:  # recorded, the sweep goes on
            row["error"] = f"{type(exc).__name__}: {exc}"
            model = None
        table.append(row)
        models.append(model)
    order = sorted(range(len(grid)), key=lambda i: (table[i]["score"], -table[i]["lam"], -table[i]["sigma"]))
    best = order[0]
    if models[best] is None:
        raise RuntimeError("every grid point failed: " + "; ".join(r["error"] for r in table))
    spec, lam = grid[best]
    return SelectionResult(spec, float(lam), models[best], table)


_SAVED_PARAMS = (
    "kernel",
    "sigma",
    "lam",
    "loss",
    "position_weight",
    "orientation_weight",
    "n_starts",
    "max_iters",
    "gradient_tolerance",
    "objective_tolerance",
    "memory",
)


def save_model(model: CRiSP, path) -> None:
    """Write a fitted model; the Gram factor is rebuilt on load."""
    check_is_fitted(model, "factor_")
    X = np.ascontiguousarray(model.X_fit_, dtype="<f8")
    Y = np.ascontiguousarray(model.Y_fit_, dtype="<f8")
    payload = X.tobytes() + Y.tobytes()
    params = model.get_params()
    header = {
        "version": MODEL_VERSION,
        "params": {k: params[k] for k in _SAVED_PARAMS},
        "lam_effective": model.lam_,
        "chain": model.chain.to_text(),
        "embedding": "position + (cos, sin) per angle",
        "n": X.shape[0],
        "pose_dim": X.shape[1],
        "n_joints": Y.shape[1],
        "provenance": model.provenance_,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC + b" %d\n" % MODEL_VERSION)
        fh.write(head + b"\n")
        fh.write(payload)


def load_model(path) -> CRiSP:
    data = Path(path).read_bytes()
    first, _, rest = data.partition(b"\n")
    parts = first.split()
    if len(parts) != 2 or parts[0] != MODEL_MAGIC:
        raise ModelFileError(f"{path}: not a model file")
    if int(parts[1]) != MODEL_VERSION:
        raise ModelFileError(f"{path}: format version {int(parts[1])}, expected {MODEL_VERSION}")
    head, sep, payload = rest.partition(b"\n")
    if not sep:
        raise ModelFileError(f"{path}: truncated header")
    try:
        header = json.loads(head)
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"{path}: corrupted header") from exc
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise ModelFileError(f"{path}: checksum mismatch (file truncated or corrupted)")
    n, p, J = header["n"], header["pose_dim"], header["n_joints"]
    X = np.frombuffer(payload[: n * p * 8], dtype="<f8").reshape(n, p)
    Y = np.frombuffer(payload[n * p * 8 :], dtype="<f8").reshape(n, J)
    model = CRiSP(chain=parse_chain(header["chain"]), **header["params"])
    model.fit(X.astype(np.float64), Y.astype(np.float64))
    model.provenance_ = header["provenance"]
    return model
