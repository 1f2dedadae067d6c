"""Datasets, trajectories, the tracking harness and error metrics."""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baseline import DampedLeastSquaresIK, DlsConfig, solve_ik
from .crisp import CRiSP, realized_errors
from .kinematics import KinematicChain, parse_chain, wrap_angle
from .loss import circle_dist_sq

DATASET_FORMAT = "crisp-ik dataset v1"


class DatasetFormatError(ValueError):
    """Dataset CSV is malformed or inconsistent with its chain."""


class UnreachableRegionError(RuntimeError):
    """Sampling could not find configurations reaching the requested region."""


class TrackingError(RuntimeError):
    """A prediction failed while tracking a trajectory."""


# --------------------------------------------------------------------------
# datasets


@dataclass(eq=False)
class Dataset:
    """Pairs of poses ``X`` (n, d + c) and configurations ``Y`` (n, J)."""

    X: np.ndarray
    Y: np.ndarray
    chain_text: str = ""
    seed: int | None = None
    region: dict = field(default_factory=lambda: {"kind": "box"})

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.Y = np.atleast_2d(np.asarray(self.Y, dtype=float))
        if self.X.shape[0] != self.Y.shape[0]:
            raise ValueError(f"X has {self.X.shape[0]} rows, Y has {self.Y.shape[0]}")
        if self.X.shape[1] not in (3, 6):
            raise ValueError(f"poses must have 3 or 6 columns, got {self.X.shape[1]}")

    def __len__(self):
        return self.X.shape[0]

    @property
    def pos_dim(self) -> int:
        return 2 if self.X.shape[1] == 3 else 3

    @property
    def orn_dim(self) -> int:
        return self.X.shape[1] - self.pos_dim

    @property
    def n_joints(self) -> int:
        return self.Y.shape[1]

    @property
    def chain(self) -> KinematicChain:
        return parse_chain(self.chain_text)

    def head(self, n: int) -> "Dataset":
        return Dataset(self.X[:n], self.Y[:n], self.chain_text, self.seed, dict(self.region))

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.X, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.Y, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class TorusRegion:
    """Solid torus around a horizontal circle plus a finite set of orientations.

    ``orientations`` are pose angle vectors (ZYX Euler for spatial chains).
    """

    center: tuple = (0.0, 0.044, -0.55)
    ring_radius: float = 0.03
    tube_radius: float = 0.01
    orientations: tuple = ((np.pi / 4, 0.0, np.pi), (-np.pi / 4, 0.0, np.pi))
    orientation_tolerance: float = 0.05

    def describe(self) -> dict:
        return {
            "kind": "torus",
            "center": [float(v) for v in self.center],
            "ring_radius": float(self.ring_radius),
            "tube_radius": float(self.tube_radius),
            "orientations": [[float(v) for v in o] for o in self.orientations],
            "orientation_tolerance": float(self.orientation_tolerance),
        }

    def contains(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        p = X[:, :3] - np.asarray(self.center)
        ring = np.hypot(p[:, 0], p[:, 1]) - self.ring_radius
        inside = ring**2 + p[:, 2] ** 2 <= self.tube_radius**2 * (1 + 1e-9)
        orn = X[:, 3:]
        close = np.zeros(X.shape[0], dtype=bool)
        for o in self.orientations:
            d = np.abs(wrap_angle(orn) - wrap_angle(np.asarray(o)))
            d = np.minimum(d, 2 * np.pi - d)
            close |= np.all(d <= self.orientation_tolerance, axis=1)
        return inside & close

    def sample_targets(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Poses uniform in the solid torus with orientations drawn from the set."""
        R, r = self.ring_radius, self.tube_radius
        out = []
        while len(out) < n:
            m = 2 * (n - len(out)) + 16
            pts = rng.uniform([-(R + r), -(R + r), -r], [R + r, R + r, r], size=(m, 3))
            keep = (np.hypot(pts[:, 0], pts[:, 1]) - R) ** 2 + pts[:, 2] ** 2 <= r**2
            out.extend(pts[keep])
        pts = np.asarray(out[:n]) + np.asarray(self.center)
        which = rng.integers(len(self.orientations), size=n)
        orn = np.asarray(self.orientations, dtype=float)[which]
        return np.hstack([pts, wrap_angle(orn)])


# Short runs with light damping: a failed start is cheaper to replace than to rescue.
LIFT_CONFIG = DlsConfig(damping=0.003, max_iters=60, position_tolerance=1e-9,
                        orientation_tolerance=1e-9, step_clamp=0.5)


def sample_dataset(chain: KinematicChain, n: int, region=None, seed: int = 0,
                   max_attempts_per_sample: int = 50) -> Dataset:
    """Sample ``n`` (pose, configuration) pairs from the nominal chain.

    ``region=None`` (or ``"box"``) draws configurations uniformly on the
    joint box. A :class:`TorusRegion` draws target poses uniformly in the
    torus and lifts each to a configuration by iterative IK from a uniformly
    random start; the stored pose is recomputed from that configuration.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    truth = chain.nominal()
    rng = np.random.default_rng(seed)
    if region is None or region == "box":
        Y = truth.box.sample(rng, n)
        return Dataset(truth.forward_array(Y), Y, truth.to_text(), seed, {"kind": "box"})
    if not isinstance(region, TorusRegion):
        raise TypeError(f"unsupported region {region!r}")
    if truth.kind != "dh":
        raise ValueError("torus regions need a spatial chain")

    ys = []
    attempts = 0
    cap = max_attempts_per_sample * n
    while len(ys) < n:
        if attempts >= cap:
            rate = len(ys) / max(attempts, 1)
            raise UnreachableRegionError(
                f"only {len(ys)} of {n} samples after {attempts} attempts (rate {rate:.2e})"
            )
        target = region.sample_targets(rng, 1)[0]
        start = truth.box.sample(rng, 1)[0]
        attempts += 1
        res = solve_ik(truth, target, start, LIFT_CONFIG, eval_chain=truth)
        if res.position_error > 1e-6 or res.orientation_error > 1e-6:
            continue
        if not region.contains(truth.forward_array(res.y))[0]:
            continue
        ys.append(res.y)
        if attempts > 1000 and len(ys) / attempts < 1e-6:
            raise UnreachableRegionError(f"acceptance rate below 1e-6 after {attempts} attempts")
    Y = np.asarray(ys)
    return Dataset(truth.forward_array(Y), Y, truth.to_text(), seed, region.describe())


def _column_names(pos_dim: int, orn_dim: int, n_joints: int):
    pos = ["px", "py", "pz"][:pos_dim]
    return [f"y{j + 1}" for j in range(n_joints)] + pos + [f"o{k + 1}" for k in range(orn_dim)]


def format_dataset(ds: Dataset) -> str:
    buf = io.StringIO()
    buf.write(f"# {DATASET_FORMAT}\n")
    buf.write(f"# seed: {json.dumps(ds.seed)}\n")
    buf.write(f"# region: {json.dumps(ds.region, sort_keys=True)}\n")
    if ds.chain_text:
        buf.write(f"# chain_hash: {hashlib.sha256(ds.chain_text.encode()).hexdigest()[:16]}\n")
        for line in ds.chain_text.splitlines():
            buf.write(f"# chain: {line}\n")
    buf.write(",".join(_column_names(ds.pos_dim, ds.orn_dim, ds.n_joints)) + "\n")
    for y, x in zip(ds.Y, ds.X):
        buf.write(",".join(repr(float(v)) for v in (*y, *x)) + "\n")
    return buf.getvalue()


def write_dataset(ds: Dataset, path) -> None:
    Path(path).write_text(format_dataset(ds), encoding="utf-8", newline="\n")


def read_dataset(path) -> Dataset:
    text = Path(path).read_text(encoding="utf-8")
    meta, chain_lines, body = {}, [], []
    for line in text.splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition(":")
            if key == "chain":
                chain_lines.append(value[1:] if value.startswith(" ") else value)
            elif value:
                meta[key.strip()] = value.strip()
        elif line.strip():
            body.append(line)
    if not body:
        raise DatasetFormatError(f"{path}: no header row")
    header = [h.strip() for h in body[0].split(",")]
    chain_text = "\n".join(chain_lines) + "\n" if chain_lines else ""

    if chain_text:
        chain = parse_chain(chain_text)
        expected = _column_names(chain.pos_dim, chain.orn_dim, chain.n_joints)
    else:
        n_pos = sum(h in ("px", "py", "pz") for h in header)
        n_orn = sum(h.startswith("o") for h in header)
        n_j = sum(h.startswith("y") for h in header)
        pos_dim, orn_dim = (3, 3) if (n_pos == 3 or n_orn == 3) else (2, 1)
        expected = _column_names(pos_dim, orn_dim, n_j)
    for name in expected:
        if name not in header:
            raise DatasetFormatError(f"{path}: missing column {name!r}")
    if header != expected:
        raise DatasetFormatError(f"{path}: header {header} does not match expected {expected}")

    rows = []
    for r, line in enumerate(csv.reader(body[1:]), start=1):
        if len(line) != len(header):
            raise DatasetFormatError(f"{path}: row {r} has {len(line)} cells, expected {len(header)}")
        try:
            rows.append([float(v) for v in line])
        except ValueError:
            c = next(i for i, v in enumerate(line) if not _is_float(v))
            raise DatasetFormatError(
                f"{path}: non-numeric cell at row {r}, column {c + 1} ({header[c]}): {line[c]!r}"
            ) from None
    data = np.array(rows, dtype=float).reshape(-1, len(header))
    n_joints = sum(h.startswith("y") for h in header)
    seed = json.loads(meta["seed"]) if "seed" in meta else None
    region = json.loads(meta["region"]) if "region" in meta else {"kind": "box"}
    return Dataset(data[:, n_joints:], data[:, :n_joints], chain_text, seed, region)


def _is_float(v) -> bool:
    try:
        float(v)
    except ValueError:
        return False
    return True


# --------------------------------------------------------------------------
# trajectories


@dataclass(eq=False)
class Trajectory:
    points: np.ndarray
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if self.points.shape[0] < 1:
            raise ValueError("a trajectory needs at least one point")
        if self.points.shape[1] not in (3, 6):
            raise ValueError(f"trajectory poses must have 3 or 6 columns, got {self.points.shape[1]}")
        if self.points.shape[0] > 1 and np.any(np.all(np.diff(self.points, axis=0) == 0, axis=1)):
            raise ValueError("consecutive trajectory points must differ")

    def __len__(self):
        return self.points.shape[0]


TRAJECTORY_DEFAULTS = {
    "eight": {"center": (0.0, 5.5), "a": 2.0, "n_points": 64, "heading": np.pi / 4},
    "circle2d": {"center": (0.0, 6.5), "radius": 2.5, "n_points": 64, "heading": np.pi / 4},
    "circle3d": {"center": (0.0, 0.044, -0.55), "radius": 0.03, "n_points": 64,
                 "yaw": np.pi / 4, "pitch": 0.0, "roll": np.pi},
    "spiral": {"center": (0.0, 0.044, -0.55), "radius": 0.03, "height": 0.06, "turns": 2.0,
               "n_points": 64, "yaw": np.pi / 4, "pitch": 0.0, "roll": np.pi},
}


def make_trajectory(kind: str, **params) -> Trajectory:
    """Build one of the test trajectories; unspecified params take defaults.

    ``eight`` is a Gerono lemniscate ``c + (a sin t, a sin t cos t)``,
    ``circle2d``/``circle3d`` start at phase 0 (``center + (r, 0[, 0])``) and
    ``spiral`` rises by ``height`` from its first to its last point. Planar
    trajectories hold a constant heading, spatial ones constant ZYX angles.
    """
    if kind not in TRAJECTORY_DEFAULTS:
        raise ValueError(f"unknown trajectory {kind!r}; choose from {sorted(TRAJECTORY_DEFAULTS)}")
    unknown = set(params) - set(TRAJECTORY_DEFAULTS[kind])
    if unknown:
        raise ValueError(f"unknown parameters for {kind}: {sorted(unknown)}")
    p = {**TRAJECTORY_DEFAULTS[kind], **params}
    L = int(p["n_points"])
    if L < 1:
        raise ValueError("n_points must be positive")
    c = np.asarray(p["center"], dtype=float)

    if kind in ("eight", "circle2d"):
        t = np.linspace(0.0, 2 * np.pi, L, endpoint=False)
        if kind == "eight":
            xy = np.column_stack([p["a"] * np.sin(t), p["a"] * np.sin(t) * np.cos(t)])
        else:
            if not p["radius"] > 0:
                raise ValueError("radius must be positive")
            xy = p["radius"] * np.column_stack([np.cos(t), np.sin(t)])
        pts = np.column_stack([c + xy, np.full(L, wrap_angle(p["heading"]))])
    else:
        if not p["radius"] > 0:
            raise ValueError("radius must be positive")
        orn = wrap_angle(np.array([p["yaw"], p["pitch"], p["roll"]], dtype=float))
        if kind == "circle3d":
            t = np.linspace(0.0, 2 * np.pi, L, endpoint=False)
            z = np.zeros(L)
        else:
            s = np.linspace(0.0, 1.0, L)
            t = 2 * np.pi * p["turns"] * s
            z = p["height"] * (s - 0.5)
        xyz = np.column_stack([p["radius"] * np.cos(t), p["radius"] * np.sin(t), z])
        pts = np.hstack([c + xyz, np.tile(orn, (L, 1))])
    params_out = {k: (list(v) if isinstance(v, tuple) else v) for k, v in p.items()}
    return Trajectory(pts, kind, params_out)


# --------------------------------------------------------------------------
# tracking


def rmse(position_errors, orientation_errors):
    """``(pos_rmse, orn_rmse, pos_std, orn_std)`` over per-point errors."""
    pe = np.asarray(position_errors, dtype=float)
    oe = np.asarray(orientation_errors, dtype=float)
    if pe.size < 1:
        raise ValueError("need at least one row")
    return (
        float(np.sqrt(np.mean(pe**2))),
        float(np.sqrt(np.mean(oe**2))),
        float(np.std(pe)),
        float(np.std(oe)),
    )


@dataclass(eq=False)
class TrackingReport:
    targets: np.ndarray
    predicted: np.ndarray
    realized: np.ndarray
    position_error: np.ndarray
    orientation_error: np.ndarray
    config: dict = field(default_factory=dict)

    def __len__(self):
        return self.targets.shape[0]

    def summary(self) -> dict:
        pos, orn, pos_std, orn_std = rmse(self.position_error, self.orientation_error)
        return {
            "pos_rmse_m": pos,
            "orn_rmse_rad": orn,
            "pos_std_m": pos_std,
            "orn_std_rad": orn_std,
            "n_points": len(self),
            "config": self.config,
        }


def _method_config(method) -> dict:
    chain = method.chain
    cfg = {"method": type(method).__name__, "chain_hash": chain.digest(),
           "joint_bias": chain.bias.joint_bias.tolist(), "link_bias": chain.bias.link_bias.tolist()}
    params = {k: v for k, v in method.get_params().items() if k not in ("chain", "start")}
    cfg["params"] = params
    if isinstance(method, CRiSP):
        cfg["lam"] = method.lam_
        cfg["model_hash"] = method.provenance_.get("dataset_hash")
    return cfg


def track(method, trajectory: Trajectory, eval_chain: KinematicChain | None = None) -> TrackingReport:
    """Solve IK along a trajectory, warm-starting each point from the last.

    ``method`` is a fitted :class:`CRiSP` (first point uses its multi-start
    policy) or a :class:`DampedLeastSquaresIK` (first point starts from its
    default start). Errors are measured on ``eval_chain``, the nominal version
    of the method's chain unless given.
    """
    if not isinstance(method, (CRiSP, DampedLeastSquaresIK)):
        raise TypeError(f"cannot track with {type(method).__name__}")
    eval_chain = eval_chain if eval_chain is not None else method.chain.nominal()
    if trajectory.points.shape[1] != eval_chain.pose_dim:
        raise ValueError("trajectory and chain dimensions differ")
    ys = []
    prev = None
    for t, x in enumerate(trajectory.points, start=1):
        try:
            y = method.predict_one(x, start=prev).y
        except Exception as exc:
            raise TrackingError(f"prediction failed at trajectory point {t}: {exc}") from exc
        ys.append(y)
        prev = y
    Y = np.asarray(ys)
    pos, orn, realized = realized_errors(eval_chain, trajectory.points, Y)
    cfg = _method_config(method)
    cfg["trajectory"] = {"name": trajectory.name, **{k: _jsonable(v) for k, v in trajectory.params.items()}}
    cfg["eval_chain_hash"] = eval_chain.digest()
    return TrackingReport(trajectory.points.copy(), Y, realized, pos, orn, cfg)


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def write_report(report: TrackingReport, outdir, prefix: str = "") -> dict:
    """Write per-point CSV, JSON summary and plot-data CSV; return the paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    pose_dim = report.targets.shape[1]
    pos_dim = 2 if pose_dim == 3 else 3
    axes = "xyz"[:pos_dim]
    J = report.predicted.shape[1]
    paths = {
        "points": outdir / f"{prefix}tracking.csv",
        "summary": outdir / f"{prefix}summary.json",
        "plot": outdir / f"{prefix}plot.csv",
    }
    head = (["t"] + [f"target_{n}" for n in _column_names(pos_dim, pose_dim - pos_dim, 0)]
            + [f"y{j + 1}" for j in range(J)]
            + [f"realized_{n}" for n in _column_names(pos_dim, pose_dim - pos_dim, 0)]
            + ["pos_err_m", "orn_err_rad"])
    cfg = report.config
    preamble = [f"# {k}: {json.dumps(cfg.get(k))}" for k in ("method", "model_hash", "chain_hash", "eval_chain_hash")
                if k in cfg]
    lines = preamble + [",".join(head)]
    for t in range(len(report)):
        row = [*report.targets[t], *report.predicted[t], *report.realized[t],
               report.position_error[t], report.orientation_error[t]]
        lines.append(",".join([str(t + 1)] + [repr(float(v)) for v in row]))
    paths["points"].write_text("\n".join(lines) + "\n", encoding="utf-8")

    plot = preamble + [",".join(["t"] + [f"t{a}" for a in axes] + [f"r{a}" for a in axes])]
    for t in range(len(report)):
        vals = [*report.targets[t, :pos_dim], *report.realized[t, :pos_dim]]
        plot.append(",".join([str(t + 1)] + [repr(float(v)) for v in vals]))
    paths["plot"].write_text("\n".join(plot) + "\n", encoding="utf-8")
    paths["summary"].write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return {k: str(v) for k, v in paths.items()}


def orientation_distance(a, b) -> np.ndarray:
    return np.sqrt(circle_dist_sq(a, b))
