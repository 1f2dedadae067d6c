"""Serial revolute chains: forward kinematics, Jacobians and model bias.

Two chain kinds are supported. ``planar`` chains are described by link
lengths and produce a 2-D position plus one heading angle. ``dh`` chains use
modified (Craig) Denavit-Hartenberg rows and produce a 3-D position plus
ZYX Euler angles ``(yaw, pitch, roll)``. All orientation angles are wrapped
into ``[0, 2*pi)``.

A chain may carry a :class:`BiasSpec`. The biased chain is what a
misspecified model believes; :meth:`KinematicChain.nominal` recovers the
ground truth.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

TWO_PI = 2.0 * np.pi
EULER_SINGULAR_TOL = 1e-9


class ChainFormatError(ValueError):
    """Raised when a chain definition file cannot be parsed."""


def wrap_angle(angle):
    """Wrap angles into ``[0, 2*pi)``."""
    out = np.mod(angle, TWO_PI)
    # np.mod rounds tiny negatives up to exactly 2*pi
    return np.where(out >= TWO_PI, 0.0, out)


def wrap_signed(angle):
    """Signed wrapped difference in ``(-pi, pi]``."""
    return np.pi - np.mod(np.pi - np.asarray(angle, dtype=float), TWO_PI)


def _readonly(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class JointBox:
    """Per-joint limits ``lower <= y <= upper`` in radians."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = _readonly(np.atleast_1d(self.lower))
        upper = _readonly(np.atleast_1d(self.upper))
        if lower.ndim != 1 or lower.shape != upper.shape:
            raise ValueError("lower and upper must be 1-D arrays of equal length")
        if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
            raise ValueError("joint limits must be finite")
        if np.any(lower > upper):
            bad = int(np.argmax(lower > upper))
            raise ValueError(f"joint {bad}: lower limit {lower[bad]} exceeds upper {upper[bad]}")
        if np.any(upper - lower > TWO_PI + 1e-12):
            raise ValueError("each joint interval must fit within a 2*pi span")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def n_joints(self) -> int:
        return self.lower.shape[0]

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def contains(self, y, atol: float = 0.0) -> bool:
        y = np.asarray(y, dtype=float)
        return bool(np.all(y >= self.lower - atol) and np.all(y <= self.upper + atol))

    def clamp(self, y) -> np.ndarray:
        return clamp_to_box(y, self)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(n, self.n_joints))

    def bounds(self):
        """Bounds as a list of ``(low, high)`` pairs."""
        return list(zip(self.lower.tolist(), self.upper.tolist()))


@dataclass(frozen=True, eq=False)
class Pose:
    """End-effector pose: position in meters and wrapped orientation angles."""

    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        position = np.array(np.atleast_1d(self.position), dtype=float)
        orientation = np.array(np.atleast_1d(self.orientation), dtype=float)
        if (position.size, orientation.size) not in ((2, 1), (3, 3)):
            raise ValueError(
                f"pose must be planar (2, 1) or spatial (3, 3), got "
                f"({position.size}, {orientation.size})"
            )
        if not (np.all(np.isfinite(position)) and np.all(np.isfinite(orientation))):
            raise ValueError("pose must be finite")
        object.__setattr__(self, "position", _readonly(position))
        object.__setattr__(self, "orientation", _readonly(wrap_angle(orientation)))

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.position, self.orientation])

    @classmethod
    def from_vector(cls, v) -> "Pose":
        v = np.asarray(v, dtype=float).ravel()
        if v.size == 3:
            return cls(v[:2], v[2:])
        if v.size == 6:
            return cls(v[:3], v[3:])
        raise ValueError(f"pose vector must have 3 or 6 entries, got {v.size}")


@dataclass(frozen=True, eq=False)
class BiasSpec:
    """Fixed model error: radians added to joints, signed meters added to links."""

    joint_bias: np.ndarray
    link_bias: np.ndarray

    def __post_init__(self):
        jb = _readonly(np.atleast_1d(self.joint_bias))
        lb = _readonly(np.atleast_1d(self.link_bias))
        if jb.shape != lb.shape or jb.ndim != 1:
            raise ValueError("joint_bias and link_bias must be 1-D of equal length")
        object.__setattr__(self, "joint_bias", jb)
        object.__setattr__(self, "link_bias", lb)

    @classmethod
    def zeros(cls, n_joints: int) -> "BiasSpec":
        return cls(np.zeros(n_joints), np.zeros(n_joints))

    @classmethod
    def joint(cls, b: float, n_joints: int) -> "BiasSpec":
        """The same offset ``b`` (radians) on every joint."""
        return cls(np.full(n_joints, float(b)), np.zeros(n_joints))

    @classmethod
    def link(cls, b: float, signs) -> "BiasSpec":
        """Offset magnitude ``b`` (meters) on every link with the given signs."""
        signs = np.asarray(signs, dtype=float)
        return cls(np.zeros(signs.size), float(b) * signs)

    @property
    def has_joint_bias(self) -> bool:
        return bool(np.any(self.joint_bias != 0.0))

    @property
    def has_link_bias(self) -> bool:
        return bool(np.any(self.link_bias != 0.0))

    @property
    def is_zero(self) -> bool:
        return not (self.has_joint_bias or self.has_link_bias)


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0, 0.0], [0.0, c, -s, 0.0], [0.0, s, c, 0.0], [0.0, 0.0, 0.0, 1.0]])


def _mdh_fixed(a, alpha):
    # Rx(alpha) @ Tx(a)
    T = _rot_x(alpha)
    T[0, 3] = a
    return T


def _mdh_joint(theta, d):
    # Rz(theta) @ Tz(d)
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0, 0.0], [s, c, 0.0, 0.0], [0.0, 0.0, 1.0, d], [0.0, 0.0, 0.0, 1.0]])


def _batch_rz_tz(theta, d):
    n = theta.shape[0]
    T = np.zeros((n, 4, 4))
    c, s = np.cos(theta), np.sin(theta)
    T[:, 0, 0] = c
    T[:, 0, 1] = -s
    T[:, 1, 0] = s
    T[:, 1, 1] = c
    T[:, 2, 2] = 1.0
    T[:, 2, 3] = d
    T[:, 3, 3] = 1.0
    return T


def euler_zyx(R):
    """ZYX Euler angles ``(yaw, pitch, roll)`` of rotation matrices ``(..., 3, 3)``."""
    R = np.asarray(R)
    yaw = np.arctan2(R[..., 1, 0], R[..., 0, 0])
    pitch = np.arctan2(-R[..., 2, 0], np.hypot(R[..., 0, 0], R[..., 1, 0]))
    roll = np.arctan2(R[..., 2, 1], R[..., 2, 2])
    return np.stack([yaw, pitch, roll], axis=-1)


def euler_zyx_matrix(yaw, pitch, roll):
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    return np.array([
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ])


@dataclass(frozen=True, eq=False)
class KinematicChain:
    """Immutable serial chain of revolute joints.

    Parameters
    ----------
    kind : {"planar", "dh"}
    params : ndarray
        ``(J,)`` link lengths for planar chains, ``(J, 4)`` rows of
        ``(a, d, alpha, theta_offset)`` for DH chains.
    box : JointBox
    bias : BiasSpec, optional
        Defaults to no bias.
    base : ndarray of shape (3,), optional
        World translation of the base frame (DH chains only).
    tool : ndarray of shape (4,), optional
        Fixed ``(a, d, alpha, theta)`` transform after the last joint (DH only).
    """

    kind: str
    params: np.ndarray
    box: JointBox
    bias: BiasSpec | None = None
    base: np.ndarray | None = None
    tool: np.ndarray | None = None
    _effective: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in ("planar", "dh"):
            raise ValueError(f"unknown chain kind {self.kind!r}")
        params = np.array(self.params, dtype=float)
        if self.kind == "planar":
            params = params.reshape(-1)
            if np.any(params < 0):
                raise ValueError("link lengths must be non-negative")
        elif params.ndim != 2 or params.shape[1] != 4:
            raise ValueError("DH params must have shape (J, 4)")
        J = params.shape[0]
        if J < 1:
            raise ValueError("a chain needs at least one joint")
        if self.box.n_joints != J:
            raise ValueError(f"box has {self.box.n_joints} joints, chain has {J}")
        bias = self.bias if self.bias is not None else BiasSpec.zeros(J)
        if bias.joint_bias.size != J:
            raise ValueError(f"bias has {bias.joint_bias.size} entries, chain has {J} joints")
        if self.kind == "planar" and (self.base is not None or self.tool is not None):
            raise ValueError("base and tool transforms apply to DH chains only")
        base = _readonly(np.zeros(3) if self.base is None else self.base)
        tool = None if self.tool is None else _readonly(self.tool)
        object.__setattr__(self, "params", _readonly(params))
        object.__setattr__(self, "bias", bias)
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "tool", tool)
        object.__setattr__(self, "_effective", self._apply_link_bias(params, bias))

    def _apply_link_bias(self, params, bias):
        if not bias.has_link_bias:
            return params
        out = params.copy()
        if self.kind == "planar":
            out = out + bias.link_bias
            if np.any(out < 0):
                raise ValueError("link bias makes a link length negative")
            return _readonly(out)
        # Lengthen every nonzero a and d by b (shorten for negative b).
        for col in (0, 1):
            v = out[:, col]
            out[:, col] = np.where(v != 0.0, v + np.sign(v) * bias.link_bias, v)
        return _readonly(out)

    @property
    def n_joints(self) -> int:
        return self.params.shape[0]

    @property
    def pos_dim(self) -> int:
        return 2 if self.kind == "planar" else 3

    @property
    def orn_dim(self) -> int:
        return 1 if self.kind == "planar" else 3

    @property
    def pose_dim(self) -> int:
        return self.pos_dim + self.orn_dim

    @property
    def link_lengths(self) -> np.ndarray:
        """Effective (biased) planar link lengths."""
        if self.kind != "planar":
            raise AttributeError("link_lengths is defined for planar chains")
        return self._effective

    def nominal(self) -> "KinematicChain":
        """The same chain without bias."""
        return self.with_bias(BiasSpec.zeros(self.n_joints))

    def with_bias(self, bias: BiasSpec) -> "KinematicChain":
        return KinematicChain(self.kind, self.params, self.box, bias, self.base if self.kind == "dh" else None, self.tool)

    def _check(self, y):
        y = np.asarray(y, dtype=float)
        if y.shape[-1] != self.n_joints:
            raise ValueError(f"expected {self.n_joints} joint angles, got {y.shape[-1]}")
        return y

    def _biased_angles(self, y):
        if self.bias.has_joint_bias:
            return y + self.bias.joint_bias
        return y

    def forward(self, y) -> Pose:
        y = self._check(y)
        if y.ndim != 1:
            raise ValueError("forward takes a single configuration; use forward_array")
        return Pose.from_vector(self.forward_array(y[None, :])[0])

    def forward_array(self, Y) -> np.ndarray:
        """Poses ``(n, d + c)`` for configurations ``(n, J)``."""
        Y = np.atleast_2d(self._check(Y))
        q = self._biased_angles(Y)
        if self.kind == "planar":
            cum = np.cumsum(q, axis=1)
            L = self._effective
            x = np.cos(cum) @ L
            y = np.sin(cum) @ L
            return np.column_stack([x, y, wrap_angle(cum[:, -1])])
        T = self._transforms(q)
        return np.column_stack([T[:, :3, 3], wrap_angle(euler_zyx(T[:, :3, :3]))])

    def _transforms(self, q):
        n = q.shape[0]
        T = np.broadcast_to(np.eye(4), (n, 4, 4)).copy()
        T[:, :3, 3] = self.base
        for j, (a, d, alpha, offset) in enumerate(self._effective):
            T = T @ _mdh_fixed(a, alpha)
            T = T @ _batch_rz_tz(q[:, j] + offset, np.full(n, d))
        if self.tool is not None:
            a, d, alpha, theta = self.tool
            T = T @ (_mdh_fixed(a, alpha) @ _mdh_joint(theta, d))
        return T

    def jacobian(self, y, return_flag: bool = False):
        """Analytic Jacobian of the pose vector, shape ``(d + c, J)``.

        For DH chains the orientation rows are derivatives of the ZYX Euler
        angles. At pitch = +-pi/2 the yaw and roll rows are undefined; they
        are returned as zeros and ``flag`` is True.
        """
        _, jac, singular = self.pose_and_jacobian(y)
        return (jac, singular) if return_flag else jac

    def pose_and_jacobian(self, y):
        """Pose vector, Jacobian and Euler-singularity flag in one pass."""
        y = self._check(y)
        if y.ndim != 1:
            raise ValueError("jacobian takes a single configuration")
        q = self._biased_angles(y)
        J = self.n_joints
        if self.kind == "planar":
            cum = np.cumsum(q)
            L = self._effective
            tail_x = np.cumsum((L * np.cos(cum))[::-1])[::-1]
            tail_y = np.cumsum((L * np.sin(cum))[::-1])[::-1]
            jac = np.vstack([-tail_y, tail_x, np.ones(J)])
            pose = np.array([np.cos(cum) @ L, np.sin(cum) @ L, wrap_angle(cum[-1])])
            return pose, jac, False

        T = np.eye(4)
        T[:3, 3] = self.base
        axes = np.empty((J, 3))
        origins = np.empty((J, 3))
        for j, (a, d, alpha, offset) in enumerate(self._effective):
            T = T @ _mdh_fixed(a, alpha)
            axes[j] = T[:3, 2]
            origins[j] = T[:3, 3]
            T = T @ _mdh_joint(q[j] + offset, d)
        if self.tool is not None:
            a, d, alpha, theta = self.tool
            T = T @ _mdh_fixed(a, alpha) @ _mdh_joint(theta, d)
        p = T[:3, 3]
        jp = np.cross(axes, p - origins).T
        jw = axes.T
        euler = euler_zyx(T[:3, :3])
        yaw, pitch = euler[0], euler[1]
        cy, sy = np.cos(yaw), np.sin(yaw)
        cp, sp = np.cos(pitch), np.sin(pitch)
        singular = bool(abs(cp) < EULER_SINGULAR_TOL)
        # Invert omega = E(yaw, pitch) @ [yaw', pitch', roll'].
        pitch_rate = -sy * jw[0] + cy * jw[1]
        if singular:
            yaw_rate = np.zeros(J)
            roll_rate = np.zeros(J)
        else:
            roll_rate = (cy * jw[0] + sy * jw[1]) / cp
            yaw_rate = jw[2] + sp * roll_rate
        jac = np.vstack([jp, yaw_rate, pitch_rate, roll_rate])
        return np.concatenate([p, wrap_angle(euler)]), jac, singular

    def reach(self) -> float:
        """Upper bound on the distance from the base to the end effector."""
        if self.kind == "planar":
            return float(np.sum(self._effective))
        eff = self._effective
        extra = 0.0 if self.tool is None else abs(self.tool[0]) + abs(self.tool[1])
        return float(np.sum(np.abs(eff[:, 0])) + np.sum(np.abs(eff[:, 1])) + extra)

    def to_text(self) -> str:
        """Serialize in the chain-definition file format (round-trips exactly)."""
        lines = [self.kind]
        r = repr
        if self.kind == "dh":
            if np.any(self.base != 0.0):
                lines.append("base " + " ".join(r(float(v)) for v in self.base))
            for row, lo, hi in zip(self.params, self.box.lower, self.box.upper):
                lines.append(" ".join(r(float(v)) for v in (*row, lo, hi)))
            if self.tool is not None:
                lines.append("tool " + " ".join(r(float(v)) for v in self.tool))
        else:
            for length, lo, hi in zip(self.params, self.box.lower, self.box.upper):
                lines.append(" ".join(r(float(v)) for v in (length, lo, hi)))
        if self.bias.has_joint_bias:
            lines.append("joint_bias " + " ".join(r(float(v)) for v in self.bias.joint_bias))
        if self.bias.has_link_bias:
            lines.append("link_bias " + " ".join(r(float(v)) for v in self.bias.link_bias))
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]


def forward(chain: KinematicChain, y) -> Pose:
    return chain.forward(y)


def jacobian(chain: KinematicChain, y) -> np.ndarray:
    return chain.jacobian(y)


def clamp_to_box(y, box: JointBox) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.shape[-1] != box.n_joints:
        raise ValueError(f"expected {box.n_joints} joint angles, got {y.shape[-1]}")
    return np.minimum(np.maximum(y, box.lower), box.upper)


def parse_chain(text: str) -> KinematicChain:
    """Parse the chain-definition text format.

    One header line ``planar`` or ``dh``, then one row per joint. Planar rows
    are ``length lower upper``; DH rows are ``a d alpha theta_offset lower
    upper``. Optional keyword lines: ``base x y z``, ``tool a d alpha theta``,
    ``joint_bias b1 .. bJ`` and ``link_bias b1 .. bJ``. ``#`` starts a comment.
    """
    kind = None
    rows, base, tool = [], None, None
    joint_bias = link_bias = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if kind is None:
            if tokens != ["planar"] and tokens != ["dh"]:
                raise ChainFormatError(f"line {lineno}: expected header 'planar' or 'dh', got {line!r}")
            kind = tokens[0]
            continue
        head, rest = tokens[0], tokens[1:]
        try:
            if head == "base":
                base = [float(v) for v in rest]
                if len(base) != 3:
                    raise ChainFormatError(f"line {lineno}: base needs 3 values")
            elif head == "tool":
                tool = [float(v) for v in rest]
                if len(tool) != 4:
                    raise ChainFormatError(f"line {lineno}: tool needs 4 values")
            elif head == "joint_bias":
                joint_bias = [float(v) for v in rest]
            elif head == "link_bias":
                link_bias = [float(v) for v in rest]
            else:
                values = [float(v) for v in tokens]
                width = 3 if kind == "planar" else 6
                if len(values) != width:
                    raise ChainFormatError(
                        f"line {lineno}: {kind} rows need {width} values, got {len(values)}"
                    )
                rows.append(values)
        except ValueError as exc:
            if isinstance(exc, ChainFormatError):
                raise
            raise ChainFormatError(f"line {lineno}: non-numeric value in {line!r}") from None
    if kind is None:
        raise ChainFormatError("empty chain definition")
    if not rows:
        raise ChainFormatError("chain definition has no joint rows")
    rows = np.array(rows)
    box = JointBox(rows[:, -2], rows[:, -1])
    J = rows.shape[0]
    bias = BiasSpec(
        np.zeros(J) if joint_bias is None else joint_bias,
        np.zeros(J) if link_bias is None else link_bias,
    )
    try:
        if kind == "planar":
            return KinematicChain("planar", rows[:, 0], box, bias)
        return KinematicChain("dh", rows[:, :4], box, bias, base=base, tool=tool)
    except ValueError as exc:
        raise ChainFormatError(str(exc)) from None


def load_chain(path) -> KinematicChain:
    return parse_chain(Path(path).read_text(encoding="utf-8"))


def _packaged(name: str) -> str:
    return resources.files("crisp_ik").joinpath("data").joinpath(name).read_text(encoding="utf-8")


def make_planar5() -> KinematicChain:
    """Planar arm with five 2 m links."""
    return parse_chain(_packaged("planar5.chain"))


def make_panda(dh_file=None) -> KinematicChain:
    """Franka Emika Panda from a 7-row DH file (packaged table by default)."""
    text = _packaged("panda.chain") if dh_file is None else Path(dh_file).read_text(encoding="utf-8")
    chain = parse_chain(text)
    if chain.kind != "dh":
        raise ChainFormatError("Panda definition must be a 'dh' chain")
    if chain.n_joints != 7:
        raise ChainFormatError(f"Panda definition needs 7 joint rows, got {chain.n_joints}")
    return chain


def resolve_chain(spec: str) -> KinematicChain:
    """Chain from a builtin name (``planar5``, ``panda``) or a file path."""
    if spec == "planar5":
        return make_planar5()
    if spec == "panda":
        return make_panda()
    return load_chain(spec)
