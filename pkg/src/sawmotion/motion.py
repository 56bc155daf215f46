"""Robot state and motion sequence representations.

A frame is root position (m), root orientation as a unit quaternion
(w, x, y, z), joint angles (rad) and joint velocities (rad/s).  Sequences
are stored column-wise as numpy arrays; ``frames`` / indexing give the
per-frame :class:`RobotState` view.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

DEFAULT_DT = 0.02

# |norm - 1| below this is treated as already unit; keeps canonicalization idempotent
_UNIT_TOL = 8 * np.finfo(float).eps


class InvalidQuaternionError(ValueError):
    pass


class SequenceParseError(ValueError):
    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if field is not None:
            loc.append(f"field {field}")
        super().__init__(f"{message} ({', '.join(loc)})" if loc else message)
        self.line = line
        self.field = field


def quat_canonicalize(q) -> np.ndarray:
    """Unit-normalize ``q`` and pick the sign with w >= 0.

    When w == 0 the first nonzero component is made non-negative.
    """
    q = np.asarray(q, dtype=float)
    if q.shape != (4,):
        raise InvalidQuaternionError(f"quaternion must have 4 components, got shape {q.shape}")
    return quat_canonicalize_rows(q[None, :])[0]


def quat_canonicalize_rows(q: np.ndarray) -> np.ndarray:
    """Row-wise :func:`quat_canonicalize` for an (N, 4) array."""
    q = np.asarray(q, dtype=float)
    if q.ndim != 2 or q.shape[1] != 4:
        raise InvalidQuaternionError(f"expected (N, 4) quaternions, got {q.shape}")
    if not np.all(np.isfinite(q)):
        raise InvalidQuaternionError("non-finite quaternion")
    n = np.sqrt(np.einsum("ij,ij->i", q, q))
    if np.any(n == 0.0):
        raise InvalidQuaternionError(f"zero-norm quaternion at row {int(np.argmin(n))}")
    unit = np.abs(n - 1.0) <= _UNIT_TOL
    out = np.where(unit[:, None], q, q / n[:, None])
    nz = out != 0.0
    first = np.argmax(nz, axis=1)
    lead = out[np.arange(len(out)), first]
    return np.where((lead < 0.0)[:, None], -out, out) + 0.0


def yaw_to_quat(yaw: float) -> np.ndarray:
    return quat_canonicalize([math.cos(yaw / 2.0), 0.0, 0.0, math.sin(yaw / 2.0)])


def yaws_to_quats(yaw: np.ndarray) -> np.ndarray:
    yaw = np.asarray(yaw, dtype=float)
    q = np.zeros((len(yaw), 4))
    q[:, 0] = np.cos(yaw / 2.0)
    q[:, 3] = np.sin(yaw / 2.0)
    return quat_canonicalize_rows(q)


def quat_to_yaw(q: np.ndarray) -> np.ndarray:
    """Heading angle of (N, 4) or (4,) quaternions, in (-pi, pi]."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.arctan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class RobotState:
    root_pos: np.ndarray
    root_quat: np.ndarray
    joint_pos: np.ndarray
    joint_vel: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.root_pos, dtype=float)
        if p.shape != (3,):
            raise ValueError(f"root_pos must have shape (3,), got {p.shape}")
        q = np.asarray(self.joint_pos, dtype=float)
        qd = np.asarray(self.joint_vel, dtype=float)
        if q.ndim != 1 or q.shape != qd.shape:
            raise ValueError(f"joint_pos {q.shape} and joint_vel {qd.shape} must be equal-length vectors")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q)) and np.all(np.isfinite(qd))):
            raise ValueError("non-finite robot state")
        object.__setattr__(self, "root_pos", _frozen(p))
        object.__setattr__(self, "root_quat", _frozen(quat_canonicalize(self.root_quat)))
        object.__setattr__(self, "joint_pos", _frozen(q))
        object.__setattr__(self, "joint_vel", _frozen(qd))

    @property
    def S(self) -> int:
        return len(self.joint_pos)

    def features(self) -> np.ndarray:
        return np.concatenate([self.root_pos, self.root_quat, self.joint_pos, self.joint_vel])

    def clamped(self, lo, hi) -> "RobotState":
        return RobotState(self.root_pos, self.root_quat, np.clip(self.joint_pos, lo, hi), self.joint_vel)

    def __eq__(self, other):
        if not isinstance(other, RobotState):
            return NotImplemented
        return all(
            np.array_equal(a, b)
            for a, b in zip(
                (self.root_pos, self.root_quat, self.joint_pos, self.joint_vel),
                (other.root_pos, other.root_quat, other.joint_pos, other.joint_vel),
            )
        )

    __hash__ = None


class MotionSequence:
    """Fixed-timestep run of robot states, stored as per-field arrays.

    ``root_pos`` (T, 3), ``root_quat`` (T, 4), ``joint_pos`` / ``joint_vel``
    (T, S).  Instances are read-only.
    """

    __slots__ = ("root_pos", "root_quat", "joint_pos", "joint_vel", "dt")

    def __init__(self, root_pos, root_quat, joint_pos, joint_vel, dt: float = DEFAULT_DT,
                 canonical: bool = False):
        p = np.array(root_pos, dtype=float)
        quat = np.array(root_quat, dtype=float)
        q = np.array(joint_pos, dtype=float)
        qd = np.array(joint_vel, dtype=float)
        if p.ndim != 2 or p.shape[1] != 3 or len(p) < 1:
            raise ValueError(f"root_pos must be (T>=1, 3), got {p.shape}")
        T = len(p)
        if quat.shape != (T, 4):
            raise ValueError(f"root_quat must be ({T}, 4), got {quat.shape}")
        if q.ndim != 2 or len(q) != T or qd.shape != q.shape:
            raise ValueError(f"joint_pos {q.shape} / joint_vel {qd.shape} must both be ({T}, S)")
        if not (dt > 0 and math.isfinite(dt)):
            raise ValueError(f"dt must be positive, got {dt}")
        for name, a in (("root_pos", p), ("joint_pos", q), ("joint_vel", qd)):
            if not np.all(np.isfinite(a)):
                raise ValueError(f"non-finite values in {name}")
        if not canonical:
            quat = quat_canonicalize_rows(quat)
        for name, a in (("root_pos", p), ("root_quat", quat), ("joint_pos", q), ("joint_vel", qd)):
            a.flags.writeable = False
            object.__setattr__(self, name, a)
        object.__setattr__(self, "dt", float(dt))

    def __setattr__(self, name, value):
        raise AttributeError("MotionSequence is immutable")

    def __reduce__(self):
        return (MotionSequence, (self.root_pos, self.root_quat, self.joint_pos, self.joint_vel, self.dt, True))

    @classmethod
    def from_frames(cls, frames: Sequence[RobotState], dt: float = DEFAULT_DT) -> "MotionSequence":
        frames = list(frames)
        if not frames:
            raise ValueError("a motion sequence needs at least one frame")
        S = frames[0].S
        if any(f.S != S for f in frames):
            raise ValueError("all frames must share the same joint dimension")
        return cls(
            [f.root_pos for f in frames],
            [f.root_quat for f in frames],
            [f.joint_pos for f in frames],
            [f.joint_vel for f in frames],
            dt,
            canonical=True,
        )

    @classmethod
    def from_features(cls, x: np.ndarray, dt: float = DEFAULT_DT) -> "MotionSequence":
        """Inverse of :meth:`features` (columns p, quat, q, qd)."""
        x = np.asarray(x, dtype=float)
        S = (x.shape[1] - 7) // 2
        return cls(x[:, :3], x[:, 3:7], x[:, 7:7 + S], x[:, 7 + S:], dt)

    def __len__(self) -> int:
        return len(self.root_pos)

    @property
    def S(self) -> int:
        return self.joint_pos.shape[1]

    def __getitem__(self, i: int) -> RobotState:
        return RobotState(self.root_pos[i], self.root_quat[i], self.joint_pos[i], self.joint_vel[i])

    @property
    def frames(self) -> list[RobotState]:
        return [self[i] for i in range(len(self))]

    def features(self) -> np.ndarray:
        """(T, 7 + 2S) per-frame feature matrix."""
        return np.concatenate([self.root_pos, self.root_quat, self.joint_pos, self.joint_vel], axis=1)

    def __eq__(self, other):
        if not isinstance(other, MotionSequence):
            return NotImplemented
        return self.dt == other.dt and all(
            a.shape == b.shape and np.array_equal(a, b)
            for a, b in zip(
                (self.root_pos, self.root_quat, self.joint_pos, self.joint_vel),
                (other.root_pos, other.root_quat, other.joint_pos, other.joint_vel),
            )
        )

    __hash__ = None

    def __repr__(self):
        return f"MotionSequence(T={len(self)}, S={self.S}, dt={self.dt})"


def concat_sequences(seqs: Iterable[MotionSequence]) -> MotionSequence:
    seqs = list(seqs)
    dt = seqs[0].dt
    if any(s.dt != dt for s in seqs):
        raise ValueError("cannot concatenate sequences with different dt")
    return MotionSequence(
        np.concatenate([s.root_pos for s in seqs]),
        np.concatenate([s.root_quat for s in seqs]),
        np.concatenate([s.joint_pos for s in seqs]),
        np.concatenate([s.joint_vel for s in seqs]),
        dt,
        canonical=True,
    )


def finite_diff(seq: MotionSequence, order: int) -> np.ndarray:
    """Central differences of joint angles, one-sided at the ends.

    Returns a (T, S) array of velocities (order 1) or accelerations (order 2).
    """
    if order not in (1, 2):
        raise ValueError(f"order must be 1 or 2, got {order}")
    return finite_diff_array(seq.joint_pos, seq.dt, order)


def finite_diff_array(q: np.ndarray, dt: float, order: int) -> np.ndarray:
    T = len(q)
    if T < order + 1:
        raise ValueError(f"need at least {order + 1} frames for order-{order} differences, got {T}")
    out = np.empty_like(q, dtype=float)
    if order == 1:
        out[1:-1] = (q[2:] - q[:-2]) / (2.0 * dt)
        out[0] = (q[1] - q[0]) / dt
        out[-1] = (q[-1] - q[-2]) / dt
    else:
        dt2 = dt * dt
        out[1:-1] = (q[2:] - 2.0 * q[1:-1] + q[:-2]) / dt2
        out[0] = out[1]
        out[-1] = out[-2]
    return out


def slice_window(seq: MotionSequence, start: int, length: int) -> MotionSequence:
    if start < 0 or length < 1 or start + length > len(seq):
        raise IndexError(f"window [{start}, {start + length}) out of range for sequence of length {len(seq)}")
    s = slice(start, start + length)
    return MotionSequence(seq.root_pos[s], seq.root_quat[s], seq.joint_pos[s], seq.joint_vel[s],
                          seq.dt, canonical=True)


class ObservationWindow:
    """Exactly ``T_o`` executed frames preceding the current time."""

    __slots__ = ("states",)

    def __init__(self, states: MotionSequence, T_o: int | None = None):
        if T_o is not None and len(states) != T_o:
            raise ValueError(f"observation window must have {T_o} frames, got {len(states)}")
        self.states = states

    def __len__(self):
        return len(self.states)


class ReferenceWindow:
    """Exactly ``T_f`` reference frames starting at the current time."""

    __slots__ = ("states",)

    def __init__(self, states: MotionSequence, T_f: int | None = None):
        if T_f is not None and len(states) != T_f:
            raise ValueError(f"reference window must have {T_f} frames, got {len(states)}")
        self.states = states

    def __len__(self):
        return len(self.states)


# -- canonical text record -------------------------------------------------

def sequence_to_dict(seq: MotionSequence) -> dict:
    return {
        "dt": seq.dt,
        "frames": [
            {"p": p.tolist(), "quat": quat.tolist(), "q": q.tolist(), "qd": qd.tolist()}
            for p, quat, q, qd in zip(seq.root_pos, seq.root_quat, seq.joint_pos, seq.joint_vel)
        ],
    }


def serialize_sequence(seq: MotionSequence) -> str:
    return json.dumps(sequence_to_dict(seq), separators=(",", ":"))


def _vector(frame: dict, key: str, n: int | None, idx: int, line: int | None) -> list:
    field = f"frames[{idx}].{key}"
    if key not in frame:
        raise SequenceParseError("missing field", line, field)
    v = frame[key]
    if not isinstance(v, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
        raise SequenceParseError("expected an array of numbers", line, field)
    if n is not None and len(v) != n:
        raise SequenceParseError(f"expected {n} values, got {len(v)}", line, field)
    if not all(math.isfinite(x) for x in v):
        raise SequenceParseError("non-finite value", line, field)
    return v


def sequence_from_dict(d, line: int | None = None, prefix: str = "") -> MotionSequence:
    def err(msg, field):
        return SequenceParseError(msg, line, prefix + field)

    if not isinstance(d, dict):
        raise err("expected a JSON object", "")
    dt = d.get("dt")
    if not isinstance(dt, (int, float)) or isinstance(dt, bool) or not (dt > 0) or not math.isfinite(dt):
        raise err("dt must be a positive number", "dt")
    frames = d.get("frames")
    if not isinstance(frames, list) or not frames:
        raise err("frames must be a non-empty array", "frames")
    S = None
    cols = {"p": [], "quat": [], "q": [], "qd": []}
    for i, fr in enumerate(frames):
        if not isinstance(fr, dict):
            raise err("expected a frame object", f"frames[{i}]")
        try:
            p = _vector(fr, "p", 3, i, None)
            quat = _vector(fr, "quat", 4, i, None)
            q = _vector(fr, "q", S, i, None)
            if S is None:
                S = len(q)
            qd = _vector(fr, "qd", S, i, None)
        except SequenceParseError as e:
            raise err(str(e).split(" (")[0], e.field) from None
        if math.sqrt(sum(x * x for x in quat)) == 0.0:
            raise err("zero-norm quaternion", f"frames[{i}].quat")
        cols["p"].append(p)
        cols["quat"].append(quat)
        cols["q"].append(q)
        cols["qd"].append(qd)
    return MotionSequence(cols["p"], cols["quat"], cols["q"], cols["qd"], float(dt))


def deserialize_sequence(text: str, line: int | None = None) -> MotionSequence:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise SequenceParseError(f"invalid JSON: {e.msg}", line) from None
    return sequence_from_dict(d, line)
