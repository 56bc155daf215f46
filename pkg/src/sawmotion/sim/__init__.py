"""Deterministic capability-limited tracker with a balance proxy.

The robot follows a reference with saturated PD control on joints, root
xy and heading.  Tracking stress (squared joint error plus a penalty for
commanded root speed above ``root_v_max``) pushes the root height down;
the robot has fallen once the height drops below ``h_fall``.

The per-frame loop runs in a compiled kernel when available and in
:mod:`._pykernel` otherwise; both give bit-identical results.  Set
``SAWMOTION_BACKEND=python`` to force the fallback.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from ..motion import (
    MotionSequence,
    RobotState,
    finite_diff_array,
    quat_to_yaw,
    yaw_to_quat,
    yaws_to_quats,
)
from . import _pykernel

log = logging.getLogger(__name__)

try:
    from . import _ckernel
except ImportError:  # pragma: no cover - depends on the build
    _ckernel = None

_BACKENDS = {"python": _pykernel}
if _ckernel is not None:
    _BACKENDS["cython"] = _ckernel

BACKEND = os.environ.get("SAWMOTION_BACKEND") or ("cython" if _ckernel is not None else "python")
if BACKEND not in _BACKENDS:
    log.warning("backend %r unavailable, using python", BACKEND)
    BACKEND = "python"
_kernel = _BACKENDS[BACKEND]


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def set_backend(name: str) -> None:
    global BACKEND, _kernel
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} not available (have {available_backends()})")
    BACKEND = name
    _kernel = _BACKENDS[name]


class SimInputError(ValueError):
    pass


@dataclass(frozen=True)
class RobotModel:
    S: int = 8
    joint_lo: tuple = (-2.5,) * 8
    joint_hi: tuple = (2.5,) * 8
    kp: float = 100.0
    kd: float = 20.0
    a_max: float = 40.0
    v_max: float = 6.0
    root_a_max: float = 10.0
    root_v_max: float = 1.5
    yaw_rate_max: float = 3.0
    h0: float = 0.8
    h_fall: float = 0.4
    k_rec: float = 30.0
    k_fall: float = 25.0
    c_d: float = 8.0
    e_cap: float = 0.05
    c_v: float = 2.0

    def __post_init__(self):
        lo = tuple(float(x) for x in self.joint_lo)
        hi = tuple(float(x) for x in self.joint_hi)
        object.__setattr__(self, "joint_lo", lo)
        object.__setattr__(self, "joint_hi", hi)
        if len(lo) != self.S or len(hi) != self.S:
            raise ValueError(f"joint limits must have {self.S} entries")
        if any(a >= b for a, b in zip(lo, hi)):
            raise ValueError("joint_lo must be < joint_hi componentwise")
        for name in ("kp", "kd", "a_max", "v_max", "root_a_max", "root_v_max", "yaw_rate_max",
                     "h0", "h_fall", "k_rec", "k_fall", "c_d", "e_cap", "c_v"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if not self.h_fall < self.h0:
            raise ValueError("h_fall must be below h0")

    @property
    def yaw_gain(self) -> float:
        # heading loop bandwidth matches the joint PD natural frequency
        return math.sqrt(self.kp)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["joint_lo"] = list(self.joint_lo)
        d["joint_hi"] = list(self.joint_hi)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RobotModel":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown robot_model fields: {sorted(unknown)}")
        return cls(**d)

    def params(self, dt: float) -> np.ndarray:
        return np.array([self.kp, self.kd, self.a_max, self.v_max, self.root_a_max, self.root_v_max,
                         self.yaw_rate_max, self.h0, self.h_fall, self.k_rec, self.k_fall, self.c_d,
                         self.e_cap, self.c_v, dt, self.yaw_gain])


@dataclass(frozen=True, eq=False)
class SimState:
    """Tracker state.  ``yaw`` is the unwrapped heading; ``robot.root_quat`` its quaternion."""

    robot: RobotState
    height_vel: float = 0.0
    fallen: bool = False
    fall_frame: int | None = None
    root_vel: tuple = (0.0, 0.0)
    yaw: float = 0.0
    frame: int = 0

    def _vectors(self):
        q = np.array(self.robot.joint_pos)
        qd = np.array(self.robot.joint_vel)
        p = self.robot.root_pos
        s = np.array([p[0], p[1], self.root_vel[0], self.root_vel[1], self.yaw, p[2], self.height_vel])
        return q, qd, s

    def __eq__(self, other):
        if not isinstance(other, SimState):
            return NotImplemented
        return (self.robot == other.robot and self.height_vel == other.height_vel
                and self.fallen == other.fallen and self.fall_frame == other.fall_frame
                and tuple(self.root_vel) == tuple(other.root_vel) and self.yaw == other.yaw
                and self.frame == other.frame)

    __hash__ = None


def _state_from_vectors(q, qd, s, fall_frame: int, frame: int) -> SimState:
    robot = RobotState(np.array([s[0], s[1], s[5]]), yaw_to_quat(float(s[4])), q, qd)
    return SimState(robot, float(s[6]), fall_frame >= 0, fall_frame if fall_frame >= 0 else None,
                    (float(s[2]), float(s[3])), float(s[4]), frame)


def init_state(model: RobotModel, pose: RobotState, jitter_seed: int | None = None) -> SimState:
    """Rest state at the nominal height, optionally with seeded joint jitter of +-0.05."""
    if pose.S != model.S:
        raise SimInputError(f"pose has {pose.S} joints, model has {model.S}")
    q = np.array(pose.joint_pos)
    qd = np.array(pose.joint_vel)
    if jitter_seed is not None:
        rng = np.random.default_rng(jitter_seed)
        q = q + rng.uniform(-0.05, 0.05, model.S)
        qd = qd + rng.uniform(-0.05, 0.05, model.S)
    q = np.clip(q, model.joint_lo, model.joint_hi)
    yaw = float(quat_to_yaw(pose.root_quat))
    s = np.array([pose.root_pos[0], pose.root_pos[1], 0.0, 0.0, yaw, model.h0, 0.0])
    return _state_from_vectors(q, qd, s, -1, 0)


@dataclass(frozen=True, eq=False)
class PreparedReference:
    """Kernel-ready reference arrays; ``root`` rows are [px, py, vx, vy, yaw, yaw_rate]."""

    q: np.ndarray
    qd: np.ndarray
    root: np.ndarray
    dt: float
    source: MotionSequence = field(repr=False)

    def __len__(self):
        return len(self.q)


def prepare_reference(ref: MotionSequence, yaw_anchor: float | None = None) -> PreparedReference:
    """Derive root velocity and unwrapped heading targets from a reference.

    With ``yaw_anchor`` the heading is shifted by whole turns so that its
    first frame lies within pi of the anchor.
    """
    for name in ("root_pos", "root_quat", "joint_pos", "joint_vel"):
        if not np.all(np.isfinite(getattr(ref, name))):
            raise SimInputError(f"non-finite reference values in {name}")
    T = len(ref)
    root = np.zeros((T, 6))
    root[:, :2] = ref.root_pos[:, :2]
    yaw = np.unwrap(quat_to_yaw(ref.root_quat))
    if yaw_anchor is not None:
        yaw = yaw + 2.0 * math.pi * round((yaw_anchor - yaw[0]) / (2.0 * math.pi))
    root[:, 4] = yaw
    if T >= 2:
        root[:, 2:4] = finite_diff_array(ref.root_pos[:, :2], ref.dt, 1)
        root[:, 5] = finite_diff_array(yaw[:, None], ref.dt, 1)[:, 0]
    return PreparedReference(np.ascontiguousarray(ref.joint_pos), np.ascontiguousarray(ref.joint_vel),
                             root, ref.dt, ref)


@dataclass
class Segment:
    """Raw kernel output for a run of frames."""

    q: np.ndarray
    qd: np.ndarray
    s: np.ndarray

    def to_sequence(self, dt: float) -> MotionSequence:
        p = np.stack([self.s[:, 0], self.s[:, 1], self.s[:, 5]], axis=1)
        return MotionSequence(p, yaws_to_quats(self.s[:, 4]), self.q, self.qd, dt, canonical=True)


def run_prepared(model: RobotModel, state: SimState, ref: PreparedReference,
                 start: int = 0, stop: int | None = None) -> tuple[SimState, Segment]:
    """Step through ``ref[start:stop]`` from ``state``; the workhorse behind rollout."""
    if ref.q.shape[1] != model.S or state.robot.S != model.S:
        raise SimInputError(f"dimension mismatch: model S={model.S}, reference S={ref.q.shape[1]}, "
                            f"state S={state.robot.S}")
    stop = len(ref) if stop is None else stop
    n = stop - start
    q, qd, s = state._vectors()
    out_q = np.empty((n, model.S))
    out_qd = np.empty((n, model.S))
    out_s = np.empty((n, 7))
    ff = -1 if state.fall_frame is None else state.fall_frame
    ff = _kernel.rollout(model.params(ref.dt), np.asarray(model.joint_lo), np.asarray(model.joint_hi),
                         q, qd, s, ff, state.frame, ref.q[start:stop], ref.qd[start:stop],
                         ref.root[start:stop], out_q, out_qd, out_s)
    return _state_from_vectors(q, qd, s, ff, state.frame + n), Segment(out_q, out_qd, out_s)


def step(model: RobotModel, state: SimState, ref: RobotState,
         ref_root_vel=(0.0, 0.0), ref_yaw_rate: float = 0.0, dt: float = 0.02) -> SimState:
    """Advance one frame toward ``ref``.

    A single reference frame carries no root velocity or heading rate, so
    those feedforward terms are passed explicitly (default zero).
    """
    if ref.S != model.S:
        raise SimInputError(f"reference has {ref.S} joints, model has {model.S}")
    vals = [*ref.root_pos, *ref.root_quat, *ref.joint_pos, *ref.joint_vel, *ref_root_vel, ref_yaw_rate]
    if not all(math.isfinite(v) for v in vals):
        raise SimInputError("non-finite reference values")
    yaw = float(quat_to_yaw(ref.root_quat))
    yaw = yaw + 2.0 * math.pi * round((state.yaw - yaw) / (2.0 * math.pi))
    root = np.array([[ref.root_pos[0], ref.root_pos[1], ref_root_vel[0], ref_root_vel[1], yaw, ref_yaw_rate]])
    prepared = PreparedReference(ref.joint_pos[None, :].copy(), ref.joint_vel[None, :].copy(), root, dt,
                                 source=None)
    new, _ = run_prepared(model, state, prepared)
    return new


@dataclass(frozen=True, eq=False)
class RolloutResult:
    executed: MotionSequence
    fall: bool
    fall_frame: int | None
    final: SimState
    heights: np.ndarray

    def __iter__(self):
        return iter((self.executed, self.fall, self.fall_frame))


def rollout(model: RobotModel, init: SimState, ref: MotionSequence) -> RolloutResult:
    """Execute ``ref`` from ``init``; frame t of the result is the state after reference frame t."""
    if len(ref) < 1:
        raise SimInputError("empty reference")
    if ref.S != model.S:
        raise SimInputError(f"reference has {ref.S} joints, model has {model.S}")
    prepared = prepare_reference(ref, yaw_anchor=init.yaw)
    final, seg = run_prepared(model, init, prepared)
    return RolloutResult(seg.to_sequence(ref.dt), final.fallen, final.fall_frame, final, seg.s[:, 5].copy())
