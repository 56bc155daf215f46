"""Synthetic reference motions, candidate editing and dataset building.

Each task family is a sinusoidal joint pattern around a shared rest pose
plus a root path.  ``difficulty`` moves amplitude and frequency linearly
from a feasible baseline to an extreme the default tracker cannot follow.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Iterable, Sequence

import numpy as np

from . import sim
from .motion import (
    DEFAULT_DT,
    MotionSequence,
    ReferenceWindow,
    RobotState,
    sequence_from_dict,
    quat_to_yaw,
    sequence_to_dict,
    yaws_to_quats,
)
from .scoring import ScoreVector, score_arrays

log = logging.getLogger(__name__)

FAMILIES = ("stand", "walk", "squat", "jump", "reach", "spin")

T_OBS = 25  # 0.5 s at 50 Hz
RAMP_S = 2.0
REATTACH_FRACTION = 0.25


def horizon_frames(horizon_s: float, dt: float = DEFAULT_DT) -> int:
    return int(round(horizon_s / dt))


def derive_seed(root: int, label: str) -> int:
    """Stable 63-bit substream seed from a root seed and a label."""
    h = hashlib.blake2b(f"{int(root)}/{label}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "little") >> 1


def rest_pose(S: int) -> np.ndarray:
    """Slightly crouched stance: hip, knee, ankle triples then arms at zero."""
    rest = np.zeros(S)
    n_leg = _n_leg(S)
    for j in range(n_leg):
        rest[j] = (-0.2, 0.4, -0.2)[j % 3]
    return rest


def _n_leg(S: int) -> int:
    return max(1, (3 * S) // 4)


def _sides(S: int, n_leg: int) -> np.ndarray:
    """0 for left, 1 for right: legs split in halves, arms alternate."""
    side = np.zeros(S)
    if n_leg > 1:
        side[n_leg // 2:n_leg] = 1.0
    side[n_leg:] = np.arange(S - n_leg) % 2
    return side


@dataclass(frozen=True)
class FamilyProfile:
    amp: tuple  # (difficulty 0, difficulty 1), rad
    freq: tuple  # Hz
    leg_w: float
    arm_w: float
    antiphase: bool  # left/right half-cycle offset
    random_phase: bool
    speed: tuple = (0.0, 0.0)  # root m/s
    yaw_rate: tuple = (0.0, 0.0)  # rad/s
    bounce: float = 0.0  # root z amplitude per rad of joint amplitude


PROFILES = {
    "stand": FamilyProfile((0.0, 1.7), (0.3, 4.8), 1.0, 1.0, False, True),
    "walk": FamilyProfile((0.15, 1.6), (0.8, 3.8), 1.0, 0.8, True, False, speed=(0.3, 1.4)),
    "squat": FamilyProfile((0.3, 1.8), (0.3, 3.6), 1.0, 0.7, False, False, bounce=-0.08),
    "jump": FamilyProfile((0.15, 1.5), (1.0, 4.5), 1.0, 0.8, False, False, bounce=0.1),
    "reach": FamilyProfile((0.2, 1.6), (0.4, 3.7), 0.9, 1.3, True, False),
    "spin": FamilyProfile((0.2, 1.55), (0.5, 4.0), 0.9, 1.0, True, False, yaw_rate=(0.5, 2.8)),
}


@dataclass(frozen=True)
class TaskSpec:
    family: str
    difficulty: float
    duration_s: float = 6.0
    root_path: tuple | None = None  # ((x, y, yaw), ...)
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown task family {self.family!r}; expected one of {FAMILIES}")
        if not 0.0 <= self.difficulty <= 1.0:
            raise ValueError(f"difficulty must be in [0, 1], got {self.difficulty}")
        if not 3.0 <= self.duration_s <= 12.0:
            raise ValueError(f"duration_s must be in [3, 12], got {self.duration_s}")
        if self.root_path is not None:
            path = tuple(tuple(float(v) for v in w) for w in self.root_path)
            if len(path) < 2 or any(len(w) != 3 for w in path):
                raise ValueError("root_path needs >= 2 waypoints of (x, y, yaw)")
            object.__setattr__(self, "root_path", path)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["root_path"] = None if self.root_path is None else [list(w) for w in self.root_path]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(**d)


def _lerp(pair, d):
    return pair[0] + (pair[1] - pair[0]) * d


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x), 6.0 * x * (1.0 - x)


def generate_reference(spec: TaskSpec, S: int = 8, dt: float = DEFAULT_DT, h0: float = 0.8) -> MotionSequence:
    prof = PROFILES[spec.family]
    rng = np.random.default_rng(derive_seed(spec.seed, "reference"))
    T = int(round(spec.duration_s / dt))
    t = np.arange(T) * dt
    d = spec.difficulty

    amp = _lerp(prof.amp, d)
    omega = 2.0 * math.pi * _lerp(prof.freq, d)
    n_leg = _n_leg(S)
    w = np.where(np.arange(S) < n_leg, prof.leg_w, prof.arm_w)
    if prof.random_phase:
        phase = rng.uniform(0.0, 2.0 * math.pi, S)
    else:
        phase = np.full(S, rng.uniform(0.0, 2.0 * math.pi))
        if prof.antiphase:
            phase = phase + math.pi * _sides(S, n_leg)

    # ramp-in envelope and a slow +-10% amplitude drift
    env, denv = _smoothstep(t / RAMP_S)
    denv = denv / RAMP_S
    drift_w = 2.0 * math.pi / 3.0
    drift_ph = rng.uniform(0.0, 2.0 * math.pi)
    m = 1.0 + 0.1 * np.sin(drift_w * t + drift_ph)
    dm = 0.1 * drift_w * np.cos(drift_w * t + drift_ph)
    g, dg = env * m, denv * m + env * dm

    arg = omega * t[:, None] + phase[None, :]
    sin, cos = np.sin(arg), np.cos(arg)
    rest = rest_pose(S)
    q = rest + (amp * w) * g[:, None] * sin
    qd = (amp * w) * (dg[:, None] * sin + g[:, None] * omega * cos)

    z = h0 + prof.bounce * amp * g * np.abs(np.sin(omega * t + phase[0]))
    xy, yaw = _root_path(spec, prof, t, rng)
    p = np.column_stack([xy, z])
    return MotionSequence(p, yaws_to_quats(yaw), q, qd, dt, canonical=True)


def _root_path(spec: TaskSpec, prof: FamilyProfile, t: np.ndarray, rng) -> tuple[np.ndarray, np.ndarray]:
    heading = rng.uniform(-math.pi, math.pi)
    if spec.root_path is not None:
        wp = np.asarray(spec.root_path)
        u = np.linspace(0.0, len(wp) - 1, len(t))
        i = np.minimum(u.astype(int), len(wp) - 2)
        s, _ = _smoothstep(u - i)
        xy = wp[i, :2] + (wp[i + 1, :2] - wp[i, :2]) * s[:, None]
        yaw = wp[i, 2] + (wp[i + 1, 2] - wp[i, 2]) * s
        return xy, yaw
    env, _ = _smoothstep(t / RAMP_S)
    speed = _lerp(prof.speed, spec.difficulty)
    yaw_rate = _lerp(prof.yaw_rate, spec.difficulty)
    # distance / heading integrate the ramped rates
    dist = speed * np.concatenate([[0.0], np.cumsum(env[1:] * np.diff(t))])
    yaw = heading + yaw_rate * np.concatenate([[0.0], np.cumsum(env[1:] * np.diff(t))])
    xy = np.column_stack([dist * math.cos(heading), dist * math.sin(heading)])
    return xy, yaw


def sample_specs(n: int, seed: int, difficulty=(0.0, 1.0), families: Sequence[str] = FAMILIES,
                 duration=(3.0, 12.0)) -> list[TaskSpec]:
    rng = np.random.default_rng(derive_seed(seed, "specs"))
    specs = []
    for i in range(n):
        fam = families[int(rng.integers(len(families)))]
        d = float(rng.uniform(*difficulty))
        dur = float(rng.uniform(*duration))
        specs.append(TaskSpec(fam, d, round(dur, 2), None, derive_seed(seed, f"spec/{i}")))
    return specs


# -- candidate editing -----------------------------------------------------

@dataclass(frozen=True)
class EditParams:
    scale: float = 1.0  # joint deviation scale around rest
    noise_amp: tuple = ()  # per-joint, per-sinusoid amplitudes, shape (S, 2)
    noise_freq: tuple = ()  # Hz, shape (2,)
    noise_phase: tuple = ()  # shape (S, 2)

    @property
    def is_blend(self) -> bool:
        return self.scale == 1.0 and not self.noise_amp


def sample_edit_params(n: int, S: int, seed: int) -> list[EditParams]:
    """Candidate 0 is the pure blend; the rest scale and perturb."""
    rng = np.random.default_rng(derive_seed(seed, "edit"))
    out = [EditParams()]
    for _ in range(n - 1):
        lam = float(rng.uniform(0.4, 1.0))
        amp = rng.uniform(0.0, 0.05, (S, 2))  # two terms of <= 0.05 keep the sum <= 0.1 rad
        freq = rng.uniform(0.2, 1.0, 2)
        ph = rng.uniform(0.0, 2.0 * math.pi, (S, 2))
        out.append(EditParams(lam, tuple(map(tuple, amp)), tuple(freq), tuple(map(tuple, ph))))
    return out


def _hermite(n_frames: int, K: int):
    """Blend weights h00 and h10 (with their time derivatives per frame) for k < K."""
    tau = np.arange(n_frames) / K
    tau = np.minimum(tau, 1.0)
    h00 = 2 * tau ** 3 - 3 * tau ** 2 + 1
    h10 = tau ** 3 - 2 * tau ** 2 + tau
    dh00 = (6 * tau ** 2 - 6 * tau) / K
    dh10 = (3 * tau ** 2 - 4 * tau + 1) / K
    return h00, h10, dh00, dh10


def apply_edit(current: RobotState, future: MotionSequence, params: EditParams, K: int,
               rest: np.ndarray | None = None, t0: float = 0.0) -> MotionSequence:
    """Edit ``future`` and blend it in from ``current`` over ``K`` frames.

    The blend is a cubic Hermite correction matching position and velocity
    of ``current`` at frame 0 and vanishing (with zero slope) from frame K.
    Frame 0 of the result is ``current`` exactly.
    """
    if current.S != future.S:
        raise ValueError(f"current pose has {current.S} joints, future has {future.S}")
    dt = future.dt
    T = len(future)
    rest = rest_pose(future.S) if rest is None else rest
    q = rest + params.scale * (future.joint_pos - rest)
    qd = params.scale * future.joint_vel
    if params.noise_amp:
        t = t0 + np.arange(T) * dt
        amp = np.asarray(params.noise_amp)
        om = 2.0 * math.pi * np.asarray(params.noise_freq)
        ph = np.asarray(params.noise_phase)
        arg = t[:, None, None] * om[None, None, :] + ph[None]
        q = q + np.sum(amp[None] * np.sin(arg), axis=2)
        qd = qd + np.sum(amp[None] * om[None, None, :] * np.cos(arg), axis=2)

    h00, h10, dh00, dh10 = _hermite(T, K)
    span = K * dt  # d tau / dt = 1 / span
    dq0 = current.joint_pos - q[0]
    dv0 = (current.joint_vel - qd[0]) * span
    q = q + h00[:, None] * dq0 + h10[:, None] * dv0
    qd = qd + (dh00[:, None] * dq0 + dh10[:, None] * dv0) / dt
    dp0 = current.root_pos - future.root_pos[0]
    p = future.root_pos + h00[:, None] * dp0
    quat = np.array(future.root_quat)
    yaw_f = np.unwrap(quat_to_yaw(future.root_quat))
    dyaw0 = float(math.remainder(quat_to_yaw(current.root_quat) - yaw_f[0], 2.0 * math.pi))
    if dyaw0 != 0.0:
        quat = yaws_to_quats(yaw_f + h00 * dyaw0)

    q[0] = current.joint_pos
    qd[0] = current.joint_vel
    p[0] = current.root_pos
    quat[0] = current.root_quat
    return MotionSequence(p, quat, q, qd, dt, canonical=True)


def reattach_frames(T_f: int) -> int:
    return max(1, int(round(REATTACH_FRACTION * T_f)))


def edit_candidates(current: RobotState, original_future: ReferenceWindow | MotionSequence, n: int,
                    seed: int, rest: np.ndarray | None = None, reattach: int | None = None) -> list[MotionSequence]:
    """``n`` edited versions of the upcoming reference, all starting at ``current``.

    The blend re-attaches after ``reattach`` frames, by default a quarter of
    the window.  Passing it explicitly lets a caller edit a longer stretch of
    the reference whose first window matches the default-length edit.
    """
    if n < 1:
        raise ValueError("need at least one candidate")
    fut = original_future.states if isinstance(original_future, ReferenceWindow) else original_future
    K = reattach_frames(len(fut)) if reattach is None else int(reattach)
    if K < 1:
        raise ValueError("reattach must be at least one frame")
    return [apply_edit(current, fut, p, K, rest) for p in sample_edit_params(n, fut.S, seed)]


def root_path_rmse(a: MotionSequence, b: MotionSequence) -> float:
    d = a.root_pos[:, :2] - b.root_pos[:, :2]
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


# -- dataset ---------------------------------------------------------------

class Dataset:
    """Columnar set of (observation, reference, target) records.

    ``obs`` is (N, T_o, D), ``ref`` (N, T_f, D) with per-frame features
    [root_pos, root_quat, joint_pos, joint_vel]; ``target`` (N, 6).
    """

    def __init__(self, obs, ref, target, meta: list[dict], dt: float = DEFAULT_DT):
        self.obs = np.asarray(obs, dtype=float)
        self.ref = np.asarray(ref, dtype=float)
        self.target = np.asarray(target, dtype=float)
        self.meta = list(meta)
        self.dt = dt
        n = len(self.target)
        if not (len(self.obs) == len(self.ref) == len(self.meta) == n):
            raise ValueError("dataset columns have different lengths")

    def __len__(self):
        return len(self.target)

    @property
    def T_o(self) -> int:
        return self.obs.shape[1]

    @property
    def T_f(self) -> int:
        return self.ref.shape[1]

    @property
    def horizon_s(self) -> float:
        return round(self.T_f * self.dt, 6)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.obs[idx], self.ref[idx], self.target[idx], [self.meta[i] for i in idx], self.dt)

    @classmethod
    def concat(cls, parts: Sequence["Dataset"]) -> "Dataset":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ValueError("nothing to concatenate")
        return cls(np.concatenate([p.obs for p in parts]), np.concatenate([p.ref for p in parts]),
                   np.concatenate([p.target for p in parts]), [m for p in parts for m in p.meta], parts[0].dt)

    def fall_fraction(self) -> float:
        return float(np.mean(self.target[:, 0])) if len(self) else 0.0

    def stats(self) -> dict:
        per_family = {}
        for fam in FAMILIES:
            idx = [i for i, m in enumerate(self.meta) if m["family"] == fam]
            if idx:
                per_family[fam] = {"count": len(idx), "fall_fraction": float(np.mean(self.target[idx, 0]))}
        return {"count": len(self), "fall_fraction": self.fall_fraction(), "per_family": per_family}

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.obs, self.ref, self.target):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]

    def balanced(self, seed: int, fraction: float = 0.5, size: int | None = None) -> "Dataset":
        """Stratified subsample with the requested fall fraction.

        Keeps as many records as possible, or exactly ``size`` when given.
        """
        rng = np.random.default_rng(seed)
        fall = np.flatnonzero(self.target[:, 0] > 0.5)
        ok = np.flatnonzero(self.target[:, 0] <= 0.5)
        n_fall = min(len(fall), int(math.floor(len(ok) * fraction / (1.0 - fraction))))
        n_ok = min(len(ok), int(round(n_fall * (1.0 - fraction) / fraction)))
        if size is not None:
            if size > n_fall + n_ok:
                raise ValueError(f"cannot draw {size} balanced records, only {n_fall + n_ok} available")
            n_fall = int(round(size * fraction))
            n_ok = size - n_fall
        keep = np.concatenate([rng.choice(fall, n_fall, replace=False), rng.choice(ok, n_ok, replace=False)])
        return self.subset(np.sort(keep))

    # JSON Lines: one record per line
    def record_dict(self, i: int) -> dict:
        return {
            "observation": sequence_to_dict(MotionSequence.from_features(self.obs[i], self.dt)),
            "reference": sequence_to_dict(MotionSequence.from_features(self.ref[i], self.dt)),
            "target": ScoreVector.from_array(self.target[i]).to_dict(),
            "meta": self.meta[i],
        }

    def write_jsonl(self, path) -> None:
        with open(path, "w") as f:
            for i in range(len(self)):
                f.write(json.dumps(self.record_dict(i), separators=(",", ":")))
                f.write("\n")

    @classmethod
    def read_jsonl(cls, path) -> "Dataset":
        from .motion import SequenceParseError

        obs, ref, tgt, meta = [], [], [], []
        dt = None
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    d = json.loads(line)
                except json.JSONDecodeError as e:
                    raise SequenceParseError(f"invalid JSON: {e.msg}", lineno) from None
                for key in ("observation", "reference", "target", "meta"):
                    if key not in d:
                        raise SequenceParseError("missing field", lineno, key)
                o = sequence_from_dict(d["observation"], lineno, "observation.")
                r = sequence_from_dict(d["reference"], lineno, "reference.")
                if dt is None:
                    dt = o.dt
                if o.dt != dt or r.dt != dt:
                    raise SequenceParseError("inconsistent dt", lineno, "dt")
                try:
                    s = ScoreVector.from_dict(d["target"])
                except (ValueError, TypeError) as e:
                    raise SequenceParseError(str(e), lineno, "target") from None
                obs.append(o.features())
                ref.append(r.features())
                tgt.append(s.as_array())
                meta.append(d["meta"])
        if not tgt:
            raise ValueError(f"{path}: empty dataset")
        try:
            return cls(np.stack(obs), np.stack(ref), np.stack(tgt), meta, dt)
        except ValueError as e:
            raise ValueError(f"{path}: records have inconsistent window shapes ({e})") from None


@dataclass
class BuildStats:
    count: int = 0
    rollouts: int = 0
    rollout_falls: int = 0
    skipped_specs: int = 0
    excluded_windows: int = 0

    @property
    def rollout_fall_fraction(self) -> float:
        return self.rollout_falls / self.rollouts if self.rollouts else 0.0


def _spec_records(args):
    spec, robot, behaviors, windows, T_o, T_f, dt = args
    ref = generate_reference(spec, robot.S, dt, robot.h0)
    L = len(ref)
    obs_l, ref_l, tgt_l, meta_l = [], [], [], []
    falls = 0
    excluded = 0
    if L < T_o + T_f:
        return None
    ref_feat = ref.features()
    ref_quat = ref.root_quat
    for b in range(behaviors):
        st = sim.init_state(robot, ref[0], jitter_seed=derive_seed(spec.seed, f"behavior/{b}"))
        res = sim.rollout(robot, st, ref)
        ex = res.executed
        falls += int(res.fall)
        hi = L - T_f
        if res.fall:
            hi = min(hi, res.fall_frame)  # a window must start before (or at) the fall
            excluded += max(0, (L - T_f) - hi)
        if hi < T_o:
            continue
        rng = np.random.default_rng(derive_seed(spec.seed, f"windows/{b}"))
        n_avail = hi - T_o + 1
        starts = np.sort(rng.choice(n_avail, size=min(windows, n_avail), replace=False) + T_o)
        ex_feat = ex.features()
        for t in starts:
            t = int(t)
            w = slice(t, t + T_f)
            fall_in = bool(res.fall and t <= res.fall_frame < t + T_f)
            s = score_arrays(ref.joint_pos[w], ref.joint_vel[w], ref.root_pos[w], ref_quat[w],
                             ex.joint_pos[w], ex.joint_vel[w], ex.root_pos[w], ex.root_quat[w], dt,
                             1.0 if fall_in else 0.0)
            obs_l.append(ex_feat[t - T_o:t])
            ref_l.append(ref_feat[w])
            tgt_l.append(s)
            meta_l.append({"family": spec.family, "difficulty": spec.difficulty, "seed": spec.seed,
                           "behavior": b, "t_index": t, "horizon_s": round(T_f * dt, 6)})
    return obs_l, ref_l, tgt_l, meta_l, falls, excluded


def build_dataset(specs: Sequence[TaskSpec], robot: sim.RobotModel | None = None, behaviors_per_ref: int = 3,
                  horizon_s: float = 1.0, windows_per_rollout: int = 3, out_path=None, dt: float = DEFAULT_DT,
                  T_o: int = T_OBS, workers: int = 1) -> tuple[Dataset, BuildStats]:
    """Roll out every spec ``behaviors_per_ref`` times and cut scored windows.

    Window starts are drawn uniformly among admissible starts: at least
    ``T_o`` frames in, the full horizon inside the rollout, and not after
    the fall.  Output order follows ``specs`` regardless of ``workers``.
    """
    specs = list(specs)
    if not specs:
        raise ValueError("no task specs given")
    robot = robot or sim.RobotModel()
    T_f = horizon_frames(horizon_s, dt)
    jobs = [(s, robot, behaviors_per_ref, windows_per_rollout, T_o, T_f, dt) for s in specs]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_spec_records, jobs, chunksize=16))
    else:
        results = [_spec_records(j) for j in jobs]

    stats = BuildStats()
    obs, ref, tgt, meta = [], [], [], []
    for r in results:
        if r is None:
            stats.skipped_specs += 1
            continue
        o, f, t, m, falls, excl = r
        obs += o
        ref += f
        tgt += t
        meta += m
        stats.rollouts += behaviors_per_ref
        stats.rollout_falls += falls
        stats.excluded_windows += excl
    if stats.skipped_specs:
        log.warning("%d specs shorter than %d frames were skipped", stats.skipped_specs, T_o + T_f)
    D = 7 + 2 * robot.S
    ds = Dataset(np.array(obs).reshape(-1, T_o, D), np.array(ref).reshape(-1, T_f, D),
                 np.array(tgt).reshape(-1, 6), meta, dt)
    stats.count = len(ds)
    if out_path is not None:
        ds.write_jsonl(out_path)
    return ds, stats
