"""Ground-truth tracking scores and candidate ranking."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .motion import MotionSequence, finite_diff_array, quat_canonicalize_rows

SCORE_FIELDS = ("fall", "a_q", "a_qd", "a_qdd", "a_p", "a_theta")
REGRESSION_FIELDS = SCORE_FIELDS[1:]


@dataclass(frozen=True)
class ScoreVector:
    fall: float
    a_q: float
    a_qd: float
    a_qdd: float
    a_p: float
    a_theta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.fall, self.a_q, self.a_qd, self.a_qdd, self.a_p, self.a_theta])

    @classmethod
    def from_array(cls, a) -> "ScoreVector":
        return cls(*(float(x) for x in a))

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in SCORE_FIELDS}

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreVector":
        missing = [k for k in SCORE_FIELDS if k not in d]
        if missing:
            raise ValueError(f"score vector missing fields {missing}")
        return cls(*(float(d[k]) for k in SCORE_FIELDS))


@dataclass(frozen=True)
class NormStats:
    """Per-component mean/std of the five regression scores."""

    mean: tuple
    std: tuple

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(x) for x in self.mean))
        object.__setattr__(self, "std", tuple(float(x) for x in self.std))
        if len(self.mean) != 5 or len(self.std) != 5:
            raise ValueError("norm stats need 5 means and 5 stds")
        if not all(s > 0 for s in self.std):
            raise ValueError("norm stds must be positive")

    @classmethod
    def fit(cls, targets: np.ndarray) -> "NormStats":
        reg = np.asarray(targets)[:, 1:]
        std = reg.std(axis=0)
        return cls(reg.mean(axis=0), np.where(std > 1e-12, std, 1.0))

    @classmethod
    def identity(cls) -> "NormStats":
        return cls((0.0,) * 5, (1.0,) * 5)

    def standardize(self, reg: np.ndarray) -> np.ndarray:
        return (reg - np.asarray(self.mean)) / np.asarray(self.std)

    def destandardize(self, z: np.ndarray) -> np.ndarray:
        return z * np.asarray(self.std) + np.asarray(self.mean)

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(d["mean"], d["std"])


@dataclass(frozen=True)
class RankWeights:
    w: tuple = (10.0, 1.0, 0.1, 0.1, 1.0, 1.0)
    fall_gate: float = 0.5
    gate_penalty: float = 1e6

    def __post_init__(self):
        object.__setattr__(self, "w", tuple(float(x) for x in self.w))
        if len(self.w) != 6 or any(x < 0 for x in self.w):
            raise ValueError("rank weights must be 6 non-negative numbers")
        if not 0.0 <= self.fall_gate <= 1.0:
            raise ValueError("fall_gate must be in [0, 1]")
        if not self.gate_penalty > 0:
            raise ValueError("gate_penalty must be positive")

    def scaled(self, c: float) -> "RankWeights":
        return RankWeights(tuple(c * x for x in self.w), self.fall_gate, self.gate_penalty)


def _check_pair(reference: MotionSequence, executed: MotionSequence):
    if len(reference) != len(executed):
        raise ValueError(f"length mismatch: reference {len(reference)} vs executed {len(executed)}")
    if reference.S != executed.S:
        raise ValueError(f"joint count mismatch: {reference.S} vs {executed.S}")
    if reference.dt != executed.dt:
        raise ValueError(f"dt mismatch: {reference.dt} vs {executed.dt}")
    if len(reference) < 3:
        raise ValueError("need at least 3 frames to score (acceleration undefined)")


def score_arrays(ref_q, ref_qd, ref_p, ref_quat, ex_q, ex_qd, ex_p, ex_quat, dt: float, fall) -> np.ndarray:
    """Vectorized scores over a leading batch axis; inputs are (..., T, k) arrays."""
    a_q = np.mean((ref_q - ex_q) ** 2, axis=(-2, -1))
    a_qd = np.mean((ref_qd - ex_qd) ** 2, axis=(-2, -1))
    a_p = np.mean((ref_p - ex_p) ** 2, axis=(-2, -1))
    a_theta = np.mean((ref_quat - ex_quat) ** 2, axis=(-2, -1))
    acc = finite_diff_array(np.moveaxis(ex_q, -2, 0), dt, 2)
    a_qdd = np.mean(acc ** 2, axis=(0, -1))
    return np.stack([np.asarray(fall, dtype=float) * np.ones_like(a_q), a_q, a_qd, a_qdd, a_p, a_theta], axis=-1)


def compute_scores(reference: MotionSequence, executed: MotionSequence, fall: bool) -> ScoreVector:
    """Alignment MSEs between reference and executed motion plus executed smoothness.

    Quaternions are compared component-wise after sign canonicalization.
    """
    _check_pair(reference, executed)
    s = score_arrays(reference.joint_pos, reference.joint_vel, reference.root_pos,
                     quat_canonicalize_rows(reference.root_quat),
                     executed.joint_pos, executed.joint_vel, executed.root_pos,
                     quat_canonicalize_rows(executed.root_quat), reference.dt, 1.0 if fall else 0.0)
    return ScoreVector.from_array(s)


def _as_array(s) -> np.ndarray:
    a = s.as_array() if isinstance(s, ScoreVector) else np.asarray(s, dtype=float)
    if a.shape[-1] != 6:
        raise ValueError(f"score vectors have 6 components, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite score")
    return a


def scalarize(s, w: RankWeights, norm: NormStats) -> float:
    """Weighted sum on standardized scores plus the fall gate; lower is better."""
    a = _as_array(s)
    return float(scalarize_batch(a[None], w, norm)[0])


def scalarize_batch(scores: np.ndarray, w: RankWeights, norm: NormStats) -> np.ndarray:
    a = _as_array(scores)
    z = np.concatenate([a[:, :1], norm.standardize(a[:, 1:])], axis=1)
    out = z @ np.asarray(w.w)
    return out + np.where(a[:, 0] > w.fall_gate, w.gate_penalty, 0.0)


def rank_candidates(scores, w: RankWeights, norm: NormStats) -> list[int]:
    """Indices sorted best-first; ties keep input order."""
    if len(scores) == 0:
        raise ValueError("no candidates to rank")
    arr = np.stack([_as_array(s) for s in scores])
    vals = scalarize_batch(arr, w, norm)
    return sorted(range(len(vals)), key=lambda i: vals[i])
