import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_sequence
from sawmotion.motion import (
    InvalidQuaternionError,
    MotionSequence,
    ObservationWindow,
    ReferenceWindow,
    RobotState,
    SequenceParseError,
    deserialize_sequence,
    finite_diff,
    quat_canonicalize,
    serialize_sequence,
    slice_window,
    yaw_to_quat,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)
small = st.floats(-10, 10, allow_nan=False)
quats = st.lists(finite, min_size=4, max_size=4).filter(lambda q: math.hypot(*q) > 1e-6)


def ramp_sequence(q_of_t, T, dt=0.02):
    q = np.array([q_of_t(i * dt) for i in range(T)], dtype=float).reshape(T, -1)
    S = q.shape[1]
    return MotionSequence(np.zeros((T, 3)), np.tile([1.0, 0, 0, 0], (T, 1)), q, np.zeros((T, S)), dt)


class TestQuaternion:
    @pytest.mark.parametrize("q, expected", [
        ((1, 0, 0, 0), (1, 0, 0, 0)),
        ((-1, 0, 0, 0), (1, 0, 0, 0)),
        ((0, 0, 0, 2), (0, 0, 0, 1)),
        ((0, 0, -3, 0), (0, 0, 1, 0)),
    ])
    def test_examples(self, q, expected):
        assert quat_canonicalize(q).tolist() == list(map(float, expected))

    def test_zero_norm(self):
        with pytest.raises(InvalidQuaternionError):
            quat_canonicalize((0, 0, 0, 0))

    @given(quats)
    def test_idempotent(self, q):
        once = quat_canonicalize(q)
        assert np.array_equal(quat_canonicalize(once), once)

    @given(quats)
    def test_sign_invariant(self, q):
        assert np.array_equal(quat_canonicalize(q), quat_canonicalize(-np.asarray(q)))

    @given(quats)
    def test_unit_and_same_rotation(self, q):
        c = quat_canonicalize(q)
        assert abs(np.linalg.norm(c) - 1) < 1e-9
        u = np.asarray(q) / np.linalg.norm(q)
        assert abs(abs(np.dot(c, u)) - 1) < 1e-9  # parallel up to sign
        assert c[0] > 0 or (c[0] == 0 and c[np.flatnonzero(c)[0]] > 0)

    @pytest.mark.parametrize("yaw, expected", [
        (0.0, (1, 0, 0, 0)),
        (math.pi, (0, 0, 0, 1)),
        (math.pi / 2, (math.sqrt(2) / 2, 0, 0, math.sqrt(2) / 2)),
    ])
    def test_yaw_to_quat(self, yaw, expected):
        assert np.allclose(yaw_to_quat(yaw), expected, atol=1e-15)


class TestRobotState:
    def test_canonicalizes(self):
        s = RobotState([0, 0, 1], [-2, 0, 0, 0], [0.1], [0.0])
        assert s.root_quat.tolist() == [1, 0, 0, 0]
        assert s.S == 1

    def test_read_only(self):
        s = RobotState([0, 0, 1], [1, 0, 0, 0], [0.1, 0.2], [0.0, 0.0])
        with pytest.raises(ValueError):
            s.joint_pos[0] = 3.0

    def test_clamped(self):
        s = RobotState([0, 0, 1], [1, 0, 0, 0], [-5, 0.5, 5], [0, 0, 0])
        assert s.clamped(-1, 1).joint_pos.tolist() == [-1, 0.5, 1]

    def test_bad_shapes(self):
        with pytest.raises(ValueError):
            RobotState([0, 0], [1, 0, 0, 0], [0.1], [0.0])
        with pytest.raises(ValueError):
            RobotState([0, 0, 1], [1, 0, 0, 0], [0.1, 0.2], [0.0])
        with pytest.raises(ValueError):
            RobotState([0, 0, 1], [1, 0, 0, 0], [np.nan], [0.0])


class TestSequence:
    def test_invariants(self, rng):
        seq = random_sequence(rng)
        assert len(seq) == 12 and seq.S == 3 and seq.dt == 0.02
        assert seq.features().shape == (12, 7 + 6)
        assert MotionSequence.from_features(seq.features()) == seq
        assert MotionSequence.from_frames(seq.frames, seq.dt) == seq

    def test_immutable(self, rng):
        seq = random_sequence(rng)
        with pytest.raises(AttributeError):
            seq.dt = 1.0
        with pytest.raises(ValueError):
            seq.joint_pos[0, 0] = 1.0

    def test_rejects_bad(self):
        with pytest.raises(ValueError):
            MotionSequence(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 2)), np.zeros((0, 2)))
        with pytest.raises(ValueError):
            MotionSequence(np.zeros((2, 3)), np.tile([1.0, 0, 0, 0], (2, 1)), np.zeros((2, 2)), np.zeros((2, 2)), 0)
        with pytest.raises(ValueError):
            MotionSequence.from_frames([RobotState([0, 0, 0], [1, 0, 0, 0], [0], [0]),
                                        RobotState([0, 0, 0], [1, 0, 0, 0], [0, 0], [0, 0])])

    def test_windows(self, rng):
        seq = random_sequence(rng, T=25)
        assert len(ObservationWindow(seq, 25)) == 25
        with pytest.raises(ValueError):
            ReferenceWindow(seq, 50)


class TestFiniteDiff:
    def test_constant(self):
        acc = finite_diff(ramp_sequence(lambda t: [0.3, -1.0], 6), 2)
        assert np.array_equal(acc, np.zeros((6, 2)))

    def test_linear_ramp(self):
        c = 0.7
        dt = 0.02
        vel = finite_diff(ramp_sequence(lambda t: [c * t / dt], 8, dt), 1)
        assert np.allclose(vel[1:-1], c / dt, atol=1e-9)

    def test_quadratic(self):
        acc = finite_diff(ramp_sequence(lambda t: [t * t], 5, dt=1.0), 2)
        assert np.allclose(acc[1:-1, 0], 2.0, atol=1e-12)
        assert acc.shape == (5, 1)

    def test_too_short(self):
        with pytest.raises(ValueError):
            finite_diff(ramp_sequence(lambda t: [t], 2), 2)
        with pytest.raises(ValueError):
            finite_diff(ramp_sequence(lambda t: [t], 1), 1)

    @given(st.lists(small, min_size=2, max_size=2), st.lists(small, min_size=2, max_size=2),
           st.integers(3, 20))
    def test_affine_has_zero_acceleration(self, a, b, T):
        acc = finite_diff(ramp_sequence(lambda t: np.add(a, np.multiply(b, t)), T), 2)
        assert np.max(np.abs(acc[1:-1])) < 1e-9


class TestSlice:
    def test_identity(self, rng):
        seq = random_sequence(rng, T=10)
        assert slice_window(seq, 0, 10) == seq

    def test_last(self, rng):
        seq = random_sequence(rng, T=10)
        w = slice_window(seq, 9, 1)
        assert len(w) == 1 and w[0] == seq[9] and w.dt == seq.dt

    def test_bounds(self, rng):
        with pytest.raises(IndexError):
            slice_window(random_sequence(rng, T=10), 5, 10)


class TestSerialization:
    @given(st.integers(1, 15), st.integers(1, 5), st.integers(0, 2 ** 32 - 1))
    def test_round_trip(self, T, S, seed):
        seq = random_sequence(np.random.default_rng(seed), T, S, dt=0.01 * (1 + seed % 3))
        assert deserialize_sequence(serialize_sequence(seq)) == seq

    def test_format(self, rng):
        d = json.loads(serialize_sequence(random_sequence(rng, T=2, S=1)))
        assert set(d) == {"dt", "frames"}
        assert set(d["frames"][0]) == {"p", "quat", "q", "qd"}

    def _record(self):
        return {"dt": 0.02, "frames": [{"p": [0, 0, 1], "quat": [1, 0, 0, 0], "q": [0.1, 0.2], "qd": [0, 0]},
                                       {"p": [0, 0, 1], "quat": [1, 0, 0, 0], "q": [0.1, 0.2], "qd": [0, 0]}]}

    def test_zero_quaternion(self):
        rec = self._record()
        rec["frames"][1]["quat"] = [0, 0, 0, 0]
        with pytest.raises(SequenceParseError) as e:
            deserialize_sequence(json.dumps(rec))
        assert "frames[1].quat" in str(e.value)

    def test_mismatched_S(self):
        rec = self._record()
        rec["frames"][1]["q"] = [0.1]
        rec["frames"][1]["qd"] = [0.0]
        with pytest.raises(SequenceParseError) as e:
            deserialize_sequence(json.dumps(rec))
        assert "frames[1]" in str(e.value)

    def test_malformed(self):
        with pytest.raises(SequenceParseError):
            deserialize_sequence("{not json")
        with pytest.raises(SequenceParseError):
            deserialize_sequence(json.dumps({"frames": []}))
