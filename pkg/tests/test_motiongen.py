import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sawmotion import motiongen as mg
from sawmotion import sim
from sawmotion.motion import MotionSequence, RobotState, quat_to_yaw


def rollout(spec, robot=None, b=0):
    robot = robot or sim.RobotModel()
    ref = mg.generate_reference(spec)
    st0 = sim.init_state(robot, ref[0], jitter_seed=mg.derive_seed(spec.seed, f"behavior/{b}"))
    return sim.rollout(robot, st0, ref)


class TestReference:
    @pytest.mark.parametrize("family", mg.FAMILIES)
    def test_deterministic(self, family):
        spec = mg.TaskSpec(family, 0.6, 4.0, seed=3)
        assert mg.generate_reference(spec) == mg.generate_reference(spec)

    def test_length_and_shape(self):
        ref = mg.generate_reference(mg.TaskSpec("walk", 0.3, 5.0, seed=1), S=6)
        assert len(ref) == 250 and ref.S == 6

    def test_root_path_followed(self):
        path = ((0.0, 0.0, 0.0), (1.0, 0.5, 0.3))
        ref = mg.generate_reference(mg.TaskSpec("walk", 0.2, 4.0, path, seed=0))
        assert np.allclose(ref.root_pos[-1, :2], [1.0, 0.5], atol=1e-9)

    @pytest.mark.parametrize("kw", [{"family": "fly"}, {"difficulty": 1.5}, {"duration_s": 1.0},
                                    {"root_path": ((0, 0, 0),)}])
    def test_invalid_spec(self, kw):
        base = dict(family="walk", difficulty=0.5)
        with pytest.raises(ValueError):
            mg.TaskSpec(**{**base, **kw})

    def test_spec_round_trip(self):
        s = mg.TaskSpec("spin", 0.4, 5.0, ((0, 0, 0), (1, 1, 1)), seed=9)
        assert mg.TaskSpec.from_dict(json.loads(json.dumps(s.to_dict()))) == s

    def test_stand_easy_does_not_fall(self):
        assert not rollout(mg.TaskSpec("stand", 0.0, 6.0, seed=0)).fall

    def test_squat_hard_falls(self):
        assert rollout(mg.TaskSpec("squat", 1.0, 6.0, seed=0)).fall

    def test_difficulty_raises_fall_rate(self):
        rates = []
        for d in (0.1, 0.5, 0.9):
            specs = mg.sample_specs(30, seed=4, difficulty=(d, d), duration=(4.0, 4.0))
            rates.append(np.mean([rollout(s).fall for s in specs]))
        assert rates[0] <= rates[1] <= rates[2] and rates[0] < rates[2]

    def test_sample_specs_deterministic(self):
        assert mg.sample_specs(20, seed=3) == mg.sample_specs(20, seed=3)
        assert mg.sample_specs(20, seed=3) != mg.sample_specs(20, seed=4)

    def test_derive_seed_substreams(self):
        assert mg.derive_seed(1, "a") == mg.derive_seed(1, "a")
        assert len({mg.derive_seed(1, "a"), mg.derive_seed(1, "b"), mg.derive_seed(2, "a")}) == 3


@pytest.fixture(scope="module")
def window():
    ref = mg.generate_reference(mg.TaskSpec("walk", 0.7, 4.0, seed=2))
    fut = MotionSequence(ref.root_pos[60:110], ref.root_quat[60:110], ref.joint_pos[60:110],
                         ref.joint_vel[60:110], canonical=True)
    rng = np.random.default_rng(0)
    cur = RobotState(fut.root_pos[0] + [0.03, -0.02, -0.01], fut.root_quat[0],
                     fut.joint_pos[0] + rng.normal(0, 0.1, fut.S), fut.joint_vel[0] + rng.normal(0, 0.5, fut.S))
    return cur, fut


class TestCandidates:
    def test_anchored_at_current(self, window):
        cur, fut = window
        for c in mg.edit_candidates(cur, fut, 15, seed=1):
            assert c[0] == cur
            assert len(c) == len(fut)
            assert mg.root_path_rmse(c, fut) <= 0.2

    def test_blend_reattaches(self, window):
        cur, fut = window
        c = mg.edit_candidates(cur, fut, 1, seed=1)[0]
        K = mg.reattach_frames(len(fut))
        assert np.max(np.abs(c.joint_pos[K:] - fut.joint_pos[K:])) <= 1e-9
        assert np.max(np.abs(c.root_pos[K:] - fut.root_pos[K:])) <= 1e-9

    def test_blend_identity_when_current_on_reference(self, window):
        _, fut = window
        c = mg.edit_candidates(fut[0], fut, 1, seed=0)[0]
        for a, b in ((c.joint_pos, fut.joint_pos), (c.joint_vel, fut.joint_vel), (c.root_pos, fut.root_pos)):
            assert np.max(np.abs(a - b)) <= 1e-9

    def test_edits_bounded(self, window):
        cur, fut = window
        rest = mg.rest_pose(fut.S)
        K = mg.reattach_frames(len(fut))
        for p, c in zip(mg.sample_edit_params(8, fut.S, 5), mg.edit_candidates(cur, fut, 8, seed=5)):
            assert 0.4 <= p.scale <= 1.0
            expect = rest + p.scale * (fut.joint_pos[K:] - rest)
            assert np.max(np.abs(c.joint_pos[K:] - expect)) <= 0.1 + 1e-12

    def test_deterministic_and_seeded(self, window):
        cur, fut = window
        a = mg.edit_candidates(cur, fut, 4, seed=7)
        assert a == mg.edit_candidates(cur, fut, 4, seed=7)
        assert a[1] != mg.edit_candidates(cur, fut, 4, seed=8)[1]

    def test_yaw_continuity(self, window):
        cur, fut = window
        turned = RobotState(cur.root_pos, [np.cos(0.2), 0, 0, np.sin(0.2)], cur.joint_pos, cur.joint_vel)
        c = mg.edit_candidates(turned, fut, 1, seed=0)[0]
        assert np.max(np.abs(np.diff(np.unwrap(quat_to_yaw(c.root_quat))))) < 0.45

    def test_invalid(self, window):
        cur, fut = window
        with pytest.raises(ValueError):
            mg.edit_candidates(cur, fut, 0, seed=0)
        with pytest.raises(ValueError):
            mg.edit_candidates(cur, fut, 2, seed=0, reattach=0)

    @given(st.integers(0, 2**31))
    def test_frame_zero_exact_any_seed(self, seed):
        ref = mg.generate_reference(mg.TaskSpec("jump", 0.5, 3.0, seed=seed % 97))
        fut = MotionSequence(ref.root_pos[30:80], ref.root_quat[30:80], ref.joint_pos[30:80],
                             ref.joint_vel[30:80], canonical=True)
        cur = ref[10]
        assert all(c[0] == cur for c in mg.edit_candidates(cur, fut, 3, seed))


@pytest.fixture(scope="module")
def built():
    return mg.build_dataset(mg.sample_specs(100, seed=8))


class TestDataset:
    def test_counting_contract(self, built):
        ds, stats = built
        assert len(ds) == stats.count <= 100 * 3 * 3
        assert stats.rollouts == 300
        assert ds.obs.shape[1:] == (25, 23) and ds.ref.shape[1:] == (50, 23) and ds.target.shape[1] == 6

    def test_windows_respect_fall(self, built):
        ds, _ = built
        t = np.array([m["t_index"] for m in ds.meta])
        assert np.all(t >= 25)
        assert set(np.unique(ds.target[:, 0])) <= {0.0, 1.0}

    def test_records_match_rollouts(self, built):
        ds, _ = built
        m = ds.meta[0]
        spec = next(s for s in mg.sample_specs(100, seed=8) if s.seed == m["seed"])
        res = rollout(spec, b=m["behavior"])
        t = m["t_index"]
        assert np.array_equal(ds.obs[0], res.executed.features()[t - 25:t])
        assert np.array_equal(ds.ref[0], mg.generate_reference(spec).features()[t:t + 50])

    def test_deterministic(self, built):
        ds, _ = built
        again, _ = mg.build_dataset(mg.sample_specs(100, seed=8))
        assert again.digest() == ds.digest()

    def test_balanced(self, built):
        ds, _ = built
        b = ds.balanced(0)
        assert b.fall_fraction() == pytest.approx(0.5, abs=0.01)
        exact = ds.balanced(1, size=100)
        assert len(exact) == 100 and exact.fall_fraction() == 0.5
        with pytest.raises(ValueError):
            ds.balanced(0, size=10 * len(ds))

    def test_jsonl_round_trip(self, built, tmp_path):
        ds = built[0].subset(np.arange(20))
        ds.write_jsonl(tmp_path / "a.jsonl")
        back = mg.Dataset.read_jsonl(tmp_path / "a.jsonl")
        assert back.digest() == ds.digest() and back.meta == ds.meta
        back.write_jsonl(tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_bad_jsonl_reports_line(self, built, tmp_path):
        p = tmp_path / "bad.jsonl"
        ds = built[0].subset(np.arange(2))
        ds.write_jsonl(p)
        lines = p.read_text().splitlines()
        rec = json.loads(lines[1])
        del rec["target"]
        p.write_text(lines[0] + "\n" + json.dumps(rec) + "\n")
        with pytest.raises(ValueError, match="line 2"):
            mg.Dataset.read_jsonl(p)

    def test_stats(self, built):
        ds, stats = built
        s = ds.stats()
        assert sum(v["count"] for v in s["per_family"].values()) == s["count"] == len(ds)
        assert 0 < stats.rollout_fall_fraction < 1

    def test_empty_specs(self):
        with pytest.raises(ValueError):
            mg.build_dataset([])

    def test_workers_match_serial(self):
        specs = mg.sample_specs(12, seed=5)
        a, _ = mg.build_dataset(specs)
        b, _ = mg.build_dataset(specs, workers=2)
        assert a.digest() == b.digest()
