"""Online self-aware replanning: observe, edit, score, rank, switch, execute.

The robot follows an incumbent reference (initially the generated one).
At each replan tick the last ``T_o`` executed states and the upcoming
``T_f`` frames of every option are scored, the options are ranked, and the
incumbent is replaced only when the best alternative beats it by a
relative margin.  Candidates are always edits of the *original* command,
starting from the incumbent's pose at the tick, so the command stays
continuous and the root path stays close to what was asked for.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import sim
from .motion import DEFAULT_DT, MotionSequence, concat_sequences, sequence_to_dict, slice_window
from .motiongen import (
    T_OBS,
    TaskSpec,
    derive_seed,
    edit_candidates,
    generate_reference,
    horizon_frames,
    reattach_frames,
    root_path_rmse,
)
from .saw import SawModel
from .scoring import NormStats, RankWeights, ScoreVector, rank_candidates, scalarize_batch, score_arrays


class AdapterError(ValueError):
    pass


@dataclass(frozen=True)
class AdapterConfig:
    n_candidates: int = 15
    replan_every: int = 25
    horizon_s: float = 1.0
    switch_margin: float = 0.05
    rank_weights: RankWeights = field(default_factory=RankWeights)
    seed: int = 0

    def __post_init__(self):
        if self.n_candidates < 1:
            raise AdapterError("n_candidates must be at least 1")
        if self.replan_every < 1:
            raise AdapterError("replan_every must be at least 1")
        if not self.switch_margin >= 0:
            raise AdapterError("switch_margin must be non-negative")
        if self.horizon_s not in (1.0, 2.0, 3.0):
            raise AdapterError(f"horizon_s must be 1, 2 or 3 seconds, got {self.horizon_s}")

    def to_dict(self) -> dict:
        w = self.rank_weights
        return {"n_candidates": self.n_candidates, "replan_every": self.replan_every, "horizon_s": self.horizon_s,
                "switch_margin": self.switch_margin, "seed": self.seed,
                "rank_weights": {"w": list(w.w), "fall_gate": w.fall_gate, "gate_penalty": w.gate_penalty}}

    @classmethod
    def from_dict(cls, d: dict) -> "AdapterConfig":
        d = dict(d)
        unknown = set(d) - {"n_candidates", "replan_every", "horizon_s", "switch_margin", "rank_weights", "seed"}
        if unknown:
            raise AdapterError(f"unknown adapter fields: {sorted(unknown)}")
        if "rank_weights" in d:
            d["rank_weights"] = RankWeights(**d["rank_weights"])
        if "switch_margin" in d:
            d["switch_margin"] = float(d["switch_margin"])
        if "horizon_s" in d:
            d["horizon_s"] = float(d["horizon_s"])
        return cls(**d)


# -- scorers ---------------------------------------------------------------

class SawScorer:
    """Scores options with a trained SAW model (one batched forward per tick)."""

    def __init__(self, model: SawModel):
        self.model = model
        self.norm = model.target_stats

    def __call__(self, state: sim.SimState, obs: np.ndarray, plans: Sequence[sim.PreparedReference],
                 T_f: int) -> np.ndarray:
        ref = np.stack([slice_window(p.source, 0, T_f).features() for p in plans])
        return self.model.predict_scores(np.repeat(obs[None], len(plans), axis=0), ref)


class OracleScorer:
    """Ground truth: simulate every option from the current state and score the result."""

    def __init__(self, robot: sim.RobotModel, norm: NormStats):
        self.robot = robot
        self.norm = norm

    def __call__(self, state: sim.SimState, obs: np.ndarray, plans: Sequence[sim.PreparedReference],
                 T_f: int) -> np.ndarray:
        out = []
        for p in plans:
            end, seg = sim.run_prepared(self.robot, state, p, 0, T_f)
            ex = seg.to_sequence(p.dt)
            ref = slice_window(p.source, 0, T_f)
            out.append(score_arrays(ref.joint_pos, ref.joint_vel, ref.root_pos, ref.root_quat, ex.joint_pos,
                                    ex.joint_vel, ex.root_pos, ex.root_quat, p.dt, 1.0 if end.fallen else 0.0))
        return np.stack(out)


# -- trace -----------------------------------------------------------------

@dataclass
class Tick:
    t: int
    scalars: list  # listing order: incumbent first, then candidates by root deviation
    chosen: int  # index into the listing; 0 keeps the incumbent
    switched: bool
    predicted: list  # ScoreVector per listing entry
    candidate_ids: list  # editor index of each listing entry (-1 for the incumbent)

    def to_dict(self) -> dict:
        return {"t": self.t, "scalars": [float(x) for x in self.scalars], "chosen": self.chosen,
                "switched": self.switched, "candidate_ids": list(self.candidate_ids),
                "predicted": [s.to_dict() for s in self.predicted]}


@dataclass
class AdaptTrace:
    task: TaskSpec
    ticks: list
    fall: bool
    fall_frame: int | None
    root_path_rmse_vs_command: float
    executed: MotionSequence
    commanded: MotionSequence

    @property
    def n_switches(self) -> int:
        return sum(t.switched for t in self.ticks)

    def to_dict(self, include_sequences: bool = True) -> dict:
        d = {
            "task": self.task.to_dict(),
            "ticks": [t.to_dict() for t in self.ticks],
            "final": {"fall": self.fall, "fall_frame": self.fall_frame, "n_switches": self.n_switches,
                      "root_path_rmse_vs_command": self.root_path_rmse_vs_command},
        }
        if include_sequences:
            d["final"]["executed"] = sequence_to_dict(self.executed)
        return d


def _splice(cmd: sim.PreparedReference, t: int, tail: sim.PreparedReference) -> sim.PreparedReference:
    """Keep ``cmd`` before frame ``t`` and follow ``tail`` from there on."""
    head = slice_window(cmd.source, 0, t)
    return sim.PreparedReference(np.concatenate([cmd.q[:t], tail.q]), np.concatenate([cmd.qd[:t], tail.qd]),
                                 np.concatenate([cmd.root[:t], tail.root]), cmd.dt,
                                 concat_sequences([head, tail.source]))


def _tail(cmd: sim.PreparedReference, t: int) -> sim.PreparedReference:
    return sim.PreparedReference(cmd.q[t:], cmd.qd[t:], cmd.root[t:], cmd.dt,
                                 slice_window(cmd.source, t, len(cmd) - t))


def _finish(task, ref, segments, final: sim.SimState, ticks, cmd) -> AdaptTrace:
    q = np.concatenate([s.q for s in segments])
    qd = np.concatenate([s.qd for s in segments])
    st = np.concatenate([s.s for s in segments])
    n = len(q) if final.fall_frame is None else final.fall_frame + 1
    executed = sim.Segment(q[:n], qd[:n], st[:n]).to_sequence(ref.dt)
    rmse = root_path_rmse(executed, slice_window(ref, 0, n))
    return AdaptTrace(task, ticks, final.fallen, final.fall_frame, rmse, executed, cmd.source)


def _start(task: TaskSpec, robot: sim.RobotModel, dt: float):
    ref = generate_reference(task, robot.S, dt, robot.h0)
    init = sim.init_state(robot, ref[0], jitter_seed=derive_seed(task.seed, "behavior/0"))
    return ref, init, sim.prepare_reference(ref, yaw_anchor=init.yaw)


def baseline_rollout(task: TaskSpec, robot: sim.RobotModel | None = None, dt: float = DEFAULT_DT) -> AdaptTrace:
    """Follow the unmodified reference; the trace has no ticks."""
    robot = robot or sim.RobotModel()
    ref, init, cmd = _start(task, robot, dt)
    final, seg = sim.run_prepared(robot, init, cmd)
    return _finish(task, ref, [seg], final, [], cmd)


def _switches(best: float, incumbent: float, margin: float) -> bool:
    # relative improvement on the magnitude, so the rule also holds for negative scalars
    if math.isinf(margin):
        return False
    return best < incumbent - margin * abs(incumbent)


def adapt_rollout(task: TaskSpec, model: SawModel | None, robot: sim.RobotModel | None = None,
                  cfg: AdapterConfig | None = None, scorer=None, dt: float = DEFAULT_DT) -> AdaptTrace:
    """Run the replanning loop on one task.

    ``scorer`` defaults to the SAW model; pass an :class:`OracleScorer` to
    rank with simulated ground truth instead.
    """
    robot = robot or sim.RobotModel()
    cfg = cfg or AdapterConfig()
    T_f = horizon_frames(cfg.horizon_s, dt)
    T_o = T_OBS
    if scorer is None:
        if model is None:
            raise AdapterError("a SAW model or an explicit scorer is required")
        scorer = SawScorer(model)
    if model is not None:
        mc = model.config
        if abs(mc.horizon_seconds - cfg.horizon_s) > 1e-9:
            raise AdapterError(f"model horizon {mc.horizon_seconds}s does not match adapter horizon {cfg.horizon_s}s")
        if mc.S != robot.S:
            raise AdapterError(f"model expects {mc.S} joints, robot has {robot.S}")
        T_o = mc.T_o
    ref, state, cmd = _start(task, robot, dt)
    L = len(ref)
    if L < T_o + T_f:
        raise AdapterError(f"task has {L} frames, needs at least {T_o + T_f}")
    K = reattach_frames(T_f)
    w = cfg.rank_weights
    segments, ticks = [], []
    first = T_o + (-T_o) % cfg.replan_every
    done = 0
    for t in range(first, L - T_f + 1, cfg.replan_every):
        state, seg = sim.run_prepared(robot, state, cmd, done, t)
        segments.append(seg)
        done = t
        if state.fallen:
            break
        obs = np.concatenate([s.to_sequence(dt).features() for s in segments[-T_o:]])[-T_o:]
        current = cmd.source[t]
        yaw = float(cmd.root[t, 4])
        edits = edit_candidates(current, slice_window(ref, t, L - t), cfg.n_candidates,
                                derive_seed(cfg.seed, f"{task.seed}/tick/{t}"), reattach=K)
        devs = [root_path_rmse(slice_window(e, 0, T_f), slice_window(ref, t, T_f)) for e in edits]
        order = sorted(range(len(edits)), key=lambda i: devs[i])  # ties go to the smaller root deviation
        plans = [_tail(cmd, t)] + [sim.prepare_reference(edits[i], yaw_anchor=yaw) for i in order]
        scores = np.asarray(scorer(state, obs, plans, T_f), dtype=float)
        scalars = scalarize_batch(scores, w, scorer.norm)
        best = rank_candidates(scores, w, scorer.norm)[0]
        switched = best != 0 and _switches(float(scalars[best]), float(scalars[0]), cfg.switch_margin)
        if switched:
            cmd = _splice(cmd, t, plans[best])
        ticks.append(Tick(t, scalars.tolist(), best if switched else 0, switched,
                          [ScoreVector.from_array(s) for s in scores], [-1] + order))
    if not state.fallen and done < L:
        state, seg = sim.run_prepared(robot, state, cmd, done, L)
        segments.append(seg)
    return _finish(task, ref, segments, state, ticks, cmd)


# -- batch evaluation ------------------------------------------------------

def _run_one(args):
    task, model, robot, cfg, mode = args
    if mode == "baseline":
        return baseline_rollout(task, robot)
    scorer = OracleScorer(robot, model.target_stats) if mode == "oracle" else None
    return adapt_rollout(task, model, robot, cfg, scorer=scorer)


def run_tasks(tasks: Sequence[TaskSpec], model: SawModel | None, robot: sim.RobotModel | None = None,
              cfg: AdapterConfig | None = None, mode: str = "saw", workers: int = 1) -> list[AdaptTrace]:
    """Traces for every task in input order; ``mode`` is baseline, saw or oracle."""
    if mode not in ("baseline", "saw", "oracle"):
        raise AdapterError(f"unknown mode {mode!r}")
    if mode != "baseline" and model is None:
        raise AdapterError(f"mode {mode!r} needs a model")
    robot = robot or sim.RobotModel()
    cfg = cfg or AdapterConfig()
    jobs = [(t, model, robot, cfg, mode) for t in tasks]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            return list(ex.map(_run_one, jobs, chunksize=4))
    return [_run_one(j) for j in jobs]


def summarize(baseline: Sequence[AdaptTrace], adapted: Sequence[AdaptTrace]) -> dict:
    """Fall-prevention statistics over the tasks where the baseline falls."""
    if len(baseline) != len(adapted) or not baseline:
        raise AdapterError("need matching, non-empty baseline and adapted traces")
    falling = [i for i, b in enumerate(baseline) if b.fall]
    adapted_falls = sum(adapted[i].fall for i in falling)
    prevented = [i for i in falling if not adapted[i].fall]
    standing = [a.root_path_rmse_vs_command for a in adapted if not a.fall]
    return {
        "baseline_falls": len(falling),
        "adapted_falls": adapted_falls,
        "prevented_fraction": (len(falling) - adapted_falls) / max(1, len(falling)),
        "mean_root_rmse": float(np.mean(standing)) if standing else 0.0,
        "prevented_root_rmse": float(np.mean([adapted[i].root_path_rmse_vs_command for i in prevented]))
        if prevented else 0.0,
        "n_tasks": len(baseline),
        "n_switches": sum(a.n_switches for a in adapted),
        "no_baseline_falls": not falling,
    }


def fall_prevention_report(tasks: Sequence[TaskSpec], model: SawModel, robot: sim.RobotModel | None = None,
                           cfg: AdapterConfig | None = None, scorer: str = "saw", workers: int = 1) -> dict:
    """Compare baseline and adapted runs; ``prevented_fraction`` is 0 when nothing falls."""
    tasks = list(tasks)
    if not tasks:
        raise AdapterError("no tasks given")
    base = run_tasks(tasks, None, robot, cfg, "baseline", workers)
    adapted = run_tasks(tasks, model, robot, cfg, scorer, workers)
    return summarize(base, adapted)
