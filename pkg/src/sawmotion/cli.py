"""Command-line entry point: ``sawmotion {gen-data,train,eval,rank,adapt}``.

Every command reads one JSON run config (``--config`` or the ``SAW_CONFIG``
environment variable; built-in defaults otherwise).  Flags override config
fields.  All randomness derives from the root ``seed`` through named
substreams (see :func:`sawmotion.motiongen.derive_seed`):

=====================  ==========================================
substream label        used for
=====================  ==========================================
``gen-data/specs``     task specs for the dataset
``gen-data/balance/S`` stratified subsampling of split ``S``
``train``              parameter init and minibatch order
``adapt``              candidate edits (unless ``adapter.seed`` is set)
``rank``               candidate edits for ``rank``
=====================  ==========================================

Exit codes: 0 success, 1 config or usage error, 2 I/O error, 3 numeric
failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import adapter as ad
from . import saw, sim
from .motion import SequenceParseError, sequence_to_dict, slice_window
from .motiongen import (
    Dataset,
    TaskSpec,
    build_dataset,
    derive_seed,
    edit_candidates,
    generate_reference,
    reattach_frames,
    sample_specs,
)
from .scoring import SCORE_FIELDS, rank_candidates, scalarize_batch

log = logging.getLogger("sawmotion")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
SPLITS = ("train", "val", "test")


class ConfigError(Exception):
    """Invalid configuration; ``field`` is the dotted path of the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class UsageError(Exception):
    pass


# -- run config ------------------------------------------------------------

@dataclass(frozen=True)
class DatasetConfig:
    n_specs: int = 1500
    behaviors_per_ref: int = 3
    windows_per_rollout: int = 3
    splits: dict = field(default_factory=lambda: {"train": 0.7, "val": 0.15, "test": 0.15})
    difficulty: tuple = (0.0, 1.0)  # uniform range

    def validate(self):
        for name in ("n_specs", "behaviors_per_ref", "windows_per_rollout"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"dataset.{name}", f"must be a positive integer, got {v!r}")
        if set(self.splits) != set(SPLITS):
            raise ConfigError("dataset.splits", f"needs exactly the keys {list(SPLITS)}")
        if any(not 0 <= float(v) <= 1 for v in self.splits.values()):
            raise ConfigError("dataset.splits", "fractions must lie in [0, 1]")
        total = sum(float(v) for v in self.splits.values())
        if abs(total - 1.0) > 1e-9:
            raise ConfigError("dataset.splits", f"fractions sum to {total:g}, must sum to 1")
        lo, hi = self.difficulty
        if not 0.0 <= lo <= hi <= 1.0:
            raise ConfigError("dataset.difficulty", f"need 0 <= low <= high <= 1, got {self.difficulty}")

    def split_sizes(self) -> dict:
        n = {k: int(math.floor(self.n_specs * float(self.splits[k]))) for k in SPLITS}
        n["train"] = self.n_specs - n["val"] - n["test"]
        return n


_SawConfig, _TrainConfig = saw.SawConfig, saw.TrainConfig  # field names below shadow the module


@dataclass(frozen=True)
class RunConfig:
    robot_model: sim.RobotModel = field(default_factory=sim.RobotModel)
    saw: _SawConfig = field(default_factory=_SawConfig)
    adapter: ad.AdapterConfig = field(default_factory=ad.AdapterConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: _TrainConfig = field(default_factory=_TrainConfig)
    seed: int = 0
    adapter_seed_set: bool = False

    def to_dict(self) -> dict:
        return {
            "robot_model": self.robot_model.to_dict(),
            "saw": self.saw.to_dict(),
            "adapter": self.adapter.to_dict(),
            "dataset": {**dataclasses.asdict(self.dataset), "difficulty": list(self.dataset.difficulty)},
            "train": self.train.to_dict(),
            "seed": self.seed,
        }

    @property
    def adapter_seed(self) -> int:
        return self.adapter.seed if self.adapter_seed_set else derive_seed(self.seed, "adapt")


def _section(d: dict, name: str, build):
    sub = d.get(name, {})
    if not isinstance(sub, dict):
        raise ConfigError(name, "must be an object")
    try:
        return build(sub)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(name, str(e)) from None


def _saw_config(sub: dict) -> saw.SawConfig:
    sub = dict(sub)
    unknown = set(sub) - {f.name for f in dataclasses.fields(saw.SawConfig)}
    if unknown:
        raise ConfigError("saw", f"unknown fields {sorted(unknown)}")
    if "T_f" not in sub:
        # T_f follows the horizon unless given explicitly
        h = float(sub.get("horizon_seconds", 1.0))
        sub["T_f"] = int(round(h / float(sub.get("dt", 0.02))))
    return saw.SawConfig(**sub)


def _dataset_config(sub: dict) -> DatasetConfig:
    unknown = set(sub) - {f.name for f in dataclasses.fields(DatasetConfig)}
    if unknown:
        raise ConfigError("dataset", f"unknown fields {sorted(unknown)}")
    sub = dict(sub)
    if "difficulty" in sub:
        diff = sub["difficulty"]
        if isinstance(diff, dict):
            diff = (diff.get("low", 0.0), diff.get("high", 1.0))
        sub["difficulty"] = tuple(float(x) for x in diff)
    cfg = DatasetConfig(**sub)
    cfg.validate()
    return cfg


def _train_config(sub: dict) -> saw.TrainConfig:
    unknown = set(sub) - {f.name for f in dataclasses.fields(saw.TrainConfig)}
    if unknown:
        raise ConfigError("train", f"unknown fields {sorted(unknown)}")
    return saw.TrainConfig(**sub)


def parse_config(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    unknown = set(d) - {"robot_model", "saw", "adapter", "dataset", "train", "seed"}
    if unknown:
        raise ConfigError("<root>", f"unknown sections {sorted(unknown)}")
    seed = d.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed", f"must be a non-negative integer, got {seed!r}")
    robot = _section(d, "robot_model", sim.RobotModel.from_dict)
    scfg = _section(d, "saw", _saw_config)
    acfg = _section(d, "adapter", ad.AdapterConfig.from_dict)
    if scfg.S != robot.S:
        raise ConfigError("saw.S", f"{scfg.S} does not match robot_model.S = {robot.S}")
    return RunConfig(robot, scfg, acfg, _section(d, "dataset", _dataset_config), _section(d, "train", _train_config),
                     seed, "seed" in d.get("adapter", {}))


def load_config(path: str | None) -> RunConfig:
    path = path or os.environ.get("SAW_CONFIG")
    if not path:
        return RunConfig()
    try:
        with open(path) as f:
            d = json.load(f)
    except OSError as e:
        raise OSError(f"cannot read config {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise ConfigError("<root>", f"invalid JSON at line {e.lineno}: {e.msg}") from None
    return parse_config(d)


def _with_seed(cfg: RunConfig, seed: int | None) -> RunConfig:
    return cfg if seed is None else dataclasses.replace(cfg, seed=seed)


# -- output helpers --------------------------------------------------------

def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(text)


def _read_dataset(path) -> Dataset:
    try:
        return Dataset.read_jsonl(path)
    except SequenceParseError as e:
        raise ConfigError(str(path), str(e)) from None


# -- commands --------------------------------------------------------------

def make_splits(cfg: RunConfig, workers: int = 1) -> dict:
    """Build the train/val/test datasets described by ``cfg`` in memory."""
    dc = cfg.dataset
    specs = sample_specs(dc.n_specs, derive_seed(cfg.seed, "gen-data/specs"), difficulty=dc.difficulty)
    sizes = dc.split_sizes()
    out, start = {}, 0
    for name in SPLITS:
        part = specs[start:start + sizes[name]]
        start += sizes[name]
        if not part:
            raise ConfigError(f"dataset.splits.{name}", "split has no task specs")
        ds, stats = build_dataset(part, cfg.robot_model, dc.behaviors_per_ref, cfg.saw.horizon_seconds,
                                  dc.windows_per_rollout, dt=cfg.saw.dt, T_o=cfg.saw.T_o, workers=workers)
        raw = ds.stats()
        if name != "train":
            ds = ds.balanced(derive_seed(cfg.seed, f"gen-data/balance/{name}"))
        out[name] = (ds, {**ds.stats(), "before_balancing": raw, "rollouts": stats.rollouts,
                          "rollout_fall_fraction": stats.rollout_fall_fraction,
                          "skipped_specs": stats.skipped_specs, "excluded_windows": stats.excluded_windows,
                          "horizon_s": cfg.saw.horizon_seconds, "digest": ds.digest()})
    return out


def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.touch()
        probe.unlink()
    except OSError as e:
        raise OSError(f"output directory {out} is not writable: {e.strerror}") from None
    splits = make_splits(cfg, args.workers)
    summary = {}
    for name, (ds, stats) in splits.items():
        ds.write_jsonl(out / f"{name}.jsonl")
        _write(out / f"{name}.stats.json", _dump(stats))
        summary[name] = {"count": stats["count"], "fall_fraction": stats["fall_fraction"]}
    _write(out / "config.json", _dump(cfg.to_dict()))
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _train_one(cfg: RunConfig, scfg: saw.SawConfig, train_ds, val_ds, max_epochs=None):
    tcfg = cfg.train if max_epochs is None else dataclasses.replace(cfg.train, max_epochs=max_epochs)
    return saw.train(scfg, train_ds, val_ds, tcfg, seed=derive_seed(cfg.seed, "train"))


def cmd_train(args, cfg: RunConfig) -> int:
    data = Path(args.data)
    train_ds = _read_dataset(data / "train.jsonl")
    val_path = data / "val.jsonl"
    val_ds = _read_dataset(val_path) if val_path.exists() else None
    scfg = cfg.saw if args.variant is None else dataclasses.replace(cfg.saw, variant=args.variant)
    try:
        model, history = _train_one(cfg, scfg, train_ds, val_ds, args.max_epochs)
    except saw.ConfigError as e:
        raise ConfigError("saw", str(e)) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    _write(out.with_suffix(".log.json"), _dump({"config": cfg.to_dict(), "train_digest": train_ds.digest(),
                                               "history": history}))
    print(json.dumps(history[-1], sort_keys=True))
    return EXIT_OK


def _row(metrics: dict) -> dict:
    return {"variant": metrics["variant"], "horizon_s": metrics["horizon_s"], "count": metrics["count"],
            "metrics": {"fall_accuracy": metrics["fall_accuracy"], **metrics["mse"]}}


def _parse_list(text: str | None, conv) -> list | None:
    if text is None:
        return None
    try:
        return [conv(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"cannot parse list {text!r}") from None


def cmd_eval(args, cfg: RunConfig) -> int:
    model = _load_model(args.ckpt)
    variants = _parse_list(args.variant_grid, str)
    horizons = _parse_list(args.horizon_grid, float)
    for v in variants or []:
        if v not in saw.VARIANTS:
            raise UsageError(f"unknown variant {v!r}; choose from {saw.VARIANTS}")
    rows, datasets = [], {}
    if not variants and not horizons:
        ds = _read_dataset(args.data)
        try:
            rows.append(_row(saw.evaluate(model, ds)))
        except saw.ConfigError as e:
            raise ConfigError("data", str(e)) from None
        datasets[str(model.config.horizon_seconds)] = {"path": str(args.data), "digest": ds.digest()}
    else:
        if not args.train_data:
            raise UsageError("grid evaluation needs --train-data")
        for h in horizons or [model.config.horizon_seconds]:
            fmt = {"h": f"{h:g}"}
            test_ds = _read_dataset(args.data.format(**fmt))
            tdir = Path(args.train_data.format(**fmt))
            train_ds = _read_dataset(tdir / "train.jsonl")
            val_ds = _read_dataset(tdir / "val.jsonl") if (tdir / "val.jsonl").exists() else None
            datasets[f"{h:g}"] = {"path": args.data.format(**fmt), "digest": test_ds.digest()}
            for v in variants or [model.config.variant]:
                scfg = dataclasses.replace(model.config, variant=v, horizon_seconds=h,
                                           T_f=int(round(h / model.config.dt)))
                try:
                    m, _ = _train_one(cfg, scfg, train_ds, val_ds, args.max_epochs)
                    rows.append(_row(saw.evaluate(m, test_ds)))
                except saw.ConfigError as e:
                    raise ConfigError("data", str(e)) from None
    text = _dump({"rows": rows, "datasets": datasets})
    if args.out:
        _write(Path(args.out), text)
    sys.stdout.write(text)
    return EXIT_OK


def _load_model(path) -> saw.SawModel:
    if path is None or not Path(path).exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    try:
        return saw.SawModel.load(path)
    except (json.JSONDecodeError, KeyError, saw.ConfigError) as e:
        raise ConfigError("ckpt", f"unreadable checkpoint {path}: {e}") from None


def _load_task(text: str) -> TaskSpec:
    try:
        d = json.loads(Path(text).read_text()) if Path(text).exists() else json.loads(text)
        return TaskSpec.from_dict(d)
    except (json.JSONDecodeError, TypeError, ValueError) as e:
        raise ConfigError("task", str(e)) from None


def rank_listing(model: saw.SawModel, task: TaskSpec, t: int, n: int, robot: sim.RobotModel,
                 weights, seed: int) -> tuple[list[dict], list]:
    """Follow the unmodified task up to ``t``, then score it and ``n - 1`` edits; best first."""
    cfg = model.config
    ref = generate_reference(task, robot.S, cfg.dt, robot.h0)
    if not cfg.T_o <= t <= len(ref) - cfg.T_f:
        raise UsageError(f"frame {t} out of range [{cfg.T_o}, {len(ref) - cfg.T_f}] for this task")
    base = ad.baseline_rollout(task, robot, cfg.dt)
    if base.fall and base.fall_frame < t:
        raise UsageError(f"the robot has already fallen at frame {base.fall_frame} < {t}")
    obs = base.executed.features()[t - cfg.T_o:t]
    incumbent = slice_window(ref, t, cfg.T_f)
    options = [incumbent]
    if n > 1:
        options += edit_candidates(ref[t], incumbent, n - 1, seed, reattach=reattach_frames(cfg.T_f))
    pred = model.predict_scores(np.repeat(obs[None], len(options), axis=0), np.stack([o.features() for o in options]))
    scalars = scalarize_batch(pred, weights, model.target_stats)
    order = rank_candidates(pred, weights, model.target_stats)
    rows = [{"rank": r, "index": i, "incumbent": i == 0, "scalar": float(scalars[i]),
             "scores": dict(zip(SCORE_FIELDS, map(float, pred[i])))}
            for r, i in enumerate(order)]
    return rows, options


def cmd_rank(args, cfg: RunConfig) -> int:
    model = _load_model(args.ckpt)
    task = _load_task(args.task)
    n = args.n if args.n is not None else cfg.adapter.n_candidates + 1
    if n < 1:
        raise UsageError("--n must be at least 1")
    rows, options = rank_listing(model, task, args.t, n, cfg.robot_model, cfg.adapter.rank_weights,
                                 derive_seed(cfg.seed, "rank"))
    if args.out:
        out = Path(args.out)
        for row in rows:
            _write(out / f"candidate_{row['index']:02d}.json", json.dumps(sequence_to_dict(options[row["index"]])))
        _write(out / "ranking.json", _dump(rows))
    for row in rows:
        print(json.dumps(row, sort_keys=True))
    return EXIT_OK


def _load_tasks(path) -> list[TaskSpec]:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        try:
            data = [json.loads(line) for line in text.splitlines() if line.strip()]
        except json.JSONDecodeError as e:
            raise ConfigError("tasks", f"{path}: invalid JSON ({e.msg})") from None
    if isinstance(data, dict):
        data = data.get("tasks", [data])
    tasks = []
    for i, d in enumerate(data):
        try:
            tasks.append(TaskSpec.from_dict(d))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"tasks[{i}]", str(e)) from None
    if not tasks:
        raise ConfigError("tasks", "no tasks given")
    return tasks


def cmd_adapt(args, cfg: RunConfig) -> int:
    if not Path(args.tasks).exists():
        raise FileNotFoundError(f"tasks file {args.tasks} not found")
    tasks = _load_tasks(args.tasks)
    acfg = dataclasses.replace(cfg.adapter, seed=cfg.adapter_seed)
    robot = cfg.robot_model
    base = ad.run_tasks(tasks, None, robot, acfg, "baseline", args.workers)
    if args.baseline_only:
        traces = base
        standing = [b.root_path_rmse_vs_command for b in base if not b.fall]
        report = {"mode": "baseline", "n_tasks": len(tasks), "baseline_falls": sum(b.fall for b in base),
                  "mean_root_rmse": float(np.mean(standing)) if standing else 0.0}
    else:
        model = _load_model(args.ckpt)
        if abs(model.config.horizon_seconds - acfg.horizon_s) > 1e-9:
            acfg = dataclasses.replace(acfg, horizon_s=model.config.horizon_seconds)
        try:
            traces = ad.run_tasks(tasks, model, robot, acfg, args.scorer, args.workers)
        except ad.AdapterError as e:
            raise ConfigError("adapter", str(e)) from None
        report = {"mode": args.scorer, **ad.summarize(base, traces)}
    if args.out:
        out = Path(args.out)
        _write(out / "traces.jsonl", "".join(json.dumps(t.to_dict(), sort_keys=True) + "\n" for t in traces))
        _write(out / "report.json", _dump(report))
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


# -- argument parsing ------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sawmotion", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="run config JSON (default: $SAW_CONFIG or built-in defaults)")
        sp.add_argument("--seed", type=int, help="root seed, overrides the config")
        sp.add_argument("--workers", type=int, default=1, help="worker processes (results do not depend on it)")

    g = sub.add_parser("gen-data", help="build train/val/test JSONL datasets")
    common(g)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a SAW checkpoint")
    common(t)
    t.add_argument("--data", required=True, help="directory with train.jsonl (and val.jsonl)")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--variant", choices=saw.VARIANTS)
    t.add_argument("--max-epochs", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score-prediction metrics, optionally over a variant/horizon grid")
    common(e)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True, help="test JSONL; '{h}' is replaced by the horizon in grid mode")
    e.add_argument("--variant-grid", help="comma-separated variants to train and evaluate")
    e.add_argument("--horizon-grid", help="comma-separated horizons in seconds")
    e.add_argument("--train-data", help="training data directory for grid mode ('{h}' allowed)")
    e.add_argument("--max-epochs", type=int)
    e.add_argument("--out", help="also write the report here")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("rank", help="rank edited candidates at one frame of a task")
    common(r)
    r.add_argument("--ckpt", required=True)
    r.add_argument("--task", required=True, help="TaskSpec as a JSON file or inline JSON")
    r.add_argument("--t", type=int, required=True, help="frame index of the replan tick")
    r.add_argument("--n", type=int, help="listing size including the incumbent")
    r.add_argument("--out", help="directory for candidate sequence files")
    r.set_defaults(func=cmd_rank)

    a = sub.add_parser("adapt", help="run the replanning loop on a task batch")
    common(a)
    a.add_argument("--ckpt")
    a.add_argument("--tasks", required=True, help="JSON list (or JSONL) of TaskSpecs")
    a.add_argument("--baseline-only", action="store_true", help="skip SAW, follow the original references")
    a.add_argument("--scorer", choices=("saw", "oracle"), default="saw",
                   help="oracle ranks with simulated ground truth (still needs the checkpoint's score stats)")
    a.add_argument("--out", help="directory for traces.jsonl and report.json")
    a.set_defaults(func=cmd_adapt)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "workers", 1) < 1:
        print("error: --workers must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = _with_seed(load_config(args.config), args.seed)
        return args.func(args, cfg)
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
