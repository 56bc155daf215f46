"""Score prediction network: will the robot manage this reference?

Observed executed frames and a candidate reference window are embedded by
separate per-frame MLPs.  A learned class token is appended to the
observed stream, sinusoidal positions are added, a pre-norm self-attention
stack runs over it and cross-attention blocks condition it on the
reference embedding.  The class token's output is mapped to a fall logit
and five standardized tracking-error scores.

Variants (for ablations):

``full``           as above
``no_ref``         observed stream only, no cross-attention
``no_obs``         self-attention over the reference (with its own class token)
``no_cross_attn``  independent self-attention stacks, head on both class tokens
``inverted``       self-attention over the reference, cross-attention to the observation
"""
from __future__ import annotations

import json
import logging
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .motiongen import Dataset, horizon_frames
from .scoring import NormStats, REGRESSION_FIELDS, ScoreVector

log = logging.getLogger(__name__)

VARIANTS = ("full", "no_ref", "no_obs", "no_cross_attn", "inverted")
LOGIT_BOUND = 15.0


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SawConfig:
    S: int = 8
    T_o: int = 25
    T_f: int = 50
    d_model: int = 64
    n_heads: int = 4
    n_self_layers: int = 2
    n_cross_layers: int = 1
    mlp_hidden: int = 128
    variant: str = "full"
    horizon_seconds: float = 1.0
    add_pe_to_reference: bool = True
    dt: float = 0.02

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.T_f != horizon_frames(self.horizon_seconds, self.dt):
            raise ConfigError(f"T_f={self.T_f} inconsistent with horizon {self.horizon_seconds}s at dt={self.dt}")
        if self.T_o < 1 or self.S < 1:
            raise ConfigError("T_o and S must be positive")

    @classmethod
    def for_horizon(cls, horizon_s: float, **kw) -> "SawConfig":
        dt = kw.get("dt", 0.02)
        return cls(T_f=horizon_frames(horizon_s, dt), horizon_seconds=horizon_s, **kw)

    @property
    def D(self) -> int:
        return 7 + 2 * self.S

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SawConfig":
        return cls(**d)


def sinusoidal_pe(T: int, d: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    i = np.arange(0, d, 2)[None, :]
    ang = pos / np.power(10000.0, i / d)
    pe = np.zeros((T, d))
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang[:, : d // 2])
    return pe


# -- parameters ------------------------------------------------------------

def _streams(variant: str) -> dict:
    """Which blocks a variant owns: self stacks (by token) and cross stacks."""
    return {
        "full": {"self": ["o"], "cross": True},
        "no_ref": {"self": ["o"], "cross": False},
        "no_obs": {"self": ["f"], "cross": False},
        "no_cross_attn": {"self": ["o", "f"], "cross": False},
        "inverted": {"self": ["f"], "cross": True},
    }[variant]


def init_params(cfg: SawConfig, seed: int) -> dict[str, nn.Tensor]:
    rng = np.random.default_rng(seed)
    d, h, D = cfg.d_model, cfg.mlp_hidden, cfg.D
    p: dict[str, np.ndarray] = {}

    def dense(name, n_in, n_out, gain=1.0):
        p[name + ".w"] = rng.normal(0.0, gain / math.sqrt(n_in), (n_in, n_out))
        p[name + ".b"] = np.zeros(n_out)

    def norm(name, n):
        p[name + ".g"] = np.ones(n)
        p[name + ".b"] = np.zeros(n)

    def attn(pre):
        for m in ("q", "k", "v"):
            dense(f"{pre}.{m}", d, d)
        del p[f"{pre}.k.b"]  # softmax is invariant to a shared key offset
        dense(f"{pre}.o", d, d, gain=0.5)

    def ffn(pre):
        norm(f"{pre}.ln2", d)
        dense(f"{pre}.fc1", d, h)
        dense(f"{pre}.fc2", h, d, gain=0.5)

    lay = _streams(cfg.variant)
    need_obs = cfg.variant != "no_obs"
    need_ref = cfg.variant != "no_ref"
    if need_obs:
        dense("enc_o.fc1", D, h)
        dense("enc_o.fc2", h, d)
    if need_ref:
        dense("enc_f.fc1", D, h)
        dense("enc_f.fc2", h, d)
    for tok in lay["self"]:
        p[f"cls_{tok}"] = rng.normal(0.0, 0.1, d)
        for i in range(cfg.n_self_layers):
            pre = f"self_{tok}{i}"
            norm(f"{pre}.ln1", d)
            attn(pre)
            ffn(pre)
        norm(f"lnf_{tok}", d)
    if lay["cross"]:
        for i in range(cfg.n_cross_layers):
            pre = f"cross{i}"
            norm(f"{pre}.lnq", d)
            norm(f"{pre}.lnm", d)
            attn(pre)
            ffn(pre)
    head_in = d * len(lay["self"])
    dense("head.fc1", head_in, d)
    dense("head.fc2", d, 6, gain=0.1)
    return {k: nn.Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


@dataclass
class InputStats:
    obs_mean: np.ndarray
    obs_std: np.ndarray
    ref_mean: np.ndarray
    ref_std: np.ndarray

    @classmethod
    def fit(cls, obs: np.ndarray, ref: np.ndarray) -> "InputStats":
        def ms(x):
            flat = x.reshape(-1, x.shape[-1])
            sd = flat.std(axis=0)
            return flat.mean(axis=0), np.where(sd > 1e-6, sd, 1.0)

        om, osd = ms(_center(obs, obs)[0])
        rm, rsd = ms(_center(obs, ref)[1])
        return cls(om, osd, rm, rsd)

    @classmethod
    def identity(cls, D: int) -> "InputStats":
        return cls(np.zeros(D), np.ones(D), np.zeros(D), np.ones(D))

    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "InputStats":
        return cls(*(np.asarray(d[k], dtype=float) for k in ("obs_mean", "obs_std", "ref_mean", "ref_std")))


def _center(obs: np.ndarray, ref: np.ndarray):
    """Express root xy relative to the last observed root position."""
    anchor = obs[:, -1:, :2]
    obs = obs.copy()
    ref = ref.copy()
    obs[..., :2] -= anchor
    ref[..., :2] -= anchor
    return obs, ref


@dataclass
class SawModel:
    config: SawConfig
    params: dict
    input_stats: InputStats
    target_stats: NormStats

    @classmethod
    def create(cls, cfg: SawConfig, seed: int = 0) -> "SawModel":
        return cls(cfg, init_params(cfg, seed), InputStats.identity(cfg.D), NormStats.identity())

    # -- checkpoint --------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "norm_stats": {"input": self.input_stats.to_dict(), "target": self.target_stats.to_dict()},
            "params": {k: {"shape": list(t.shape), "values": t.data.reshape(-1).tolist()}
                       for k, t in sorted(self.params.items())},
        }

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "SawModel":
        cfg = SawConfig.from_dict(d["config"])
        params = {}
        for k, v in d["params"].items():
            arr = np.asarray(v["values"], dtype=float).reshape(v["shape"])
            params[k] = nn.Tensor(arr, requires_grad=True, name=k)
        expected = set(init_params(cfg, 0))
        if set(params) != expected:
            raise ConfigError(f"checkpoint parameters do not match variant {cfg.variant!r}")
        return cls(cfg, params, InputStats.from_dict(d["norm_stats"]["input"]),
                   NormStats.from_dict(d["norm_stats"]["target"]))

    @classmethod
    def load(cls, path) -> "SawModel":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    # -- inference ---------------------------------------------------------
    def predict(self, obs: np.ndarray, ref: np.ndarray) -> "ScorePrediction":
        raw = forward_raw(self.params, self.config, self.input_stats, obs, ref).data
        return ScorePrediction.from_raw(raw, self.target_stats)

    def predict_scores(self, obs, ref) -> np.ndarray:
        return self.predict(obs, ref).scores


@dataclass
class ScorePrediction:
    logit: np.ndarray  # (N,) bounded fall logit
    fall_prob: np.ndarray  # (N,)
    z: np.ndarray  # (N, 5) standardized regression scores
    scores: np.ndarray  # (N, 6) [fall_prob, de-standardized scores clamped at 0]

    @classmethod
    def from_raw(cls, raw: np.ndarray, stats: NormStats) -> "ScorePrediction":
        logit = LOGIT_BOUND * np.tanh(raw[:, 0] / LOGIT_BOUND)
        prob = nn._sigmoid(logit)
        z = raw[:, 1:]
        reg = np.maximum(stats.destandardize(z), 0.0)
        return cls(logit, prob, z, np.concatenate([prob[:, None], reg], axis=1))

    def score_vector(self, i: int) -> ScoreVector:
        return ScoreVector.from_array(self.scores[i])


# -- forward ---------------------------------------------------------------

def _mlp(p, pre, x):
    return nn.linear(nn.gelu(nn.linear(x, p[pre + ".fc1.w"], p[pre + ".fc1.b"])), p[pre + ".fc2.w"], p[pre + ".fc2.b"])


def _ffn(p, pre, x):
    h = nn.layer_norm(x, p[pre + ".ln2.g"], p[pre + ".ln2.b"])
    return x + _mlp(p, pre, h)


def _mha(p, pre, xq, xm, n_heads):
    q = nn.linear(xq, p[pre + ".q.w"], p[pre + ".q.b"])
    k = nn.linear(xm, p[pre + ".k.w"])
    v = nn.linear(xm, p[pre + ".v.w"], p[pre + ".v.b"])
    a = nn.attention(q, k, v, n_heads)
    return nn.linear(a, p[pre + ".o.w"], p[pre + ".o.b"])


def self_block(p, pre, x, n_heads):
    h = nn.layer_norm(x, p[pre + ".ln1.g"], p[pre + ".ln1.b"])
    x = x + _mha(p, pre, h, h, n_heads)
    return _ffn(p, pre, x)


def cross_block(p, pre, x, mem, n_heads):
    hq = nn.layer_norm(x, p[pre + ".lnq.g"], p[pre + ".lnq.b"])
    hm = nn.layer_norm(mem, p[pre + ".lnm.g"], p[pre + ".lnm.b"])
    x = x + _mha(p, pre, hq, hm, n_heads)
    return _ffn(p, pre, x)


def _standardize_inputs(stats: InputStats, obs, ref):
    obs, ref = _center(obs, ref)
    return (obs - stats.obs_mean) / stats.obs_std, (ref - stats.ref_mean) / stats.ref_std


def encode_observed(p, x) -> nn.Tensor:
    """Per-frame MLP over standardized observed-frame features -> (B, T_o, d)."""
    return _mlp(p, "enc_o", nn.as_tensor(x))


def encode_reference(p, x) -> nn.Tensor:
    """Per-frame MLP over standardized reference-frame features -> (B, T_f, d)."""
    return _mlp(p, "enc_f", nn.as_tensor(x))


def _with_cls(p, tok, E, pe):
    B, T, d = E.shape
    cls = nn.reshape(nn.expand(p[f"cls_{tok}"], B), (B, 1, d))
    x = nn.concat([E, cls], axis=1)
    return x + nn.Tensor(np.broadcast_to(pe[: T + 1], (B, T + 1, d)))


def _add_pe(E, pe):
    B, T, d = E.shape
    return E + nn.Tensor(np.broadcast_to(pe[:T], (B, T, d)))


def _self_stack(p, tok, x, cfg):
    for i in range(cfg.n_self_layers):
        x = self_block(p, f"self_{tok}{i}", x, cfg.n_heads)
    return x


def _cross_stack(p, x, mem, cfg):
    for i in range(cfg.n_cross_layers):
        x = cross_block(p, f"cross{i}", x, mem, cfg.n_heads)
    return x


def _cls_out(p, tok, x):
    B, T, d = x.shape
    return nn.reshape(nn.slice_(nn.layer_norm(x, p[f"lnf_{tok}.g"], p[f"lnf_{tok}.b"]), 1, T - 1, T), (B, d))


def forward_raw(p: dict, cfg: SawConfig, stats: InputStats, obs: np.ndarray, ref: np.ndarray) -> nn.Tensor:
    """(B, 6) raw head outputs: unbounded fall logit then 5 standardized scores."""
    obs = np.asarray(obs, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if obs.ndim != 3 or obs.shape[1:] != (cfg.T_o, cfg.D):
        raise ConfigError(f"observation batch must be (B, {cfg.T_o}, {cfg.D}), got {obs.shape}")
    if ref.ndim != 3 or ref.shape[1:] != (cfg.T_f, cfg.D) or len(ref) != len(obs):
        raise ConfigError(f"reference batch must be ({len(obs)}, {cfg.T_f}, {cfg.D}), got {ref.shape}")
    xo, xf = _standardize_inputs(stats, obs, ref)
    pe = sinusoidal_pe(max(cfg.T_o, cfg.T_f) + 1, cfg.d_model)
    v = cfg.variant

    def ref_embed():
        E = encode_reference(p, xf)
        return _add_pe(E, pe) if cfg.add_pe_to_reference else E

    if v in ("full", "no_ref", "no_cross_attn"):
        xo_t = _self_stack(p, "o", _with_cls(p, "o", encode_observed(p, xo), pe), cfg)
    if v == "full":
        h = _cls_out(p, "o", _cross_stack(p, xo_t, ref_embed(), cfg))
    elif v == "no_ref":
        h = _cls_out(p, "o", xo_t)
    elif v == "no_obs":
        h = _cls_out(p, "f", _self_stack(p, "f", _ref_main(p, encode_reference(p, xf), pe, cfg), cfg))
    elif v == "no_cross_attn":
        xf_t = _self_stack(p, "f", _ref_main(p, encode_reference(p, xf), pe, cfg), cfg)
        h = nn.concat([_cls_out(p, "o", xo_t), _cls_out(p, "f", xf_t)], axis=1)
    else:  # inverted
        xf_t = _self_stack(p, "f", _ref_main(p, encode_reference(p, xf), pe, cfg), cfg)
        mem = _add_pe(encode_observed(p, xo), pe)
        h = _cls_out(p, "f", _cross_stack(p, xf_t, mem, cfg))
    return _mlp(p, "head", h)


def _ref_main(p, Ef, pe, cfg):
    """Reference stream with its class token; positions only if configured."""
    if cfg.add_pe_to_reference:
        return _with_cls(p, "f", Ef, pe)
    B, T, d = Ef.shape
    return nn.concat([Ef, nn.reshape(nn.expand(p["cls_f"], B), (B, 1, d))], axis=1)


def forward(model: SawModel, obs, ref) -> ScorePrediction:
    return model.predict(obs, ref)


# -- loss ------------------------------------------------------------------

def loss_from_raw(raw: nn.Tensor, fall: np.ndarray, z_target: np.ndarray) -> nn.Tensor:
    """Mean over the batch of BCE(fall) + MSE over the 5 standardized scores."""
    B = raw.shape[0]
    if np.any(~np.isfinite(fall)) or np.any(~np.isfinite(z_target)):
        raise ValueError("non-finite training target")
    logit_raw = nn.reshape(nn.slice_(raw, 1, 0, 1), (B,))
    # smooth bound keeps gradients alive for saturated logits
    logit = nn.scale(_tanh(nn.scale(logit_raw, 1.0 / LOGIT_BOUND)), LOGIT_BOUND)
    bce = nn.mean(nn.bce_with_logits(logit, fall))
    err = nn.slice_(raw, 1, 1, 6) - nn.Tensor(z_target)
    mse = nn.mean(nn.mul(err, err))
    return bce + mse


def _tanh(a: nn.Tensor) -> nn.Tensor:
    t = np.tanh(a.data)
    return nn._record(nn.Tensor(t), (a,), lambda g: (g * (1.0 - t * t),))


def loss(model: SawModel, obs, ref, target: np.ndarray) -> float:
    raw = forward_raw(model.params, model.config, model.input_stats, obs, ref)
    z = model.target_stats.standardize(np.asarray(target)[:, 1:])
    return float(loss_from_raw(raw, np.asarray(target)[:, 0], z).data)


# -- training --------------------------------------------------------------

@contextmanager
def single_thread():
    """Pin BLAS to one thread so results do not depend on the machine's core count."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        yield
        return
    with threadpool_limits(limits=1):
        yield


@dataclass
class TrainConfig:
    lr: float = 3e-4
    batch_size: int = 64
    max_epochs: int = 60
    patience: int = 10
    seed: int = 0
    max_steps: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _check_dataset(cfg: SawConfig, ds: Dataset, what: str):
    if len(ds) == 0:
        raise ValueError(f"{what} dataset is empty")
    if ds.T_f != cfg.T_f or abs(ds.horizon_s - cfg.horizon_seconds) > 1e-9:
        raise ConfigError(f"{what} dataset horizon {ds.horizon_s}s ({ds.T_f} frames) does not match "
                          f"model horizon {cfg.horizon_seconds}s ({cfg.T_f} frames)")
    if ds.T_o != cfg.T_o or ds.obs.shape[2] != cfg.D:
        raise ConfigError(f"{what} dataset windows ({ds.T_o} x {ds.obs.shape[2]}) do not match model "
                          f"({cfg.T_o} x {cfg.D})")


def train(cfg: SawConfig, train_ds: Dataset, val_ds: Dataset | None = None, tcfg: TrainConfig | None = None,
          seed: int | None = None) -> tuple[SawModel, list[dict]]:
    """Adam on BCE + MSE; early stopping on validation fall accuracy.

    Returns the best-validation model and a per-epoch log.
    """
    tcfg = tcfg or TrainConfig()
    seed = tcfg.seed if seed is None else seed
    _check_dataset(cfg, train_ds, "training")
    if val_ds is not None:
        _check_dataset(cfg, val_ds, "validation")
    rng = np.random.default_rng(seed)
    model = SawModel(cfg, init_params(cfg, seed), InputStats.fit(train_ds.obs, train_ds.ref),
                     NormStats.fit(train_ds.target))
    opt = nn.Adam(model.params, lr=tcfg.lr)
    names = sorted(model.params)
    z_all = model.target_stats.standardize(train_ds.target[:, 1:])
    fall_all = train_ds.target[:, 0]
    history: list[dict] = []
    best_acc, best_params, bad = -1.0, None, 0
    steps = 0
    with single_thread():
        for epoch in range(tcfg.max_epochs):
            order = rng.permutation(len(train_ds))
            total, count = 0.0, 0
            for s in range(0, len(order), tcfg.batch_size):
                idx = np.sort(order[s:s + tcfg.batch_size])
                with nn.Tape() as tape:
                    raw = forward_raw(model.params, cfg, model.input_stats, train_ds.obs[idx], train_ds.ref[idx])
                    L = loss_from_raw(raw, fall_all[idx], z_all[idx])
                val = float(L.data)
                if not math.isfinite(val):
                    raise FloatingPointError(f"non-finite loss at epoch {epoch}, step {steps}")
                grads = tape.gradient(L, [model.params[k] for k in names])
                opt.step(dict(zip(names, grads)))
                total += val * len(idx)
                count += len(idx)
                steps += 1
                if tcfg.max_steps is not None and steps >= tcfg.max_steps:
                    break
            entry = {"epoch": epoch, "steps": steps, "train_loss": total / count}
            if val_ds is not None:
                m = evaluate(model, val_ds)
                entry["val_fall_accuracy"] = m["fall_accuracy"]
                entry["val_loss"] = m["loss"]
                if m["fall_accuracy"] > best_acc:
                    best_acc, bad = m["fall_accuracy"], 0
                    best_params = {k: t.data.copy() for k, t in model.params.items()}
                else:
                    bad += 1
            history.append(entry)
            log.info("epoch %d %s", epoch, entry)
            if (val_ds is not None and bad >= tcfg.patience) or (tcfg.max_steps is not None and steps >= tcfg.max_steps):
                break
    if best_params is not None:
        for k, v in best_params.items():
            model.params[k].data = v
    return model, history


def evaluate(model: SawModel, ds: Dataset, batch_size: int = 256) -> dict:
    """Fall accuracy at 0.5 and per-score MSE in raw units."""
    if len(ds) == 0:
        raise ValueError("evaluation dataset is empty")
    _check_dataset(model.config, ds, "evaluation")
    preds, losses = [], 0.0
    z_t = model.target_stats.standardize(ds.target[:, 1:])
    with single_thread():
        for s in range(0, len(ds), batch_size):
            sl = slice(s, s + batch_size)
            raw = forward_raw(model.params, model.config, model.input_stats, ds.obs[sl], ds.ref[sl])
            losses += float(loss_from_raw(raw, ds.target[sl, 0], z_t[sl]).data) * len(ds.obs[sl])
            preds.append(ScorePrediction.from_raw(raw.data, model.target_stats).scores)
    pred = np.concatenate(preds)
    acc = float(np.mean((pred[:, 0] > 0.5) == (ds.target[:, 0] > 0.5)))
    mse = np.mean((pred[:, 1:] - ds.target[:, 1:]) ** 2, axis=0)
    return {
        "fall_accuracy": acc,
        "mse": dict(zip(REGRESSION_FIELDS, map(float, mse))),
        "loss": losses / len(ds),
        "variant": model.config.variant,
        "horizon_s": model.config.horizon_seconds,
        "count": len(ds),
    }
