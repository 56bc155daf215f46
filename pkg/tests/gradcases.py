"""Gradient-check cases shared by the nn unit tests and the acceptance suite.

Each case maps a random input tensor to a scalar by contracting the op
output with a fixed random tensor, so every output coordinate matters.
"""
import numpy as np

from sawmotion import nn, saw


def _contract(y, C):
    return nn.sum_(nn.mul(y, nn.Tensor(C)))


def _unary(op, shape, rng, away_from=None):
    x = rng.normal(size=shape)
    if away_from is not None:  # keep clear of kinks so central differences are valid
        x = np.where(np.abs(x - away_from) < 0.05, x + 0.1, x)
    probe = op(nn.Tensor(x))
    C = rng.normal(size=probe.shape)
    return lambda t: _contract(op(t), C), nn.Tensor(x)


def _binary(op, shape_a, shape_b, rng, which):
    a, b = rng.normal(size=shape_a), rng.normal(size=shape_b)
    C = rng.normal(size=op(nn.Tensor(a), nn.Tensor(b)).shape)
    if which == 0:
        return lambda t: _contract(op(t, nn.Tensor(b)), C), nn.Tensor(a)
    return lambda t: _contract(op(nn.Tensor(a), t), C), nn.Tensor(b)


def op_cases(rng):
    """(name, f, x) triples covering every differentiable nn op, shapes drawn from ``rng``."""
    B, T, d = (int(v) for v in rng.integers(1, 4, 3))
    d = 2 * d
    sh = (B, T, d)
    cases = []
    for which in (0, 1):
        cases.append((f"add[{which}]", *_binary(nn.add, sh, sh, rng, which)))
        cases.append((f"sub[{which}]", *_binary(nn.sub, sh, sh, rng, which)))
        cases.append((f"mul[{which}]", *_binary(nn.mul, sh, sh, rng, which)))
        cases.append((f"matmul[{which}]", *_binary(nn.matmul, (B, T, d), (B, d, 3), rng, which)))
    cases.append(("scale", *_unary(lambda t: nn.scale(t, -1.7), sh, rng)))
    cases.append(("relu", *_unary(nn.relu, sh, rng, away_from=0.0)))
    cases.append(("gelu", *_unary(nn.gelu, sh, rng)))
    cases.append(("sigmoid", *_unary(nn.sigmoid, sh, rng)))
    cases.append(("clip", *_unary(lambda t: nn.clip(t, -0.5, 0.5), sh, rng, away_from=np.array(0.5))))
    cases.append(("reshape", *_unary(lambda t: nn.reshape(t, (B * T, d)), sh, rng)))
    cases.append(("transpose", *_unary(lambda t: nn.transpose(t, (2, 0, 1)), sh, rng)))
    cases.append(("expand", *_unary(lambda t: nn.expand(t, 3), (T, d), rng)))
    cases.append(("slice", *_unary(lambda t: nn.slice_(t, 2, 1, d), sh, rng)))
    cases.append(("concat", *_unary(lambda t: nn.concat([t, nn.scale(t, 2.0), nn.Tensor(np.ones(sh))], axis=1),
                                    sh, rng)))
    cases.append(("sum", *_unary(lambda t: nn.scale(nn.sum_(t), 0.3), sh, rng)))
    cases.append(("mean", *_unary(nn.mean, sh, rng)))
    cases.append(("softmax", *_unary(lambda t: nn.softmax(t, axis=-1), sh, rng)))
    cases.append(("softmax[axis=1]", *_unary(lambda t: nn.softmax(t, axis=1), sh, rng)))
    g, b = rng.normal(size=d), rng.normal(size=d)
    cases.append(("layer_norm[x]", *_unary(lambda t: nn.layer_norm(t, nn.Tensor(g), nn.Tensor(b)), sh, rng)))
    x0 = rng.normal(size=sh)
    cases.append(("layer_norm[gamma]", *_unary(lambda t: nn.layer_norm(nn.Tensor(x0), t, nn.Tensor(b)), (d,), rng)))
    cases.append(("layer_norm[beta]", *_unary(lambda t: nn.layer_norm(nn.Tensor(x0), nn.Tensor(g), t), (d,), rng)))
    W, bias = rng.normal(size=(d, 5)), rng.normal(size=5)
    cases.append(("linear[x]", *_unary(lambda t: nn.linear(t, nn.Tensor(W), nn.Tensor(bias)), sh, rng)))
    cases.append(("linear[W]", *_unary(lambda t: nn.linear(nn.Tensor(x0), t, nn.Tensor(bias)), (d, 5), rng)))
    cases.append(("linear[b]", *_unary(lambda t: nn.linear(nn.Tensor(x0), nn.Tensor(W), t), (5,), rng)))
    k0, v0 = rng.normal(size=(B, T + 1, d)), rng.normal(size=(B, T + 1, d))
    q0 = rng.normal(size=sh)
    cases.append(("attention[q]", *_unary(lambda t: nn.attention(t, nn.Tensor(k0), nn.Tensor(v0), 2), sh, rng)))
    cases.append(("attention[k]", *_unary(lambda t: nn.attention(nn.Tensor(q0), t, nn.Tensor(v0), 2),
                                          (B, T + 1, d), rng)))
    cases.append(("attention[v]", *_unary(lambda t: nn.attention(nn.Tensor(q0), nn.Tensor(k0), t, 2),
                                          (B, T + 1, d), rng)))
    y = (rng.random(size=(B, T)) > 0.5).astype(float)
    cases.append(("bce_with_logits", *_unary(lambda t: nn.bce_with_logits(t, y), (B, T), rng)))
    return cases


TINY = dict(S=2, T_o=4, T_f=6, d_model=8, n_heads=2, n_self_layers=1, n_cross_layers=1, mlp_hidden=8,
            horizon_seconds=0.12)


def saw_param_errors(variant="full", add_pe_to_reference=True, seed=0, B=3):
    """Max grad_check error of forward+loss with respect to each parameter tensor."""
    cfg = saw.SawConfig(**TINY, variant=variant, add_pe_to_reference=add_pe_to_reference)
    rng = np.random.default_rng(seed)
    obs = rng.normal(size=(B, cfg.T_o, cfg.D))
    ref = rng.normal(size=(B, cfg.T_f, cfg.D))
    fall = (rng.random(B) > 0.5).astype(float)
    z = rng.normal(size=(B, 5))
    params = saw.init_params(cfg, seed)
    stats = saw.InputStats.fit(obs, ref)
    out = {}
    for name in sorted(params):
        def f(t, name=name):
            p = dict(params)
            p[name] = t
            return saw.loss_from_raw(saw.forward_raw(p, cfg, stats, obs, ref), fall, z)
        out[name] = nn.grad_check(f, params[name])
    return out
