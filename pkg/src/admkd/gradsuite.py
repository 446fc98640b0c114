"""Seeded gradient-check cases for every tensor op and every loss.

Each registry entry maps a name to a builder ``rng -> (f, x)`` where ``f``
takes a float64 tensor and returns a scalar tensor.  Random inputs keep away
from the ReLU kink so central differences stay valid.
"""

from __future__ import annotations

import zlib
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import losses as L
from . import tensor as T
from .gradcheck import GradCheckReport, grad_check
from .nn import Adapter
from .tensor import Tensor

Case = Callable[[np.random.Generator], Tuple[Callable[[Tensor], Tensor], np.ndarray]]

TOLERANCE = 1e-4
EPS = 1e-5


def _away(rng, shape, low=0.1, high=1.0) -> np.ndarray:
    """Random values with |x| in [low, high] and a random sign."""
    mag = rng.uniform(low, high, size=shape)
    return np.where(rng.random(shape) < 0.5, -mag, mag)


def _pos(rng, shape, low=0.5, high=2.0) -> np.ndarray:
    return rng.uniform(low, high, size=shape)


def _proj(rng, shape) -> Tensor:
    """Fixed random projection so vector-valued ops reduce to a scalar."""
    return Tensor(rng.normal(size=shape))


def _scalarize(rng, shape):
    w = _proj(rng, shape)
    return lambda out: (out * w).sum()


def _head(rng, c: int, k: int):
    w = Tensor(rng.normal(scale=0.5, size=(c, k)))
    b = Tensor(rng.normal(scale=0.1, size=(k,)))
    return lambda pooled: T.matmul(pooled, w) + b


# ----------------------------------------------------------------------
# elementwise / shape ops


def _unary(op):
    def build(rng):
        x = _away(rng, (3, 4))
        red = _scalarize(rng, (3, 4))
        return (lambda t: red(op(t))), x
    return build


def _unary_pos(op):
    def build(rng):
        x = _pos(rng, (3, 4))
        red = _scalarize(rng, (3, 4))
        return (lambda t: red(op(t))), x
    return build


def _binary(op, side: int, positive_other: bool = False):
    def build(rng):
        x = _away(rng, (3, 4))
        other = Tensor(_pos(rng, (4,)) if positive_other else _away(rng, (4,)))
        red = _scalarize(rng, (3, 4))
        if side == 0:
            return (lambda t: red(op(t, other))), x
        y = _pos(rng, (4,)) if positive_other else _away(rng, (4,))
        base = Tensor(x)
        return (lambda t: red(op(base, t))), y
    return build


def _case_sum(rng):
    red = _scalarize(rng, (3, 1))
    return (lambda t: red(T.sum_(t, axis=1, keepdims=True))), _away(rng, (3, 4))


def _case_mean(rng):
    red = _scalarize(rng, (4,))
    return (lambda t: red(T.mean(t, axis=0))), _away(rng, (3, 4))


def _case_reshape(rng):
    red = _scalarize(rng, (4, 3))
    return (lambda t: red(T.reshape(t, (4, 3)))), _away(rng, (3, 4))


def _case_transpose(rng):
    red = _scalarize(rng, (4, 2, 3))
    return (lambda t: red(T.transpose(t, (2, 0, 1)))), _away(rng, (2, 3, 4))


def _case_concatenate(rng):
    other = Tensor(_away(rng, (2, 4)))
    red = _scalarize(rng, (5, 4))
    return (lambda t: red(T.concatenate([t, other], axis=0))), _away(rng, (3, 4))


def _case_matmul(side: int):
    def build(rng):
        a, b = _away(rng, (3, 5)), _away(rng, (5, 2))
        red = _scalarize(rng, (3, 2))
        if side == 0:
            bt = Tensor(b)
            return (lambda t: red(T.matmul(t, bt))), a
        at = Tensor(a)
        return (lambda t: red(T.matmul(at, t))), b
    return build


def _case_conv(side: int, stride: int, pad: int, kernel: int = 3):
    def build(rng):
        x, k = _away(rng, (2, 3, 6, 6)), _away(rng, (4, 3, kernel, kernel))
        out_hw = (6 + 2 * pad - kernel) // stride + 1
        red = _scalarize(rng, (2, 4, out_hw, out_hw))
        if side == 0:
            kt = Tensor(k)
            return (lambda t: red(T.conv2d(t, kt, stride, pad))), x
        xt = Tensor(x)
        return (lambda t: red(T.conv2d(xt, t, stride, pad))), k
    return build


def _case_gap(rng):
    red = _scalarize(rng, (2, 3))
    return (lambda t: red(T.gap(t))), _away(rng, (2, 3, 4, 4))


def _case_batch_norm(which: str, train: bool = True):
    def build(rng):
        x = _away(rng, (3, 4, 3, 3))
        gamma, beta = _pos(rng, (4,)), _away(rng, (4,))
        rm, rv = _away(rng, (4,)), _pos(rng, (4,))
        red = _scalarize(rng, x.shape)
        stats = {} if train else {"running_mean": rm, "running_var": rv}

        def f(t):
            args = {"x": Tensor(x), "gamma": Tensor(gamma), "beta": Tensor(beta)}
            args[which] = t
            return red(T.batch_norm(args["x"], args["gamma"], args["beta"], **stats)[0])
        return f, {"x": x, "gamma": gamma, "beta": beta}[which]
    return build


def _case_softmax(log: bool, tau: float):
    def build(rng):
        red = _scalarize(rng, (3, 5))
        op = T.log_softmax if log else T.softmax
        return (lambda t: red(op(t, tau))), rng.normal(size=(3, 5))
    return build


# ----------------------------------------------------------------------
# losses


def _labels(rng, b=4, k=5):
    return rng.integers(0, k, size=b)


def _case_ce(rng):
    y = _labels(rng)
    return (lambda t: L.ce_loss(t, y)), rng.normal(size=(4, 5))


def _case_kd(tau: float):
    def build(rng):
        teacher = rng.normal(size=(4, 5))
        return (lambda t: L.kd_loss(t, teacher, tau)), rng.normal(size=(4, 5))
    return build


def _case_dml(m: int):
    def build(rng):
        y = _labels(rng)
        peers = [Tensor(rng.normal(size=(4, 5))) for _ in range(m - 1)]
        return (lambda t: L.dml_loss([t] + peers, y, lam=1.0, tau=2.0)[1]), rng.normal(size=(4, 5))
    return build


def _features(rng, b=3, c=4, h=3, w=3):
    return _away(rng, (b, c, h, w))


def _case_feature(variant: str):
    def build(rng):
        fs = [_features(rng) for _ in range(3)]
        ft = [Tensor(_features(rng)) for _ in range(3)]

        def f(t):
            stages = [Tensor(fs[0]), Tensor(fs[1]), t]
            return L.feature_mse_loss(stages, ft, None, variant)
        return f, fs[2]
    return build


def _case_feature_adapter(rng):
    fs = [_features(rng, c=2) for _ in range(2)]
    ft = [Tensor(_features(rng, c=4)) for _ in range(2)]
    w = _away(rng, (4, 2, 1, 1))

    def f(t):
        adapters = [None, Adapter(2, 4, weight=w)]
        adapters[1].weight = t
        return L.feature_mse_loss([Tensor(x) for x in fs], ft, adapters, "plain")
    return f, w


def _similarity_weights(rng, kind: str):
    fs, ft = _features(rng), _features(rng)
    s = L.similarity_map(fs, ft)
    return L.consensus_weights(s) if kind == "co" else L.divergence_weights(s)


def _case_adm_ce(kind: str):
    def build(rng):
        w = _similarity_weights(rng, kind)
        head = _head(rng, 4, 5)
        y = _labels(rng, 3)
        fn = L.consensus_loss if kind == "co" else L.divergence_loss
        return (lambda t: fn(head, t, w, y)), _features(rng)
    return build


def _case_adm_kd_consensus(rng):
    w = _similarity_weights(rng, "co")
    head_s, head_t = _head(rng, 4, 5), _head(rng, 4, 5)
    ft = Tensor(_features(rng))

    def f(t):
        zs = L.weighted_head_logits(head_s, t, w)
        zt = L.weighted_head_logits(head_t, ft, w)
        return L.adm_kd_consensus(zs, zt, 2.0)
    return f, _features(rng)


def _case_adm_kd_divergence(rng):
    w = _similarity_weights(rng, "di")
    head = _head(rng, 4, 5)
    y = _labels(rng, 3)
    cache = L.TeacherPredictionCache(3, 5)
    cache.store(np.arange(3), L.soft_targets(rng.normal(size=(3, 5)), 1.0))
    cache.commit()
    return (lambda t: L.adm_kd_divergence(L.weighted_head_logits(head, t, w), y, cache, np.arange(3), 0.4)), \
        _features(rng)


def _case_objective(side: str, form: str):
    """Joint two-model objective, both models trainable, differentiated
    through one model's last feature tap (similarity, attention weights and
    peer targets are stop-gradient quantities)."""
    def build(rng):
        y = _labels(rng, 3)
        heads = [_head(rng, 4, 5), _head(rng, 4, 5)]
        feats = [[_features(rng) for _ in range(2)] for _ in range(2)]
        cfg = L.DistillConfig(tau=2.0, alpha=0.3, beta=0.7, gamma=0.5, adm_form=form)
        cache = L.TeacherPredictionCache(3, 5)
        cache.store(np.arange(3), L.soft_targets(rng.normal(size=(3, 5)), 1.0))
        cache.commit()
        checked = 0 if side == "student" else 1

        def f(t):
            outs = []
            for i in range(2):
                taps = [Tensor(feats[i][0]), t if i == checked else Tensor(feats[i][1])]
                logits = heads[i](T.gap(T.relu(taps[-1])))
                outs.append(L.ModelOutputs(taps, logits, heads[i]))
            return L.objective(outs, y, [(1, 0)], {}, cfg, caches={1: cache}, indices=np.arange(3), delta=0.4).total
        return f, feats[checked][1]
    return build


def default_registry() -> Dict[str, Case]:
    reg: Dict[str, Case] = {
        "add": _binary(T.add, 0), "add[rhs]": _binary(T.add, 1),
        "sub": _binary(T.sub, 0), "sub[rhs]": _binary(T.sub, 1),
        "mul": _binary(T.mul, 0), "mul[rhs]": _binary(T.mul, 1),
        "div": _binary(T.div, 0, positive_other=True), "div[rhs]": _binary(T.div, 1, positive_other=True),
        "neg": _unary(T.neg),
        "power": _unary_pos(lambda t: T.power(t, 2.5)),
        "exp": _unary(T.exp),
        "log": _unary_pos(T.log),
        "sqrt": _unary_pos(T.sqrt),
        "relu": _unary(T.relu),
        "sum": _case_sum, "mean": _case_mean,
        "reshape": _case_reshape, "transpose": _case_transpose, "concatenate": _case_concatenate,
        "matmul": _case_matmul(0), "matmul[rhs]": _case_matmul(1),
        "conv2d": _case_conv(0, 1, 1), "conv2d[kernel]": _case_conv(1, 1, 1),
        "conv2d[stride2]": _case_conv(0, 2, 0, 2), "conv2d[stride2,kernel]": _case_conv(1, 2, 0, 2),
        "gap": _case_gap,
        "batch_norm": _case_batch_norm("x"), "batch_norm[gamma]": _case_batch_norm("gamma"),
        "batch_norm[beta]": _case_batch_norm("beta"), "batch_norm[eval]": _case_batch_norm("x", train=False),
        "softmax": _case_softmax(False, 1.0), "softmax[tau=3]": _case_softmax(False, 3.0),
        "log_softmax": _case_softmax(True, 1.0), "log_softmax[tau=3]": _case_softmax(True, 3.0),
        "loss:ce": _case_ce,
        "loss:kd": _case_kd(1.0), "loss:kd[tau=4]": _case_kd(4.0),
        "loss:dml[M=2]": _case_dml(2), "loss:dml[M=3]": _case_dml(3),
        "loss:consensus": _case_adm_ce("co"), "loss:divergence": _case_adm_ce("di"),
        "loss:adm-kd-consensus": _case_adm_kd_consensus,
        "loss:adm-kd-divergence": _case_adm_kd_divergence,
        "loss:feature-adapter": _case_feature_adapter,
    }
    for form in L.ADM_FORMS:
        for side in ("student", "teacher"):
            reg[f"loss:objective[{side},{form}]"] = _case_objective(side, form)
    for variant in L.FEAT_VARIANTS:
        reg[f"loss:feature[{variant}]"] = _case_feature(variant)
    return reg


def _seed_for(name: str, seed: int) -> list:
    return [seed, zlib.crc32(name.encode())]


def run_suite(registry: Optional[Dict[str, Case]] = None, seed: int = 0,
              tol: float = TOLERANCE, eps: float = EPS) -> List[GradCheckReport]:
    """Check every registered case; one report per entry, in registry order."""
    registry = default_registry() if registry is None else registry
    reports = []
    for name, build in registry.items():
        f, x = build(np.random.default_rng(_seed_for(name, seed)))
        reports.append(grad_check(f, np.asarray(x, dtype=np.float64), eps=eps, tol=tol, name=name))
    return reports


def format_table(reports: List[GradCheckReport]) -> str:
    width = max([len(r.op_name) for r in reports] + [2])
    lines = [f"{'op':<{width}}  {'max-rel-err':>12}  result"]
    for r in reports:
        lines.append(f"{r.op_name:<{width}}  {r.max_relative_error:12.3e}  {'pass' if r.passed else 'FAIL'}")
    return "\n".join(lines)
