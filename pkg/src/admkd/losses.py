"""Distillation objectives.

Mutual logit distillation, feature mimicry with the teacher side detached,
and the similarity-driven consensus (student) / divergence (teacher)
classification losses, plus their KD-form variants and diagnostics.

Similarity maps and the attention weights derived from them never carry
gradient.  Reference distributions inside KL terms are always constants.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .nn import Adapter, PairingError, apply_adapter
from .tensor import ParameterError, Tensor, no_grad

ADM_FORMS = ("ce-ce", "kd-ce", "kd-kd")
FEAT_VARIANTS = ("plain", "norm", "relu", "drop-third")
MODES = ("online", "offline", "multi")
LOG_FLOOR = 1e-12
COSINE_FLOOR = 1e-8

PRESETS = {
    "imagenet-like": {"alpha": 0.2, "beta": 0.6, "gamma": 0.01},
    "cifar-like": {"alpha": 0.01, "beta": 0.01, "gamma": 1.0},
}


class LabelError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class CacheError(KeyError):
    pass


@dataclass
class DistillConfig:
    tau: float = 1.0
    lam: float = 1.0
    alpha: float = 0.2
    beta: float = 0.6
    gamma: float = 0.01
    eps: float = 1e-5
    adm_form: str = "kd-ce"
    feat_variant: str = "plain"
    delta_start: float = 0.2
    delta_end: float = 0.6
    mode: str = "online"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not (self.tau > 0):
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if not (self.eps > 0):
            raise ConfigError(f"eps must be > 0, got {self.eps}")
        for name in ("lam", "alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("delta_start", "delta_end"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if self.adm_form not in ADM_FORMS:
            raise ConfigError(f"adm_form must be one of {ADM_FORMS}, got {self.adm_form!r}")
        if self.feat_variant not in FEAT_VARIANTS:
            raise ConfigError(f"feat_variant must be one of {FEAT_VARIANTS}, got {self.feat_variant!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")

    @classmethod
    def preset(cls, name: str, **overrides) -> "DistillConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}")
        return cls(**{**PRESETS[name], **overrides})

    def to_dict(self) -> dict:
        return asdict(self)


# ----------------------------------------------------------------------
# logit losses


def _onehot(labels: np.ndarray, num_classes: int, dtype) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        bad = labels[(labels < 0) | (labels >= num_classes)][0]
        raise LabelError(f"label {bad} outside [0, {num_classes})")
    out = np.zeros((labels.shape[0], num_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


def ce_loss(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy via log-sum-exp."""
    onehot = _onehot(labels, logits.shape[-1], logits.dtype)
    logp = T.log_softmax(logits, 1.0)
    return -(logp * onehot).sum() / logits.dtype.type(logits.shape[0])


def soft_targets(logits, tau: float) -> np.ndarray:
    """Constant softened distribution of (detached) logits."""
    z = T.detach(logits) if isinstance(logits, Tensor) else Tensor(np.asarray(logits))
    with no_grad():
        return T.softmax(z, tau).data


def kd_to_target(logits: Tensor, target: np.ndarray, tau: float) -> Tensor:
    """tau^2 * mean_b KL(target || softmax(logits / tau)); ``target`` is constant."""
    target = np.asarray(target, dtype=logits.dtype)
    if target.shape != logits.shape:
        raise ValueError(f"target shape {target.shape} != logits shape {logits.shape}")
    neg_entropy = float((target * np.log(np.maximum(target, LOG_FLOOR))).sum())
    cross = (T.log_softmax(logits, tau) * target).sum()
    scale = logits.dtype.type(tau * tau / logits.shape[0])
    return (logits.dtype.type(neg_entropy) - cross) * scale


def kd_loss(student_logits: Tensor, teacher_logits, tau: float) -> Tensor:
    """tau^2 * mean_b KL(p_teacher || p_student); only the student side gets gradient."""
    if not (tau > 0):
        raise ParameterError(f"temperature must be positive, got {tau}")
    return kd_to_target(student_logits, soft_targets(teacher_logits, tau), tau)


@dataclass
class DMLTerms:
    ce: List[Tensor]
    kd: List[Optional[Tensor]]
    per_model: List[Tensor]
    total: Tensor


def dml_terms(logits: Sequence[Tensor], labels, lam: float, tau: float,
              trainable: Optional[Sequence[bool]] = None) -> DMLTerms:
    m = len(logits)
    trainable = list(trainable) if trainable is not None else [True] * m
    ce, kd, per_model = [], [], []
    total = None
    for i in range(m):
        if not trainable[i]:
            ce.append(None), kd.append(None), per_model.append(None)
            continue
        ce_i = ce_loss(logits[i], labels)
        peers = [n for n in range(m) if n != i]
        kd_i = None
        if peers:
            kd_i = kd_loss(logits[i], logits[peers[0]], tau)
            for n in peers[1:]:
                kd_i = kd_i + kd_loss(logits[i], logits[n], tau)
            if len(peers) > 1:
                kd_i = kd_i / logits[i].dtype.type(len(peers))
        loss_i = ce_i if (kd_i is None or lam == 0) else ce_i + kd_i * lam
        ce.append(ce_i), kd.append(kd_i), per_model.append(loss_i)
        total = loss_i if total is None else total + loss_i
    if total is None:
        total = Tensor(np.zeros((), np.float32))
    return DMLTerms(ce, kd, per_model, total)


def dml_loss(logits: Sequence[Tensor], labels, lam: float = 1.0, tau: float = 1.0,
             mode: str = "online") -> Tuple[List[Tensor], Tensor]:
    """Per model: CE + lam * mean over peers of KD; total is their sum."""
    if mode == "online" and len(logits) < 2:
        raise ConfigError(f"online mutual learning needs at least 2 models, got {len(logits)}")
    terms = dml_terms(logits, labels, lam, tau)
    return terms.per_model, terms.total


# ----------------------------------------------------------------------
# similarity and attention weights


@dataclass
class SimilarityMap:
    values: np.ndarray  # (B, H, W)
    mean: np.ndarray  # (B,)


def similarity_map(fs, ft) -> SimilarityMap:
    """Per-location cosine similarity along channels; detached."""
    fs = T.detach(fs).data if isinstance(fs, Tensor) else np.asarray(fs)
    ft = T.detach(ft).data if isinstance(ft, Tensor) else np.asarray(ft)
    if fs.shape != ft.shape or fs.ndim != 4:
        raise PairingError(f"similarity needs equal 4-d feature shapes, got {fs.shape} and {ft.shape}")
    dot = (fs * ft).sum(axis=1)
    norms = np.sqrt((fs * fs).sum(axis=1)) * np.sqrt((ft * ft).sum(axis=1))
    values = dot / np.maximum(norms, COSINE_FLOOR)
    return SimilarityMap(values, values.mean(axis=(1, 2)))


def consensus_weights(s: SimilarityMap, eps: float = 1e-5) -> np.ndarray:
    """(1 + S) / (1 + mean(S) + eps), shape (B, 1, H, W)."""
    v = s.values
    denom = 1.0 + v.mean(axis=(1, 2), keepdims=True) + eps
    return ((1.0 + v) / denom)[:, None, :, :].astype(v.dtype, copy=False)


def divergence_weights(s: SimilarityMap, eps: float = 1e-5) -> np.ndarray:
    """(1 - S) / (mean(1 - S) + eps), shape (B, 1, H, W)."""
    one_minus = 1.0 - s.values
    denom = one_minus.mean(axis=(1, 2), keepdims=True) + eps
    return (one_minus / denom)[:, None, :, :].astype(s.values.dtype, copy=False)


def _classifier(head) -> Callable[[Tensor], Tensor]:
    return head.classify if hasattr(head, "classify") else head


def weighted_head_logits(head, features: Tensor, weights: np.ndarray) -> Tensor:
    """head(GAP(weights * relu(features))); weights are constants."""
    w = np.asarray(weights, dtype=features.dtype)
    return _classifier(head)(T.gap(T.relu(features) * w))


def _check_stage(features: Tensor, weights: np.ndarray) -> None:
    w = np.asarray(weights)
    if features.ndim != 4 or w.shape != (features.shape[0], 1) + tuple(features.shape[2:]):
        raise PairingError(f"weights {w.shape} do not match features {features.shape}")


def consensus_loss(student, fs_last: Tensor, weights: np.ndarray, labels) -> Tensor:
    """Student CE on consensus-weighted, re-pooled last-stage features."""
    _check_stage(fs_last, weights)
    return ce_loss(weighted_head_logits(student, fs_last, weights), labels)


def divergence_loss(teacher, ft_last: Tensor, weights: np.ndarray, labels) -> Tensor:
    """Teacher CE on divergence-weighted, re-pooled last-stage features."""
    _check_stage(ft_last, weights)
    return ce_loss(weighted_head_logits(teacher, ft_last, weights), labels)


def adm_loss(co, di, alpha: float, beta: float) -> Tensor:
    """alpha * L_co + beta * L_di; zero-weighted terms stay out of the graph."""
    parts = []
    if alpha != 0:
        parts.append(_lift(co) * alpha)
    if beta != 0:
        parts.append(_lift(di) * beta)
    if not parts:
        return Tensor(np.zeros((), np.float32))
    return parts[0] if len(parts) == 1 else parts[0] + parts[1]


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


# ----------------------------------------------------------------------
# feature distillation


def _l2_normalize_maps(x: Tensor) -> Tensor:
    sq = (x * x).sum(axis=(2, 3), keepdims=True)
    return x / T.sqrt(sq + x.dtype.type(LOG_FLOOR))


def _variant_mse(fs: Tensor, ft: Tensor, variant: str) -> Tensor:
    if variant == "norm":
        fs, ft = _l2_normalize_maps(fs), _l2_normalize_maps(ft)
    elif variant == "relu":
        fs, ft = T.relu(fs), T.relu(ft)
    diff = fs - ft
    sq = diff * diff
    if variant != "drop-third":
        return sq.mean()
    n = sq.size
    dropped = math.ceil(n / 3)
    kept = n - dropped
    if kept == 0:
        return sq.sum() * sq.dtype.type(0)
    order = np.argsort(-sq.data.reshape(-1), kind="stable")
    mask = np.ones(n, dtype=sq.dtype)
    mask[order[:dropped]] = 0
    return (sq * mask.reshape(sq.shape)).sum() / sq.dtype.type(kept)


def stage_weight(idx: int, n_stages: int) -> float:
    return 1.0 / 2 ** (n_stages - idx)


def feature_mse_loss(fs_stages: Sequence[Tensor], ft_stages: Sequence[Tensor],
                     adapters: Optional[Sequence[Optional[Adapter]]] = None,
                     variant: str = "plain") -> Tensor:
    """Sum over stages 1..N-1 of MSE(adapt(fs), detach(ft)) / 2^(N - idx)."""
    if variant not in FEAT_VARIANTS:
        raise ConfigError(f"unknown feature-loss variant {variant!r}")
    n = len(fs_stages)
    if n != len(ft_stages):
        raise PairingError(f"stage lists differ in length: {n} vs {len(ft_stages)}")
    if n < 2:
        raise PairingError(f"feature loss needs at least 2 stages, got {n}")
    adapters = list(adapters) if adapters is not None else [None] * n
    total = None
    for idx in range(1, n):
        fs = apply_adapter(adapters[idx], fs_stages[idx])
        ft = T.detach(ft_stages[idx])
        if fs.shape != ft.shape:
            raise PairingError(f"stage {idx}: adapted student {fs.shape} vs teacher {ft.shape}")
        term = _variant_mse(fs, ft, variant) * fs.dtype.type(stage_weight(idx, n))
        total = term if total is None else total + term
    return total


# ----------------------------------------------------------------------
# KD-form consensus / divergence


def adm_kd_consensus(student_head_logits: Tensor, teacher_head_logits, tau: float) -> Tensor:
    """KD from the teacher's consensus-weighted head to the student's."""
    return kd_loss(student_head_logits, T.detach(_lift(teacher_head_logits)), tau)


def delta_schedule(epoch: int, total_epochs: int, start: float = 0.2, end: float = 0.6) -> float:
    """Linear ramp from ``start`` at epoch 0 to ``end`` at epoch total_epochs - 1."""
    if total_epochs <= 1:
        return float(start)
    t = min(max(epoch, 0), total_epochs - 1) / (total_epochs - 1)
    return (1.0 - t) * start + t * end


class TeacherPredictionCache:
    """Previous-epoch teacher probabilities keyed by sample index.

    ``store`` writes into a pending buffer; ``commit`` (at epoch end) makes
    those rows visible to ``lookup`` for the following epoch.
    """

    def __init__(self, num_samples: int, num_classes: int):
        self.num_samples, self.num_classes = num_samples, num_classes
        self.probs = np.zeros((num_samples, num_classes), np.float32)
        self.valid = np.zeros(num_samples, bool)
        self._pending = np.zeros_like(self.probs)
        self._pending_valid = np.zeros(num_samples, bool)

    @property
    def is_empty(self) -> bool:
        return not self.valid.any()

    def store(self, indices, probs: np.ndarray) -> None:
        indices = np.asarray(indices)
        self._pending[indices] = probs
        self._pending_valid[indices] = True

    def commit(self) -> None:
        self.probs[self._pending_valid] = self._pending[self._pending_valid]
        self.valid |= self._pending_valid
        self._pending_valid[:] = False

    def lookup(self, indices) -> np.ndarray:
        indices = np.asarray(indices)
        missing = indices[~self.valid[indices]]
        if missing.size:
            raise CacheError(f"no cached teacher prediction for sample {int(missing[0])}")
        return self.probs[indices]

    def state(self) -> Dict[str, np.ndarray]:
        return {"probs": self.probs.copy(), "valid": self.valid.astype(np.float32)}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        self.probs[...] = state["probs"]
        self.valid[...] = state["valid"] > 0.5


def divergence_target(labels, num_classes: int, cached: Optional[np.ndarray], delta: float) -> np.ndarray:
    onehot = _onehot(labels, num_classes, np.float64)
    if cached is None or delta == 0:
        return onehot
    return (1.0 - delta) * onehot + delta * np.asarray(cached, dtype=np.float64)


def adm_kd_divergence(teacher_head_logits: Tensor, labels, cache: Optional[TeacherPredictionCache],
                      indices, delta: float, tau: float = 1.0) -> Tensor:
    """KL from (1-delta)*onehot + delta*p_prev to the teacher's divergence-weighted head."""
    if not 0.0 <= delta <= 1.0:
        raise ParameterError(f"delta must lie in [0, 1], got {delta}")
    cached = None
    if cache is not None and not cache.is_empty:
        cached = cache.lookup(indices)
    target = divergence_target(labels, teacher_head_logits.shape[-1], cached, delta)
    return kd_to_target(teacher_head_logits, target, tau)


# ----------------------------------------------------------------------
# statistics and diagnostics


def similarity_stats(weights: np.ndarray) -> Tuple[float, float, float]:
    """(min, max, population variance) over every entry of a weight field."""
    w = np.asarray(weights, dtype=np.float64)
    return float(w.min()), float(w.max()), float(w.var())


@dataclass
class Diagnostics:
    weighted_kl: float
    weighted_ce_delta: float


def diagnostics(student, teacher, fs_last: Tensor, ft_last: Tensor, s: SimilarityMap, labels,
                tau: float = 1.0, eps: float = 1e-5) -> Diagnostics:
    """Consensus-weighted head KL (teacher || student) and the teacher's
    divergence-weighted CE minus its plain GAP CE."""
    w_co = consensus_weights(s, eps)
    w_di = divergence_weights(s, eps)
    with no_grad():
        zs = weighted_head_logits(student, fs_last, w_co)
        zt = weighted_head_logits(teacher, ft_last, w_co)
        kl = kd_loss(zs, zt, tau).item() / (tau * tau)
        weighted = ce_loss(weighted_head_logits(teacher, ft_last, w_di), labels).item()
        plain = ce_loss(_classifier(teacher)(T.gap(T.relu(ft_last))), labels).item()
    return Diagnostics(kl, weighted - plain)


# ----------------------------------------------------------------------
# combined objective


@dataclass
class ModelOutputs:
    features: List[Tensor]
    logits: Tensor
    head: object
    trainable: bool = True


@dataclass
class PairTerms:
    teacher: int
    student: int
    similarity: SimilarityMap
    w_co: np.ndarray
    w_di: np.ndarray
    feat: Optional[Tensor] = None
    co: Optional[Tensor] = None
    di: Optional[Tensor] = None


@dataclass
class Objective:
    total: Tensor
    dml: DMLTerms
    pairs: List[PairTerms]
    components: List[Dict[str, float]] = field(default_factory=list)
    co_counts: List[int] = field(default_factory=list)
    di_counts: List[int] = field(default_factory=list)

    def named_terms(self):
        """(component name, scalar) pairs for numeric health checks."""
        for i, (ce, kd) in enumerate(zip(self.dml.ce, self.dml.kd)):
            if ce is not None:
                yield f"ce[{i}]", ce.item()
            if kd is not None:
                yield f"kd[{i}]", kd.item()
        for p in self.pairs:
            for name in ("feat", "co", "di"):
                term = getattr(p, name)
                if term is not None:
                    yield f"{name}[{p.teacher}->{p.student}]", term.item()
        yield "total", self.total.item()


def _maybe_no_grad(active: bool):
    return no_grad() if active else contextlib.nullcontext()


def _pair_feat(out_s: ModelOutputs, out_t: ModelOutputs, adapters, cfg: DistillConfig) -> Tensor:
    return feature_mse_loss(out_s.features, out_t.features, adapters, cfg.feat_variant)


def objective(outputs: Sequence[ModelOutputs], labels, pairs: Sequence[Tuple[int, int]],
              adapters: Dict[Tuple[int, int], Sequence[Optional[Adapter]]], cfg: DistillConfig,
              caches: Optional[Dict[int, TeacherPredictionCache]] = None, indices=None,
              delta: float = 0.0) -> Objective:
    """Joint loss over all models: DML + gamma * feat + alpha * co + beta * di.

    ``pairs`` lists (teacher index, student index).  Terms with zero weight are
    evaluated for logging only and never enter the graph, so switching a
    weight to zero reproduces the reduced objective bit-exactly.
    """
    m = len(outputs)
    trainable = [o.trainable for o in outputs]
    dml = dml_terms([o.logits for o in outputs], labels, cfg.lam, cfg.tau, trainable)
    total = dml.total
    pair_terms: List[PairTerms] = []
    co_counts, di_counts = [0] * m, [0] * m
    extra: List[Tensor] = []

    for t, s in pairs:
        out_t, out_s = outputs[t], outputs[s]
        adp = adapters.get((t, s)) or [None] * len(out_s.features)
        fs_last, ft_last = out_s.features[-1], out_t.features[-1]
        with no_grad():
            fs_sim = apply_adapter(adp[-1], T.detach(fs_last))
        sim = similarity_map(fs_sim, ft_last)
        w_co = consensus_weights(sim, cfg.eps)
        w_di = divergence_weights(sim, cfg.eps)
        terms = PairTerms(t, s, sim, w_co, w_di)

        if out_s.trainable and len(out_s.features) >= 2:
            if cfg.gamma != 0:
                terms.feat = _pair_feat(out_s, out_t, adp, cfg)
                extra.append(terms.feat * cfg.gamma)
            else:
                with no_grad():
                    terms.feat = _pair_feat(out_s, out_t, adp, cfg)
        if out_s.trainable:
            with _maybe_no_grad(cfg.alpha == 0):
                if cfg.adm_form == "ce-ce":
                    terms.co = consensus_loss(out_s.head, fs_last, w_co, labels)
                else:
                    zs = weighted_head_logits(out_s.head, fs_last, w_co)
                    with no_grad():
                        zt = weighted_head_logits(out_t.head, ft_last, w_co)
                    terms.co = adm_kd_consensus(zs, zt, cfg.tau)
            co_counts[s] += 1
            if cfg.alpha != 0:
                extra.append(terms.co * cfg.alpha)
        if out_t.trainable:
            with _maybe_no_grad(cfg.beta == 0):
                if cfg.adm_form == "kd-kd":
                    zt = weighted_head_logits(out_t.head, ft_last, w_di)
                    cache = (caches or {}).get(t)
                    terms.di = adm_kd_divergence(zt, labels, cache, indices, delta, cfg.tau)
                else:
                    terms.di = divergence_loss(out_t.head, ft_last, w_di, labels)
            di_counts[t] += 1
            if cfg.beta != 0:
                extra.append(terms.di * cfg.beta)
        pair_terms.append(terms)

    for term in extra:
        total = total + term

    components = []
    for i in range(m):
        comp = {"ce": 0.0, "kd": 0.0, "feat": 0.0, "co": 0.0, "di": 0.0}
        if dml.ce[i] is not None:
            comp["ce"] = dml.ce[i].item()
        if dml.kd[i] is not None:
            comp["kd"] = dml.kd[i].item()
        for p in pair_terms:
            if p.student == i and p.feat is not None:
                comp["feat"] += p.feat.item()
            if p.student == i and p.co is not None:
                comp["co"] += p.co.item()
            if p.teacher == i and p.di is not None:
                comp["di"] += p.di.item()
        comp["total"] = (comp["ce"] + cfg.lam * comp["kd"] + cfg.gamma * comp["feat"]
                         + cfg.alpha * comp["co"] + cfg.beta * comp["di"])
        components.append(comp)
    return Objective(total, dml, pair_terms, components, co_counts, di_counts)


@dataclass
class LossBreakdown:
    total: Tensor
    dml: Tensor
    feat: Tensor
    co: Tensor
    di: Tensor
    adm: Tensor
    similarity: SimilarityMap


def total_loss(student: ModelOutputs, teacher: ModelOutputs, labels, cfg: DistillConfig,
               adapters: Optional[Sequence[Optional[Adapter]]] = None,
               cache: Optional[TeacherPredictionCache] = None, indices=None,
               delta: float = 0.0) -> LossBreakdown:
    """Two-model online objective L_dml + gamma * L_feat + L_adm."""
    obj = objective([student, teacher], labels, [(1, 0)], {(1, 0): adapters} if adapters else {}, cfg,
                    caches={1: cache} if cache is not None else None, indices=indices, delta=delta)
    p = obj.pairs[0]
    zero = Tensor(np.zeros((), np.float32))
    co = p.co if p.co is not None else zero
    di = p.di if p.di is not None else zero
    return LossBreakdown(
        total=obj.total,
        dml=obj.dml.total,
        feat=p.feat if p.feat is not None else zero,
        co=co,
        di=di,
        adm=adm_loss(co, di, cfg.alpha, cfg.beta),
        similarity=p.similarity,
    )
