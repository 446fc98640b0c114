"""Training loops for online, offline and multi-network distillation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import checkpoint as ckpt
from .data import AugmentPolicy, DataError, Dataset, augment, batches
from .losses import (
    DistillConfig,
    ModelOutputs,
    Objective,
    TeacherPredictionCache,
    ce_loss,
    delta_schedule,
    objective,
    soft_targets,
)
from .nn import Adapter, Model, build_adapters
from .optim import SGD, Schedule, lr_at
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

ROLES = ("teacher", "student")
CSV_COLUMNS = ("epoch", "model", "ce", "kd", "feat", "co", "di", "total", "top1-train", "top1-test",
               "sim-min", "sim-max", "sim-var", "lr")


class PlanError(ValueError):
    pass


class NumericalError(RuntimeError):
    def __init__(self, component: str, value: float):
        super().__init__(f"non-finite loss component {component} = {value}")
        self.component = component
        self.value = value


class ContractError(RuntimeError):
    pass


@dataclass
class OptimConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    milestones: List[int] = field(default_factory=lambda: [30, 60, 90])
    decay: float = 0.1

    def schedule(self) -> Schedule:
        return Schedule(self.lr, self.milestones, self.decay)


@dataclass
class RunPlan:
    mode: str
    roles: List[str]
    epochs: int
    batch_size: int
    seed: int
    distill: DistillConfig = field(default_factory=DistillConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    augment: Optional[AugmentPolicy] = None
    eval_every: int = 1

    def validate(self) -> None:
        if any(r not in ROLES for r in self.roles):
            raise PlanError(f"roles must be 'teacher' or 'student', got {self.roles}")
        n_t = self.roles.count("teacher")
        n_s = self.roles.count("student")
        if self.mode == "online":
            if len(self.roles) < 2 or n_t < 1 or n_s < 1:
                raise PlanError(f"online mode needs >= 2 models with at least one teacher and one student, got {self.roles}")
        elif self.mode == "offline":
            if len(self.roles) != 2 or n_t != 1:
                raise PlanError(f"offline mode needs exactly one frozen teacher and one student, got {self.roles}")
        elif self.mode == "multi":
            if len(self.roles) != 3 or (n_t, n_s) not in ((1, 2), (2, 1)):
                raise PlanError(f"multi mode needs a 1T2S or 2T1S role set, got {self.roles}")
        else:
            raise PlanError(f"unknown mode {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise PlanError("epochs and batch_size must be >= 1")

    def pairs(self) -> List[Tuple[int, int]]:
        """(teacher, student) index pairs that receive ADM terms."""
        teachers = [i for i, r in enumerate(self.roles) if r == "teacher"]
        students = [i for i, r in enumerate(self.roles) if r == "student"]
        return [(t, s) for t in teachers for s in students]

    @property
    def frozen(self) -> List[bool]:
        return [self.mode == "offline" and r == "teacher" for r in self.roles]


def evaluate(model, data: Dataset, batch_size: int = 256) -> Tuple[float, float]:
    """Eval-mode top-1 accuracy and mean cross-entropy over a split."""
    n = len(data.labels)
    if n == 0:
        raise DataError("cannot evaluate on an empty split")
    correct = 0
    ce_sum = 0.0
    with no_grad():
        for start in range(0, n, batch_size):
            x = data.images[start:start + batch_size]
            y = data.labels[start:start + batch_size]
            _, logits = model.forward(Tensor(x), train=False)
            z = logits.data.astype(np.float64)
            correct += int((z.argmax(axis=1) == y).sum())
            zmax = z.max(axis=1, keepdims=True)
            lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
            ce_sum += float((lse - z[np.arange(len(y)), y]).sum())
    return correct / n, ce_sum / n


class _Running:
    """Batch-size weighted means plus min/max/variance of a weight field."""

    def __init__(self):
        self.weight = 0
        self.sums: Dict[str, float] = {}
        self.count = 0
        self.wsum = 0.0
        self.wsq = 0.0
        self.wmin = math.inf
        self.wmax = -math.inf

    def add_components(self, comp: Dict[str, float], b: int) -> None:
        self.weight += b
        for k, v in comp.items():
            self.sums[k] = self.sums.get(k, 0.0) + v * b

    def add_field(self, w: np.ndarray) -> None:
        w = np.asarray(w, dtype=np.float64)
        self.count += w.size
        self.wsum += float(w.sum())
        self.wsq += float((w * w).sum())
        self.wmin = min(self.wmin, float(w.min()))
        self.wmax = max(self.wmax, float(w.max()))

    def means(self) -> Dict[str, float]:
        return {k: v / self.weight for k, v in self.sums.items()} if self.weight else {}

    def field_stats(self) -> Tuple[float, float, float]:
        if not self.count:
            return math.nan, math.nan, math.nan
        mean = self.wsum / self.count
        return self.wmin, self.wmax, max(self.wsq / self.count - mean * mean, 0.0)


class Trainer:
    """Owns models, adapters, optimizers and prediction caches for one run."""

    def __init__(self, models: Sequence[Model], plan: RunPlan, train: Dataset,
                 test: Optional[Dataset] = None, names: Optional[Sequence[str]] = None):
        plan.validate()
        plan.distill.validate()
        if len(models) != len(plan.roles):
            raise PlanError(f"{len(models)} models for {len(plan.roles)} roles")
        self.models = list(models)
        self.plan = plan
        self.train = train
        self.test = test
        self.names = list(names) if names is not None else [m.spec.name for m in models]
        if len(set(self.names)) != len(self.names):
            raise PlanError(f"model names must be unique, got {self.names}")
        self.pairs = plan.pairs()
        self.frozen = plan.frozen
        self.schedule = plan.optim.schedule()
        self.history: List[dict] = []
        self.completed_epochs = 0

        self.adapters: Dict[Tuple[int, int], List[Optional[Adapter]]] = {}
        for t, s in self.pairs:
            self.adapters[(t, s)] = build_adapters(models[t].spec, models[s].spec, seed=plan.seed + 7919 * (t + 1) + s)

        self.optimizers: List[Optional[SGD]] = []
        for i, model in enumerate(self.models):
            if self.frozen[i]:
                model.set_trainable(False)
                self.optimizers.append(None)
                continue
            params = dict(model.parameters())
            params.update(self.adapter_parameters(i))
            o = plan.optim
            self.optimizers.append(SGD(params, o.lr, o.momentum, o.weight_decay))

        self.caches: Dict[int, TeacherPredictionCache] = {}
        if plan.distill.adm_form == "kd-kd":
            for t in {t for t, _ in self.pairs}:
                self.caches[t] = TeacherPredictionCache(len(train), train.num_classes)

    # ------------------------------------------------------------------
    def adapter_parameters(self, student: int) -> Dict[str, Tensor]:
        params = {}
        for (t, s), adps in self.adapters.items():
            if s != student:
                continue
            for stage, a in enumerate(adps):
                if a is not None:
                    params[f"adapter/{self.names[t]}/{stage}"] = a.weight
        return params

    def _batch_images(self, idx: np.ndarray, epoch: int) -> np.ndarray:
        x = self.train.images[idx]
        if self.plan.augment is not None and self.plan.augment.enabled:
            x = augment(x, self.plan.augment, self.plan.seed, epoch, idx)
        return x

    def step(self, idx: np.ndarray, epoch: int) -> Objective:
        """One optimization step on the samples ``idx``."""
        x = Tensor(self._batch_images(idx, epoch))
        y = self.train.labels[idx]
        outputs = []
        for i, model in enumerate(self.models):
            if self.frozen[i]:
                with no_grad():
                    feats, logits = model.forward(x, train=False)
            else:
                feats, logits = model.forward(x, train=True)
            outputs.append(ModelOutputs(feats, logits, model, trainable=not self.frozen[i]))

        cfg = self.plan.distill
        delta = delta_schedule(epoch, self.plan.epochs, cfg.delta_start, cfg.delta_end)
        obj = objective(outputs, y, self.pairs, self.adapters, cfg, caches=self.caches, indices=idx, delta=delta)
        for name, value in obj.named_terms():
            if not math.isfinite(value):
                raise NumericalError(name, value)

        for opt in self.optimizers:
            if opt is not None:
                opt.zero_grad()
        if obj.total.requires_grad:
            obj.total.backward()
        for i, model in enumerate(self.models):
            if self.frozen[i]:
                for pname, p in model.parameters().items():
                    if p.grad is not None and np.any(p.grad != 0):
                        raise ContractError(f"frozen teacher parameter {pname} received a gradient")
        for opt in self.optimizers:
            if opt is not None:
                opt.step()

        for t, cache in self.caches.items():
            cache.store(idx, soft_targets(outputs[t].logits, 1.0))
        return obj

    def train_epoch(self, epoch: int) -> List[dict]:
        lr = lr_at(self.schedule, epoch)
        for opt in self.optimizers:
            if opt is not None:
                opt.lr = lr
        running = [_Running() for _ in self.models]
        for idx in batches(len(self.train), self.plan.batch_size, self.plan.seed, epoch):
            obj = self.step(idx, epoch)
            for i, comp in enumerate(obj.components):
                running[i].add_components(comp, len(idx))
            for p in obj.pairs:
                running[p.teacher].add_field(p.w_di)
                running[p.student].add_field(p.w_di)
        for cache in self.caches.values():
            cache.commit()

        do_eval = self.plan.eval_every > 0 and (
            (epoch + 1) % self.plan.eval_every == 0 or epoch + 1 == self.plan.epochs)
        rows = []
        for i, model in enumerate(self.models):
            comp = running[i].means()
            top1_train = top1_test = math.nan
            if do_eval:
                top1_train = evaluate(model, self.train)[0]
                if self.test is not None:
                    top1_test = evaluate(model, self.test)[0]
            smin, smax, svar = running[i].field_stats()
            rows.append({
                "epoch": epoch, "model": self.names[i],
                "ce": comp.get("ce", 0.0), "kd": comp.get("kd", 0.0), "feat": comp.get("feat", 0.0),
                "co": comp.get("co", 0.0), "di": comp.get("di", 0.0), "total": comp.get("total", 0.0),
                "top1-train": top1_train, "top1-test": top1_test,
                "sim-min": smin, "sim-max": smax, "sim-var": svar, "lr": lr,
            })
        self.history.extend(rows)
        self.completed_epochs = epoch + 1
        return rows

    # the three entry points share one loop; the plan's mode decides the pairing
    def train_epoch_online(self, epoch: int) -> List[dict]:
        self._require_mode("online")
        return self.train_epoch(epoch)

    def train_epoch_offline(self, epoch: int) -> List[dict]:
        self._require_mode("offline")
        return self.train_epoch(epoch)

    def train_epoch_multi(self, epoch: int) -> List[dict]:
        self._require_mode("multi")
        return self.train_epoch(epoch)

    def _require_mode(self, mode: str) -> None:
        if self.plan.mode != mode:
            raise PlanError(f"trainer was planned for {self.plan.mode!r}, not {mode!r}")

    def fit(self, until: Optional[int] = None,
            on_epoch_end: Optional[Callable[["Trainer", int, List[dict]], None]] = None) -> List[dict]:
        until = self.plan.epochs if until is None else until
        rows = []
        for epoch in range(self.completed_epochs, until):
            epoch_rows = self.train_epoch(epoch)
            for r in epoch_rows:
                log.info("epoch %d %s total=%.4f top1-train=%.4f top1-test=%.4f",
                         r["epoch"], r["model"], r["total"], r["top1-train"], r["top1-test"])
            rows.extend(epoch_rows)
            if on_epoch_end is not None:
                on_epoch_end(self, epoch, epoch_rows)
        return rows

    # ------------------------------------------------------------------
    def save(self, directory, epoch: Optional[int] = None) -> List[Path]:
        """Write one checkpoint per model for the state after ``epoch`` completed epochs."""
        epoch = self.completed_epochs if epoch is None else epoch
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for i, model in enumerate(self.models):
            arrays = {}
            for (t, s), adps in self.adapters.items():
                if s == i:
                    for stage, a in enumerate(adps):
                        if a is not None:
                            arrays[f"adapter/{self.names[t]}/{stage}"] = a.weight.data
            opt = self.optimizers[i]
            if opt is not None:
                for name, v in opt.state.velocity.items():
                    arrays[f"velocity/{name}"] = v
            if i in self.caches:
                for k, v in self.caches[i].state().items():
                    arrays[f"cache/{k}"] = v
            meta = {
                "name": self.names[i],
                "role": self.plan.roles[i],
                "mode": self.plan.mode,
                "roles": {n: r for n, r in zip(self.names, self.plan.roles)},
                "optim": opt.hyperparameters() if opt is not None else None,
                "rng_state": {"seed": self.plan.seed, "next_epoch": epoch},
            }
            stem = directory / f"{self.names[i]}_e{epoch:04d}"
            ckpt.save_checkpoint(stem, model, epoch=epoch, extra_arrays=arrays, meta=meta)
            paths.append(stem.with_suffix(".json"))
        return paths

    def load(self, directory, epoch: int) -> None:
        """Restore every model, adapter, velocity buffer and cache from ``epoch``."""
        directory = Path(directory)
        for i, model in enumerate(self.models):
            c = ckpt.load_checkpoint(directory / f"{self.names[i]}_e{epoch:04d}.json")
            ckpt.restore_into(model, c)
            for (t, s), adps in self.adapters.items():
                if s == i:
                    for stage, a in enumerate(adps):
                        if a is not None:
                            a.weight.data = c.arrays[f"adapter/{self.names[t]}/{stage}"].copy()
            opt = self.optimizers[i]
            if opt is not None:
                for name in opt.state.velocity:
                    opt.state.velocity[name] = c.arrays[f"velocity/{name}"].copy()
            if i in self.caches:
                self.caches[i].load_state({"probs": c.arrays["cache/probs"], "valid": c.arrays["cache/valid"]})
        self.completed_epochs = epoch


def pretrain(model: Model, data: Dataset, optim: OptimConfig, epochs: int, batch_size: int, seed: int,
             policy: Optional[AugmentPolicy] = None) -> None:
    """Plain cross-entropy training, used to obtain a teacher for offline runs."""
    opt = SGD(model.parameters(), optim.lr, optim.momentum, optim.weight_decay)
    schedule = optim.schedule()
    for epoch in range(epochs):
        opt.lr = lr_at(schedule, epoch)
        for idx in batches(len(data), batch_size, seed, epoch):
            x = data.images[idx]
            if policy is not None and policy.enabled:
                x = augment(x, policy, seed, epoch, idx)
            _, logits = model.forward(Tensor(x), train=True)
            loss = ce_loss(logits, data.labels[idx])
            if not math.isfinite(loss.item()):
                raise NumericalError("ce", loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
