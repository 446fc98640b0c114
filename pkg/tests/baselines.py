"""Hand-written reference training loops for trajectory comparisons."""

from admkd import losses as L
from admkd.data import batches
from admkd.nn import build_model
from admkd.optim import SGD, lr_at
from admkd.tensor import Tensor


def _setup(specs, seeds, optim):
    models = [build_model(s, seed) for s, seed in zip(specs, seeds)]
    opts = [SGD(m.parameters(), optim.lr, optim.momentum, optim.weight_decay) for m in models]
    return models, opts


def independent_ce(specs, seeds, train, plan):
    """Each model trained on plain CE, all sharing one batch stream."""
    models, opts = _setup(specs, seeds, plan.optim)
    sched = plan.optim.schedule()
    for epoch in range(plan.epochs):
        for o in opts:
            o.lr = lr_at(sched, epoch)
        for idx in batches(len(train), plan.batch_size, plan.seed, epoch):
            for m, o in zip(models, opts):
                _, logits = m.forward(Tensor(train.images[idx]), train=True)
                o.zero_grad()
                L.ce_loss(logits, train.labels[idx]).backward()
                o.step()
    return models


def plain_dml(specs, seeds, train, plan):
    """Deep mutual learning on the joint CE + KL objective."""
    models, opts = _setup(specs, seeds, plan.optim)
    sched = plan.optim.schedule()
    cfg = plan.distill
    for epoch in range(plan.epochs):
        for o in opts:
            o.lr = lr_at(sched, epoch)
        for idx in batches(len(train), plan.batch_size, plan.seed, epoch):
            logits = [m.forward(Tensor(train.images[idx]), train=True)[1] for m in models]
            for o in opts:
                o.zero_grad()
            L.dml_loss(logits, train.labels[idx], cfg.lam, cfg.tau)[1].backward()
            for o in opts:
                o.step()
    return models
