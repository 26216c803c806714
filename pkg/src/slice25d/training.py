"""NAdam, cross-entropy, ACC/AUROC and the training loop with backbone freezing."""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import functional as F
from .architecture import Model
from .data import batch_iterator
from .tensor import Tensor, backward, no_grad, softmax

logger = logging.getLogger(__name__)

CSV_HEADER = ("seed", "epoch", "split", "loss", "acc", "auroc")


class UndefinedMetricError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 2e-4
    batch_size: int = 64
    freeze_epochs: int = 2
    seeds: tuple = (0, 1, 2, 3, 4)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.freeze_epochs < self.epochs:
            raise ValueError(f"freeze_epochs={self.freeze_epochs} must be in [0, epochs={self.epochs})")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not self.seeds:
            raise ValueError("at least one seed is required")


# -- optimizer -------------------------------------------------------------

def nadam_step(param, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8, bias_correction=True):
    """One in-place NAdam update of ``param`` (with moments ``m``, ``v``) at step ``t >= 1``.

    theta -= lr * (beta1 * m_hat + (1 - beta1) * g / (1 - beta1**t)) / (sqrt(v_hat) + eps)
    with m_hat = m / (1 - beta1**(t+1)) and v_hat = v / (1 - beta2**t).
    """
    if t < 1:
        raise ValueError("step count t must be >= 1")
    if not (param.shape == grad.shape == m.shape == v.shape):
        raise ValueError(f"shape mismatch: param {param.shape}, grad {grad.shape}, m {m.shape}, v {v.shape}")
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    if bias_correction:
        m_hat = m / (1.0 - beta1 ** (t + 1))
        g_term = (1.0 - beta1) * grad / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
    else:
        m_hat, g_term, v_hat = m, (1.0 - beta1) * grad, v
    param -= lr * (beta1 * m_hat + g_term) / (np.sqrt(v_hat) + eps)


class NAdam:
    """NAdam over a parameter list; each parameter keeps its own step count."""

    def __init__(self, params, lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = [None] * len(self.params)

    def step(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            if self.state[i] is None:
                self.state[i] = [np.zeros_like(p.data), np.zeros_like(p.data), 0]
            st = self.state[i]
            st[2] += 1
            nadam_step(p.data, p.grad.astype(p.dtype, copy=False), st[0], st[1], st[2],
                       self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# -- metrics ---------------------------------------------------------------

def accuracy(scores, labels):
    """Fraction of rows whose argmax equals the label."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise UndefinedMetricError("accuracy of an empty set")
    return float(np.mean(scores.argmax(axis=1) == labels))


def auroc(scores, labels):
    """P(score of a positive > score of a negative) + 0.5 P(tie), via average ranks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC is undefined when only one class is present")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def multiclass_auroc(probs, labels):
    """Binary AUROC on the positive class, one-vs-rest macro average otherwise."""
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if probs.shape[1] == 2:
        return auroc(probs[:, 1], labels == 1)
    vals = [auroc(probs[:, k], labels == k) for k in range(probs.shape[1]) if 0 < (labels == k).sum() < len(labels)]
    if not vals:
        raise UndefinedMetricError("AUROC is undefined when only one class is present")
    return float(np.mean(vals))


def _safe_auroc(probs, labels):
    try:
        return multiclass_auroc(probs, labels)
    except UndefinedMetricError:
        return float("nan")


# -- reports ---------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    split: str
    loss: float
    acc: float
    auroc: float


@dataclass
class RunReport:
    """Metrics of one seed: per-epoch train/val rows and the final test row."""

    seed: int
    records: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)
    selection: str = "last_epoch"

    @property
    def test(self):
        return next(r for r in self.records if r.split == "test")

    def rows(self):
        for r in self.records:
            yield (self.seed, r.epoch, r.split, r.loss, r.acc, r.auroc)


def _fmt(v):
    return repr(float(v)) if not isinstance(v, str) else v


def write_report_csv(rows, path=None):
    """Write ``seed,epoch,split,loss,acc,auroc`` rows; returns the CSV text."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for seed, epoch, split, loss, acc, auc in rows:
        writer.writerow((seed, epoch, split, _fmt(loss), _fmt(acc), _fmt(auc)))
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


@dataclass
class MultiSeedReport:
    reports: list
    mean: dict
    std: dict

    def rows(self):
        for rep in self.reports:
            yield from rep.rows()
        yield ("mean", -1, "test", self.mean["loss"], self.mean["acc"], self.mean["auroc"])
        yield ("std", -1, "test", self.std["loss"], self.std["acc"], self.std["auroc"])

    def to_csv(self, path=None):
        return write_report_csv(self.rows(), path)


def aggregate(reports):
    finals = {k: np.array([getattr(r.test, k) for r in reports]) for k in ("loss", "acc", "auroc")}
    mean = {k: float(v.mean()) for k, v in finals.items()}
    std = {k: float(v.std()) for k, v in finals.items()}
    return MultiSeedReport(list(reports), mean, std)


# -- loops -----------------------------------------------------------------

def evaluate(model, dataset, split, batch_size=64):
    """Eval-mode ``(loss, acc, auroc, probs)`` on one split; AUROC is NaN if undefined."""
    model.eval()
    losses, probs, labels = [], [], []
    with no_grad():
        for x, y in batch_iterator(dataset, split, batch_size):
            logits, _ = model(Tensor(x.astype(model.classifier.weight.dtype, copy=False)))
            losses.append(F.cross_entropy(logits, y).item() * len(y))
            probs.append(softmax(logits, axis=1).data)
            labels.append(y)
    probs = np.concatenate(probs)
    labels = np.concatenate(labels)
    return float(np.sum(losses) / len(labels)), accuracy(probs, labels), _safe_auroc(probs, labels), probs


def _set_trainable(params, flag):
    for p in params:
        p.requires_grad = flag
        if not flag:
            p.grad = None


def train(model, dataset, config, seed=0, on_epoch=None):
    """Train ``model`` on ``dataset['train']`` and report val per epoch and test at the end.

    For the first ``config.freeze_epochs`` epochs only the reduction head and
    classifier are updated; backbone parameters are left untouched.
    """
    for split in ("train", "val", "test"):
        if dataset.size(split) == 0:
            raise ValueError(f"split {split!r} is empty")
    report = RunReport(seed)
    opt = NAdam(model.parameters(), config.learning_rate, config.beta1, config.beta2, config.eps)
    backbone = model.backbone_parameters()
    dtype = model.classifier.weight.dtype
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        _set_trainable(backbone, epoch >= config.freeze_epochs)
        model.train()
        total, probs, labels = 0.0, [], []
        for b, (x, y) in enumerate(batch_iterator(dataset, "train", config.batch_size, seed, epoch)):
            logits, _ = model(Tensor(x.astype(dtype, copy=False)))
            loss = F.cross_entropy(logits, y)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss {value} at epoch {epoch}, batch {b} (seed {seed})")
            opt.zero_grad()
            backward(loss)
            opt.step()
            total += value * len(y)
            probs.append(softmax(logits.detach(), axis=1).data)
            labels.append(y)
        probs = np.concatenate(probs)
        labels = np.concatenate(labels)
        report.records.append(EpochRecord(epoch, "train", total / len(labels), accuracy(probs, labels),
                                          _safe_auroc(probs, labels)))
        vloss, vacc, vauc, _ = evaluate(model, dataset, "val", config.batch_size)
        report.records.append(EpochRecord(epoch, "val", vloss, vacc, vauc))
        report.epoch_seconds.append(time.perf_counter() - t0)
        logger.info("seed %s epoch %d: train loss %.4f, val acc %.3f auroc %.3f (%.2fs)",
                    seed, epoch, total / len(labels), vacc, vauc, report.epoch_seconds[-1])
        if on_epoch is not None:
            on_epoch(report)
    _set_trainable(backbone, True)
    tloss, tacc, tauc, _ = evaluate(model, dataset, "test", config.batch_size)
    report.records.append(EpochRecord(config.epochs - 1, "test", tloss, tacc, tauc))
    return report


def run_multiseed(spec, dataset, config, on_model=None):
    """Train one freshly initialized model per seed; returns the aggregated report.

    ``on_model(seed, model, report)`` is called after each run (for checkpoints).
    """
    reports = []
    for seed in config.seeds:
        model = Model(spec, seed=seed)
        rep = train(model, dataset, config, seed)
        reports.append(rep)
        if on_model is not None:
            on_model(seed, model, rep)
    return aggregate(reports)


def write_reduction_table(results, path=None, dataset_name="planted_signal"):
    """CSV laid out like a method x metric table: ``method,metric,<dataset>,std``.

    ``results`` maps a reduction name to its :class:`MultiSeedReport`.
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("method", "metric", dataset_name, "std"))
    for method, agg in results.items():
        writer.writerow((method, "AUC", _fmt(agg.mean["auroc"]), _fmt(agg.std["auroc"])))
        writer.writerow((method, "ACC", _fmt(agg.mean["acc"]), _fmt(agg.std["acc"])))
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text
