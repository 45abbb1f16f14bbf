"""Probing classifiers over frozen embeddings, plus the chi-squared
independence test for pairs of categorical labels."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nnet
from .dataio import EmbeddingArchive, LabelTable, SplitSpec
from .special import chi2_sf

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProbeConfig:
    hidden_layers: int = 4
    hidden_width: int = 256
    l2_coeff: float = 1e-4
    lr: float = 0.0002
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 10
    standardize: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.hidden_layers < 0 or self.hidden_width <= 0 or self.batch_size <= 0:
            raise ValueError("layer counts and batch size must be positive")
        if self.max_epochs < 0 or self.patience < 0:
            raise ValueError("max_epochs and patience must be nonnegative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.l2_coeff < 0:
            raise ValueError("l2_coeff must be nonnegative")


@dataclass
class Probe:
    net: nnet.Network
    factor: str
    classes: list[str]        # output index -> class name
    trained_classes: list[str]
    mean: np.ndarray
    scale: np.ndarray

    def inputs(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.scale

    def predict(self, x: np.ndarray) -> np.ndarray:
        _, logits = nnet.forward(self.net, self.inputs(x))
        unseen = [k for k, c in enumerate(self.classes) if c not in set(self.trained_classes)]
        logits[:, unseen] = -np.inf
        return np.argmax(logits, axis=1)


@dataclass
class ProbeReport:
    factor: str
    n_classes: int
    n_train: int
    n_val: int
    n_test: int
    test_accuracy: float
    epochs_ran: int
    stopped_early: bool
    confusion: list[list[int]]
    classes: list[str]
    unseen_test_classes: list[str] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    best_epoch: int = 0

    def to_json(self) -> dict:
        return asdict(self)

    def tsv_row(self, embedding: str) -> str:
        return f"{embedding}\t{self.factor}\t{self.n_test}\t{self.test_accuracy:.6f}"


def _mean_ce(net: nnet.Network, x: np.ndarray, y: np.ndarray, chunk: int = 4096) -> float:
    total = 0.0
    for start in range(0, len(x), chunk):
        _, logits = nnet.forward(net, x[start:start + chunk])
        loss, _ = nnet.loss_softmax_ce(logits, y[start:start + chunk])
        total += loss * len(logits)
    return total / len(x)


def train_probe(embeddings: EmbeddingArchive, labels: LabelTable, factor: str, split: SplitSpec,
                cfg: ProbeConfig = ProbeConfig()) -> tuple[Probe, ProbeReport]:
    """Fit a dense ReLU classifier for ``factor`` with early stopping on val loss.

    The parameters with the lowest validation loss are restored before the
    test split is scored.
    """
    for name, ids in (("train", split.train_ids), ("val", split.val_ids), ("test", split.test_ids)):
        if not ids:
            raise ValueError(f"{name} split is empty")
    all_ids = [*split.train_ids, *split.val_ids, *split.test_ids]
    classes = labels.classes(factor, all_ids)
    trained = labels.classes(factor, split.train_ids)
    if len(trained) < 2:
        raise ValueError(f"factor {factor!r} has fewer than 2 classes in the train split")
    if len(classes) < 2:
        raise ValueError("need at least 2 classes")
    index = {c: k for k, c in enumerate(classes)}
    unseen = sorted(set(labels.classes(factor, split.test_ids)) - set(trained))
    if unseen:
        log.warning("test classes absent from train for %r: %s (counted as errors)", factor, unseen)

    x_tr = embeddings.matrix(split.train_ids)
    if cfg.standardize:
        mean = x_tr.mean(axis=0)
        scale = np.maximum(x_tr.std(axis=0), 1e-8)
    else:
        mean = np.zeros(embeddings.dim)
        scale = np.ones(embeddings.dim)

    ss = np.random.SeedSequence(cfg.seed)
    init_seed, shuffle_seed = ss.spawn(2)
    spec = nnet.NetworkSpec((embeddings.dim, *[cfg.hidden_width] * cfg.hidden_layers, len(classes)),
                            "relu", cfg.l2_coeff)
    net = nnet.init_network(spec, np.random.default_rng(init_seed))
    probe = Probe(net, factor, classes, trained, mean, scale)

    x_tr = probe.inputs(x_tr)
    y_tr = np.array([index[c] for c in labels.labels(split.train_ids, factor)])
    x_va = probe.inputs(embeddings.matrix(split.val_ids))
    y_va = np.array([index[c] for c in labels.labels(split.val_ids, factor)])

    adam = nnet.AdamState.for_network(net, lr=cfg.lr)
    rng = np.random.default_rng(shuffle_seed)
    best_loss = _mean_ce(net, x_va, y_va)
    best = net.copy()
    best_epoch = 0
    val_losses = [best_loss]   # index 0: before any update
    wait = 0
    epochs = 0
    stopped_early = False
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(x_tr))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            cache, logits = nnet.forward(net, x_tr[idx])
            _, dlogits = nnet.loss_softmax_ce(logits, y_tr[idx])
            grads = nnet.backward(net, cache, dlogits)
            if cfg.l2_coeff > 0:
                grads = nnet.add_gradients(grads, nnet.l2_penalty(net, cfg.l2_coeff)[1])
            nnet.adam_step(net, grads, adam)
        epochs = epoch
        val = _mean_ce(net, x_va, y_va)
        val_losses.append(val)
        if val < best_loss:
            best_loss, best, best_epoch, wait = val, net.copy(), epoch, 0
        else:
            wait += 1
            if wait > cfg.patience:
                stopped_early = epoch < cfg.max_epochs
                break
    probe.net = best
    report = evaluate_probe(probe, embeddings, labels, factor, split.test_ids)
    report.n_train = len(split.train_ids)
    report.n_val = len(split.val_ids)
    report.epochs_ran = epochs
    report.stopped_early = stopped_early
    report.val_losses = val_losses
    report.best_epoch = best_epoch
    return probe, report


def evaluate_probe(probe: Probe, embeddings: EmbeddingArchive, labels: LabelTable, factor: str,
                   ids) -> ProbeReport:
    ids = list(ids)
    if probe.net.spec.in_dim != embeddings.dim:
        raise ValueError(f"probe expects dim {probe.net.spec.in_dim}, archive has {embeddings.dim}")
    x = embeddings.matrix(ids)
    truth = labels.labels(ids, factor)
    classes = list(probe.classes)
    for c in sorted(set(truth) - set(classes)):
        classes.append(c)
    index = {c: k for k, c in enumerate(classes)}
    confusion = np.zeros((len(classes), len(classes)), dtype=int)
    if ids:
        pred = probe.predict(x)
        for t, p in zip(truth, pred):
            confusion[index[t], p] += 1
    n = len(ids)
    acc = float(np.trace(confusion) / n) if n else 0.0
    unseen = sorted(set(truth) - set(probe.trained_classes))
    return ProbeReport(factor, len(classes), 0, 0, n, acc, 0, False, confusion.tolist(), classes, unseen)


# -- chi-squared ---------------------------------------------------------------

@dataclass
class Chi2Result:
    statistic: float
    dof: int
    p_value: float
    reject_at_alpha: bool
    alpha: float

    def to_json(self) -> dict:
        return {"statistic": self.statistic, "dof": self.dof, "p_value": self.p_value,
                "reject": self.reject_at_alpha, "alpha": self.alpha}


def build_contingency(labels: LabelTable, factor_a: str, factor_b: str,
                      ids=None) -> tuple[np.ndarray, list[str], list[str]]:
    """Counts of (factor_a class, factor_b class); classes in lexicographic order."""
    ids = list(labels.rows) if ids is None else list(ids)
    a = labels.labels(ids, factor_a)
    b = labels.labels(ids, factor_b)
    rows = sorted(set(a))
    cols = sorted(set(b))
    ri = {c: k for k, c in enumerate(rows)}
    ci = {c: k for k, c in enumerate(cols)}
    table = np.zeros((len(rows), len(cols)), dtype=np.int64)
    for x, y in zip(a, b):
        table[ri[x], ci[y]] += 1
    return table, rows, cols


def chi_squared_independence(table, alpha: float = 0.01) -> Chi2Result:
    """Pearson chi-squared test of independence; reject iff p < alpha."""
    obs = np.asarray(table, dtype=float)
    if obs.ndim != 2 or obs.shape[0] < 2 or obs.shape[1] < 2:
        raise ValueError(f"contingency table must be at least 2x2, got shape {obs.shape}")
    if np.any(obs < 0):
        raise ValueError("counts must be nonnegative")
    row = obs.sum(axis=1)
    col = obs.sum(axis=0)
    if np.any(row == 0) or np.any(col == 0):
        raise ValueError("every row and column sum must be positive")
    expected = np.outer(row, col) / obs.sum()
    stat = float(np.sum((obs - expected) ** 2 / expected))
    dof = (obs.shape[0] - 1) * (obs.shape[1] - 1)
    p = min(max(chi2_sf(stat, dof), 0.0), 1.0)
    return Chi2Result(stat, dof, p, p < alpha, alpha)


def load_table_csv(path) -> np.ndarray:
    """Read a counts matrix from CSV; a nonnumeric first row/column is treated as labels."""
    import csv

    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]

    def numeric(cells):
        try:
            [float(c) for c in cells]
            return True
        except ValueError:
            return False

    if rows and not numeric(rows[0]):
        rows = rows[1:]
    if rows and not all(numeric(r) for r in rows):
        rows = [r[1:] for r in rows]
    return np.array([[float(c) for c in r] for r in rows])


def report_json(report: ProbeReport, embedding: str) -> str:
    obj = report.to_json()
    obj["embedding"] = embedding
    return json.dumps(obj, sort_keys=True)
