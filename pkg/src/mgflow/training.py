"""Minibatch Adam training for plain and discriminative flows."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .data import VectorStore
from .flow import DnfModel, FlowInstabilityError, FlowModel, class_log_prior, save_checkpoint, standard_log_prior
from .objectives import DegenerateInputError, ObjectiveSpec, compose, cosine_squares, length_metric, \
    angle_metric, within_pairs

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "objective", "prior_term", "entropy_term", "R_len", "R_ang", "diverged")


@dataclass
class TrainConfig:
    """Training loop settings.

    ``max_steps`` overrides ``epochs`` when set. ``batch_size`` is split into
    ``batch_size // samples_per_class`` classes per batch for labeled training.
    """

    epochs: int = 50
    batch_size: int = 256
    samples_per_class: int = 8
    learning_rate: float = 1e-3
    seed: int = 0
    divergence_threshold: float = 1e6
    checkpoint_interval: int = 0
    log_interval: int = 100
    max_steps: int | None = None
    probe_size: int = 512

    def __post_init__(self):
        if self.batch_size < 1 or self.samples_per_class < 1:
            raise ValueError("batch size and samples per class must be positive")
        if self.log_interval < 1:
            raise ValueError("log interval must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LogRecord:
    step: int
    objective: float
    prior_term: float
    entropy_term: float
    R_len: float
    R_ang: float
    diverged: bool
    terms: dict = field(default_factory=dict)
    wall_clock: float = 0.0


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    trip_value: float | None = None

    @property
    def diverged(self) -> bool:
        return any(r.diverged for r in self.records)

    @property
    def final(self) -> LogRecord:
        return self.records[-1]

    def append(self, rec: LogRecord) -> None:
        self.records.append(rec)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            for r in self.records:
                w.writerow([r.step] + [repr(float(getattr(r, c))) for c in LOG_COLUMNS[1:-1]] + [int(r.diverged)])


def _dataset_arrays(dataset):
    if isinstance(dataset, VectorStore):
        return np.asarray(dataset.vectors, dtype=float), np.asarray(dataset.labels)
    x, labels = dataset
    x = np.asarray(x, dtype=float)
    labels = np.asarray([str(y) for y in labels]) if labels is not None else np.array(["0"] * len(x))
    return x, labels


def make_batches(dataset, config: TrainConfig, rng, labeled: bool = True):
    """Endless iterator of ``(vectors, labels, sample_index)`` minibatches.

    Labeled batches pick ``batch_size // samples_per_class`` classes and that
    many samples from each; classes smaller than the request are topped up by
    resampling, and ``sample_index`` lets callers spot the repeats.
    """
    x, labels = _dataset_arrays(dataset)
    n = len(x)
    if not labeled:
        while True:
            order = rng.permutation(n)
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                if len(idx) < min(config.batch_size, n):
                    break
                yield x[idx], labels[idx], idx
    classes = list(dict.fromkeys(labels.tolist()))
    members = [np.flatnonzero(labels == c) for c in classes]
    spc = config.samples_per_class
    per_batch = max(1, min(len(classes), config.batch_size // spc))
    while True:
        picks = []
        for c in rng.choice(len(classes), per_batch, replace=False):
            pool = members[c]
            if len(pool) >= spc:
                picks.append(rng.choice(pool, spc, replace=False))
            else:
                extra = rng.choice(pool, spc - len(pool), replace=True)
                picks.append(np.concatenate([rng.permutation(pool), extra]))
        idx = np.concatenate(picks)
        yield x[idx], labels[idx], idx


def steps_per_epoch(n: int, config: TrainConfig, labeled: bool) -> int:
    if labeled:
        per = max(1, config.batch_size // config.samples_per_class) * config.samples_per_class
        return max(1, n // per)
    return max(1, n // config.batch_size) if n >= config.batch_size else 1


def probe_metrics(model, spec: ObjectiveSpec, x, labels, ids=None) -> LogRecord:
    """Objective, likelihood decomposition and Gaussian metrics on a fixed batch."""
    obj = compose(spec, model, x, labels, sample_ids=ids)
    flow = model.flow if isinstance(model, DnfModel) else model
    z, logdet = flow.normalize(x)
    xi = spec.xi_for(flow.dim)
    if spec.model == "dnf":
        prior = dc.sum(class_log_prior(model, z, labels)).item()
        resid = z.value - model.means[model.class_index(labels)]
        r_len = length_metric(resid, spec.eps).item()
        pairs = within_pairs(labels, ids)
        r_ang = -float(np.sum(cosine_squares(resid).value * pairs)) / (2 * xi)
    else:
        prior = dc.sum(standard_log_prior(z)).item()
        r_len = length_metric(z, spec.eps).item()
        r_ang = angle_metric(z, xi).item()
    return LogRecord(0, obj.total.item(), prior, dc.sum(logdet).item(), r_len, r_ang, False,
                     {k: v.item() for k, v in obj.terms.items()})


def _nan_record(step: int) -> LogRecord:
    nan = float("nan")
    return LogRecord(step, nan, nan, nan, nan, nan, True)


def train(model, dataset, spec: ObjectiveSpec, config: TrainConfig, probe=None, checkpoint_path=None,
          callback=None):
    """Train ``model`` in place; returns ``(model, TrainLog)``.

    Stops early, flagging divergence, when the minibatch objective becomes
    non-finite or its magnitude exceeds ``config.divergence_threshold``.
    """
    x, labels = _dataset_arrays(dataset)
    if len(x) == 0:
        raise ValueError("empty dataset")
    labeled = spec.model == "dnf"
    if labeled:
        if not isinstance(model, DnfModel):
            raise TypeError("class-conditional training needs a DnfModel")
        model.class_index(labels)
        counts = {c: 0 for c in model.classes}
        for y in labels:
            counts[y] += 1
        empty = [c for c, k in counts.items() if k == 0]
        if empty:
            raise ValueError(f"classes with zero samples: {empty[:5]}")
        if spec.uses_mg_within and config.samples_per_class < 2:
            raise ValueError("within-class MG needs at least two samples per class per batch")
        if not model.means_initialized:
            model.init_means(x, labels)
    elif spec.uses_mg_within and min(config.batch_size, len(x)) < 2:
        raise ValueError("angle metric needs batches of at least two vectors")

    rng = np.random.default_rng(config.seed)
    if probe is None:
        pidx = np.arange(len(x)) if len(x) <= config.probe_size else \
            np.sort(rng.choice(len(x), config.probe_size, replace=False))
        px, pl, pids = x[pidx], labels[pidx], pidx
    else:
        px, pl = _dataset_arrays(probe)
        pids = None
    batches = make_batches((x, labels), config, rng, labeled=labeled)
    total_steps = config.max_steps if config.max_steps is not None else \
        config.epochs * steps_per_epoch(len(x), config, labeled)

    trainlog = TrainLog()
    t0 = time.perf_counter()

    def record(step, diverged=False):
        try:
            rec = probe_metrics(model, spec, px, pl, pids)
            rec.step, rec.diverged = step, diverged or not math.isfinite(rec.objective)
        except (dc.NonFiniteError, FlowInstabilityError, DegenerateInputError):
            rec = _nan_record(step)
        rec.wall_clock = time.perf_counter() - t0
        trainlog.append(rec)
        if callback is not None:
            callback(rec)
        return rec

    record(0)
    params = model.parameters()
    state = dc.AdamState(lr=config.learning_rate)
    for step in range(1, total_steps + 1):
        xb, lb, ib = next(batches)
        try:
            with dc.Tape() as tape:
                leaves = [tape.watch(dc.Tensor._wrap(p.copy())) for p in params]
                obj = compose(spec, model, xb, lb, leaves, ib).total
            value = obj.item()
            tripped = abs(value) > config.divergence_threshold
            grads = None if tripped else tape.gradient(obj)
        except (dc.NonFiniteError, FlowInstabilityError, DegenerateInputError) as e:
            log.info("step %d: %s", step, e)
            value, tripped = float("nan"), True
        if tripped:
            trainlog.trip_value = value
            log.info("divergence at step %d (objective %r)", step, value)
            record(step, diverged=True)
            break
        params, state = dc.adam_step(params, [-g for g in grads], state)
        model.load_parameters(params)
        params = model.parameters()
        if step % config.log_interval == 0 or step == total_steps:
            record(step)
        if checkpoint_path and config.checkpoint_interval and step % config.checkpoint_interval == 0:
            save_checkpoint(checkpoint_path, model, spec.to_dict())
    return model, trainlog
