"""Post-hoc Gaussianality and variation diagnostics of (latent) vectors.

Variances use the population (1/N) convention throughout. Class residuals are
centered on the empirical class mean of the evaluated vectors.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

VARIANCE_CONVENTION = "population (1/N)"


def _group(labels):
    labels = np.asarray([str(y) for y in labels])
    classes = list(dict.fromkeys(labels.tolist()))
    return classes, [np.flatnonzero(labels == c) for c in classes]


@dataclass
class GaussReport:
    classes: list
    counts: np.ndarray
    length_mean: np.ndarray
    length_var: np.ndarray
    angle_mean: np.ndarray
    angle_var: np.ndarray
    pooled_length_mean: float
    pooled_length_var: float
    pooled_angle_mean: float
    pooled_angle_var: float
    skipped: list = field(default_factory=list)
    dim: int = 0
    xi: float = 0.0

    @property
    def length_mean_spread(self) -> float:
        """Variance across classes of the per-class length-metric means."""
        return float(np.var(self.length_mean))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# variance convention: {VARIANCE_CONVENTION}; length per sample, angle per pair\n")
            w = csv.writer(fh)
            w.writerow(["class", "count", "length_mean", "length_var", "angle_mean", "angle_var"])
            for row in zip(self.classes, self.counts, self.length_mean, self.length_var,
                           self.angle_mean, self.angle_var):
                w.writerow([row[0], int(row[1])] + [repr(float(v)) for v in row[2:]])
            w.writerow(["__pooled__", int(self.counts.sum()), repr(self.pooled_length_mean),
                        repr(self.pooled_length_var), repr(self.pooled_angle_mean), repr(self.pooled_angle_var)])

    def summary(self) -> dict:
        return {
            "variance_convention": VARIANCE_CONVENTION,
            "normalization": "length metric per sample, angle metric per pair",
            "dim": self.dim,
            "xi": self.xi,
            "n_classes": len(self.classes),
            "skipped_classes": len(self.skipped),
            "length_mean": self.pooled_length_mean,
            "length_var": self.pooled_length_var,
            "angle_mean": self.pooled_angle_mean,
            "angle_var": self.pooled_angle_var,
            "length_mean_spread": self.length_mean_spread,
        }


def gauss_report(vectors, labels, xi: float | None = None, max_angle_samples: int = 1000,
                 seed: int = 0) -> GaussReport:
    """Per-class length/angle metric statistics on class-centered residuals.

    Classes with a single sample are skipped and listed in ``skipped``. Angle
    pairs of classes larger than ``max_angle_samples`` are taken over a seeded
    random subset of that many samples.
    """
    x = np.asarray(vectors, dtype=float)
    d = x.shape[1]
    xi = 1.0 / d if xi is None else xi
    rng = np.random.default_rng(seed)
    radius = np.sqrt(d)
    classes, groups = _group(labels)
    kept, skipped = [], []
    counts, lm, lv, am, av = [], [], [], [], []
    all_len, all_ang = [], []
    for c, idx in zip(classes, groups):
        if len(idx) < 2:
            skipped.append(c)
            continue
        r = x[idx] - x[idx].mean(axis=0)
        norms = np.linalg.norm(r, axis=1)
        length = -(norms - radius) ** 2
        nz = norms > 0
        u = r[nz] / norms[nz, None]
        if len(u) > max_angle_samples:
            u = u[np.sort(rng.choice(len(u), max_angle_samples, replace=False))]
        iu = np.triu_indices(len(u), k=1)
        angle = -((u @ u.T)[iu] ** 2) / (2 * xi)
        kept.append(c)
        counts.append(len(idx))
        lm.append(length.mean())
        lv.append(length.var())
        am.append(angle.mean() if angle.size else np.nan)
        av.append(angle.var() if angle.size else np.nan)
        all_len.append(length)
        all_ang.append(angle)
    if all_len:
        pl, pa = np.concatenate(all_len), np.concatenate(all_ang)
    else:
        pl = pa = np.array([np.nan])
    return GaussReport(kept, np.array(counts, dtype=int), np.array(lm), np.array(lv), np.array(am), np.array(av),
                       float(pl.mean()), float(pl.var()),
                       float(pa.mean()) if pa.size else float("nan"), float(pa.var()) if pa.size else float("nan"),
                       skipped, d, xi)


@dataclass
class VariationReport:
    between: np.ndarray
    classes: list
    within: np.ndarray

    def to_csv(self, between_path, within_path) -> None:
        with open(between_path, "w", newline="") as fh:
            fh.write(f"# variance convention: {VARIANCE_CONVENTION}; sorted descending\n")
            w = csv.writer(fh)
            w.writerow(["rank", "between_variation"])
            for i, v in enumerate(self.between):
                w.writerow([i, repr(float(v))])
        with open(within_path, "w", newline="") as fh:
            fh.write(f"# variance convention: {VARIANCE_CONVENTION}; mean over dimensions\n")
            w = csv.writer(fh)
            w.writerow(["class", "within_variation"])
            for c, v in zip(self.classes, self.within):
                w.writerow([c, repr(float(v))])

    def summary(self) -> dict:
        return {
            "variance_convention": VARIANCE_CONVENTION,
            "between_total": float(self.between.sum()),
            "within_mean": float(self.within.mean()),
            "within_min": float(self.within.min()),
            "within_max": float(self.within.max()),
        }


def variation_report(vectors, labels) -> VariationReport:
    x = np.asarray(vectors, dtype=float)
    classes, groups = _group(labels)
    if len(classes) < 2:
        raise ValueError("variation report needs at least two classes")
    class_means = np.stack([x[g].mean(axis=0) for g in groups])
    between = np.sort(class_means.var(axis=0))[::-1]
    within = np.array([x[g].var(axis=0).mean() for g in groups])
    return VariationReport(between, classes, within)


def write_json(path, *reports) -> None:
    out = {}
    for r in reports:
        out[type(r).__name__] = r.summary()
    with open(path, "w") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
