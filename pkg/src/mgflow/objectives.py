"""Training criteria: within/between-class maximum likelihood and maximum Gaussianality.

All functions return quantities to be *maximized*. Gaussian metrics use the
annulus radius sqrt(eps * d) for lengths and squared cosines for angles.
"""
from __future__ import annotations

import re
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import gammaln

from . import diffcore as dc
from .diffcore import Tensor
from .flow import DnfModel, FlowModel, class_log_prior, standard_log_prior

BETWEEN_CHOICES = (None, "ML", "MG")
WITHIN_CHOICES = ("ML", "MG", "ML+MG")


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectiveSpec:
    """Which criteria to train with, and their hyperparameters.

    ``model`` is ``"dnf"`` (class-conditional prior) or ``"nf"`` (single
    standard-normal prior, labels ignored). ``xi=None`` means 1/d.
    """

    between: str | None = None
    within: str = "ML"
    alpha: float = 10.0
    beta_within: float = 10.0
    beta_between: float = 500.0
    delta: float = 0.03
    delta_prime: float = 0.002
    eps: float = 1.0
    xi: float | None = None
    include_entropy: bool = True
    model: str = "dnf"

    def __post_init__(self):
        if self.between not in BETWEEN_CHOICES:
            raise ValueError(f"between-class criterion must be one of {BETWEEN_CHOICES}")
        if self.within is None:
            raise ValueError("a within-class criterion is required")
        if self.within not in WITHIN_CHOICES:
            raise ValueError(f"within-class criterion must be one of {WITHIN_CHOICES}")
        if self.model not in ("dnf", "nf"):
            raise ValueError("model must be 'dnf' or 'nf'")
        if self.model == "nf" and self.between is not None:
            raise ValueError("plain flows have no between-class criterion")
        if self.eps <= 0 or (self.xi is not None and self.xi <= 0):
            raise ValueError("eps and xi must be positive")
        if self.delta < 0 or self.delta_prime < 0:
            raise ValueError("tolerances must be non-negative")
        for name in ("alpha", "beta_within", "beta_between"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def uses_mg_within(self) -> bool:
        return "MG" in self.within

    @property
    def uses_ml_within(self) -> bool:
        return "ML" in self.within

    def xi_for(self, d: int) -> float:
        return 1.0 / d if self.xi is None else self.xi

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectiveSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown objective keys: {sorted(unknown)}")
        return cls(**d)


_LETTER = {"N": None, "L": "ML", "G": "MG"}
_WITHIN = {"L": "ML", "G": "MG", "LG": "ML+MG"}


def parse_variant(name: str, **overrides) -> ObjectiveSpec:
    """Map ``NF-ML``, ``NF-MG`` or ``DNF-[N/L/G]-[L/G/LG]`` to a spec."""
    key = name.strip().upper()
    if key == "NF-ML":
        return ObjectiveSpec(model="nf", within="ML", **overrides)
    if key == "NF-MG":
        # the plain-flow MG objective is the bare metric sum, no volume term
        overrides.setdefault("include_entropy", False)
        return ObjectiveSpec(model="nf", within="MG", **overrides)
    m = re.fullmatch(r"DNF-([NLG])-(LG|L|G)", key)
    if not m:
        raise ValueError(f"unknown variant {name!r}")
    return ObjectiveSpec(between=_LETTER[m.group(1)], within=_WITHIN[m.group(2)], **overrides)


def variant_name(spec: ObjectiveSpec) -> str:
    if spec.model == "nf":
        return f"NF-{spec.within}"
    b = {None: "N", "ML": "L", "MG": "G"}[spec.between]
    w = {"ML": "L", "MG": "G", "ML+MG": "LG"}[spec.within]
    return f"DNF-{b}-{w}"


@dataclass(frozen=True)
class ChiStats:
    dim: int
    mean: float
    var: float
    approx_mean: float
    approx_var: float

    @classmethod
    def for_dim(cls, d: int, eps: float = 1.0) -> "ChiStats":
        mu = np.sqrt(2.0) * np.exp(gammaln((d + 1) / 2) - gammaln(d / 2))
        return cls(d, float(mu), float(d - mu * mu), float(np.sqrt(eps * d)), 0.5 * eps)


# -- Gaussian metrics ----------------------------------------------------------

def _as_batch(v) -> Tensor:
    return v if isinstance(v, Tensor) else Tensor(np.atleast_2d(v))


def _norms(v: Tensor) -> Tensor:
    sq = dc.sum(dc.square(v), axis=1)
    if (sq.value <= 0).any():
        raise DegenerateInputError("zero-norm vector")
    return dc.sqrt(sq)


def length_deviations(v, radius: float) -> Tensor:
    """(||v_i|| - radius)^2 per row."""
    return dc.square(dc.affine(_norms(_as_batch(v)), 1.0, -radius))


def cosine_squares(v) -> Tensor:
    """Matrix of squared cosines between all rows."""
    v = _as_batch(v)
    # (d, n) * (n,) broadcasts the inverse norms across columns
    unit_t = dc.mul(dc.transpose(v), dc.reciprocal(_norms(v)))
    return dc.square(dc.matmul(dc.transpose(unit_t), unit_t))


def length_metric(vectors, eps: float = 1.0, d: int | None = None) -> Tensor:
    """R_len = -sum_i (||v_i|| - sqrt(eps d))^2."""
    v = _as_batch(vectors)
    if v.shape[0] == 0:
        raise ValueError("empty batch")
    d = v.shape[1] if d is None else d
    return dc.neg(dc.sum(length_deviations(v, np.sqrt(eps * d))))


def angle_metric(vectors, xi: float | None = None) -> Tensor:
    """R_ang = -sum_{i<j} cos^2(v_i, v_j) / (2 xi), each unordered pair once."""
    v = _as_batch(vectors)
    n = v.shape[0]
    if n < 2:
        raise ValueError("angle metric needs at least two vectors")
    xi = 1.0 / v.shape[1] if xi is None else xi
    upper = np.triu(np.ones((n, n)), k=1)
    return dc.affine(dc.sum(dc.mask(cosine_squares(v), upper)), -1.0 / (2.0 * xi))


def _hinge(x: Tensor, tol: float) -> Tensor:
    return dc.relu(dc.affine(x, 1.0, -tol))


def _pair_mean(cos2: Tensor, pairs: np.ndarray) -> Tensor | None:
    n = pairs.sum()
    if n == 0:
        return None
    return dc.affine(dc.sum(dc.mask(cos2, pairs)), 1.0 / n)


# -- class-conditional criteria -----------------------------------------------------

class MLTerms(NamedTuple):
    total: Tensor
    prior: Tensor
    entropy: Tensor


def ml_within(model: DnfModel, x, labels, params=None) -> MLTerms:
    """sum_i ln N(z_i; mu_{y_i}, I) + ln|det dz_i/dx_i|."""
    flow_p, means = model.split(params)
    z, logdet = model.flow.normalize(x, flow_p)
    prior = dc.sum(class_log_prior(model, z, labels, means))
    entropy = dc.sum(logdet)
    return MLTerms(dc.add(prior, entropy), prior, entropy)


def ml_between(model: DnfModel, params=None, classes=None) -> Tensor:
    """sum_y ln N(mu_y; 0, I) - ln|det df(mu_y)/dmu_y| over ``classes`` (default all)."""
    flow_p, means = model.split(params)
    if classes is not None:
        means = dc.take(means, np.asarray(classes, dtype=np.intp), axis=0)
    if means.shape[0] < 1:
        raise ValueError("no classes")
    _, gen_logdet = model.flow.generate(means, flow_p, return_logdet=True)
    return dc.sum(dc.sub(standard_log_prior(means), gen_logdet))


def mg_between(means, spec: ObjectiveSpec) -> Tensor:
    """Hinged length/angle Gaussianality of the class means (angle scale folded into beta)."""
    means = _as_batch(means)
    k, d = means.shape
    if k < 2:
        raise ValueError("between-class MG needs at least two classes")
    length = dc.mean(length_deviations(means, np.sqrt(spec.eps * d)))
    angle = _pair_mean(cosine_squares(means), np.triu(np.ones((k, k)), k=1))
    return dc.sub(dc.affine(_hinge(length, spec.delta), -spec.alpha),
                  dc.affine(_hinge(angle, spec.delta_prime), spec.beta_between))


def within_pairs(labels, sample_ids=None) -> np.ndarray:
    """Upper-triangular 0/1 matrix of same-class pairs, skipping repeats of one sample."""
    labels = np.asarray([str(y) for y in labels])
    same = labels[:, None] == labels[None, :]
    if sample_ids is not None:
        ids = np.asarray(sample_ids)
        same &= ids[:, None] != ids[None, :]
    return np.triu(same, k=1).astype(float)


def mg_within(model: DnfModel, z, labels, spec: ObjectiveSpec, means=None, sample_ids=None) -> Tensor:
    """Hinged Gaussianality of residuals z - mu_y, angle pairs taken within classes."""
    z = _as_batch(z)
    means = Tensor(model.means) if means is None else means
    resid = dc.sub(z, dc.take(means, model.class_index(labels), axis=0))
    d = z.shape[1]
    length = dc.mean(length_deviations(resid, np.sqrt(spec.eps * d)))
    out = dc.affine(_hinge(length, spec.delta), -spec.alpha)
    pairs = within_pairs(labels, sample_ids)
    if pairs.any():
        angle = _pair_mean(cosine_squares(resid), pairs)
        out = dc.sub(out, dc.affine(_hinge(angle, spec.delta_prime), spec.beta_within))
    return out


class Objective(NamedTuple):
    total: Tensor
    terms: dict


def compose(spec: ObjectiveSpec, model, x, labels=None, params=None, sample_ids=None) -> Objective:
    """Total training objective for ``spec``; ``terms`` sum exactly to ``total``."""
    terms: dict[str, Tensor] = {}
    if spec.model == "nf":
        flow = model.flow if isinstance(model, DnfModel) else model
        flow_p = params[:-1] if isinstance(model, DnfModel) and params is not None else params
        z, logdet = flow.normalize(x, flow_p)
        if spec.uses_ml_within:
            terms["prior"] = dc.sum(standard_log_prior(z))
        if spec.uses_ml_within or spec.include_entropy:
            terms["entropy"] = dc.sum(logdet)
        if spec.uses_mg_within:
            terms["R_len"] = length_metric(z, spec.eps)
            terms["R_ang"] = angle_metric(z, spec.xi_for(flow.dim))
    else:
        if not isinstance(model, DnfModel):
            raise TypeError("class-conditional objectives need a DnfModel")
        if labels is None:
            raise ValueError("labels are required for DNF objectives")
        flow_p, means = model.split(params)
        z, logdet = model.flow.normalize(x, flow_p)
        idx = model.class_index(labels)
        present = np.unique(idx)
        if spec.between == "ML":
            terms["between_ml"] = ml_between(model, params, present)
        elif spec.between == "MG":
            terms["between_mg"] = mg_between(dc.take(means, present, axis=0), spec)
        if spec.uses_ml_within:
            terms["prior"] = dc.sum(class_log_prior(model, z, labels, means))
        if spec.uses_ml_within or spec.include_entropy:
            terms["entropy"] = dc.sum(logdet)
        if spec.uses_mg_within:
            terms["within_mg"] = mg_within(model, z, labels, spec, means, sample_ids)
    total = None
    for t in terms.values():
        total = t if total is None else dc.add(total, t)
    return Objective(total, terms)
