"""Verification backends: cosine scoring, two-covariance PLDA, and EER."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh

log = logging.getLogger(__name__)


class DegenerateInputError(ValueError):
    pass


def length_norm(vectors) -> np.ndarray:
    x = np.asarray(vectors, dtype=float)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if (n == 0).any():
        raise DegenerateInputError("cannot length-normalize a zero vector")
    return x / n


def cosine_score(a, b):
    """Cosine between paired rows of ``a`` and ``b`` (or two single vectors)."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    s = np.sum(length_norm(a) * length_norm(b), axis=-1)
    return np.clip(s, -1.0, 1.0)


# -- PLDA -------------------------------------------------------------------------

@dataclass
class PldaModel:
    """x = m + u + e with u ~ N(0, B), e ~ N(0, W).

    ``transform`` V satisfies V' W V = I and V' B V = diag(psi).
    """

    mean: np.ndarray
    between: np.ndarray
    within: np.ndarray
    transform: np.ndarray = None
    psi: np.ndarray = None
    loglik: list = None

    def __post_init__(self):
        self.mean = np.asarray(self.mean, float)
        self.between = _sym(np.asarray(self.between, float))
        self.within = _sym(np.asarray(self.within, float))
        if self.transform is None:
            psi, v = eigh(self.between, self.within)
            self.psi, self.transform = np.clip(psi, 0.0, None), v

    @property
    def dim(self) -> int:
        return len(self.mean)

    def save(self, path) -> None:
        np.savez(path, mean=self.mean, between=self.between, within=self.within)

    @classmethod
    def load(cls, path) -> "PldaModel":
        with np.load(path) as f:
            return cls(f["mean"], f["between"], f["within"])


def _sym(a):
    return 0.5 * (a + a.T)


def _class_stats(x, labels):
    labels = np.asarray([str(y) for y in labels])
    classes, inv = np.unique(labels, return_inverse=True)
    counts = np.bincount(inv)
    sums = np.zeros((len(classes), x.shape[1]))
    np.add.at(sums, inv, x)
    return inv, counts, sums


def _loglik(scatter_w, counts, cmeans, b, w):
    """Marginal log-likelihood of all classes given centered data statistics."""
    d = w.shape[0]
    n_total = counts.sum()
    _, logdet_w = np.linalg.slogdet(w)
    ll = -0.5 * n_total * d * np.log(2 * np.pi)
    ll -= 0.5 * np.sum(counts - 1) * logdet_w
    ll -= 0.5 * np.trace(np.linalg.solve(w, scatter_w))
    for n in np.unique(counts):
        sel = counts == n
        s = w + n * b
        _, logdet_s = np.linalg.slogdet(s)
        xm = cmeans[sel]
        ll -= 0.5 * sel.sum() * logdet_s
        ll -= 0.5 * n * np.sum(xm * np.linalg.solve(s, xm.T).T)
    return float(ll)


def plda_train(vectors, labels, max_iter: int = 20, tol: float = 1e-6) -> PldaModel:
    """Two-covariance PLDA by EM, initialised from the class scatter matrices."""
    x = np.asarray(vectors, dtype=float)
    n_total, d = x.shape
    inv, counts, _ = _class_stats(x, labels)
    if len(counts) < 2 or counts.min() < 2:
        raise ValueError("PLDA needs at least two classes with two samples each")
    if n_total <= d:
        log.warning("PLDA trained on %d vectors of dimension %d", n_total, d)
    m = x.mean(axis=0)
    xc = x - m
    sums = np.zeros((len(counts), d))
    np.add.at(sums, inv, xc)
    cmeans = sums / counts[:, None]
    resid = xc - cmeans[inv]
    scatter_w = resid.T @ resid
    total = xc.T @ xc

    w = scatter_w / (n_total - len(counts))
    b = cmeans.T @ cmeans / len(counts) - w * np.mean(1.0 / counts)
    evals, evecs = np.linalg.eigh(_sym(b))
    b = (evecs * np.clip(evals, 1e-6 * np.trace(w) / d, None)) @ evecs.T
    w = _regularize(w)

    history = [_loglik(scatter_w, counts, cmeans, b, w)]
    for _ in range(max_iter):
        b_acc = np.zeros((d, d))
        cross = np.zeros((d, d))
        second = np.zeros((d, d))
        for n in np.unique(counts):
            sel = counts == n
            # posterior of the class offset given the class mean: x_bar ~ N(u, W/n)
            gain = np.linalg.solve(b + w / n, b).T          # B (B + W/n)^-1
            cov = b - gain @ b
            post = cmeans[sel] @ gain.T
            k = sel.sum()
            b_acc += post.T @ post + k * cov
            cross += (sums[sel].T @ post)
            second += n * (post.T @ post + k * cov)
        b = _sym(b_acc / len(counts))
        w = _regularize(_sym((total - cross - cross.T + second) / n_total))
        history.append(_loglik(scatter_w, counts, cmeans, b, w))
        if history[-1] - history[-2] < tol:
            break
    if np.linalg.cond(w) > 1e12:
        raise np.linalg.LinAlgError("within-class covariance is singular")
    return PldaModel(m, b, w, loglik=history)


def _regularize(w):
    d = w.shape[0]
    return w + np.eye(d) * (1e-6 * np.trace(w) / d)


def plda_score(model: PldaModel, enroll, test):
    """Same-class vs different-class log-likelihood ratio for paired rows."""
    e = np.atleast_2d(np.asarray(enroll, dtype=float))
    t = np.atleast_2d(np.asarray(test, dtype=float))
    if e.shape != t.shape or e.shape[1] != model.dim:
        raise ValueError(f"dimension mismatch: enroll {e.shape}, test {t.shape}, model {model.dim}")
    u = (e - model.mean) @ model.transform
    v = (t - model.mean) @ model.transform
    psi = model.psi
    ss = u * u + v * v
    same = -0.5 * np.log1p(2 * psi) - 0.5 * ((psi + 1) * ss - 2 * psi * u * v) / (2 * psi + 1)
    diff = -np.log1p(psi) - 0.5 * ss / (psi + 1)
    llr = np.sum(same - diff, axis=1)
    return llr if np.ndim(enroll) > 1 else float(llr[0])


# -- EER ----------------------------------------------------------------------------

def eer(scores, labels):
    """Equal error rate (percent) and its threshold.

    Operating points are taken at every distinct score (accept if score >= t)
    plus one above the maximum; the crossing of false-accept and false-reject
    rates is linearly interpolated between the bracketing points.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    tar, imp = np.sort(s[y]), np.sort(s[~y])
    if len(tar) == 0 or len(imp) == 0:
        raise ValueError("EER needs at least one target and one imposter score")
    thr = np.append(np.unique(s), np.inf)
    frr = np.searchsorted(tar, thr, side="left") / len(tar)
    far = 1.0 - np.searchsorted(imp, thr, side="left") / len(imp)
    diff = far - frr
    k = int(np.argmax(diff <= 0))
    if diff[k] == 0 or k == 0:
        rate, t = far[k], thr[k]
    else:
        lam = diff[k - 1] / (diff[k - 1] - diff[k])
        rate = far[k - 1] + lam * (far[k] - far[k - 1])
        hi = thr[k] if np.isfinite(thr[k]) else thr[k - 1]
        t = thr[k - 1] + lam * (hi - thr[k - 1])
    return 100.0 * float(rate), float(t)


# -- trial and score files ----------------------------------------------------------

@dataclass
class TrialList:
    enroll: list
    test: list
    target: np.ndarray

    def __len__(self) -> int:
        return len(self.enroll)

    @classmethod
    def read(cls, path) -> "TrialList":
        enroll, test, target = [], [], []
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.split()
                if not parts or parts[0].startswith("#"):
                    continue
                if len(parts) != 3 or parts[2] not in ("target", "nontarget"):
                    raise ValueError(f"{path}:{lineno}: expected 'enroll test target|nontarget'")
                enroll.append(parts[0])
                test.append(parts[1])
                target.append(parts[2] == "target")
        return cls(enroll, test, np.array(target, dtype=bool))

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for e, t, y in zip(self.enroll, self.test, self.target):
                fh.write(f"{e} {t} {'target' if y else 'nontarget'}\n")

    @classmethod
    def all_pairs(cls, ids, labels) -> "TrialList":
        """Every unordered pair of distinct vectors."""
        ids, labels = list(map(str, ids)), np.asarray([str(y) for y in labels])
        i, j = np.triu_indices(len(ids), k=1)
        return cls([ids[a] for a in i], [ids[b] for b in j], labels[i] == labels[j])


def write_scores(path, trials: TrialList, scores) -> None:
    with open(path, "w") as fh:
        for e, t, s in zip(trials.enroll, trials.test, scores):
            fh.write(f"{e} {t} {float(s)!r}\n")


def read_scores(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if parts:
                out[(parts[0], parts[1])] = float(parts[2])
    return out
