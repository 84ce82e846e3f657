"""Labeled vector stores, their file formats, and synthetic generators.

Text format: one record per line, ``id label v1 v2 ... vD``; blank lines and
lines starting with ``#`` are ignored.

Binary format (little-endian)::

    magic   4 bytes  b"MGVS"
    version uint32   1
    dim     uint32
    count   uint64
    count x (uint16 id length, id utf-8, uint16 label length, label utf-8)
    count*dim float32 values, row-major
"""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

BINARY_MAGIC = b"MGVS"
BINARY_VERSION = 1


class ParseError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


class VectorStore:
    """Immutable set of (id, label, vector) records sharing one dimension."""

    def __init__(self, vectors=None, labels=(), ids=None, dim: int | None = None):
        labels = [str(y) for y in labels]
        if vectors is None or len(labels) == 0:
            self.dim = dim
            self.vectors = np.zeros((0, dim or 0))
            self.labels = np.array([], dtype=str)
            self.ids = np.array([], dtype=str)
            return
        vectors = np.array(vectors, dtype=np.float64)
        if vectors.ndim != 2 or len(vectors) != len(labels):
            raise ValueError("vectors must be (n, dim) with one label per row")
        if any(not y for y in labels):
            raise ValueError("labels must be non-empty")
        ids = [f"s{i}" for i in range(len(labels))] if ids is None else [str(i) for i in ids]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate ids")
        self.dim = vectors.shape[1]
        vectors.setflags(write=False)
        self.vectors = vectors
        self.labels = np.array(labels)
        self.ids = np.array(ids)

    def __len__(self) -> int:
        return len(self.labels)

    def __repr__(self) -> str:
        return f"VectorStore(n={len(self)}, dim={self.dim}, classes={len(self.classes())})"

    def classes(self) -> list[str]:
        """Distinct labels in order of first appearance."""
        seen = dict.fromkeys(self.labels.tolist())
        return list(seen)

    def subset(self, index) -> "VectorStore":
        index = np.asarray(index)
        return VectorStore(self.vectors[index], self.labels[index], self.ids[index], dim=self.dim)

    def with_vectors(self, vectors) -> "VectorStore":
        return VectorStore(vectors, self.labels, self.ids)

    def lookup(self, ids) -> np.ndarray:
        pos = {k: i for i, k in enumerate(self.ids.tolist())}
        try:
            return self.vectors[[pos[str(k)] for k in ids]]
        except KeyError as e:
            raise KeyError(f"unknown vector id {e.args[0]!r}") from None


# -- text / binary I/O ---------------------------------------------------------

def save_text(store: VectorStore, path) -> None:
    with open(path, "w") as fh:
        for i, y, v in zip(store.ids, store.labels, store.vectors):
            fh.write(f"{i} {y} " + " ".join(repr(float(a)) for a in v) + "\n")


def load_text(path) -> VectorStore:
    ids, labels, rows = [], [], []
    seen: set[str] = set()
    dim = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) < 3:
                raise ParseError("expected 'id label v1 ... vD'", lineno)
            try:
                vec = [float(a) for a in parts[2:]]
            except ValueError:
                raise ParseError("non-numeric vector component", lineno) from None
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise ParseError(f"dimension {len(vec)} does not match {dim}", lineno)
            if parts[0] in seen:
                raise ParseError(f"duplicate id {parts[0]!r}", lineno)
            seen.add(parts[0])
            ids.append(parts[0])
            labels.append(parts[1])
            rows.append(vec)
    if not rows:
        return VectorStore()
    return VectorStore(np.array(rows), labels, ids)


def save_binary(store: VectorStore, path) -> None:
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<IIQ", BINARY_VERSION, store.dim or 0, len(store)))
        for i, y in zip(store.ids, store.labels):
            for s in (i, y):
                b = str(s).encode()
                fh.write(struct.pack("<H", len(b)))
                fh.write(b)
        fh.write(np.asarray(store.vectors, dtype="<f4").tobytes())


def load_binary(path) -> VectorStore:
    data = Path(path).read_bytes()
    if data[:4] != BINARY_MAGIC:
        raise ParseError(f"{path}: bad magic")
    version, dim, count = struct.unpack_from("<IIQ", data, 4)
    if version != BINARY_VERSION:
        raise ParseError(f"{path}: unsupported version {version}")
    off = 4 + struct.calcsize("<IIQ")
    ids, labels = [], []
    for _ in range(count):
        pair = []
        for _ in range(2):
            (n,) = struct.unpack_from("<H", data, off)
            off += 2
            pair.append(data[off:off + n].decode())
            off += n
        ids.append(pair[0])
        labels.append(pair[1])
    if count == 0:
        return VectorStore(dim=dim or None)
    vec = np.frombuffer(data, dtype="<f4", count=count * dim, offset=off).reshape(count, dim)
    if len(set(ids)) != len(ids):
        raise ParseError(f"{path}: duplicate ids")
    return VectorStore(vec.astype(np.float64), labels, ids)


def load(path) -> VectorStore:
    """Load either format, sniffing the binary magic."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    return load_binary(path) if head == BINARY_MAGIC else load_text(path)


def save(store: VectorStore, path, binary: bool | None = None) -> None:
    """Save; binary when requested or when the suffix is ``.bin``."""
    if binary is None:
        binary = str(path).endswith(".bin")
    (save_binary if binary else save_text)(store, path)


# -- synthetic data --------------------------------------------------------------

@dataclass
class SynthSpec:
    kind: str
    dim: int
    n_classes: int
    samples_per_class: int | list
    seed: int
    means: list | None = None
    covs: list | None = None
    mean_scale: float = 4.0
    within_scale: tuple = (0.5, 1.6)
    warp_depth: int = 2
    warp_offset: float = 4.0

    def __post_init__(self):
        if self.kind not in ("gmm", "warped-speakers"):
            raise ValueError(f"unknown synth kind {self.kind!r}")
        if self.seed is None:
            raise ValueError("a seed is required")
        if self.dim < 1 or self.n_classes < 1:
            raise ValueError("dim and class count must be positive")
        if np.any(np.asarray(self.counts()) < 1):
            raise ValueError("samples per class must be positive")

    def counts(self) -> list[int]:
        if np.isscalar(self.samples_per_class):
            return [int(self.samples_per_class)] * self.n_classes
        counts = [int(c) for c in self.samples_per_class]
        if len(counts) != self.n_classes:
            raise ValueError("one count per class required")
        return counts

    def to_dict(self) -> dict:
        return asdict(self)


def _labels_ids(counts, prefix="c"):
    labels, ids = [], []
    for k, n in enumerate(counts):
        labels += [f"{prefix}{k}"] * n
        ids += [f"{prefix}{k}_{i}" for i in range(n)]
    return labels, ids


def synth_gmm(spec: SynthSpec) -> VectorStore:
    """Gaussian components, one class per component."""
    rng = np.random.default_rng(spec.seed)
    d, k = spec.dim, spec.n_classes
    means = rng.standard_normal((k, d)) * spec.mean_scale if spec.means is None else np.asarray(spec.means, float)
    covs = [np.eye(d)] * k if spec.covs is None else [np.asarray(c, float) for c in spec.covs]
    counts = spec.counts()
    rows = [rng.multivariate_normal(means[c], covs[c], size=counts[c]) for c in range(k)]
    labels, ids = _labels_ids(counts)
    return VectorStore(np.concatenate(rows), labels, ids)


@dataclass
class Warp:
    """x <- A (x + g * tanh(C x + c)) + b per layer, with ||g C||_2 < 1."""

    layers: list = field(default_factory=list)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        for a, b, c, cb, g in self.layers:
            x = (x + g * np.tanh(x @ c.T + cb)) @ a.T + b
        return x

    def inverse(self, y, iters: int = 200):
        y = np.asarray(y, dtype=float)
        for a, b, c, cb, g in reversed(self.layers):
            u = np.linalg.solve(a, (y - b).T).T
            x = u.copy()
            for _ in range(iters):  # contraction: x = u - g tanh(Cx + c)
                x = u - g * np.tanh(x @ c.T + cb)
            y = x
        return y

    def to_arrays(self) -> dict:
        out = {}
        for i, (a, b, c, cb, g) in enumerate(self.layers):
            out.update({f"a{i}": a, f"b{i}": b, f"c{i}": c, f"cb{i}": cb, f"g{i}": np.array(g)})
        return out

    @classmethod
    def from_arrays(cls, arrays) -> "Warp":
        n = sum(1 for k in arrays if k.startswith("a"))
        return cls([(arrays[f"a{i}"], arrays[f"b{i}"], arrays[f"c{i}"], arrays[f"cb{i}"], float(arrays[f"g{i}"]))
                    for i in range(n)])


def random_warp(dim: int, depth: int, rng, offset: float = 4.0) -> Warp:
    layers = []
    for _ in range(depth):
        q1, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        q2, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        a = q1 @ np.diag(np.exp(rng.uniform(0.0, 1.0, dim))) @ q2.T
        c = rng.standard_normal((dim, dim)) / np.sqrt(dim)
        g = 0.9 / np.linalg.norm(c, 2)
        layers.append((a, rng.standard_normal(dim) * offset / np.sqrt(dim), c, rng.standard_normal(dim), g))
    return Warp(layers)


def synth_warped_speakers(spec: SynthSpec, return_parts: bool = False):
    """Heterogeneous Gaussian classes pushed through a fixed random invertible warp.

    Per-class isotropic scales are log-uniform in ``within_scale``. With
    ``return_parts`` also returns the unwarped store and the :class:`Warp`.
    """
    rng = np.random.default_rng(spec.seed)
    d, k = spec.dim, spec.n_classes
    counts = spec.counts()
    means = rng.standard_normal((k, d)) * spec.mean_scale / np.sqrt(d) if spec.means is None \
        else np.asarray(spec.means, float)
    lo, hi = spec.within_scale
    scales = np.exp(rng.uniform(np.log(lo), np.log(hi), k))
    rows = [means[c] + scales[c] * rng.standard_normal((counts[c], d)) for c in range(k)]
    labels, ids = _labels_ids(counts, prefix="spk")
    base = VectorStore(np.concatenate(rows), labels, ids)
    warp = random_warp(d, spec.warp_depth, rng, spec.warp_offset)
    store = base.with_vectors(warp(base.vectors))
    if return_parts:
        return store, base, warp
    return store

