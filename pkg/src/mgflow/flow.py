"""Masked affine autoregressive flows and the discriminative (class-conditional) flow.

Direction convention: ``generate`` is x = f(z), ``normalize`` is z = f^-1(x).
Each block evaluates its conditioner once per call in the normalize direction;
generation inverts a block by running the conditioner once per coordinate.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

LOG_SCALE_CLAMP = 5.0
CHECKPOINT_FORMAT = "mgflow-checkpoint"
CHECKPOINT_VERSION = 1
_PARAM_NAMES = ("w1", "b1", "w2", "b2", "wm", "bm", "ws", "bs")


class FlowInstabilityError(ArithmeticError):
    def __init__(self, block: int, op: str | None = None):
        self.block = block
        self.op = op
        detail = f" (primitive '{op}')" if op else ""
        super().__init__(f"non-finite values in flow block {block}{detail}")


class MissingClassError(KeyError):
    pass


def made_masks(dim: int, hidden: int):
    """MADE connectivity masks for a 2-hidden-layer conditioner.

    Input coordinate i has degree i+1. Output i may only see hidden units whose
    degree is strictly below i+1, so it never reads inputs at or after i.
    """
    in_deg = np.arange(1, dim + 1)
    hid_deg = np.arange(hidden) % max(dim - 1, 1) + 1
    m_in = (in_deg[:, None] <= hid_deg[None, :]).astype(float)
    m_hid = (hid_deg[:, None] <= hid_deg[None, :]).astype(float)
    m_out = (hid_deg[:, None] < in_deg[None, :]).astype(float)
    return m_in, m_hid, m_out


class MaskedAffineBlock:
    """One autoregressive affine layer with a fixed input permutation."""

    def __init__(self, dim: int, hidden: int | None = None, perm=None, rng=None):
        self.dim = dim
        self.hidden = hidden or max(64, 2 * dim)
        self.perm = np.arange(dim) if perm is None else np.asarray(perm, dtype=np.intp)
        self.inv_perm = np.argsort(self.perm)
        self.masks = made_masks(dim, self.hidden)
        rng = np.random.default_rng(0) if rng is None else rng
        h = self.hidden
        m_in, m_hid, _ = self.masks
        # Output layers start at zero so the block is exactly the identity.
        self.params = {
            "w1": rng.standard_normal((dim, h)) / np.sqrt(dim) * m_in,
            "b1": np.zeros(h),
            "w2": rng.standard_normal((h, h)) / np.sqrt(h) * m_hid,
            "b2": np.zeros(h),
            "wm": np.zeros((h, dim)),
            "bm": np.zeros(dim),
            "ws": np.zeros((h, dim)),
            "bs": np.zeros(dim),
        }

    def parameters(self) -> list[np.ndarray]:
        return [self.params[k] for k in _PARAM_NAMES]

    def conditioner(self, h: Tensor, p):
        """Shift and clamped log-scale for every coordinate of ``h``."""
        w1, b1, w2, b2, wm, bm, ws, bs = p
        m_in, m_hid, m_out = self.masks
        a = dc.tanh(dc.add(dc.matmul(h, dc.mask(w1, m_in)), b1))
        a = dc.tanh(dc.add(dc.matmul(a, dc.mask(w2, m_hid)), b2))
        shift = dc.add(dc.matmul(a, dc.mask(wm, m_out)), bm)
        raw = dc.add(dc.matmul(a, dc.mask(ws, m_out)), bs)
        c = LOG_SCALE_CLAMP
        log_scale = dc.affine(dc.tanh(dc.affine(raw, 1.0 / c)), c)
        return shift, log_scale

    def normalize(self, x: Tensor, p):
        h = dc.take(x, self.perm, axis=1)
        shift, log_scale = self.conditioner(h, p)
        z = dc.mul(dc.sub(h, shift), dc.exp(dc.neg(log_scale)))
        return z, dc.neg(dc.sum(log_scale, axis=1))

    def generate(self, z: Tensor, p):
        """Invert the block; returns (x, log|det dx/dz|)."""
        # After k passes the first k coordinates are exact, so dim passes
        # reach the fixed point and carry the exact derivative.
        h = z
        log_scale = None
        for _ in range(self.dim):
            shift, log_scale = self.conditioner(h, p)
            h = dc.add(dc.mul(z, dc.exp(log_scale)), shift)
        if log_scale is None:
            log_scale = Tensor(np.zeros(z.shape))
        x = dc.take(h, self.inv_perm, axis=1)
        return x, dc.sum(log_scale, axis=1)


class FlowModel:
    """Stack of masked affine blocks; block b > 0 reverses its input coordinates."""

    def __init__(self, dim: int, n_blocks: int = 10, hidden: int | None = None, seed: int = 0):
        if dim < 1 or n_blocks < 1:
            raise ValueError("dim and n_blocks must be positive")
        self.dim = dim
        self.n_blocks = n_blocks
        rng = np.random.default_rng(seed)
        self.blocks = []
        for b in range(n_blocks):
            perm = np.arange(dim) if b == 0 else np.arange(dim)[::-1]
            self.blocks.append(MaskedAffineBlock(dim, hidden, perm=perm, rng=rng))

    @property
    def hidden(self) -> int:
        return self.blocks[0].hidden

    def parameters(self) -> list[np.ndarray]:
        return [a for blk in self.blocks for a in blk.parameters()]

    def load_parameters(self, arrays) -> None:
        arrays = list(arrays)
        n = len(_PARAM_NAMES)
        if len(arrays) != n * self.n_blocks:
            raise ValueError("parameter count mismatch")
        for i, blk in enumerate(self.blocks):
            for k, a in zip(_PARAM_NAMES, arrays[i * n:(i + 1) * n]):
                a = np.array(a, dtype=np.float64)
                if a.shape != blk.params[k].shape:
                    raise ValueError(f"block {i} {k}: shape {a.shape} != {blk.params[k].shape}")
                blk.params[k] = a

    def _bind(self, params):
        if params is None:
            params = [Tensor(a) for a in self.parameters()]
        n = len(_PARAM_NAMES)
        return [params[i * n:(i + 1) * n] for i in range(self.n_blocks)]

    def normalize(self, x, params=None):
        """z = f^-1(x) and the per-sample log|det dz/dx|."""
        x = x if isinstance(x, Tensor) else Tensor(np.atleast_2d(x))
        if x.shape[-1] != self.dim:
            raise ValueError(f"expected last dimension {self.dim}, got {x.shape[-1]}")
        logdet = None
        for i, (blk, p) in enumerate(zip(self.blocks, self._bind(params))):
            try:
                x, ld = blk.normalize(x, p)
            except dc.NonFiniteError as e:
                raise FlowInstabilityError(i, e.op) from e
            logdet = ld if logdet is None else dc.add(logdet, ld)
        return x, logdet

    def generate(self, z, params=None, return_logdet=False):
        """x = f(z); optionally also the per-sample log|det dx/dz|."""
        z = z if isinstance(z, Tensor) else Tensor(np.atleast_2d(z))
        if z.shape[-1] != self.dim:
            raise ValueError(f"expected last dimension {self.dim}, got {z.shape[-1]}")
        logdet = None
        bound = self._bind(params)
        for i in reversed(range(self.n_blocks)):
            try:
                z, ld = self.blocks[i].generate(z, bound[i])
            except dc.NonFiniteError as e:
                raise FlowInstabilityError(i, e.op) from e
            logdet = ld if logdet is None else dc.add(logdet, ld)
        return (z, logdet) if return_logdet else z


class DnfModel:
    """Flow plus one trainable latent mean per class; within-class covariance is I."""

    def __init__(self, flow: FlowModel, classes, means=None):
        self.flow = flow
        self.classes = [str(c) for c in classes]
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("duplicate class labels")
        self._index = {c: i for i, c in enumerate(self.classes)}
        self.means = np.zeros((len(self.classes), flow.dim)) if means is None else np.array(means, dtype=float)
        if self.means.shape != (len(self.classes), flow.dim):
            raise ValueError("means table has wrong shape")
        self.means_initialized = means is not None

    @property
    def dim(self) -> int:
        return self.flow.dim

    def class_index(self, labels) -> np.ndarray:
        try:
            return np.array([self._index[str(y)] for y in labels], dtype=np.intp)
        except KeyError as e:
            raise MissingClassError(f"no mean for class {e.args[0]!r}") from None

    def parameters(self) -> list[np.ndarray]:
        return self.flow.parameters() + [self.means]

    def load_parameters(self, arrays) -> None:
        arrays = list(arrays)
        self.flow.load_parameters(arrays[:-1])
        self.means = np.array(arrays[-1], dtype=float)

    def split(self, params):
        """Split a parameter tensor list into (flow params, means tensor)."""
        if params is None:
            return None, Tensor(self.means)
        return params[:-1], params[-1]

    def normalize(self, x, params=None):
        return self.flow.normalize(x, None if params is None else params[:-1])

    def generate(self, z, params=None, return_logdet=False):
        return self.flow.generate(z, None if params is None else params[:-1], return_logdet)

    def init_means(self, x, labels) -> None:
        """Set each class mean to the mean latent code of its samples."""
        idx = self.class_index(labels)
        z = self.flow.normalize(np.asarray(x, dtype=float))[0].value
        counts = np.bincount(idx, minlength=len(self.classes))
        if (counts == 0).any():
            missing = [self.classes[i] for i in np.flatnonzero(counts == 0)]
            raise MissingClassError(f"classes without samples: {missing[:5]}")
        sums = np.zeros_like(self.means)
        np.add.at(sums, idx, z)
        self.means = sums / counts[:, None]
        self.means_initialized = True


def normalize(model, x, params=None):
    return model.normalize(x, params)


def generate(model, z, params=None):
    return model.generate(z, params)


def class_log_prior(model: DnfModel, z, labels, means=None) -> Tensor:
    """ln N(z; mu_y, I) per sample."""
    z = z if isinstance(z, Tensor) else Tensor(np.atleast_2d(z))
    means = Tensor(model.means) if means is None else means
    mu = dc.take(means, model.class_index(labels), axis=0)
    sq = dc.sum(dc.square(dc.sub(z, mu)), axis=1)
    return dc.affine(sq, -0.5, -0.5 * model.dim * np.log(2 * np.pi))


def standard_log_prior(z: Tensor) -> Tensor:
    """ln N(z; 0, I) per sample."""
    d = z.shape[-1]
    return dc.affine(dc.sum(dc.square(z), axis=1), -0.5, -0.5 * d * np.log(2 * np.pi))


# -- checkpoints -----------------------------------------------------------------

def save_checkpoint(path, model, objective: dict | None = None, extra: dict | None = None) -> None:
    """Write a self-describing .npz: JSON header plus one array per tensor."""
    flow = model.flow if isinstance(model, DnfModel) else model
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": "dnf" if isinstance(model, DnfModel) else "nf",
        "dim": flow.dim,
        "n_blocks": flow.n_blocks,
        "hidden": flow.hidden,
        "log_scale_clamp": LOG_SCALE_CLAMP,
        "objective": objective,
        "extra": extra or {},
    }
    arrays = {}
    for i, blk in enumerate(flow.blocks):
        for k in _PARAM_NAMES:
            arrays[f"block{i}.{k}"] = blk.params[k]
        arrays[f"block{i}.perm"] = blk.perm
    if isinstance(model, DnfModel):
        arrays["means"] = model.means
        header["classes"] = model.classes
    buf = io.BytesIO()
    np.savez(buf, header=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8), **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


@dataclass
class Checkpoint:
    model: object
    objective: dict | None
    header: dict


def load_checkpoint(path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as npz:
        header = json.loads(bytes(npz["header"]).decode())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a flow checkpoint")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        flow = FlowModel(header["dim"], header["n_blocks"], header["hidden"])
        for i, blk in enumerate(flow.blocks):
            for k in _PARAM_NAMES:
                blk.params[k] = np.array(npz[f"block{i}.{k}"])
            blk.perm = np.array(npz[f"block{i}.perm"], dtype=np.intp)
            blk.inv_perm = np.argsort(blk.perm)
        model = flow
        if header["kind"] == "dnf":
            model = DnfModel(flow, header["classes"], np.array(npz["means"]))
    return Checkpoint(model, header.get("objective"), header)
