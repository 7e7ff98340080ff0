"""GCN and GraphSAGE layers with analytic forward/backward over a MiniBatch.

Parameters live in one flat float64 vector; the layout descriptor maps it to
per-layer weight matrices.  Gradients are flat vectors with the same layout.
No bias terms: a GCN layer holds one matrix, a SAGE layer a self and a
neighbor matrix.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix

from .errors import DimensionError, MalformedInputError
from .sampler import Block, MiniBatch

ARCHS = ("gcn", "sage")

CKPT_MAGIC = b"IGCKPT\x00\x00"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<8sIIIdI")


def param_layout(arch: str, dims) -> tuple:
    """``(name, shape, offset)`` for every weight matrix, in storage order."""
    if arch not in ARCHS:
        raise ValueError(f"unknown arch {arch!r}")
    layout, off = [], 0
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        names = ("W",) if arch == "gcn" else ("W_self", "W_nbr")
        for name in names:
            layout.append((f"{name}{i}", (fan_in, fan_out), off))
            off += fan_in * fan_out
    return tuple(layout)


@dataclass
class ModelParams:
    arch: str
    dims: tuple
    weights: np.ndarray
    dropout: float = 0.0
    layout: tuple = field(init=False, repr=False)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.layout = param_layout(self.arch, self.dims)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        name, shape, off = self.layout[-1]
        if self.weights.shape != (off + shape[0] * shape[1],):
            raise DimensionError(
                f"flat weights of length {self.weights.size} do not match layout")

    @property
    def depth(self) -> int:
        return len(self.dims) - 1

    @property
    def size(self) -> int:
        return self.weights.size

    def matrices(self, flat=None) -> list:
        """Views into ``flat`` (default: the weights), one per layout entry."""
        flat = self.weights if flat is None else flat
        return [flat[off:off + a * b].reshape(a, b) for _, (a, b), off in self.layout]

    def layer_mats(self, layer: int, flat=None):
        mats = self.matrices(flat)
        if self.arch == "gcn":
            return (mats[layer],)
        return mats[2 * layer], mats[2 * layer + 1]

    def with_weights(self, weights) -> "ModelParams":
        return ModelParams(self.arch, self.dims, weights, self.dropout)


def init_params(arch: str, depth: int, dims, seed: int, dropout: float = 0.0) -> ModelParams:
    """Glorot-uniform initialization."""
    if depth < 1 or len(dims) != depth + 1:
        raise ValueError(f"need depth >= 1 and depth+1 dims, got depth={depth}, dims={dims}")
    rng = np.random.default_rng(seed)
    layout = param_layout(arch, dims)
    parts = []
    for _, (fan_in, fan_out), _ in layout:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        parts.append(rng.uniform(-limit, limit, fan_in * fan_out))
    return ModelParams(arch, tuple(dims), np.concatenate(parts), dropout)


def _block_operators(block: Block, arch: str):
    """Sparse aggregation operators ``(self_op, nbr_op)`` of shape (dst, src)."""
    nd, ns = block.num_dst, block.num_src
    counts = block.num_sampled
    rows = np.repeat(np.arange(nd), counts)
    if arch == "sage":
        vals = 1.0 / np.repeat(np.maximum(counts, 1), counts)
        return None, csr_matrix((vals, (rows, block.nbr)), shape=(nd, ns))
    deg_in = counts + 1.0
    deg_out = np.bincount(block.nbr, minlength=ns).astype(np.float64)
    deg_out[:nd] += 1.0  # virtual self-loop
    self_vals = 1.0 / np.sqrt(deg_in * deg_out[:nd])
    nbr_vals = 1.0 / np.sqrt(deg_in[rows] * deg_out[block.nbr])
    self_op = csr_matrix((self_vals, (np.arange(nd), np.arange(nd))), shape=(nd, ns))
    return self_op, csr_matrix((nbr_vals, (rows, block.nbr)), shape=(nd, ns))


@dataclass
class _LayerCache:
    h_in: np.ndarray
    mask: np.ndarray | None
    self_op: object
    nbr_op: object
    m_self: np.ndarray
    m_nbr: np.ndarray
    z: np.ndarray


def forward(batch: MiniBatch, params: ModelParams, features, train_mode=False, rng=None):
    """Logits for every target of the last block, plus the activation cache."""
    if batch.depth != params.depth:
        raise DimensionError(f"batch has {batch.depth} layers, model has {params.depth}")
    h = np.asarray(features, dtype=np.float64)[batch.input_nodes]
    if h.shape[1] != params.dims[0]:
        raise DimensionError(f"feature dim {h.shape[1]} != model input dim {params.dims[0]}")
    caches = []
    last = params.depth - 1
    for layer, block in enumerate(batch.blocks):
        if h.shape[0] != block.num_src:
            raise DimensionError("block source count does not match previous layer output")
        mask = None
        if train_mode and params.dropout > 0:
            if rng is None:
                raise ValueError("dropout in train mode needs a generator")
            keep = 1.0 - params.dropout
            mask = (rng.random(h.shape) < keep) / keep
            h = h * mask
        self_op, nbr_op = _block_operators(block, params.arch)
        m_nbr = nbr_op @ h
        if params.arch == "sage":
            w_self, w_nbr = params.layer_mats(layer)
            m_self = h[:block.num_dst]
            z = m_self @ w_self + m_nbr @ w_nbr
        else:
            (w,) = params.layer_mats(layer)
            m_self = self_op @ h
            z = (m_self + m_nbr) @ w
        caches.append(_LayerCache(h, mask, self_op, nbr_op, m_self, m_nbr, z))
        h = z if layer == last else np.maximum(z, 0.0)
    return h, caches


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. ``logits``."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    n = len(labels)
    loss = float(np.mean(logsumexp - shifted[np.arange(n), labels]))
    grad = np.exp(shifted - logsumexp[:, None])
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def backward(batch: MiniBatch, params: ModelParams, caches, d_out, node_weights=None):
    """Flat gradient given ``d_out`` (gradient w.r.t. last-block outputs).

    ``node_weights[l]`` scales the gradient flowing through the neighbor
    aggregate of every target in block ``l``; self terms stay unweighted.
    """
    grad = np.zeros(params.size)
    gmats = params.matrices(grad)
    dz = d_out
    for layer in range(params.depth - 1, -1, -1):
        c = caches[layer]
        block = batch.blocks[layer]
        dz_nbr = dz
        if node_weights is not None:
            dz_nbr = dz * np.asarray(node_weights[layer], dtype=np.float64)[:, None]
        if params.arch == "sage":
            w_self, w_nbr = params.layer_mats(layer)
            gmats[2 * layer] += c.m_self.T @ dz
            gmats[2 * layer + 1] += c.m_nbr.T @ dz_nbr
            if layer == 0:
                break
            dh = c.nbr_op.T @ (dz_nbr @ w_nbr.T)
            dh[:block.num_dst] += dz @ w_self.T
        else:
            (w,) = params.layer_mats(layer)
            gmats[layer] += c.m_self.T @ dz + c.m_nbr.T @ dz_nbr
            if layer == 0:
                break
            dh = c.self_op.T @ (dz @ w.T) + c.nbr_op.T @ (dz_nbr @ w.T)
        if c.mask is not None:
            dh = dh * c.mask
        dz = dh * (caches[layer - 1].z > 0)
    return grad


def loss_and_grad(batch: MiniBatch, params: ModelParams, features, rng=None,
                  node_weights=None):
    """Mean cross-entropy over the seeds and its exact gradient.

    Dropout is active iff ``rng`` is given and ``params.dropout > 0``.
    """
    if batch.labels is None:
        raise ValueError("batch seeds have no labels")
    classes = params.dims[-1]
    if batch.labels.size and (batch.labels.max() >= classes or batch.labels.min() < 0):
        raise ValueError(f"label id outside [0, {classes})")
    out, caches = forward(batch, params, features, train_mode=rng is not None, rng=rng)
    loss, d_seed = cross_entropy(out[batch.seed_pos], batch.labels)
    d_out = np.zeros_like(out)
    np.add.at(d_out, batch.seed_pos, d_seed)
    return loss, backward(batch, params, caches, d_out, node_weights)


def save_params(path, params: ModelParams) -> None:
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, ARCHS.index(params.arch),
                                   len(params.dims), params.dropout, params.size))
        fh.write(np.asarray(params.dims, dtype="<u4").tobytes())
        fh.write(params.weights.astype("<f8").tobytes())


def load_params(path) -> ModelParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _CKPT_HEADER.size:
        raise MalformedInputError(f"{path}: truncated checkpoint")
    magic, version, arch, ndims, dropout, size = _CKPT_HEADER.unpack_from(raw)
    if magic != CKPT_MAGIC or version != CKPT_VERSION:
        raise MalformedInputError(f"{path}: not a version {CKPT_VERSION} checkpoint")
    off = _CKPT_HEADER.size
    dims = np.frombuffer(raw, dtype="<u4", count=ndims, offset=off)
    weights = np.frombuffer(raw, dtype="<f8", count=size, offset=off + 4 * ndims)
    return ModelParams(ARCHS[arch], tuple(int(d) for d in dims), weights.copy(), dropout)
