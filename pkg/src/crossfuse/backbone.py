"""Graph feature extraction over the interaction graph.

A propagation-only backbone: layer-0 embeddings are repeatedly multiplied by
the normalized bipartite adjacency and the per-layer results are combined
with fixed layer weights.  The pairwise ranking loss pushes observed items
above sampled negatives, with gradients backpropagated through the retained
propagation layers into the layer-0 table.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
import scipy.sparse as sp

from .optim import Param


@dataclass
class BackboneConfig:
    """Propagation depth, layer-combination weights, and ranking regularizer."""

    dim: int = 64
    num_layers: int = 3
    alphas: np.ndarray | None = None  # length num_layers + 1; None = uniform
    lambda_reg: float = 1e-4

    def resolved_alphas(self) -> np.ndarray:
        if self.alphas is None:
            return np.full(self.num_layers + 1, 1.0 / (self.num_layers + 1))
        a = np.asarray(self.alphas, dtype=np.float64)
        if a.shape != (self.num_layers + 1,):
            raise ValueError(f"alphas must have length {self.num_layers + 1}, got {a.shape}")
        return a

    def validate(self) -> None:
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.num_layers < 0:
            raise ValueError("num_layers must be >= 0")
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be >= 0")
        self.resolved_alphas()


class EmbeddingTable:
    """Dense per-node vectors with a same-shape gradient buffer."""

    def __init__(self, values: np.ndarray):
        self._param = Param(values, name="embeddings")

    @property
    def values(self) -> np.ndarray:
        return self._param.value

    @values.setter
    def values(self, arr: np.ndarray) -> None:
        self._param.value = np.asarray(arr, dtype=np.float64)

    @property
    def grad(self) -> np.ndarray:
        return self._param.grad

    @grad.setter
    def grad(self, arr: np.ndarray) -> None:
        self._param.grad = np.asarray(arr, dtype=np.float64)

    @property
    def count(self) -> int:
        return self._param.value.shape[0]

    @property
    def dim(self) -> int:
        return self._param.value.shape[1]

    def zero_grad(self) -> None:
        self._param.zero_grad()

    def params(self) -> list[Param]:
        return [self._param]

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.values.copy())


def init_embeddings(count: int, dim: int, seed: int) -> EmbeddingTable:
    """Fresh table with entries drawn from a normal(0, 0.01) distribution."""
    if count < 1 or dim < 1:
        raise ValueError("count and dim must be >= 1")
    rng = np.random.default_rng(seed)
    return EmbeddingTable(rng.normal(0.0, 0.01, size=(count, dim)))


@dataclass
class GraphFeatures:
    """Combined propagation output with per-layer activations retained."""

    values: np.ndarray
    num_users: int
    layers: list[np.ndarray] = field(default_factory=list)

    @property
    def users(self) -> np.ndarray:
        return self.values[:self.num_users]

    @property
    def items(self) -> np.ndarray:
        return self.values[self.num_users:]


class Backbone(Protocol):
    """Graph feature extractors plug in behind this forward/backward pair."""

    num_users: int

    def forward(self, table: EmbeddingTable) -> GraphFeatures: ...

    def backward(self, d_features: np.ndarray) -> np.ndarray: ...


class LightGCN:
    """Parameter-free propagation: features = sum_k alpha_k * adj^k @ E0."""

    def __init__(self, adj: sp.csr_matrix, num_users: int, cfg: BackboneConfig):
        cfg.validate()
        if adj.shape[0] != adj.shape[1]:
            raise ValueError("adjacency must be square")
        if not 0 < num_users < adj.shape[0]:
            raise ValueError("num_users must split the adjacency into two non-empty blocks")
        self.adj = adj.tocsr()
        self.adj_t = self.adj.T.tocsr()
        self.num_users = num_users
        self.cfg = cfg
        self.alphas = cfg.resolved_alphas()

    def forward(self, table: EmbeddingTable) -> GraphFeatures:
        if table.count != self.adj.shape[0]:
            raise ValueError(f"embedding table has {table.count} rows, adjacency expects "
                             f"{self.adj.shape[0]}")
        layers = [table.values]
        for _ in range(self.cfg.num_layers):
            layers.append(np.asarray(self.adj @ layers[-1]))
        values = self.alphas[0] * layers[0]
        for k in range(1, len(layers)):
            values = values + self.alphas[k] * layers[k]
        return GraphFeatures(values=values, num_users=self.num_users, layers=layers)

    def backward(self, d_features: np.ndarray) -> np.ndarray:
        """Pull a gradient on the combined features back to the layer-0 table
        via the transpose chain sum_k alpha_k (adj^T)^k."""
        out = self.alphas[0] * d_features
        cur = d_features
        for k in range(1, self.cfg.num_layers + 1):
            cur = np.asarray(self.adj_t @ cur)
            out = out + self.alphas[k] * cur
        return out


def log_sigmoid_loss(x: np.ndarray) -> np.ndarray:
    """-ln(sigmoid(x)), evaluated stably as softplus(-x)."""
    return np.logaddexp(0.0, -x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _as_triples(batch) -> np.ndarray:
    arr = np.asarray(batch)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError("batch must be (B, 3)")
    if arr.shape[0] == 0:
        raise ValueError("empty batch")
    return arr


def bpr_loss_and_feature_grad(users_feat: np.ndarray, items_feat: np.ndarray,
                              batch) -> tuple[float, np.ndarray, np.ndarray]:
    """Pairwise ranking loss over (user, positive, negative) rows and its
    gradient with respect to the combined features (no regularizer)."""
    arr = _as_triples(batch).astype(np.int64)
    u, ip, ineg = arr[:, 0], arr[:, 1], arr[:, 2]
    gu = users_feat[u]
    gp = items_feat[ip]
    gn = items_feat[ineg]
    x = np.einsum("ij,ij->i", gu, gp - gn)
    loss = float(log_sigmoid_loss(x).sum())

    c = sigmoid(x) - 1.0  # d(-ln sigma(x))/dx
    dU = np.zeros_like(users_feat)
    dV = np.zeros_like(items_feat)
    np.add.at(dU, u, c[:, None] * (gp - gn))
    np.add.at(dV, ip, c[:, None] * gu)
    np.add.at(dV, ineg, -c[:, None] * gu)
    return loss, dU, dV


def bpr_loss_and_grad(model: Backbone, feats: GraphFeatures, table: EmbeddingTable,
                      batch, lambda_reg: float | None = None) -> float:
    """Ranking loss plus squared-norm regularizer on the layer-0 table;
    gradients accumulate into the table's buffer through the propagation."""
    lam = model.cfg.lambda_reg if lambda_reg is None else lambda_reg
    loss, dU, dV = bpr_loss_and_feature_grad(feats.users, feats.items, batch)
    dG = np.concatenate([dU, dV], axis=0)
    table.grad += model.backward(dG)
    if lam:
        loss += lam * float(np.sum(table.values ** 2))
        table.grad += 2.0 * lam * table.values
    return loss
