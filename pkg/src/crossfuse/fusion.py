"""Feature fusion through interaction-score agreement.

Given graph features g and frozen auxiliary features a, three scores are
computed per pair: r_a = a_u.a_i, r_c1 = g_u.a_i, r_c2 = a_u.g_i.  Fusion
minimizes (r_a - r_c1)^2 and (r_a - r_c2)^2 so the two feature spaces agree
on predictions instead of coordinates; no new parameters are introduced.
The module also carries the concatenation and (weighted) summation baseline
losses, a temporal variant that couples consecutive-period embeddings, and
independently coded closed-form gradients used to cross-check every backward
pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import Backbone, EmbeddingTable, GraphFeatures, bpr_loss_and_feature_grad

VARIANTS = ("cross", "concat", "plain-sum", "weighted-sum", "none")


@dataclass
class FusionConfig:
    """Fusion variant, loss weights, and the stage-2 graph-loss flavor."""

    variant: str = "cross"
    lambda1: float = 0.05
    lambda2: float = 0.001
    graph_loss: str = "bpr"  # bpr | mse
    include_negatives: bool = False
    weights: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray] | None = None

    def validate(self, dim: int | None = None) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown fusion variant {self.variant!r}")
        if self.graph_loss not in ("bpr", "mse"):
            raise ValueError(f"graph_loss must be 'bpr' or 'mse', got {self.graph_loss!r}")
        if not (np.isfinite(self.lambda1) and np.isfinite(self.lambda2)):
            raise ValueError("fusion weights must be finite")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("fusion weights must be >= 0")
        if self.variant == "weighted-sum" and self.weights is not None:
            # weights may be omitted; identity matrices are supplied at train time
            if len(self.weights) != 4:
                raise ValueError("weighted-sum fusion needs four weight matrices")
            if dim is not None:
                for w in self.weights:
                    if w.shape != (dim, dim):
                        raise ValueError("weight matrices must be (dim, dim)")

    @property
    def active(self) -> bool:
        return self.variant != "none"


def parameter_count(cfg: FusionConfig, dim: int) -> int:
    """Learnable parameters introduced by the fusion mechanism itself."""
    if cfg.variant == "weighted-sum":
        return 4 * dim * dim
    return 0


def identity_weights(dim: int):
    return tuple(np.eye(dim) for _ in range(4))


# ---------------------------------------------------------------------------
# Scores and losses
# ---------------------------------------------------------------------------

def cross_scores(g_u: np.ndarray, g_i: np.ndarray, a_u: np.ndarray,
                 a_i: np.ndarray) -> tuple[float, float, float]:
    """The three coupling scores (r_a, r_c1, r_c2) for one user-item pair."""
    if not (g_u.shape == g_i.shape == a_u.shape == a_i.shape):
        raise ValueError("all four feature vectors must share one dimension")
    return float(a_u @ a_i), float(g_u @ a_i), float(a_u @ g_i)


def _as_pairs(batch) -> tuple[np.ndarray, np.ndarray]:
    arr = np.asarray(batch)
    if arr.ndim != 2 or arr.shape[1] < 2 or arr.shape[0] == 0:
        raise ValueError("batch must be non-empty (B, >=2) rows starting with (user, item)")
    return arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64)


def _as_rated(batch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    arr = np.asarray(batch, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3 or arr.shape[0] == 0:
        raise ValueError("batch must be non-empty (B, 3) rows of (user, item, rating)")
    return arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64), arr[:, 2]


def cross_fusion_loss(g_users: np.ndarray, g_items: np.ndarray, a_users: np.ndarray,
                      a_items: np.ndarray, batch, cfg: FusionConfig
                      ) -> tuple[float, float, np.ndarray, np.ndarray]:
    """Score-agreement losses over observed pairs.

    Returns (L_c1, L_c2, dG_users, dG_items) where the gradients are of
    lambda1 * L_c1 + lambda2 * L_c2 and flow only into the graph features;
    the auxiliary features are a fixed stage-1 product.
    """
    if g_users.shape[1] != a_users.shape[1]:
        raise ValueError("graph and auxiliary features must share the same dimension")
    u, i = _as_pairs(batch)
    gu, gi = g_users[u], g_items[i]
    au, ai = a_users[u], a_items[i]
    r_a = np.einsum("ij,ij->i", au, ai)
    r_c1 = np.einsum("ij,ij->i", gu, ai)
    r_c2 = np.einsum("ij,ij->i", au, gi)
    l1 = float(np.sum((r_a - r_c1) ** 2))
    l2 = float(np.sum((r_a - r_c2) ** 2))

    dGu = np.zeros_like(g_users)
    dGv = np.zeros_like(g_items)
    if cfg.lambda1:
        np.add.at(dGu, u, (2.0 * cfg.lambda1 * (r_c1 - r_a))[:, None] * ai)
    if cfg.lambda2:
        np.add.at(dGv, i, (2.0 * cfg.lambda2 * (r_c2 - r_a))[:, None] * au)
    return l1, l2, dGu, dGv


def mse_graph_loss(g_users: np.ndarray, g_items: np.ndarray, batch
                   ) -> tuple[float, np.ndarray, np.ndarray]:
    """Squared-error graph loss and feature-level gradient."""
    u, i, r = _as_rated(batch)
    e = np.einsum("ij,ij->i", g_users[u], g_items[i]) - r
    loss = float(np.sum(e * e))
    dGu = np.zeros_like(g_users)
    dGv = np.zeros_like(g_items)
    np.add.at(dGu, u, (2.0 * e)[:, None] * g_items[i])
    np.add.at(dGv, i, (2.0 * e)[:, None] * g_users[u])
    return loss, dGu, dGv


def fused_mse_feature_grad(g_users, g_items, a_users, a_items, batch,
                           lambda1: float, lambda2: float
                           ) -> tuple[float, np.ndarray, np.ndarray]:
    """Full squared-error objective (graph loss plus weighted score-agreement
    terms) with gradients at the feature level."""
    cfg = FusionConfig(variant="cross", lambda1=lambda1, lambda2=lambda2, graph_loss="mse")
    loss, dGu, dGv = mse_graph_loss(g_users, g_items, batch)
    l1, l2, cGu, cGv = cross_fusion_loss(g_users, g_items, a_users, a_items, batch, cfg)
    return loss + lambda1 * l1 + lambda2 * l2, dGu + cGu, dGv + cGv


def fused_objective_grad(model: Backbone, feats: GraphFeatures, table: EmbeddingTable,
                         a_users: np.ndarray | None, a_items: np.ndarray | None,
                         batch, cfg: FusionConfig | None,
                         lambda_reg: float | None = None) -> float:
    """Stage-2 objective: graph loss plus the configured fusion terms.

    ``batch`` rows are (user, positive, negative) for the pairwise graph loss
    and (user, item, rating) for the squared-error flavor.  Gradients
    accumulate into the embedding table through the backbone propagation; the
    auxiliary features never receive gradient.
    """
    lam = model.cfg.lambda_reg if lambda_reg is None else lambda_reg
    fusion_on = cfg is not None and cfg.active
    if fusion_on and (a_users is None or a_items is None):
        raise ValueError("fusion requires the stage-1 auxiliary features")
    if fusion_on and a_users.shape[1] != feats.values.shape[1]:
        raise ValueError("auxiliary and graph feature dimensions differ")

    if cfg is not None and cfg.graph_loss == "mse":
        loss, dU, dV = mse_graph_loss(feats.users, feats.items, batch)
        pairs = np.asarray(batch)[:, :2]
    else:
        loss, dU, dV = bpr_loss_and_feature_grad(feats.users, feats.items, batch)
        arr = np.asarray(batch).astype(np.int64)
        pairs = arr[:, :2]
        if fusion_on and cfg.include_negatives:
            pairs = np.concatenate([pairs, arr[:, [0, 2]]], axis=0)

    if fusion_on:
        if cfg.variant == "cross":
            if cfg.lambda1 or cfg.lambda2:
                l1, l2, cU, cV = cross_fusion_loss(feats.users, feats.items,
                                                   a_users, a_items, pairs, cfg)
                loss += cfg.lambda1 * l1 + cfg.lambda2 * l2
                dU = dU + cU
                dV = dV + cV
        else:
            raise ValueError(f"variant {cfg.variant!r} trains through its own loss, "
                             "not the fused objective")

    dG = np.concatenate([dU, dV], axis=0)
    table.grad += model.backward(dG)
    if lam:
        loss += lam * float(np.sum(table.values ** 2))
        table.grad += 2.0 * lam * table.values
    return loss


def effective_features(variant: str, g_users: np.ndarray, g_items: np.ndarray,
                       a_users: np.ndarray | None, a_items: np.ndarray | None,
                       weights=None) -> tuple[np.ndarray, np.ndarray]:
    """User/item matrices whose dot product is the variant's prediction score.

    Cross fusion (and no fusion) scores with the graph features alone; the
    baselines score with their fused predictor, expressed here as augmented or
    transformed feature matrices so one ranking routine serves every variant.
    """
    if variant in ("cross", "none"):
        return g_users, g_items
    if a_users is None or a_items is None:
        raise ValueError(f"variant {variant!r} needs auxiliary features to score")
    if variant == "concat":
        return (np.concatenate([g_users, a_users], axis=1),
                np.concatenate([g_items, a_items], axis=1))
    if variant == "plain-sum":
        return g_users + a_users, g_items + a_items
    if variant == "weighted-sum":
        w1, w2, w3, w4 = weights if weights is not None else identity_weights(g_users.shape[1])
        return a_users @ w1.T + g_users @ w2.T, a_items @ w3.T + g_items @ w4.T
    raise ValueError(f"unknown fusion variant {variant!r}")


def concat_fusion_loss(g_users, g_items, a_users, a_items, batch
                       ) -> tuple[float, np.ndarray, np.ndarray]:
    """Baseline: predict with the sum of both dot products, squared error.

    Equivalent to scoring with concatenated [g; a] vectors.  Gradients flow
    only into the graph features.
    """
    u, i, r = _as_rated(batch)
    e = (np.einsum("ij,ij->i", a_users[u], a_items[i])
         + np.einsum("ij,ij->i", g_users[u], g_items[i]) - r)
    loss = float(np.sum(e * e))
    dGu = np.zeros_like(g_users)
    dGv = np.zeros_like(g_items)
    np.add.at(dGu, u, (2.0 * e)[:, None] * g_items[i])
    np.add.at(dGv, i, (2.0 * e)[:, None] * g_users[u])
    return loss, dGu, dGv


def weighted_sum_fusion_loss(g_users, g_items, a_users, a_items, batch, weights
                             ) -> tuple[float, np.ndarray, np.ndarray, list[np.ndarray]]:
    """Baseline: squared error of (W1 a_u + W2 g_u) . (W3 a_i + W4 g_i).

    Returns the loss, feature-level gradients for the graph features, and the
    four weight-matrix gradients.  Identity weights give the plain-summation
    variant.
    """
    w1, w2, w3, w4 = weights
    d = g_users.shape[1]
    for w in weights:
        if w.shape != (d, d):
            raise ValueError("weight matrices must be (dim, dim)")
    u, i, r = _as_rated(batch)
    pu = a_users[u] @ w1.T + g_users[u] @ w2.T
    qi = a_items[i] @ w3.T + g_items[i] @ w4.T
    e = np.einsum("ij,ij->i", pu, qi) - r
    loss = float(np.sum(e * e))

    dGu = np.zeros_like(g_users)
    dGv = np.zeros_like(g_items)
    coef = (2.0 * e)[:, None]
    np.add.at(dGu, u, (coef * qi) @ w2)
    np.add.at(dGv, i, (coef * pu) @ w4)
    dW1 = (coef * qi).T @ a_users[u]
    dW2 = (coef * qi).T @ g_users[u]
    dW3 = (coef * pu).T @ a_items[i]
    dW4 = (coef * pu).T @ g_items[i]
    return loss, dGu, dGv, [dW1, dW2, dW3, dW4]


# ---------------------------------------------------------------------------
# Temporal variant
# ---------------------------------------------------------------------------

@dataclass
class TemporalEmbeddings:
    """Per-period embedding tables for sequence models.

    ``period`` is the period being trained; ``prior`` maps earlier period
    indices to frozen (user_table, item_table) pairs.  ``prev_user_period``
    and ``prev_item_period`` give each node's most recent active earlier
    period, -1 when it has none.
    """

    period: int
    user_table: np.ndarray
    item_table: np.ndarray
    prior: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    prev_user_period: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    prev_item_period: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))

    def validate(self) -> None:
        for t_prev in self.prior:
            if t_prev >= self.period:
                raise ValueError(f"prior period {t_prev} is not before period {self.period}")
        for arr in (self.prev_user_period, self.prev_item_period):
            if len(arr) and arr.max() >= self.period:
                raise ValueError("a node's previous period must precede the current one")


def temporal_fusion_loss(emb: TemporalEmbeddings, batch, lambda1: float, lambda2: float
                         ) -> tuple[float, np.ndarray, np.ndarray]:
    """Penalty tying current-period scores to the frozen previous-period ones.

    For each (user, item) pair the first term holds g_u^t against the user's
    previous-period item vector, the second holds g_i^t against the item's
    previous-period user vector; pairs without the relevant history contribute
    zero.  The host sequence model's own loss is supplied externally.
    """
    emb.validate()
    u, i = _as_pairs(batch)
    dHu = np.zeros_like(emb.user_table)
    dHi = np.zeros_like(emb.item_table)
    penalty = 0.0
    for uu, ii in zip(u, i):
        tu = int(emb.prev_user_period[uu]) if len(emb.prev_user_period) else -1
        ti = int(emb.prev_item_period[ii]) if len(emb.prev_item_period) else -1
        if lambda1 and tu >= 0:
            hu_prev, hi_prev = emb.prior[tu]
            gap = hu_prev[uu] @ hi_prev[ii] - emb.user_table[uu] @ hi_prev[ii]
            penalty += lambda1 * gap * gap
            dHu[uu] += -2.0 * lambda1 * gap * hi_prev[ii]
        if lambda2 and ti >= 0:
            hu_prev, hi_prev = emb.prior[ti]
            gap = hu_prev[uu] @ hi_prev[ii] - hu_prev[uu] @ emb.item_table[ii]
            penalty += lambda2 * gap * gap
            dHi[ii] += -2.0 * lambda2 * gap * hu_prev[uu]
    return float(penalty), dHu, dHi


# ---------------------------------------------------------------------------
# Closed-form gradients (independent verification route)
# ---------------------------------------------------------------------------
# Each function below evaluates the published update direction literally:
# an outer loop over nodes, an inner loop over that node's batch pairs, a
# scalar weight, and a weighted feature sum.  They share no code with the
# vectorized backward passes they are compared against.

def _pairs_by_user(batch):
    u, i, r = _as_rated(batch)
    by_u: dict[int, list[tuple[int, float]]] = {}
    by_i: dict[int, list[tuple[int, float]]] = {}
    for uu, ii, rr in zip(u, i, r):
        by_u.setdefault(int(uu), []).append((int(ii), float(rr)))
        by_i.setdefault(int(ii), []).append((int(uu), float(rr)))
    return by_u, by_i


def aux_grad_analytic(a_users, a_items, batch):
    """d/da of the auxiliary squared-error loss: sum_j 2(a_u.a_j - r) a_j."""
    by_u, by_i = _pairs_by_user(batch)
    dAu = np.zeros_like(a_users)
    dAv = np.zeros_like(a_items)
    for uu, pairs in by_u.items():
        for jj, rr in pairs:
            w = 2.0 * (a_users[uu] @ a_items[jj] - rr)
            dAu[uu] += w * a_items[jj]
    for ii, pairs in by_i.items():
        for vv, rr in pairs:
            w = 2.0 * (a_users[vv] @ a_items[ii] - rr)
            dAv[ii] += w * a_users[vv]
    return dAu, dAv


def mse_grad_analytic(g_users, g_items, batch):
    """d/dg of the squared-error graph loss: sum_j 2(g_u.g_j - r) g_j."""
    by_u, by_i = _pairs_by_user(batch)
    dGu = np.zeros_like(g_users)
    dGv = np.zeros_like(g_items)
    for uu, pairs in by_u.items():
        for jj, rr in pairs:
            w = 2.0 * (g_users[uu] @ g_items[jj] - rr)
            dGu[uu] += w * g_items[jj]
    for ii, pairs in by_i.items():
        for vv, rr in pairs:
            w = 2.0 * (g_users[vv] @ g_items[ii] - rr)
            dGv[ii] += w * g_users[vv]
    return dGu, dGv


def fused_mse_grad_analytic(g_users, g_items, a_users, a_items, batch,
                            lambda1: float, lambda2: float):
    """Update direction of the full squared-error objective: each neighbor
    contributes w_g * g_j + w_c * a_j, mixing both feature spaces."""
    by_u, by_i = _pairs_by_user(batch)
    dGu = np.zeros_like(g_users)
    dGv = np.zeros_like(g_items)
    for uu, pairs in by_u.items():
        for jj, rr in pairs:
            w_g = 2.0 * (g_users[uu] @ g_items[jj] - rr)
            w_c = 2.0 * lambda1 * (g_users[uu] @ a_items[jj] - a_users[uu] @ a_items[jj])
            dGu[uu] += w_g * g_items[jj] + w_c * a_items[jj]
    for ii, pairs in by_i.items():
        for vv, rr in pairs:
            w_g = 2.0 * (g_users[vv] @ g_items[ii] - rr)
            w_c = 2.0 * lambda2 * (a_users[vv] @ g_items[ii] - a_users[vv] @ a_items[ii])
            dGv[ii] += w_g * g_users[vv] + w_c * a_users[vv]
    return dGu, dGv


def concat_grad_analytic(g_users, g_items, a_users, a_items, batch):
    """Concatenation baseline: the weight sees both scores but only g_j is
    ever added to the update."""
    by_u, by_i = _pairs_by_user(batch)
    dGu = np.zeros_like(g_users)
    dGv = np.zeros_like(g_items)
    for uu, pairs in by_u.items():
        for jj, rr in pairs:
            w = 2.0 * (a_users[uu] @ a_items[jj] + g_users[uu] @ g_items[jj] - rr)
            dGu[uu] += w * g_items[jj]
    for ii, pairs in by_i.items():
        for vv, rr in pairs:
            w = 2.0 * (a_users[vv] @ a_items[ii] + g_users[vv] @ g_items[ii] - rr)
            dGv[ii] += w * g_users[vv]
    return dGu, dGv


def weighted_sum_grad_analytic(g_users, g_items, a_users, a_items, batch, weights):
    """Summation baseline: a fixed W2^T / W4^T mixing of both feature spaces."""
    w1, w2, w3, w4 = weights
    by_u, by_i = _pairs_by_user(batch)
    dGu = np.zeros_like(g_users)
    dGv = np.zeros_like(g_items)
    for uu, pairs in by_u.items():
        for jj, rr in pairs:
            pu = w1 @ a_users[uu] + w2 @ g_users[uu]
            qj = w3 @ a_items[jj] + w4 @ g_items[jj]
            w = 2.0 * (pu @ qj - rr)
            dGu[uu] += w * (w2.T @ qj)
    for ii, pairs in by_i.items():
        for vv, rr in pairs:
            pv = w1 @ a_users[vv] + w2 @ g_users[vv]
            qi = w3 @ a_items[ii] + w4 @ g_items[ii]
            w = 2.0 * (pv @ qi - rr)
            dGv[ii] += w * (w4.T @ pv)
    return dGu, dGv
