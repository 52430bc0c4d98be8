"""Model architectures with analytic gradients.

* ``GcnModel``   two-layer GCN, logits = Â ReLU(Â X W0) W1
* ``SageModel``  two-layer GraphSAGE with mean aggregation, [h ‖ mean_nbr(h)] W
* ``VaeModel``   feature VAE with a KL sparsity penalty on squashed latent means
* ``VgaeModel``  GCN-encoded variational graph autoencoder, inner-product decoder

Every model keeps its weights in a ``ParamVector`` so FedAvg can treat it as a
flat vector. ``loss_and_grad`` returns the loss and a flat gradient aligned with
``params.data``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize_scalar

from .errors import ModelError
from .graph import adjacency_matrix
from .nn import (
    ParamVector,
    affine_backward,
    affine_forward,
    glorot,
    log_softmax,
    relu_backward,
    relu_forward,
    sigmoid,
    softmax_xent_backward,
    softmax_xent_forward,
    softplus,
)

log = logging.getLogger(__name__)

RHO_CLAMP = 1e-6


def gcn_norm_adj(n: int, edges) -> sp.csr_matrix:
    """D̃^{-1/2} (A + I) D̃^{-1/2}; isolated nodes keep their self-loop weight 1."""
    A = adjacency_matrix(n, edges) + sp.identity(n, format="csr")
    deg = np.asarray(A.sum(axis=1)).ravel()
    s = sp.diags(1.0 / np.sqrt(deg))
    return sp.csr_matrix(s @ A @ s)


def mean_adj(n: int, edges) -> sp.csr_matrix:
    """Row-normalised adjacency D^{-1} A (all-zero rows for isolated nodes)."""
    A = adjacency_matrix(n, edges)
    deg = np.asarray(A.sum(axis=1)).ravel()
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    return sp.csr_matrix(sp.diags(inv) @ A)


def _check_features(X, n: int, d: int, who: str):
    if X.shape != (n, d):
        raise ModelError(f"{who}: features {X.shape} do not match ({n}, {d})")


# ---------------------------------------------------------------- classifiers


@dataclass(eq=False)
class GcnModel:
    norm_adj: sp.csr_matrix
    params: ParamVector

    @classmethod
    def create(cls, n: int, edges, d: int, hidden: int, num_classes: int, rng) -> GcnModel:
        if hidden <= 0:
            raise ModelError("hidden width must be positive")
        params = ParamVector.from_arrays({"W0": glorot(rng, d, hidden), "W1": glorot(rng, hidden, num_classes)})
        return cls(gcn_norm_adj(n, edges), params)

    @staticmethod
    def layout(d: int, hidden: int, num_classes: int):
        return [("W0", (d, hidden)), ("W1", (hidden, num_classes))]

    @property
    def n(self) -> int:
        return self.norm_adj.shape[0]

    def forward(self, X):
        A, W0, W1 = self.norm_adj, self.params["W0"], self.params["W1"]
        _check_features(X, self.n, W0.shape[0], "gcn")
        P = np.asarray(A @ np.asarray(X @ W0))
        H, mask = relu_forward(P)
        logits = np.asarray(A @ (H @ W1))
        return logits, (X, H, mask)

    def backward(self, dlogits, cache) -> np.ndarray:
        X, H, mask = cache
        A, W1 = self.norm_adj, self.params["W1"]
        dHW = np.asarray(A.T @ dlogits)
        dW1 = H.T @ dHW
        dP = relu_backward(dHW @ W1.T, mask)
        dW0 = np.asarray(X.T @ np.asarray(A.T @ dP))
        return self.params.flatten_grads({"W0": dW0, "W1": dW1})

    def loss_and_grad(self, X, labels, rows):
        logits, cache = self.forward(X)
        loss, xc = softmax_xent_forward(logits, labels, rows)
        return loss, self.backward(softmax_xent_backward(xc), cache)


@dataclass(eq=False)
class SageModel:
    mean_adj: sp.csr_matrix
    params: ParamVector

    @classmethod
    def create(cls, n: int, edges, d: int, hidden: int, num_classes: int, rng) -> SageModel:
        if hidden <= 0:
            raise ModelError("hidden width must be positive")
        params = ParamVector.from_arrays(
            {"W0": glorot(rng, 2 * d, hidden), "W1": glorot(rng, 2 * hidden, num_classes)}
        )
        return cls(mean_adj(n, edges), params)

    @staticmethod
    def layout(d: int, hidden: int, num_classes: int):
        return [("W0", (2 * d, hidden)), ("W1", (2 * hidden, num_classes))]

    @property
    def n(self) -> int:
        return self.mean_adj.shape[0]

    def _layer(self, H, W):
        # [H ‖ M H] W  ==  H W_self + M (H W_nbr)
        k = W.shape[0] // 2
        return np.asarray(H @ W[:k]) + np.asarray(self.mean_adj @ np.asarray(H @ W[k:]))

    def _layer_grad(self, H, dout):
        return np.vstack([np.asarray(H.T @ dout), np.asarray(H.T @ np.asarray(self.mean_adj.T @ dout))])

    def forward(self, X):
        W0, W1 = self.params["W0"], self.params["W1"]
        _check_features(X, self.n, W0.shape[0] // 2, "sage")
        H, mask = relu_forward(self._layer(X, W0))
        return self._layer(H, W1), (X, H, mask)

    def backward(self, dlogits, cache) -> np.ndarray:
        X, H, mask = cache
        W1 = self.params["W1"]
        h = W1.shape[0] // 2
        dW1 = self._layer_grad(H, dlogits)
        dH = dlogits @ W1[:h].T + np.asarray(self.mean_adj.T @ (dlogits @ W1[h:].T))
        dP = relu_backward(dH, mask)
        return self.params.flatten_grads({"W0": self._layer_grad(X, dP), "W1": dW1})

    def loss_and_grad(self, X, labels, rows):
        logits, cache = self.forward(X)
        loss, xc = softmax_xent_forward(logits, labels, rows)
        return loss, self.backward(softmax_xent_backward(xc), cache)


CLASSIFIERS = {"gcn": GcnModel, "sage": SageModel}


def make_classifier(kind: str, n: int, edges, d: int, hidden: int, num_classes: int, rng):
    try:
        cls = CLASSIFIERS[kind]
    except KeyError:
        raise ModelError(f"unknown classifier {kind!r}") from None
    return cls.create(n, edges, d, hidden, num_classes, rng)


def classifier_layout(kind: str, d: int, hidden: int, num_classes: int):
    return CLASSIFIERS[kind].layout(d, hidden, num_classes)


# ------------------------------------------------------------------------ VAE


def bernoulli_kl(rho: float, rho_hat) -> np.ndarray:
    """KL(Bernoulli(rho) ‖ Bernoulli(rho_hat)), elementwise over rho_hat."""
    rho_hat = np.asarray(rho_hat, dtype=np.float64)
    return rho * np.log(rho / rho_hat) + (1.0 - rho) * np.log((1.0 - rho) / (1.0 - rho_hat))


def gaussian_kl(mu, logvar) -> np.ndarray:
    """Per-row KL(N(mu, exp(logvar)) ‖ N(0, I)), summed over dimensions."""
    return 0.5 * np.sum(mu * mu + np.exp(logvar) - 1.0 - logvar, axis=1)


def is_binary(X) -> bool:
    X = np.asarray(X)
    return bool(np.all((X == 0) | (X == 1)))


@dataclass
class VaeLoss:
    loss: float
    rec: float
    kl: float
    sparse: float
    grad: np.ndarray
    sample_norms: np.ndarray | None = None  # per-sample gradient norms of each row's own loss


@dataclass(eq=False)
class VaeModel:
    params: ParamVector
    d: int
    hidden: int = 64
    latent: int = 32
    rho: float = 0.1
    beta: float = 0.1
    lambda_rec: float = 1.0
    lambda_kl: float = 1.0
    binary: bool = True

    _LAYERS = ("enc1", "mu", "lv", "dec1", "dec2")

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ModelError(f"sparsity target rho must lie in (0, 1), got {self.rho}")
        if self.latent >= self.d:
            raise ModelError(f"latent dim {self.latent} must be below feature dim {self.d}")

    @staticmethod
    def layout(d: int, hidden: int, latent: int):
        shapes = {
            "enc1": (d, hidden),
            "mu": (hidden, latent),
            "lv": (hidden, latent),
            "dec1": (latent, hidden),
            "dec2": (hidden, d),
        }
        out = []
        for name, (a, b) in shapes.items():
            out += [(f"{name}_W", (a, b)), (f"{name}_b", (b,))]
        return out

    @classmethod
    def create(cls, d: int, rng, hidden: int = 64, latent: int = 32, **kw) -> VaeModel:
        p = ParamVector(cls.layout(d, hidden, latent))
        for name, shape in p.registry:
            if name.endswith("_W"):
                p[name][...] = glorot(rng, *shape)
        return cls(p, d, hidden, latent, **kw)

    def _aff(self, name, x):
        return affine_forward(x, self.params[f"{name}_W"], self.params[f"{name}_b"])

    def encode(self, X):
        pre, c1 = self._aff("enc1", np.asarray(X, dtype=np.float64))
        h, m1 = relu_forward(pre)
        mu, cmu = self._aff("mu", h)
        lv, clv = self._aff("lv", h)
        return mu, lv, (c1, m1, cmu, clv)

    def decode(self, z):
        pre, c3 = self._aff("dec1", z)
        h, m3 = relu_forward(pre)
        out, c4 = self._aff("dec2", h)
        return out, (c3, m3, c4)

    def reconstruct(self, X) -> np.ndarray:
        """Decoded features at the posterior mean (probabilities for binary data)."""
        mu, _, _ = self.encode(X)
        out, _ = self.decode(mu)
        return sigmoid(out) if self.binary else out

    def rho_hat(self, mu):
        raw = sigmoid(mu).mean(axis=0)
        clipped = np.clip(raw, RHO_CLAMP, 1.0 - RHO_CLAMP)
        if np.any(clipped != raw):
            log.info("sparsity activation clamped in %d latent dims", int(np.sum(clipped != raw)))
        return clipped, clipped == raw

    def loss_and_grad(self, X, eps, sample_weights=None, want_norms: bool = False) -> VaeLoss:
        """Loss on a batch and its gradient.

        ``eps`` is the reparameterisation noise (same shape as the latent means),
        supplied by the caller. ``sample_weights`` multiplies each row's
        contribution to the parameter gradient (used for per-sample clipping);
        the reported loss is always the unweighted batch objective.
        """
        X = np.asarray(X, dtype=np.float64)
        B = X.shape[0]
        if B == 0:
            raise ModelError("empty VAE batch")
        if X.shape[1] != self.d:
            raise ModelError(f"vae: batch has {X.shape[1]} features, model expects {self.d}")
        mu, lv, (c1, m1, cmu, clv) = self.encode(X)
        if eps.shape != mu.shape:
            raise ModelError(f"noise shape {eps.shape} != latent shape {mu.shape}")
        std = np.exp(0.5 * lv)
        z = mu + std * eps
        out, (c3, m3, c4) = self.decode(z)

        if self.binary:
            rec_rows = np.sum(softplus(out) - X * out, axis=1)
            dout = (sigmoid(out) - X) / B
        else:
            diff = out - X
            rec_rows = np.sum(diff * diff, axis=1)
            dout = 2.0 * diff / B
        rec = float(rec_rows.mean())
        kl = float(gaussian_kl(mu, lv).mean())
        rho_hat, free = self.rho_hat(mu)
        sparse = float(np.sum(bernoulli_kl(self.rho, rho_hat)))
        loss = self.lambda_rec * rec + self.lambda_kl * kl + self.beta * sparse

        # row-wise upstream gradients (each row only sees its own loss terms;
        # the batch statistic rho_hat enters as a fixed coefficient)
        dout *= self.lambda_rec
        dh4, (d4a, d4W) = self._back_rows(dout, c4)
        d3 = relu_backward(dh4, m3)
        dz, _ = self._back_rows(d3, c3)
        g_sparse = np.where(free, -self.rho / rho_hat + (1.0 - self.rho) / (1.0 - rho_hat), 0.0)
        s = sigmoid(mu)
        dmu = dz + self.lambda_kl * mu / B + self.beta * g_sparse * s * (1.0 - s) / B
        dlv = dz * eps * 0.5 * std + self.lambda_kl * 0.5 * (np.exp(lv) - 1.0) / B
        dh = dmu @ self.params["mu_W"].T + dlv @ self.params["lv_W"].T
        d1 = relu_backward(dh, m1)

        pairs = {"enc1": (c1, d1), "mu": (cmu, dmu), "lv": (clv, dlv), "dec1": (c3, d3), "dec2": (c4, dout)}
        norms = None
        if want_norms:
            sq = np.zeros(B)
            for cache, delta in pairs.values():
                a2 = np.sum(cache[0] ** 2, axis=1)
                g2 = np.sum(delta**2, axis=1)
                sq += a2 * g2 + g2
            norms = B * np.sqrt(sq)
        grads = {}
        for name, (cache, delta) in pairs.items():
            _, dW, db = affine_backward(delta, cache, sample_weights)
            grads[f"{name}_W"], grads[f"{name}_b"] = dW, db
        return VaeLoss(loss, rec, kl, sparse, self.params.flatten_grads(grads), norms)

    @staticmethod
    def _back_rows(delta, cache):
        x, W, _ = cache
        return delta @ W.T, (x, W)


# ----------------------------------------------------------------------- VGAE


def sample_negative_edges(n: int, edges, count: int, rng) -> np.ndarray:
    """``count`` node pairs (u < v) that are not edges.

    Pairs are distinct while enough non-edges exist; otherwise they are drawn
    with replacement from the full non-edge list.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    total_pairs = n * (n - 1) // 2
    free = total_pairs - edges.shape[0]
    if count <= 0:
        return np.zeros((0, 2), dtype=np.int64)
    if free <= 0:
        raise ModelError("graph is complete; no negative pairs exist")
    taken = np.sort(edges[:, 0] * n + edges[:, 1])
    if free < count:
        log.info("only %d non-edges for %d requested negatives; sampling with replacement", free, count)
        iu = np.triu_indices(n, k=1)
        keys = iu[0] * n + iu[1]
        keys = keys[~np.isin(keys, taken)]
        pick = keys[rng.integers(0, keys.size, size=count)]
        return np.column_stack([pick // n, pick % n])
    found = np.zeros(0, dtype=np.int64)
    while found.size < count:
        m = 2 * (count - found.size) + 16
        u = rng.integers(0, n, size=m)
        v = rng.integers(0, n, size=m)
        lo, hi = np.minimum(u, v), np.maximum(u, v)
        keys = lo * n + hi
        keys = keys[(lo != hi) & ~np.isin(keys, taken)]
        # keep first occurrences, in draw order
        merged = np.concatenate([found, keys])
        _, first = np.unique(merged, return_index=True)
        found = merged[np.sort(first)]
    found = found[:count]
    return np.column_stack([found // n, found % n])


@dataclass
class VgaeLoss:
    loss: float
    recon: float
    kl: float
    grad: np.ndarray


@dataclass(eq=False)
class VgaeModel:
    norm_adj: sp.csr_matrix
    params: ParamVector

    @staticmethod
    def layout(d: int, hidden: int = 64, latent: int = 16):
        return [("W0", (d, hidden)), ("W_mu", (hidden, latent)), ("W_lv", (hidden, latent))]

    @classmethod
    def init_params(cls, d: int, rng, hidden: int = 64, latent: int = 16) -> ParamVector:
        p = ParamVector(cls.layout(d, hidden, latent))
        for name, shape in p.registry:
            p[name][...] = glorot(rng, *shape)
        return p

    @classmethod
    def create(cls, n: int, edges, d: int, rng, hidden: int = 64, latent: int = 16) -> VgaeModel:
        return cls(gcn_norm_adj(n, edges), cls.init_params(d, rng, hidden, latent))

    @property
    def n(self) -> int:
        return self.norm_adj.shape[0]

    def encode(self, X):
        A, W0 = self.norm_adj, self.params["W0"]
        _check_features(X, self.n, W0.shape[0], "vgae")
        P = np.asarray(A @ np.asarray(X @ W0))
        H, mask = relu_forward(P)
        AH = np.asarray(A @ H)
        mu = AH @ self.params["W_mu"]
        lv = AH @ self.params["W_lv"]
        return mu, lv, (X, mask, AH)

    def edge_probs(self, X, pairs) -> np.ndarray:
        """Decoder probabilities σ(μ_u · μ_v) at the posterior mean."""
        mu, _, _ = self.encode(X)
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        return sigmoid(np.sum(mu[pairs[:, 0]] * mu[pairs[:, 1]], axis=1))

    def loss_and_grad(self, X, pos, neg, eps, kl_weight: float | None = None) -> VgaeLoss:
        """Mean logistic loss over positive and negative pairs plus weighted KL.

        ``kl_weight`` defaults to 1/n.
        """
        pos = np.asarray(pos, dtype=np.int64).reshape(-1, 2)
        neg = np.asarray(neg, dtype=np.int64).reshape(-1, 2)
        if pos.shape[0] == 0:
            raise ModelError("vgae needs at least one positive edge")
        n = self.n
        kw = 1.0 / n if kl_weight is None else kl_weight
        mu, lv, (X, mask, AH) = self.encode(X)
        if eps.shape != mu.shape:
            raise ModelError(f"noise shape {eps.shape} != latent shape {mu.shape}")
        std = np.exp(0.5 * lv)
        Z = mu + std * eps

        dZ = np.zeros_like(Z)
        recon = 0.0
        for pairs, positive in ((pos, True), (neg, False)):
            if pairs.shape[0] == 0:
                continue
            zu, zv = Z[pairs[:, 0]], Z[pairs[:, 1]]
            s = np.sum(zu * zv, axis=1)
            if positive:
                recon += float(np.mean(softplus(-s)))
                g = (sigmoid(s) - 1.0) / pairs.shape[0]
            else:
                recon += float(np.mean(softplus(s)))
                g = sigmoid(s) / pairs.shape[0]
            np.add.at(dZ, pairs[:, 0], g[:, None] * zv)
            np.add.at(dZ, pairs[:, 1], g[:, None] * zu)
        kl = float(gaussian_kl(mu, lv).mean())

        dmu = dZ + kw * mu / n
        dlv = dZ * eps * 0.5 * std + kw * 0.5 * (np.exp(lv) - 1.0) / n
        dW_mu = AH.T @ dmu
        dW_lv = AH.T @ dlv
        dAH = dmu @ self.params["W_mu"].T + dlv @ self.params["W_lv"].T
        dP = relu_backward(np.asarray(self.norm_adj.T @ dAH), mask)
        dW0 = np.asarray(X.T @ np.asarray(self.norm_adj.T @ dP))
        grad = self.params.flatten_grads({"W0": dW0, "W_mu": dW_mu, "W_lv": dW_lv})
        return VgaeLoss(recon + kw * kl, recon, kl, grad)


# ----------------------------------------------------------- temperature scaling


def nll_at_temperature(logits, labels, T: float) -> float:
    logp = log_softmax(np.asarray(logits, dtype=np.float64) / T)
    return float(-logp[np.arange(len(labels)), labels].mean())


def temperature_fit(logits, labels, bounds=(0.05, 10.0)) -> float:
    """Scalar T minimising validation NLL of ``logits / T`` over ``bounds``.

    Falls back to T = 1 when the fitted value does not beat it, and whenever
    NLL keeps falling as T -> 0 so no finite minimiser exists: single-class
    validation sets, and sets where every node's true logit strictly wins.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ModelError("temperature fit needs at least one validation node")
    if np.unique(labels).size < 2:
        log.info("single-class validation set; keeping temperature 1")
        return 1.0
    logits = np.asarray(logits, dtype=np.float64)
    rest = logits.copy()
    rest[np.arange(labels.size), labels] = -np.inf
    if np.all(logits[np.arange(labels.size), labels] > rest.max(axis=1)):
        log.info("validation set perfectly separated; keeping temperature 1")
        return 1.0
    res = minimize_scalar(
        lambda t: nll_at_temperature(logits, labels, t),
        bounds=bounds,
        method="bounded",
        options={"xatol": 1e-6},
    )
    T = float(res.x)
    if not math.isfinite(T) or nll_at_temperature(logits, labels, T) > nll_at_temperature(logits, labels, 1.0):
        return 1.0
    return T
