"""Gauss-Hermite integration against the standard normal and the marginal log-likelihood."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import eigh_tridiagonal
from scipy.special import log_expit, logsumexp

from .data import IncidenceMatrix
from .model import Parameters

DEFAULT_POINTS = 21


@dataclass(frozen=True)
class GHRule:
    """Tensor-product rule with ``nodes`` of shape (Q, dim) and weights summing to 1."""

    nodes: np.ndarray
    weights: np.ndarray
    points_per_dim: int
    dim: int

    @property
    def log_weights(self) -> np.ndarray:
        # far-tail tensor weights can underflow to 0; they contribute nothing
        with np.errstate(divide="ignore"):
            return np.log(self.weights)

    def expect(self, f) -> float:
        """E[f(theta)] for theta ~ N(0, I); ``f`` maps (Q, dim) nodes to (Q,) values."""
        return float(self.weights @ np.asarray(f(self.nodes), dtype=float))


@lru_cache(maxsize=None)
def _hermite_1d(n: int) -> tuple[np.ndarray, np.ndarray]:
    # Golub-Welsch: probabilists' Hermite recurrence He_{k+1} = x He_k - k He_{k-1}
    off = np.sqrt(np.arange(1, n, dtype=float))
    x, v = eigh_tridiagonal(np.zeros(n), off)
    w = v[0] ** 2
    x = 0.5 * (x - x[::-1])  # enforce exact symmetry
    w = 0.5 * (w + w[::-1])
    return x, w / w.sum()


def gh_rule(points_per_dim: int = DEFAULT_POINTS, dim: int = 1) -> GHRule:
    if points_per_dim < 1:
        raise ValueError("points_per_dim must be >= 1")
    if dim < 0:
        raise ValueError("dim must be >= 0")
    if dim == 0:
        return GHRule(np.zeros((1, 0)), np.ones(1), points_per_dim, 0)
    x, w = _hermite_1d(points_per_dim)
    nodes = np.array(list(itertools.product(x, repeat=dim)))
    weights = np.prod(np.array(list(itertools.product(w, repeat=dim))), axis=1)
    return GHRule(nodes, weights, points_per_dim, dim)


def conditional_logliks(y: np.ndarray, p: Parameters, nodes: np.ndarray) -> np.ndarray:
    """log p(y_n | theta_q, group g) for every sender, group and node: shape (N, G, Q)."""
    y = np.asarray(y, dtype=float)
    s = p.intercepts[:, None, :] + np.einsum("grd,qd->gqr", p.slopes, nodes)
    return np.einsum("nr,gqr->ngq", y, log_expit(s)) + np.einsum("nr,gqr->ngq", 1.0 - y, log_expit(-s))


def group_marginal_logliks(m: IncidenceMatrix | np.ndarray, p: Parameters, rule: GHRule | None = None) -> np.ndarray:
    """log p(y_n | group g) integrated over the latent trait, shape (N, G)."""
    y = m.cells if isinstance(m, IncidenceMatrix) else np.asarray(m)
    D = p.spec.latent_dim
    if D == 0:
        rule = gh_rule(1, 0)
    elif rule is None:
        rule = gh_rule(DEFAULT_POINTS, D)
    elif rule.dim != D:
        raise ValueError(f"rule dimension {rule.dim} does not match latent dimension {D}")
    ll = conditional_logliks(y, p, rule.nodes)
    return logsumexp(ll + rule.log_weights, axis=2)


def loglik_gh(m: IncidenceMatrix | np.ndarray, p: Parameters, rule: GHRule | None = None) -> float:
    """Marginal log-likelihood of the mixture, integrating each group's trait by quadrature.

    For ``D = 0`` the rule is ignored and the latent class likelihood is exact.
    """
    with np.errstate(divide="ignore"):
        log_eta = np.log(p.eta)
    per_node = logsumexp(group_marginal_logliks(m, p, rule) + log_eta, axis=1)
    return float(np.sum(np.sort(per_node)))
