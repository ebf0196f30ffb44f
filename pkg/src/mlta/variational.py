"""Variational double-EM for the mixture of latent trait analyzers.

Each logistic likelihood term is replaced by the Jaakkola-Jordan quadratic
lower bound

    log sigma(x) >= log sigma(xi) + (x - xi) / 2 - lambda(xi) (x^2 - xi^2),
    lambda(xi) = tanh(xi / 2) / (4 xi),

which makes the within-group posterior of the latent trait Gaussian. One
iteration is an M-step for (eta, b, w) followed by an E-step that refreshes
the Gaussian moments, the variational parameters xi and the group
responsibilities. Every sub-step is a coordinate ascent on the same objective,
so the recorded bound never decreases.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_expit, logit, logsumexp

from .data import IncidenceMatrix
from .model import ModelSpec, Parameters

log = logging.getLogger(__name__)

XI_INIT = 20.0
RIDGE = 1e-8
DEGENERATE_ETA = 1e-6
# clip for closed-form latent class intercepts when a group never (or always) links
_PROB_CLIP = 1e-10


class NumericalError(ArithmeticError):
    """A precision matrix could not be inverted."""


def jj_lambda(xi):
    """tanh(xi/2) / (4 xi), with the removable singularity at 0 set to 1/8.

    The bound depends on xi only through xi^2, so negative inputs are folded
    onto their absolute value.
    """
    xi = np.abs(np.asarray(xi, dtype=float))
    small = xi < 1e-6
    safe = np.where(small, 1.0, xi)
    # Taylor: 1/8 - xi^2/96 near zero
    out = np.where(small, 0.125 - xi * xi / 96.0, np.tanh(safe / 2.0) / (4.0 * safe))
    return out if out.ndim else float(out)


@dataclass
class VariationalState:
    """Per sender and group: xi (N, G, R), Gaussian moments (N, G, D) / (N, G, D, D), responsibilities (N, G)."""

    xi: np.ndarray
    post_mean: np.ndarray
    post_cov: np.ndarray
    resp: np.ndarray
    # node bounds (N, G) from the E-step that produced this state
    bounds: np.ndarray | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "resp": self.resp.tolist(),
            "post_mean": self.post_mean.tolist(),
            "post_cov": self.post_cov.tolist(),
            "xi": self.xi.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict, spec: ModelSpec) -> "VariationalState":
        resp = np.asarray(d["resp"], dtype=float)
        N, G = resp.shape
        D = spec.latent_dim
        return cls(
            xi=np.asarray(d["xi"], dtype=float).reshape(N, G, -1),
            post_mean=np.asarray(d["post_mean"], dtype=float).reshape(N, G, D),
            post_cov=np.asarray(d["post_cov"], dtype=float).reshape(N, G, D, D),
            resp=resp,
        )


@dataclass(frozen=True)
class FitConfig:
    max_iter: int = 1000
    tol: float = 1e-6
    seed: int = 0
    # None draws random starting values from ``seed``; a Parameters instance warm-starts
    init: Parameters | None = None


@dataclass
class FitResult:
    params: Parameters
    state: VariationalState
    bound_trace: list[float]
    n_iters: int
    converged: bool
    seed: int
    degenerate: bool = False
    warnings: list[str] = field(default_factory=list)

    @property
    def spec(self) -> ModelSpec:
        return self.params.spec

    @property
    def bound(self) -> float:
        return self.bound_trace[-1]

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "seed": self.seed,
            "converged": self.converged,
            "n_iters": self.n_iters,
            "degenerate": self.degenerate,
            "warnings": list(self.warnings),
            "bound": self.bound,
            "params": self.params.to_dict(),
            "state": self.state.to_dict(),
            "bound_trace": list(self.bound_trace),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        params = Parameters.from_dict(d["params"])
        return cls(
            params=params,
            state=VariationalState.from_dict(d["state"], params.spec),
            bound_trace=list(d["bound_trace"]),
            n_iters=d["n_iters"],
            converged=d["converged"],
            seed=d["seed"],
            degenerate=d.get("degenerate", False),
            warnings=list(d.get("warnings", [])),
        )


# ---------------------------------------------------------------------------
# Bound evaluation
# ---------------------------------------------------------------------------


def _bound_terms(y, b, w, xi, mean, cov):
    """Variational lower bound on log p(y | group) for arrays broadcast over leading axes.

    Shapes: y (..., R), b (..., R), w (..., R, D), xi (..., R), mean (..., D), cov (..., D, D).
    """
    lam = jj_lambda(xi)
    D = mean.shape[-1]
    es = b + (w @ mean[..., None])[..., 0]
    var_s = np.sum((w @ cov) * w, axis=-1)
    es2 = var_s + es * es
    per_item = log_expit(xi) - 0.5 * xi + lam * xi * xi + (y - 0.5) * es - lam * es2
    total = per_item.sum(axis=-1)
    if D:
        _, logdet = np.linalg.slogdet(cov)
        trace = np.trace(cov, axis1=-2, axis2=-1)
        total = total - 0.5 * (trace + np.sum(mean * mean, axis=-1)) + 0.5 * logdet + 0.5 * D
    return total


def node_bound(p: Parameters, g: int, y_row, xi_row, mean, cov) -> float:
    """Lower bound on log p(y_row | group g) at Gaussian q(theta) = N(mean, cov) and the given xi.

    Valid for any positive-definite ``cov``; tight in the latent-class case when
    ``xi = |b|``.
    """
    D = p.spec.latent_dim
    mean = np.asarray(mean, dtype=float).reshape(D)
    cov = np.asarray(cov, dtype=float).reshape(D, D)
    if D:
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("covariance is not positive definite") from exc
    return float(
        _bound_terms(
            np.asarray(y_row, dtype=float),
            p.intercepts[g],
            p.slopes[g],
            np.asarray(xi_row, dtype=float),
            mean,
            cov,
        )
    )


def node_bounds(y: np.ndarray, p: Parameters, s: VariationalState) -> np.ndarray:
    """Bound for every (sender, group) pair, shape (N, G)."""
    y = np.asarray(y, dtype=float)[:, None, :]
    return _bound_terms(y, p.intercepts[None], p.slopes[None], s.xi, s.post_mean, s.post_cov)


def _objective(bounds: np.ndarray, eta: np.ndarray) -> float:
    with np.errstate(divide="ignore"):
        log_eta = np.log(eta)
    per_node = logsumexp(bounds + log_eta, axis=1)
    return float(np.sum(np.sort(per_node)))


def total_bound(y: np.ndarray, p: Parameters, s: VariationalState) -> float:
    """sum_n log sum_g eta_g exp(bound_ng): the objective at optimal responsibilities."""
    return _objective(node_bounds(y, p, s), p.eta)


# ---------------------------------------------------------------------------
# E- and M-steps
# ---------------------------------------------------------------------------


def _cells(m) -> np.ndarray:
    return np.asarray(m.cells if isinstance(m, IncidenceMatrix) else m, dtype=float)


def e_step(m, p: Parameters, s: VariationalState) -> VariationalState:
    """Refresh Gaussian moments, then xi, then responsibilities."""
    y = _cells(m)
    N = y.shape[0]
    G, D = p.spec.n_groups, p.spec.latent_dim
    b, w = p.intercepts, p.slopes
    lam = jj_lambda(s.xi)

    if D:
        outer = (w[..., :, None] * w[..., None, :]).reshape(G, -1, D * D)
        precision = np.eye(D) + 2.0 * np.swapaxes(np.swapaxes(lam, 0, 1) @ outer, 0, 1).reshape(N, G, D, D)
        try:
            chol = np.linalg.cholesky(precision)
        except np.linalg.LinAlgError:
            for n in range(N):
                for g in range(G):
                    try:
                        np.linalg.cholesky(precision[n, g])
                    except np.linalg.LinAlgError as exc:
                        raise NumericalError(f"precision not invertible at sender {n}, group {g}") from exc
            raise
        inv_chol = np.linalg.inv(chol)
        cov = np.swapaxes(inv_chol, -1, -2) @ inv_chol
        cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
        coef = (y[:, None, :] - 0.5) - 2.0 * lam * b[None]
        lin = np.swapaxes(np.swapaxes(coef, 0, 1)[:, :, None, :] @ w[:, None], 0, 1)[..., 0, :]
        mean = (cov @ lin[..., None])[..., 0]
        es = b[None] + (w[None] @ mean[..., None])[..., 0]
        var_s = np.sum((w[None] @ cov) * w[None], axis=-1)
        xi = np.sqrt(var_s + es * es)
    else:
        mean = np.zeros((N, G, 0))
        cov = np.zeros((N, G, 0, 0))
        xi = np.broadcast_to(np.abs(b)[None], (N, G, b.shape[1])).copy()

    new = VariationalState(xi=xi, post_mean=mean, post_cov=cov, resp=s.resp)
    bounds = node_bounds(y, p, new)
    with np.errstate(divide="ignore"):
        log_post = bounds + np.log(p.eta)
    resp = np.exp(log_post - logsumexp(log_post, axis=1, keepdims=True))
    resp /= resp.sum(axis=1, keepdims=True)
    new.resp = resp
    new.bounds = bounds
    return new


def _solve(h: np.ndarray, rhs: np.ndarray, warnings: list[str] | None) -> np.ndarray:
    """Batched solve with a ridge retry for singular or badly conditioned systems."""
    k = h.shape[-1]
    cond = np.linalg.cond(h)
    bad = ~np.isfinite(cond) | (cond > 1e14)
    if np.any(bad):
        msg = f"ridge-regularised {int(bad.sum())} singular M-step system(s)"
        log.warning(msg)
        if warnings is not None:
            warnings.append(msg)
        h = h.copy()
        h[bad] += RIDGE * np.eye(k)
    return np.linalg.solve(h, rhs[..., None])[..., 0]


def m_step(m, s: VariationalState, spec: ModelSpec, warnings: list[str] | None = None) -> Parameters:
    """Maximise the bound over (eta, b, w) at fixed variational quantities."""
    y = _cells(m)
    N, R = y.shape
    G, D = spec.n_groups, spec.latent_dim
    z = s.resp
    eta = z.sum(axis=0) / N
    eta = eta / eta.sum()

    if D == 0:
        # the bound is tight here, so use the exact latent class update
        weight = z.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            prob = (z.T @ y) / weight[:, None]
        prob = np.where(weight[:, None] > 0, prob, 0.5)
        b = logit(np.clip(prob, _PROB_CLIP, 1.0 - _PROB_CLIP))
        return Parameters(eta, b, np.zeros((G, R, 0)), spec)

    lam = jj_lambda(s.xi)
    mu, sigma = s.post_mean, s.post_cov
    second = sigma + np.einsum("ngd,nge->ngde", mu, mu)
    resid = y - 0.5
    zl = z[:, :, None] * lam  # (N, G, R)

    if not spec.common_slope:
        m1 = np.concatenate([np.ones((N, G, 1)), mu], axis=-1)
        m2 = np.empty((N, G, D + 1, D + 1))
        m2[..., 0, 0] = 1.0
        m2[..., 0, 1:] = mu
        m2[..., 1:, 0] = mu
        m2[..., 1:, 1:] = second
        h = 2.0 * np.einsum("ngr,ngij->grij", zl, m2)
        rhs = np.einsum("ng,nr,ngi->gri", z, resid, m1)
        beta = _solve(h, rhs, warnings)
        b = beta[..., 0]
        w = beta[..., 1:]
    else:
        k = G + D
        h = np.zeros((R, k, k))
        gi = np.arange(G)
        h[:, gi, gi] = 2.0 * zl.sum(axis=0).T
        hbw = 2.0 * np.einsum("ngr,ngd->rgd", zl, mu)
        h[:, :G, G:] = hbw
        h[:, G:, :G] = np.swapaxes(hbw, 1, 2)
        h[:, G:, G:] = 2.0 * np.einsum("ngr,ngde->rde", zl, second)
        rhs = np.empty((R, k))
        rhs[:, :G] = (z.T @ resid).T
        rhs[:, G:] = np.einsum("ng,nr,ngd->rd", z, resid, mu)
        beta = _solve(h, rhs, warnings)
        b = beta[:, :G].T
        w = np.broadcast_to(beta[None, :, G:], (G, R, D)).copy()
    return Parameters(eta, b, w, spec)


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


def initial_parameters(spec: ModelSpec, n_receivers: int, rng: np.random.Generator) -> Parameters:
    """Intercepts and slopes i.i.d. standard normal, uniform mixing proportions."""
    G, D, R = spec.n_groups, spec.latent_dim, n_receivers
    b = rng.standard_normal((G, R))
    if spec.common_slope:
        w = np.broadcast_to(rng.standard_normal((R, D))[None], (G, R, D)).copy()
    else:
        w = rng.standard_normal((G, R, D))
    return Parameters(np.full(G, 1.0 / G), b, w, spec)


def initial_state(n_senders: int, p: Parameters) -> VariationalState:
    G, D, R = p.spec.n_groups, p.spec.latent_dim, p.n_receivers
    return VariationalState(
        xi=np.full((n_senders, G, R), XI_INIT),
        post_mean=np.zeros((n_senders, G, D)),
        post_cov=np.broadcast_to(np.eye(D), (n_senders, G, D, D)).copy(),
        resp=np.full((n_senders, G), 1.0 / G),
    )


def apply_sign_convention(p: Parameters, s: VariationalState) -> tuple[Parameters, VariationalState]:
    """Flip each latent dimension so its largest-magnitude slope is positive."""
    D = p.spec.latent_dim
    if D == 0:
        return p, s
    flat = p.slopes.reshape(-1, D)
    signs = np.where(flat[np.argmax(np.abs(flat), axis=0), np.arange(D)] < 0, -1.0, 1.0)
    if np.all(signs > 0):
        return p, s
    p = Parameters(p.eta, p.intercepts, p.slopes * signs, p.spec)
    s = VariationalState(
        xi=s.xi,
        post_mean=s.post_mean * signs,
        post_cov=s.post_cov * np.outer(signs, signs),
        resp=s.resp,
        bounds=s.bounds,
    )
    return p, s


def fit(m, spec: ModelSpec, cfg: FitConfig = FitConfig()) -> FitResult:
    """Alternate M- and E-steps from one start until the bound stalls.

    Non-convergence within ``max_iter`` is reported through ``converged``
    rather than raised.
    """
    y = _cells(m)
    N, R = y.shape
    if N < spec.n_groups:
        raise ValueError(f"need at least {spec.n_groups} senders for {spec.n_groups} groups, got {N}")
    warnings: list[str] = []
    if cfg.init is None:
        params = initial_parameters(spec, R, np.random.default_rng(cfg.seed))
    else:
        params = cfg.init
        if params.spec != spec or params.n_receivers != R:
            raise ValueError("initial parameters do not match the model spec and data")

    state = e_step(y, params, initial_state(N, params))
    trace = [_objective(state.bounds, params.eta)]
    converged = False
    n_iters = 0
    for n_iters in range(1, cfg.max_iter + 1):
        params = m_step(y, state, spec, warnings)
        state = e_step(y, params, state)
        trace.append(_objective(state.bounds, params.eta))
        if abs(trace[-1] - trace[-2]) < cfg.tol:
            converged = True
            break

    params, state = apply_sign_convention(params, state)
    degenerate = bool(np.any(params.eta < DEGENERATE_ETA))
    if degenerate:
        warnings.append("degenerate group: mixing proportion below %g" % DEGENERATE_ETA)
    if not converged:
        log.info("%s seed=%d did not converge in %d iterations", spec, cfg.seed, cfg.max_iter)
    return FitResult(
        params=params,
        state=state,
        bound_trace=trace,
        n_iters=n_iters,
        converged=converged,
        seed=cfg.seed,
        degenerate=degenerate,
        warnings=warnings,
    )
