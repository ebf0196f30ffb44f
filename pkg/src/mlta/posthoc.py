"""Quantities derived from a converged fit: memberships, trait scores, event dependence,
log-lift, median-actor attendance probabilities and jackknife standard errors."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import expit, log_expit, logsumexp

from ._parallel import pool_map
from .data import IncidenceMatrix
from .model import ModelSpec, Parameters
from .quadrature import DEFAULT_POINTS, GHRule, gh_rule
from .variational import FitConfig, FitResult, fit

log = logging.getLogger(__name__)

CI_Z = 1.96
UNRELIABLE_SKIP_FRACTION = 0.10
LOG_TINY = math.log(1e-300)


class NotApplicableError(ValueError):
    """The quantity needs a latent trait (D >= 1)."""


@dataclass(frozen=True)
class MembershipReport:
    posterior: np.ndarray
    map_group: np.ndarray
    map_confidence: np.ndarray


@dataclass(frozen=True)
class TraitScores:
    mean: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True)
class JackknifeSE:
    target: str
    estimate: float
    se: float
    n_replicates: int
    n_skipped: int = 0
    unreliable: bool = False

    @property
    def ci(self) -> tuple[float, float]:
        return self.estimate - CI_Z * self.se, self.estimate + CI_Z * self.se


def _params(fit_or_params) -> Parameters:
    return fit_or_params.params if isinstance(fit_or_params, FitResult) else fit_or_params


def memberships(fit_result: FitResult) -> MembershipReport:
    posterior = np.asarray(fit_result.state.resp)
    # argmax returns the first maximum, so ties go to the lowest index
    map_group = np.argmax(posterior, axis=1)
    return MembershipReport(posterior, map_group, posterior[np.arange(len(map_group)), map_group])


def trait_scores(fit_result: FitResult) -> TraitScores:
    if fit_result.spec.latent_dim == 0:
        raise NotApplicableError("trait scores need a latent trait (D >= 1)")
    return TraitScores(fit_result.state.post_mean, fit_result.state.post_cov)


def dependence_matrix(fit_or_params, g: int) -> np.ndarray:
    """Entry (r, k) is w_rg . w_kg."""
    p = _params(fit_or_params)
    if p.spec.latent_dim == 0:
        raise NotApplicableError("event dependence needs a latent trait (D >= 1)")
    w = p.slopes[g]
    return w @ w.T


def _log_lift_grid(p: Parameters, g: int, rule: GHRule | None) -> np.ndarray:
    R = p.n_receivers
    D = p.spec.latent_dim
    if D == 0:
        out = np.zeros((R, R))
        np.fill_diagonal(out, np.nan)
        return out
    if rule is None:
        rule = gh_rule(DEFAULT_POINTS, D)
    if rule.dim != D:
        raise ValueError(f"rule dimension {rule.dim} does not match latent dimension {D}")
    logw = rule.log_weights[:, None]
    log_pi = log_expit(p.intercepts[g] + rule.nodes @ p.slopes[g].T)  # (Q, R)
    log_single = logsumexp(logw + log_pi, axis=0)
    log_joint = np.empty((R, R))
    for r in range(R):
        log_joint[r] = logsumexp(logw + log_pi[:, [r]] + log_pi, axis=0)
    with np.errstate(invalid="ignore"):
        out = log_joint - log_single[:, None] - log_single[None, :]
    # marginals below 1e-300 carry no usable ratio; flag them with the NaN sentinel
    tiny = ~(log_single >= LOG_TINY)
    out[tiny[:, None] | tiny[None, :]] = np.nan
    out = 0.5 * (out + out.T)
    np.fill_diagonal(out, np.nan)
    return out


def log_lift(fit_or_params, g: int, r: int, k: int, rule: GHRule | None = None) -> float:
    """log P(y_r = 1, y_k = 1 | g) - log P(y_r = 1 | g) - log P(y_k = 1 | g), integrals by quadrature.

    Returns NaN when either single-event marginal is below 1e-300.
    """
    if r == k:
        raise ValueError("log-lift needs two distinct receivers")
    p = _params(fit_or_params)
    if p.spec.latent_dim == 0:
        return 0.0
    sub = Parameters(
        p.eta,
        p.intercepts[:, [r, k]],
        p.slopes[:, [r, k]],
        p.spec,
    )
    return float(_log_lift_grid(sub, g, rule)[0, 1])


def log_lift_matrix(fit_or_params, g: int, rule: GHRule | None = None) -> np.ndarray:
    """All pairwise log-lifts for group ``g``; the diagonal is NaN."""
    return _log_lift_grid(_params(fit_or_params), g, rule)


def median_actor_prob(fit_or_params) -> np.ndarray:
    """logistic(b_rg): attendance probability at theta = 0, shape (G, R)."""
    return expit(_params(fit_or_params).intercepts)


# ---------------------------------------------------------------------------
# Jackknife
# ---------------------------------------------------------------------------


def parameter_vector(p: Parameters) -> tuple[list[str], np.ndarray]:
    """Flatten the free parameters with stable names (0-based indices)."""
    G, R = p.intercepts.shape
    D = p.spec.latent_dim
    names = [f"eta[{g}]" for g in range(G)]
    values = [p.eta]
    names += [f"b[{g},{r}]" for g in range(G) for r in range(R)]
    values.append(p.intercepts.ravel())
    if D:
        if p.spec.common_slope:
            names += [f"w[{r},{d}]" for r in range(R) for d in range(D)]
            values.append(p.slopes[0].ravel())
        else:
            names += [f"w[{g},{r},{d}]" for g in range(G) for r in range(R) for d in range(D)]
            values.append(p.slopes.ravel())
    return names, np.concatenate(values)


def align_groups(ref_resp: np.ndarray, resp: np.ndarray) -> np.ndarray:
    """Permutation ``perm`` with new group ``perm[g]`` matching reference group ``g``.

    Maximises the summed responsibility agreement sum_n ref[n, g] resp[n, perm[g]].
    """
    agreement = ref_resp.T @ resp
    rows, cols = linear_sum_assignment(agreement, maximize=True)
    return cols[np.argsort(rows)]


def permute_groups(p: Parameters, perm) -> Parameters:
    perm = np.asarray(perm)
    return Parameters(p.eta[perm], p.intercepts[perm], p.slopes[perm], p.spec)


def _align_signs(ref: Parameters, p: Parameters) -> Parameters:
    D = p.spec.latent_dim
    if D == 0:
        return p
    dots = np.einsum("grd,grd->d", ref.slopes, p.slopes)
    signs = np.where(dots < 0, -1.0, 1.0)
    return Parameters(p.eta, p.intercepts, p.slopes * signs, p.spec)


def _replicate(cells: np.ndarray, drop: int, spec: ModelSpec, cfg: FitConfig) -> FitResult | None:
    keep = np.arange(cells.shape[0]) != drop
    try:
        return fit(cells[keep], spec, cfg)
    except (ArithmeticError, np.linalg.LinAlgError, ValueError) as exc:
        log.warning("jackknife replicate %d failed: %s", drop, exc)
        return None


def jackknife_se(
    m: IncidenceMatrix,
    spec: ModelSpec,
    ref_fit: FitResult,
    targets=None,
    cfg: FitConfig = FitConfig(),
    threads: int | None = None,
) -> list[JackknifeSE]:
    """Leave-one-sender-out standard errors, each replicate warm-started at ``ref_fit``.

    ``targets`` is an iterable of parameter names from :func:`parameter_vector`
    (default: every parameter). Replicates that fail or do not converge are
    skipped; more than 10% skipped marks the results unreliable.
    """
    cells = np.asarray(m.cells, dtype=float)
    N = cells.shape[0]
    if N < 2:
        raise ValueError("jackknife needs at least two senders")
    names, ref_values = parameter_vector(ref_fit.params)
    index = {n: i for i, n in enumerate(names)}
    selected = list(names) if targets is None else list(targets)
    unknown = [t for t in selected if t not in index]
    if unknown:
        raise KeyError(f"unknown jackknife target(s): {unknown}")
    cols = [index[t] for t in selected]

    rep_cfg = replace(cfg, seed=ref_fit.seed, init=ref_fit.params)
    results = pool_map(_replicate, [(cells, i, spec, rep_cfg) for i in range(N)], threads)

    estimates = []
    for i, res in enumerate(results):
        if res is None or not res.converged:
            continue
        ref_resp = np.delete(ref_fit.state.resp, i, axis=0)
        p = permute_groups(res.params, align_groups(ref_resp, res.state.resp))
        p = _align_signs(ref_fit.params, p)
        estimates.append(parameter_vector(p)[1][cols])
    n_used = len(estimates)
    n_skipped = N - n_used
    unreliable = n_skipped > UNRELIABLE_SKIP_FRACTION * N
    if unreliable:
        log.warning("jackknife: %d of %d replicates skipped; standard errors unreliable", n_skipped, N)

    if n_used:
        reps = np.array(estimates)
        se = np.sqrt((n_used - 1) / n_used * np.sum((reps - reps.mean(axis=0)) ** 2, axis=0))
    else:
        se = np.full(len(cols), np.nan)
    return [
        JackknifeSE(t, float(ref_values[c]), float(s), n_used, n_skipped, unreliable)
        for t, c, s in zip(selected, cols, se)
    ]


# ---------------------------------------------------------------------------
# CSV reports
# ---------------------------------------------------------------------------


def _writer(path):
    fh = open(path, "w", encoding="utf-8", newline="")
    return fh, csv.writer(fh, lineterminator="\n")


def _fmt(x: float) -> str:
    return "nan" if not np.isfinite(x) else repr(float(x))


def write_memberships(fit_result: FitResult, sender_labels, path) -> None:
    rep = memberships(fit_result)
    G = rep.posterior.shape[1]
    fh, w = _writer(path)
    with fh:
        w.writerow(["sender", *(f"p_group{g + 1}" for g in range(G)), "map_group", "map_confidence"])
        for label, row, grp, conf in zip(sender_labels, rep.posterior, rep.map_group, rep.map_confidence):
            w.writerow([label, *(_fmt(v) for v in row), int(grp) + 1, _fmt(conf)])


def write_traits(fit_result: FitResult, sender_labels, path) -> None:
    """Long format, one row per (sender, group); ``is_map`` flags the MAP group."""
    scores = trait_scores(fit_result)
    rep = memberships(fit_result)
    N, G, D = scores.mean.shape
    fh, w = _writer(path)
    with fh:
        w.writerow(
            ["sender", "group", *(f"mean{d + 1}" for d in range(D)), *(f"var{d + 1}" for d in range(D)), "is_map"]
        )
        for n in range(N):
            for g in range(G):
                var = np.diagonal(scores.cov[n, g])
                w.writerow(
                    [
                        sender_labels[n],
                        g + 1,
                        *(_fmt(v) for v in scores.mean[n, g]),
                        *(_fmt(v) for v in var),
                        int(rep.map_group[n] == g),
                    ]
                )


def write_pairwise(matrices: list[np.ndarray], receiver_labels, path) -> None:
    """Long format ``r,k,group,value`` over ordered pairs r != k."""
    fh, w = _writer(path)
    with fh:
        w.writerow(["r", "k", "group", "value"])
        for g, mat in enumerate(matrices):
            R = mat.shape[0]
            for r in range(R):
                for k in range(R):
                    if r != k:
                        w.writerow([receiver_labels[r], receiver_labels[k], g + 1, _fmt(mat[r, k])])


def write_median_prob(fit_or_params, receiver_labels, path) -> None:
    probs = median_actor_prob(fit_or_params)
    fh, w = _writer(path)
    with fh:
        w.writerow(["group", *receiver_labels])
        for g, row in enumerate(probs):
            w.writerow([g + 1, *(_fmt(v) for v in row)])


def write_se(ses: list[JackknifeSE], path) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(["parameter", "estimate", "se", "ci_low", "ci_high", "n_replicates", "unreliable"])
        for s in ses:
            lo, hi = s.ci
            w.writerow([s.target, _fmt(s.estimate), _fmt(s.se), _fmt(lo), _fmt(hi), s.n_replicates, int(s.unreliable)])
