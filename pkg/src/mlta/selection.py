"""Multi-start fitting over a (G, D, slope variant) grid and BIC ranking."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from ._parallel import pool_map
from .data import IncidenceMatrix
from .model import ModelSpec, count_free_params
from .quadrature import DEFAULT_POINTS, gh_rule, loglik_gh
from .variational import FitConfig, FitResult, fit

log = logging.getLogger(__name__)

# loglik_gh values closer than this count as a tie between starts
TIE_TOL = 1e-6


def bic(loglik_gh: float, k: int, n: int) -> float:
    if n < 1:
        raise ValueError("n must be >= 1")
    return -2.0 * loglik_gh + k * math.log(n)


@dataclass
class StartOutcome:
    seed: int
    fit: FitResult | None
    loglik_gh: float = float("nan")
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.fit is not None and np.isfinite(self.loglik_gh)


@dataclass
class SelectionRecord:
    spec: ModelSpec
    best_fit: FitResult | None
    loglik_gh: float
    k: int
    bic: float
    n_starts: int
    start_bics: list[float]
    starts: list[StartOutcome] = field(default_factory=list, repr=False)

    @property
    def failed(self) -> bool:
        return self.best_fit is None

    @property
    def aic(self) -> float:
        return -2.0 * self.loglik_gh + 2.0 * self.k

    def to_dict(self, include_fit: bool = False) -> dict:
        d = {
            "spec": self.spec.to_dict(),
            "failed": self.failed,
            "loglik_gh": self.loglik_gh,
            "k": self.k,
            "bic": self.bic,
            "aic": self.aic,
            "n_starts": self.n_starts,
            "best_seed": None if self.failed else self.best_fit.seed,
            "starts": [
                {
                    "seed": st.seed,
                    "loglik_gh": st.loglik_gh if st.ok else None,
                    "bic": b if st.ok else None,
                    "bound": st.fit.bound if st.fit is not None else None,
                    "converged": st.fit.converged if st.fit is not None else False,
                    "n_iters": st.fit.n_iters if st.fit is not None else 0,
                    "degenerate": st.fit.degenerate if st.fit is not None else False,
                    "error": st.error,
                }
                for st, b in zip(self.starts, self.start_bics)
            ],
        }
        if include_fit and not self.failed:
            d["best_fit"] = self.best_fit.to_dict()
        return d


@dataclass
class SelectionTable:
    records: list[SelectionRecord]
    winner: int | None
    n_senders: int

    @property
    def best(self) -> SelectionRecord | None:
        return None if self.winner is None else self.records[self.winner]

    def to_dict(self) -> dict:
        return {
            "n_senders": self.n_senders,
            "winner": self.winner,
            "records": [r.to_dict() for r in self.records],
        }

    def write_csv(self, path) -> None:
        """Rows are G; columns are D=0, then D=d and D=d common for each d >= 1 present."""
        cols = sorted({(r.spec.latent_dim, r.spec.common_slope) for r in self.records})
        by_cell = {(r.spec.n_groups, r.spec.latent_dim, r.spec.common_slope): r for r in self.records}
        groups = sorted({r.spec.n_groups for r in self.records})
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["G"] + [f"D={d}" + (" common" if c else "") for d, c in cols])
            for g in groups:
                row = [g]
                for d, c in cols:
                    rec = by_cell.get((g, d, c))
                    row.append("" if rec is None or rec.failed else f"{rec.bic:.4f}")
                writer.writerow(row)


def choose_winner(records: list[SelectionRecord]) -> int | None:
    """Index of the minimal-BIC record; ties go to smaller k, then G, then D. Failed cells are ignored."""
    live = [i for i, r in enumerate(records) if not r.failed]
    if not live:
        return None
    return min(
        live,
        key=lambda i: (records[i].bic, records[i].k, records[i].spec.n_groups, records[i].spec.latent_dim),
    )


def grid_specs(groups, dims, slopes: str = "both") -> list[ModelSpec]:
    """Expand a grid; ``slopes`` is one of ``only``, ``never``, ``both`` (common slope).

    D = 0 appears once per G because the slope constraint is vacuous there.
    """
    if slopes not in ("only", "never", "both"):
        raise ValueError(f"slopes must be only/never/both, got {slopes!r}")
    variants = {"only": (True,), "never": (False,), "both": (False, True)}[slopes]
    specs = []
    for g in groups:
        for d in dims:
            if d == 0:
                specs.append(ModelSpec(g, 0))
            else:
                specs.extend(ModelSpec(g, d, c) for c in variants)
    if not specs:
        raise ValueError("empty model grid")
    return specs


def _run_start(cells: np.ndarray, spec: ModelSpec, cfg: FitConfig, gh_points: int) -> StartOutcome:
    try:
        result = fit(cells, spec, cfg)
        ll = loglik_gh(cells, result.params, gh_rule(gh_points, spec.latent_dim))
    except (ArithmeticError, np.linalg.LinAlgError, ValueError) as exc:
        log.warning("%s seed=%d failed: %s", spec, cfg.seed, exc)
        return StartOutcome(cfg.seed, None, error=f"{type(exc).__name__}: {exc}")
    return StartOutcome(cfg.seed, result, ll)


def pick_best(starts: list[StartOutcome]) -> StartOutcome | None:
    """Highest loglik_gh; within TIE_TOL prefer non-degenerate fits, then the lowest seed."""
    ok = [s for s in starts if s.ok]
    if not ok:
        return None
    top = max(s.loglik_gh for s in ok)
    tied = [s for s in ok if s.loglik_gh >= top - TIE_TOL]
    return min(tied, key=lambda s: (s.fit.degenerate, s.seed))


def run_starts(
    cells: np.ndarray,
    jobs: list[tuple[ModelSpec, FitConfig]],
    gh_points: int = DEFAULT_POINTS,
    threads: int | None = None,
) -> list[StartOutcome]:
    """Run independent fits; output order follows ``jobs``."""
    return pool_map(_run_start, [(cells, spec, cfg, gh_points) for spec, cfg in jobs], threads)


def run_grid(
    m: IncidenceMatrix,
    specs: list[ModelSpec],
    starts: int = 10,
    base_seed: int = 0,
    fit_cfg: FitConfig = FitConfig(),
    gh_points: int = DEFAULT_POINTS,
    threads: int | None = None,
) -> SelectionTable:
    """Fit every spec from ``starts`` seeds (base_seed, base_seed + 1, ...) and rank by BIC."""
    if starts < 1:
        raise ValueError("starts must be >= 1")
    cells = np.asarray(m.cells, dtype=float)
    N, R = cells.shape
    jobs = [(spec, replace(fit_cfg, seed=base_seed + i, init=None)) for spec in specs for i in range(starts)]
    outcomes = run_starts(cells, jobs, gh_points, threads)

    records = []
    for c, spec in enumerate(specs):
        cell_starts = outcomes[c * starts : (c + 1) * starts]
        k = count_free_params(spec, R)
        start_bics = [bic(s.loglik_gh, k, N) if s.ok else float("nan") for s in cell_starts]
        best = pick_best(cell_starts)
        if best is None:
            log.error("%s: every start failed", spec)
            records.append(
                SelectionRecord(spec, None, float("nan"), k, float("nan"), starts, start_bics, cell_starts)
            )
            continue
        records.append(
            SelectionRecord(spec, best.fit, best.loglik_gh, k, bic(best.loglik_gh, k, N), starts, start_bics, cell_starts)
        )

    return SelectionTable(records, choose_winner(records), N)
