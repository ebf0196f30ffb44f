"""Parameter space and response function of the mixture of latent trait analyzers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit


@dataclass(frozen=True)
class ModelSpec:
    """One cell of the model grid: number of groups, latent dimension, slope constraint.

    ``common_slope`` is meaningless without a latent trait and is normalised to
    ``False`` when ``latent_dim == 0``.
    """

    n_groups: int
    latent_dim: int
    common_slope: bool = False

    def __post_init__(self):
        if int(self.n_groups) < 1:
            raise ValueError(f"n_groups must be >= 1, got {self.n_groups}")
        if int(self.latent_dim) < 0:
            raise ValueError(f"latent_dim must be >= 0, got {self.latent_dim}")
        object.__setattr__(self, "n_groups", int(self.n_groups))
        object.__setattr__(self, "latent_dim", int(self.latent_dim))
        object.__setattr__(self, "common_slope", bool(self.common_slope) and self.latent_dim > 0)

    @property
    def variant(self) -> str:
        if self.latent_dim == 0:
            return "lca"
        return "common" if self.common_slope else "free"

    def __str__(self):
        return f"G={self.n_groups} D={self.latent_dim} variant={self.variant}"

    def to_dict(self) -> dict:
        return {"n_groups": self.n_groups, "latent_dim": self.latent_dim, "common_slope": self.common_slope}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(d["n_groups"], d["latent_dim"], d.get("common_slope", False))


@dataclass(frozen=True)
class Parameters:
    """Mixing proportions ``eta`` (G,), intercepts (G, R) and slopes (G, R, D).

    Slopes are stored per group even for the common-slope model, where every
    group slice is identical.
    """

    eta: np.ndarray
    intercepts: np.ndarray
    slopes: np.ndarray
    spec: ModelSpec

    def __post_init__(self):
        eta = np.asarray(self.eta, dtype=float)
        b = np.asarray(self.intercepts, dtype=float)
        w = np.asarray(self.slopes, dtype=float)
        G, D = self.spec.n_groups, self.spec.latent_dim
        if w.size == 0:
            w = np.zeros((*b.shape, D))
        if eta.shape != (G,) or b.ndim != 2 or b.shape[0] != G or w.shape != (*b.shape, D):
            raise ValueError(
                f"inconsistent parameter shapes eta{eta.shape} b{b.shape} w{w.shape} for {self.spec}"
            )
        if not (np.all(np.isfinite(eta)) and np.all(np.isfinite(b)) and np.all(np.isfinite(w))):
            raise ValueError("parameters must be finite")
        if np.any(eta < 0) or abs(eta.sum() - 1.0) > 1e-12:
            raise ValueError(f"eta must lie on the simplex, got {eta}")
        if self.spec.common_slope and not np.all(w == w[:1]):
            raise ValueError("common-slope parameters must have identical slopes in every group")
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "intercepts", b)
        object.__setattr__(self, "slopes", w)

    @property
    def n_receivers(self) -> int:
        return self.intercepts.shape[1]

    def to_dict(self) -> dict:
        return {
            "eta": self.eta.tolist(),
            "intercepts": self.intercepts.tolist(),
            "slopes": self.slopes.tolist(),
            "spec": self.spec.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Parameters":
        spec = ModelSpec.from_dict(d["spec"])
        eta = np.asarray(d["eta"], dtype=float)
        b = np.asarray(d["intercepts"], dtype=float)
        w = np.asarray(d["slopes"], dtype=float).reshape(*b.shape, spec.latent_dim)
        return cls(eta, b, w, spec)


def logistic(x):
    # scipy's expit branches on sign, so no exp of a large positive argument
    return expit(x)


def log_logistic(x):
    return log_expit(x)


def linear_predictor(p: Parameters, g: int, theta) -> np.ndarray:
    """b_rg + w_rg . theta for every receiver r."""
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if theta.shape != (p.spec.latent_dim,):
        raise ValueError(f"theta must have length {p.spec.latent_dim}")
    return p.intercepts[g] + p.slopes[g] @ theta


def response_probability(p: Parameters, g: int, r: int, theta) -> float:
    if not (0 <= g < p.spec.n_groups and 0 <= r < p.n_receivers):
        raise IndexError(f"group {g} / receiver {r} out of range")
    return float(logistic(linear_predictor(p, g, theta)[r]))


def conditional_loglik_at_theta(p: Parameters, g: int, y_row, theta) -> float:
    """log p(y_row | theta, group g) as a sum of Bernoulli log-pmfs."""
    if not 0 <= g < p.spec.n_groups:
        raise IndexError(f"group {g} out of range")
    y = np.asarray(y_row, dtype=float)
    s = linear_predictor(p, g, theta)
    return float(np.sum(y * log_logistic(s) + (1.0 - y) * log_logistic(-s)))


def count_free_params(spec: ModelSpec, n_receivers: int) -> int:
    """Free parameter count used by BIC.

    Each distinct slope matrix loses D(D-1)/2 degrees of freedom to rotations
    of the latent space.
    """
    G, D, R = spec.n_groups, spec.latent_dim, n_receivers
    per_slope_matrix = R * D - D * (D - 1) // 2
    n_slope_matrices = 0 if D == 0 else (1 if spec.common_slope else G)
    return (G - 1) + G * R + n_slope_matrices * per_slope_matrix
