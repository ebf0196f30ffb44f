"""Ancestral sampling of bipartite networks from known model parameters.

Streams come from numpy's PCG64 ``default_rng(seed)`` and are drawn in a
fixed order: group labels, then latent traits, then cells in row-major
order. The same seed therefore yields the same sample on any platform with
the same numpy bit-generator version.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data import IncidenceMatrix, write_matrix
from .model import Parameters


@dataclass(frozen=True)
class SyntheticSample:
    matrix: IncidenceMatrix
    true_groups: np.ndarray
    true_thetas: np.ndarray
    params: Parameters
    seed: int

    def truth_dict(self) -> dict:
        return {
            "seed": self.seed,
            "groups": (self.true_groups + 1).tolist(),  # 1-based, like every file output
            "thetas": self.true_thetas.tolist(),
            "params": self.params.to_dict(),
        }


def sample_network(p: Parameters, n_senders: int, seed: int) -> SyntheticSample:
    if n_senders < 1:
        raise ValueError("n_senders must be >= 1")
    rng = np.random.default_rng(seed)
    G, D = p.spec.n_groups, p.spec.latent_dim
    groups = rng.choice(G, size=n_senders, p=p.eta)
    thetas = rng.standard_normal((n_senders, D))
    s = p.intercepts[groups] + np.einsum("nrd,nd->nr", p.slopes[groups], thetas)
    cells = (rng.random(s.shape) < expit(s)).astype(np.int8)
    return SyntheticSample(IncidenceMatrix(cells), groups, thetas, p, seed)


def write_sample(sample: SyntheticSample, matrix_path, truth_path) -> None:
    write_matrix(sample.matrix, matrix_path)
    with open(truth_path, "w", encoding="utf-8") as fh:
        json.dump(sample.truth_dict(), fh, indent=2)
        fh.write("\n")
