import math
import os
from pathlib import Path

import numpy as np
import pytest
from scipy.special import logsumexp

from mlta import ModelSpec, Parameters
from mlta.quadrature import conditional_logliks

REPO = Path(__file__).resolve().parent.parent
NOORDIN_PATH = Path(os.environ.get("MLTA_NOORDIN", REPO / "data" / "noordin.csv"))

_criteria: dict[int, tuple[str, str]] = {}


def random_params(rng, spec: ModelSpec, n_receivers: int, b_scale=1.0, w_scale=1.0) -> Parameters:
    G, D = spec.n_groups, spec.latent_dim
    eta = rng.dirichlet(np.full(G, 2.0))
    b = b_scale * rng.standard_normal((G, n_receivers))
    if spec.common_slope:
        w = np.broadcast_to(w_scale * rng.standard_normal((n_receivers, D)), (G, n_receivers, D)).copy()
    else:
        w = w_scale * rng.standard_normal((G, n_receivers, D))
    return Parameters(eta, b, w, spec)


def trapezoid_loglik(y, p, points, half_width):
    """Independent oracle: dense trapezoid rule on [-L, L]^D against the normal density."""
    t = np.linspace(-half_width, half_width, points)
    w = np.full(points, t[1] - t[0])
    w[[0, -1]] *= 0.5
    w *= np.exp(-0.5 * t * t) / math.sqrt(2 * math.pi)
    D = p.spec.latent_dim
    if D == 1:
        nodes, weights = t[:, None], w
    else:
        nodes = np.array(np.meshgrid(t, t, indexing="ij")).reshape(2, -1).T
        weights = np.outer(w, w).ravel()
    per_group = logsumexp(conditional_logliks(y, p, nodes) + np.log(weights), axis=2)
    return float(np.sum(logsumexp(per_group + np.log(p.eta), axis=1)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    n = marker.args[0]
    outcome = "PASS" if call.excinfo is None else "FAIL"
    doc = (item.function.__doc__ or item.name).strip().splitlines()[0]
    prev = _criteria.get(n)
    if prev is None or prev[0] == "PASS":
        _criteria[n] = (outcome, doc)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        outcome, doc = _criteria[n]
        terminalreporter.write_line(f"criterion {n}: {outcome}  {doc}")
