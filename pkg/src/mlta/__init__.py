"""Model-based clustering of bipartite networks with a mixture of latent trait analyzers."""

from .data import IncidenceMatrix, NetworkSummary, load_edge_list, load_matrix, load_network, summarize, write_matrix
from .model import ModelSpec, Parameters, count_free_params, response_probability
from .posthoc import (
    dependence_matrix,
    jackknife_se,
    log_lift,
    log_lift_matrix,
    median_actor_prob,
    memberships,
    trait_scores,
)
from .quadrature import GHRule, gh_rule, loglik_gh
from .selection import SelectionTable, bic, grid_specs, run_grid
from .simulate import SyntheticSample, sample_network
from .variational import FitConfig, FitResult, VariationalState, fit

__version__ = "0.1.0"
