import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.special import expit, logit

from mlta.data import IncidenceMatrix
from mlta.model import ModelSpec, Parameters
from mlta.posthoc import (
    NotApplicableError,
    align_groups,
    dependence_matrix,
    jackknife_se,
    log_lift,
    log_lift_matrix,
    median_actor_prob,
    memberships,
    parameter_vector,
    permute_groups,
    trait_scores,
    write_median_prob,
    write_memberships,
    write_pairwise,
    write_se,
    write_traits,
)
from mlta.quadrature import gh_rule
from mlta.simulate import sample_network
from mlta.variational import FitConfig, FitResult, e_step, fit, initial_state

from conftest import random_params


def fit_at(params, y):
    """A FitResult holding ``params`` and the E-step state they induce on ``y``."""
    y = np.asarray(y, dtype=float)
    state = e_step(y, params, initial_state(y.shape[0], params))
    return FitResult(params, state, [0.0], 1, True, 0)


def with_resp(resp):
    resp = np.asarray(resp, dtype=float)
    G = resp.shape[1]
    p = Parameters(np.full(G, 1.0 / G), np.zeros((G, 1)), np.zeros((G, 1, 0)), ModelSpec(G, 0))
    res = fit_at(p, np.zeros((len(resp), 1)))
    res.state.resp = resp
    return res


class TestMemberships:
    def test_map(self):
        rep = memberships(with_resp([[0.6, 0.4]]))
        assert rep.map_group[0] == 0
        assert rep.map_confidence[0] == 0.6

    def test_tie_goes_low(self):
        assert memberships(with_resp([[0.5, 0.5]])).map_group[0] == 0

    def test_single_group(self, rng):
        p = random_params(rng, ModelSpec(1, 1), 4)
        rep = memberships(fit_at(p, rng.integers(0, 2, (6, 4))))
        np.testing.assert_array_equal(rep.map_confidence, 1.0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_map_invariant_to_monotone_transform(self, seed):
        rng = np.random.default_rng(seed)
        resp = rng.dirichlet(np.ones(4), size=5)
        squashed = np.sqrt(resp)
        squashed /= squashed.sum(axis=1, keepdims=True)
        a = memberships(with_resp(resp)).map_group
        b = memberships(with_resp(squashed)).map_group
        np.testing.assert_array_equal(a, b)
        np.testing.assert_allclose(resp.sum(axis=1), 1.0)


class TestTraitScores:
    def test_not_applicable(self, rng):
        with pytest.raises(NotApplicableError):
            trait_scores(fit_at(random_params(rng, ModelSpec(2, 0), 3), np.zeros((2, 3))))

    def test_lone_wolf_direction(self):
        p = Parameters(np.ones(1), np.zeros((1, 3)), np.ones((1, 3, 1)), ModelSpec(1, 1))
        scores = trait_scores(fit_at(p, np.zeros((1, 3))))
        assert scores.mean[0, 0, 0] < 0

    def test_zero_slope(self):
        p = Parameters(np.ones(1), np.zeros((1, 3)), np.zeros((1, 3, 1)), ModelSpec(1, 1))
        scores = trait_scores(fit_at(p, np.zeros((1, 3))))
        assert scores.mean[0, 0, 0] == 0.0

    def test_identical_rows(self, rng):
        p = random_params(rng, ModelSpec(2, 2), 5)
        y = rng.integers(0, 2, (3, 5))
        y[2] = y[0]
        scores = trait_scores(fit_at(p, y))
        np.testing.assert_array_equal(scores.mean[0], scores.mean[2])
        np.testing.assert_array_equal(scores.cov[0], scores.cov[2])

    def test_cov_positive_definite(self, rng):
        p = random_params(rng, ModelSpec(2, 2), 5)
        cov = trait_scores(fit_at(p, rng.integers(0, 2, (6, 5)))).cov
        np.testing.assert_allclose(cov, np.swapaxes(cov, -1, -2))
        assert np.all(np.linalg.eigvalsh(cov) > 0)


class TestDependence:
    def test_shared_slope(self):
        w = np.array([[[0.7, -0.2], [0.7, -0.2]]])
        p = Parameters(np.ones(1), np.zeros((1, 2)), w, ModelSpec(1, 2))
        assert dependence_matrix(p, 0)[0, 1] == pytest.approx(0.53)

    def test_orthogonal(self):
        w = np.array([[[1.0, 0.0], [0.0, 2.0]]])
        p = Parameters(np.ones(1), np.zeros((1, 2)), w, ModelSpec(1, 2))
        assert dependence_matrix(p, 0)[0, 1] == 0.0

    def test_common_slope_same_for_all_groups(self, rng):
        p = random_params(rng, ModelSpec(3, 2, True), 4)
        np.testing.assert_array_equal(dependence_matrix(p, 0), dependence_matrix(p, 2))

    def test_shape_and_symmetry(self, rng):
        d = dependence_matrix(random_params(rng, ModelSpec(2, 3), 6), 1)
        np.testing.assert_allclose(d, d.T)
        assert np.all(np.diag(d) >= 0)

    def test_not_applicable(self, rng):
        with pytest.raises(NotApplicableError):
            dependence_matrix(random_params(rng, ModelSpec(2, 0), 3), 0)


def _flip(p, d):
    w = p.slopes.copy()
    w[..., d] *= -1
    return Parameters(p.eta, p.intercepts, w, p.spec)


class TestLogLift:
    def test_lca_zero(self, rng):
        p = random_params(rng, ModelSpec(2, 0), 4)
        assert log_lift(p, 1, 0, 3) == 0.0
        off = ~np.eye(4, dtype=bool)
        np.testing.assert_array_equal(log_lift_matrix(p, 0)[off], 0.0)

    def test_zero_slope_item(self, rng):
        p = random_params(rng, ModelSpec(2, 2), 5)
        w = p.slopes.copy()
        w[1, 2] = 0.0
        p = Parameters(p.eta, p.intercepts, w, p.spec)
        lifts = log_lift_matrix(p, 1)
        assert np.all(np.abs(np.delete(lifts[2], 2)) < 1e-10)

    def test_standard_logistic_pair(self):
        m2 = quad(lambda t: expit(t) ** 2 * math.exp(-t * t / 2) / math.sqrt(2 * math.pi), -40, 40, epsabs=1e-14)[0]
        expected = math.log(m2 / 0.25)
        assert expected == pytest.approx(0.16000449286738444, abs=1e-12)
        p = Parameters(np.ones(1), np.zeros((1, 2)), np.ones((1, 2, 1)), ModelSpec(1, 1))
        assert log_lift(p, 0, 0, 1) == pytest.approx(expected, abs=1e-8)
        assert log_lift(p, 0, 0, 1, gh_rule(61, 1)) == pytest.approx(expected, abs=1e-12)

    def test_symmetric(self, rng):
        p = random_params(rng, ModelSpec(2, 2), 6)
        lifts = log_lift_matrix(p, 0)
        np.testing.assert_array_equal(lifts, lifts.T)
        assert log_lift(p, 0, 1, 4) == log_lift(p, 0, 4, 1)

    def test_matches_pairwise(self, rng):
        p = random_params(rng, ModelSpec(2, 1), 5)
        assert log_lift_matrix(p, 1)[1, 3] == pytest.approx(log_lift(p, 1, 1, 3), abs=1e-13)

    def test_same_receiver(self, rng):
        with pytest.raises(ValueError):
            log_lift(random_params(rng, ModelSpec(1, 1), 3), 0, 2, 2)

    def test_invariant_to_sign_flip(self, rng):
        p = random_params(rng, ModelSpec(2, 2), 5)
        np.testing.assert_allclose(log_lift_matrix(_flip(p, 1), 0), log_lift_matrix(p, 0), atol=1e-12)
        np.testing.assert_allclose(dependence_matrix(_flip(p, 0), 1), dependence_matrix(p, 1), atol=1e-15)

    def test_underflow_sentinel(self):
        p = Parameters(np.ones(1), np.array([[-800.0, 0.0]]), np.zeros((1, 2, 1)), ModelSpec(1, 1))
        assert math.isnan(log_lift(p, 0, 0, 1))


class TestMedianProb:
    def test_zero_intercept(self):
        p = Parameters(np.ones(1), np.zeros((1, 3)), np.ones((1, 3, 1)), ModelSpec(1, 1))
        np.testing.assert_array_equal(median_actor_prob(p), 0.5)

    def test_ignores_slopes(self, rng):
        p = random_params(rng, ModelSpec(2, 2), 4)
        q = Parameters(p.eta, p.intercepts, 5 * p.slopes, p.spec)
        np.testing.assert_array_equal(median_actor_prob(p), median_actor_prob(q))
        np.testing.assert_allclose(median_actor_prob(p), expit(p.intercepts))


class TestJackknife:
    def test_parameter_names(self, rng):
        names, values = parameter_vector(random_params(rng, ModelSpec(2, 1, True), 3))
        assert names[:3] == ["eta[0]", "eta[1]", "b[0,0]"]
        assert names[-1] == "w[2,0]"
        assert len(names) == len(values) == 2 + 6 + 3

    def test_alignment(self, rng):
        ref = rng.dirichlet(np.ones(3), size=20)
        perm = np.array([2, 0, 1])
        shuffled = ref[:, perm]
        back = align_groups(ref, shuffled)
        np.testing.assert_array_equal(shuffled[:, back], ref)
        p = random_params(rng, ModelSpec(3, 1), 4)
        q = permute_groups(permute_groups(p, perm), np.argsort(perm))
        np.testing.assert_array_equal(q.intercepts, p.intercepts)

    def test_closed_form_lca(self, rng):
        y = rng.integers(0, 2, (15, 3))
        y[:2] = [[1, 1, 1], [0, 0, 0]]
        y[2:4] = [[1, 1, 1], [0, 0, 0]]
        m = IncidenceMatrix(y)
        spec = ModelSpec(1, 0)
        ref = fit(y, spec)
        ses = jackknife_se(m, spec, ref)
        # independent oracle: every replicate is logit of the leave-one-out column mean
        reps = np.array([logit(np.delete(y, i, axis=0).mean(axis=0)) for i in range(15)])
        expected = np.sqrt(14 / 15 * ((reps - reps.mean(axis=0)) ** 2).sum(axis=0))
        by_name = {s.target: s for s in ses}
        assert by_name["eta[0]"].se == 0.0
        for r in range(3):
            assert by_name[f"b[0,{r}]"].se == pytest.approx(expected[r], rel=1e-8)
            assert by_name[f"b[0,{r}]"].n_replicates == 15
        assert not ses[0].unreliable

    def test_constant_data_zero_se(self):
        y = np.tile([1, 0, 1], (6, 1))
        spec = ModelSpec(1, 0)
        ses = jackknife_se(IncidenceMatrix(y), spec, fit(y, spec))
        assert all(s.se == 0.0 for s in ses)

    def test_unreliable_when_replicates_fail(self, rng):
        p = random_params(rng, ModelSpec(2, 1), 5)
        m = sample_network(p, 20, seed=3).matrix
        spec = ModelSpec(2, 1)
        ref = fit(np.asarray(m.cells, float), spec, FitConfig(seed=0))
        ses = jackknife_se(m, spec, ref, targets=["eta[0]"], cfg=FitConfig(max_iter=1, tol=1e-14))
        assert ses[0].unreliable
        assert ses[0].n_skipped == 20

    def test_targets(self, rng):
        p = random_params(rng, ModelSpec(2, 1), 4)
        m = sample_network(p, 25, seed=4).matrix
        spec = ModelSpec(2, 1)
        ref = fit(np.asarray(m.cells, float), spec, FitConfig(seed=1))
        ses = jackknife_se(m, spec, ref, targets=["eta[0]", "eta[1]"])
        assert [s.target for s in ses] == ["eta[0]", "eta[1]"]
        assert all(s.se >= 0 for s in ses)
        # eta sums to one in every replicate, so both proportions share an SE
        assert ses[0].se == pytest.approx(ses[1].se, rel=1e-9)
        lo, hi = ses[0].ci
        assert lo == pytest.approx(ses[0].estimate - 1.96 * ses[0].se)
        with pytest.raises(KeyError):
            jackknife_se(m, spec, ref, targets=["nope"])


class TestWriters:
    def test_files(self, rng, tmp_path):
        p = random_params(rng, ModelSpec(2, 1), 3)
        res = fit_at(p, rng.integers(0, 2, (4, 3)))
        senders, receivers = ["a", "b", "c", "d"], ["x", "y", "z"]

        write_memberships(res, senders, tmp_path / "m.csv")
        rows = list(csv.reader((tmp_path / "m.csv").open()))
        assert rows[0] == ["sender", "p_group1", "p_group2", "map_group", "map_confidence"]
        assert {r[3] for r in rows[1:]} <= {"1", "2"}

        write_traits(res, senders, tmp_path / "t.csv")
        rows = list(csv.reader((tmp_path / "t.csv").open()))
        assert rows[0] == ["sender", "group", "mean1", "var1", "is_map"]
        assert len(rows) == 1 + 4 * 2
        assert sum(int(r[-1]) for r in rows[1:]) == 4

        write_pairwise([log_lift_matrix(p, 0), log_lift_matrix(p, 1)], receivers, tmp_path / "l.csv")
        rows = list(csv.reader((tmp_path / "l.csv").open()))
        assert rows[0] == ["r", "k", "group", "value"]
        assert len(rows) == 1 + 2 * 6

        write_median_prob(p, receivers, tmp_path / "p.csv")
        rows = list(csv.reader((tmp_path / "p.csv").open()))
        assert rows[0] == ["group", "x", "y", "z"]
        assert float(rows[1][1]) == expit(p.intercepts[0, 0])

    def test_se_file(self, tmp_path):
        y = np.tile([1, 0], (4, 1))
        y[0] = [0, 1]
        spec = ModelSpec(1, 0)
        write_se(jackknife_se(IncidenceMatrix(y), spec, fit(y, spec)), tmp_path / "se.csv")
        rows = list(csv.reader((tmp_path / "se.csv").open()))
        assert rows[0] == ["parameter", "estimate", "se", "ci_low", "ci_high", "n_replicates", "unreliable"]
        assert len(rows) == 1 + 3
