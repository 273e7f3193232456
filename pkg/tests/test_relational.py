import math

import numpy as np
import pytest

from oracles import central_difference_gradient, relative_error
from patentcoop import stats
from patentcoop.graph import PatentRecord, build_graph
from patentcoop.relational import (
    PARAM_NAMES,
    TABLE1_MEANS,
    PairData,
    PairObservation,
    RelationalParams,
    RelationalPosterior,
    RelationalPrior,
    classify_relations,
    component_log_rate,
    log_posterior,
    mixture_log_likelihood,
    pair_observations,
    poisson_mixture_log_pmf,
    poisson_mixture_responsibilities,
    posterior_as_prior,
    read_prior_json,
    relabel_draws,
    relational_log_prior,
    responsibilities,
    synthetic_graph,
    write_prior_json,
)

# logits giving mixing weights (1, 0, 0) to double precision
DEGENERATE = dict(logit0=0.0, logit1=-800.0, logit2=-800.0)


def params(**kw):
    base = dict(alpha1=0.719, alpha2=0.955, beta0=-8.0, beta1=-8.044, beta2=-7.966)
    base.update(kw)
    return RelationalParams(**base)


def test_component_log_rate_examples():
    p = params(beta0=-8.0)
    assert component_log_rate(p, 123.0, 0) == -8.0
    assert component_log_rate(p, 10.0, 2) == pytest.approx(1.584, abs=1e-12)
    assert component_log_rate(p, 0.0, 1) == pytest.approx(-8.044)
    assert component_log_rate(p, 3.0, 0) == component_log_rate(p, 103.0, 0)
    with pytest.raises(ValueError):
        component_log_rate(p, 1.0, 3)


def test_mixture_log_likelihood_examples():
    same = RelationalParams(0.0, 0.0, 0.0, 0.0, 0.0)
    assert mixture_log_likelihood(same, PairObservation("A", "B", 5.0, 0)) == pytest.approx(-1.0, abs=1e-14)
    deg = params(beta0=math.log(2.0), **DEGENERATE)
    assert mixture_log_likelihood(deg, PairObservation("A", "B", 5.0, 2)) == pytest.approx(
        math.log(2) - 2, abs=1e-12)


def test_two_component_toy():
    log_rates = np.log([1.0, 2.0])
    log_w = np.log([0.5, 0.5])
    assert poisson_mixture_log_pmf(0, log_rates, log_w) == pytest.approx(-1.379885, abs=1e-6)
    np.testing.assert_allclose(poisson_mixture_responsibilities(0, log_rates, log_w),
                               [0.731059, 0.268941], atol=1e-6)


def test_responsibility_examples():
    same = RelationalParams(0.0, 0.0, -1.0, -1.0, -1.0, 0.3, -0.2, 1.1)
    np.testing.assert_allclose(responsibilities(same, PairObservation("A", "B", 4.0, 3)),
                               same.mixing, atol=1e-15)
    deg = params(**DEGENERATE)
    np.testing.assert_allclose(responsibilities(deg, PairObservation("A", "B", 8.0, 4)), [1, 0, 0])


def test_label_symmetry():
    p = TABLE1_MEANS
    swapped = RelationalParams(p.alpha2, p.alpha1, p.beta0, p.beta2, p.beta1, p.logit0, p.logit2, p.logit1)
    for x, y in [(3.0, 0), (9.0, 12), (13.5, 400)]:
        obs = PairObservation("A", "B", x, y)
        assert mixture_log_likelihood(p, obs) == pytest.approx(mixture_log_likelihood(swapped, obs), abs=1e-12)


def test_prior_at_means():
    prior = RelationalPrior()
    at_means = RelationalParams(*prior.means)
    assert relational_log_prior(at_means) == pytest.approx(-11.340492, abs=1e-6)
    expected = 2 * -math.log(0.5 * math.sqrt(2 * math.pi)) + 3 * -math.log(3 * math.sqrt(2 * math.pi)) \
        + 3 * -math.log(2 * math.sqrt(2 * math.pi))
    assert relational_log_prior(at_means) == pytest.approx(expected, abs=1e-12)


def test_log_posterior_degenerate_cases():
    p = params(**DEGENERATE)
    assert log_posterior(p, [])[0] == pytest.approx(relational_log_prior(p))
    obs = [PairObservation("A", "B", 7.0, 3)]
    expected = relational_log_prior(p) + stats.log_poisson_pmf(math.exp(-8.0), 3)
    assert log_posterior(p, obs)[0] == pytest.approx(expected, rel=1e-12)


def _random_data(rng, n=60):
    x = rng.uniform(2, 16, n)
    y = rng.poisson(np.exp(np.clip(0.8 * x - 8, -5, 6)))
    return [PairObservation(f"A{k}", f"B{k}", float(a), int(b)) for k, (a, b) in enumerate(zip(x, y))]


def test_posterior_matches_reference_loop():
    rng = np.random.default_rng(4)
    obs = _random_data(rng)
    target = RelationalPosterior(obs)
    for _ in range(5):
        theta = RelationalPrior().sample(rng)
        p = RelationalParams.from_array(theta)
        ref = relational_log_prior(p) + sum(mixture_log_likelihood(p, o) for o in obs)
        assert target(theta)[0] == pytest.approx(ref, rel=1e-11)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    target = RelationalPosterior(_random_data(rng))
    for _ in range(20):
        theta = target.initial_point(rng)
        fd = central_difference_gradient(lambda t: target(t)[0], theta)
        assert relative_error(target(theta)[1], fd) < 1e-6


def test_pair_observations_include_zero_edges():
    recs = [PatentRecord(str(k), "2020-01-01", c) for k, c in
            enumerate([("FR", "DE"), ("FR",), ("IT",), ("DE",)])]
    obs = pair_observations(build_graph(recs))
    pairs = {(o.i, o.j): o for o in obs}
    assert set(pairs) == {("DE", "FR"), ("DE", "IT"), ("FR", "IT")}
    assert pairs[("DE", "IT")].y == 0
    assert pairs[("DE", "FR")].x == pytest.approx(math.log(1.5) + math.log(1.5))


def test_pair_data_columns():
    obs = [PairObservation("A", "B", 1.0, 2), PairObservation("A", "C", 3.0, 0)]
    data = PairData.from_observations(obs)
    assert len(data) == 2
    np.testing.assert_array_equal(data.y, [2, 0])


def test_relabel_draws_orders_slopes():
    draws = np.array([[0.9, 0.7, -8, -7.9, -8.1, 0.1, 0.2, 0.3],
                      [0.6, 0.8, -8, -8.0, -7.0, 0.1, 0.2, 0.3]])
    out = relabel_draws(draws)
    assert np.all(out[:, 0] <= out[:, 1])
    np.testing.assert_array_equal(out[0], [0.7, 0.9, -8, -8.1, -7.9, 0.1, 0.3, 0.2])
    np.testing.assert_array_equal(out[1], draws[1])


def test_classification_examples():
    draws = TABLE1_MEANS.to_array()[None, :]
    x = 14.0
    zero = PairObservation("A", "B", x, 0)
    strong = PairObservation("A", "C", x, int(round(math.exp(0.955 * x - 7.966))))
    classes = classify_relations(draws, [zero, strong])
    assert classes[("A", "B")].relation_type == 0
    assert classes[("A", "C")].relation_type == 2
    for cls in classes.values():
        assert cls.probabilities.sum() == pytest.approx(1.0, abs=1e-12)


def test_classification_equal_rates_follows_mixing():
    p = RelationalParams(0.0, 0.0, -1.0, -1.0, -1.0, 0.0, 2.0, 1.0)
    classes = classify_relations(p.to_array()[None, :], [PairObservation("A", "B", 3.0, 1)])
    assert classes[("A", "B")].relation_type == 1


def test_posterior_as_prior_moments():
    rng = np.random.default_rng(3)
    n = 4000
    mu = np.arange(8.0)
    sd = np.linspace(0.5, 2.0, 8)
    draws = rng.normal(mu, sd, size=(n, 8))
    prior = posterior_as_prior(draws)
    assert np.all(np.abs(prior.means - mu) < 3 * sd / math.sqrt(n))
    assert np.all(np.abs(prior.sds - sd) < 3 * sd / math.sqrt(2 * (n - 1)))


def test_posterior_as_prior_guards_and_override():
    with pytest.raises(ValueError):
        posterior_as_prior(np.ones((200, 8)))
    with pytest.raises(ValueError):
        posterior_as_prior(np.random.default_rng(0).normal(size=(50, 8)))
    prior = posterior_as_prior(np.random.default_rng(0).normal(size=(200, 8)), beta0=(-10.0, 3.0))
    assert prior.beta0.mean == -10.0 and prior.beta0.sd == 3.0


def test_prior_json_roundtrip(tmp_path):
    prior = RelationalPrior().with_overrides(alpha1={"mean": 0.7}, beta0=(-10, 2))
    write_prior_json(prior, tmp_path / "p.json")
    assert read_prior_json(tmp_path / "p.json") == prior
    with pytest.raises(ValueError):
        RelationalPrior().with_overrides(gamma=(0, 1))


def test_synthetic_graph_shape():
    g, labels = synthetic_graph(TABLE1_MEANS, np.random.default_rng(0))
    assert len(g.nodes) == 29
    assert len(labels) == 29 * 28 // 2
    assert all(1 <= v <= 5000 for v in g.nodes.values())
    assert set(labels.values()) <= {0, 1, 2}
    assert PARAM_NAMES[0] == "alpha1"
