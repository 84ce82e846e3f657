import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mgflow import diffcore as dc
from mgflow.flow import DnfModel, FlowModel
from mgflow.objectives import (ChiStats, DegenerateInputError, ObjectiveSpec, angle_metric, compose,
                               length_metric, mg_between, mg_within, ml_between, ml_within, parse_variant,
                               variant_name, within_pairs)
from conftest import random_flow

# chi-distribution moments from 30-digit mpmath evaluation of the Gamma-function formula
CHI_MEAN = {2: 1.2533141373155002512, 16: 3.9380256218873262288, 32: 5.6128393892207327786,
            512: 22.61637115849382312}
CHI_VAR = {2: 0.42920367320510338077, 16: 0.49195420135893751204, 32: 0.49603399081223141042,
           512: 0.49975562124876511454}


# -- independent transliterations (plain loops, no package code) ---------------------

def _cos(a, b):
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def oracle_mg_between(means, alpha, beta, delta, delta_p):
    k, d = means.shape
    lbar = sum((np.linalg.norm(m) - np.sqrt(d)) ** 2 for m in means) / k
    pairs = [_cos(means[i], means[j]) ** 2 for i in range(k) for j in range(i + 1, k)]
    abar = sum(pairs) / len(pairs)
    return -alpha * max(0.0, lbar - delta) - beta * max(0.0, abar - delta_p)


def oracle_mg_within(z, labels, means_by_label, alpha, beta, delta, delta_p):
    d = z.shape[1]
    r = [z[i] - means_by_label[labels[i]] for i in range(len(z))]
    lbar = sum((np.linalg.norm(v) - np.sqrt(d)) ** 2 for v in r) / len(r)
    pairs = [_cos(r[i], r[j]) ** 2 for i in range(len(r)) for j in range(i + 1, len(r)) if labels[i] == labels[j]]
    out = -alpha * max(0.0, lbar - delta)
    if pairs:
        out -= beta * max(0.0, sum(pairs) / len(pairs) - delta_p)
    return out


# -- ChiStats --------------------------------------------------------------------

@pytest.mark.parametrize("d", sorted(CHI_MEAN))
def test_chi_stats_match_high_precision(d):
    c = ChiStats.for_dim(d)
    assert c.mean == pytest.approx(CHI_MEAN[d], rel=1e-12)
    assert c.var == pytest.approx(CHI_VAR[d], rel=1e-9)
    assert c.approx_mean == np.sqrt(d) and c.approx_var == 0.5


@pytest.mark.parametrize("d", [16, 32, 64, 512])
def test_chi_sanity_band(d):
    c = ChiStats.for_dim(d)
    assert abs(c.mean - np.sqrt(d)) < 0.5 and abs(c.var - 0.5) < 0.05


# -- metrics ----------------------------------------------------------------------

def test_length_metric_examples():
    d = 9
    assert length_metric(np.r_[3.0, np.zeros(d - 1)][None]).item() == pytest.approx(0.0, abs=1e-12)
    assert length_metric(np.r_[4.0, np.zeros(d - 1)][None]).item() == pytest.approx(-1.0)


def test_angle_metric_examples():
    assert angle_metric(np.eye(2), xi=0.01).item() == 0.0
    assert angle_metric(np.array([[1.0, 2.0], [2.0, 4.0]]), xi=0.01).item() == pytest.approx(-50.0)


def test_angle_metric_zero_vector():
    with pytest.raises(DegenerateInputError):
        angle_metric(np.array([[0.0, 0.0], [1.0, 0.0]]))


def test_gaussian_metrics_monte_carlo():
    rng = np.random.default_rng(0)
    d = 512
    x = rng.standard_normal((20000, d))
    per_sample = length_metric(x).item() / len(x)
    assert per_sample == pytest.approx(-0.5, rel=0.05)
    a, b = x[:10000], rng.standard_normal((10000, d))
    cos2 = (np.sum(a * b, 1) / np.linalg.norm(a, axis=1) / np.linalg.norm(b, axis=1)) ** 2
    assert cos2.mean() == pytest.approx(1.0 / d, rel=0.1)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4, 3), elements=st.floats(-5, 5)).filter(lambda a: (np.linalg.norm(a, axis=1) > 1e-3).all()),
       st.lists(st.floats(0.1, 10), min_size=4, max_size=4))
def test_metrics_nonpositive_and_angle_scale_invariant(v, scales):
    assert length_metric(v).item() <= 0
    r = angle_metric(v).item()
    assert r <= 0
    assert angle_metric(v * np.array(scales)[:, None]).item() == pytest.approx(r, rel=1e-9, abs=1e-12)


# -- ML criteria -------------------------------------------------------------------

def test_ml_within_identity_flow_at_means():
    model = DnfModel(FlowModel(2, 1), ["a", "b"], means=[[1.0, 2.0], [-1.0, 0.5]])
    x = np.array([[1.0, 2.0], [-1.0, 0.5], [1.0, 2.0]])
    terms = ml_within(model, x, ["a", "b", "a"])
    assert terms.total.item() == pytest.approx(3 * -np.log(2 * np.pi))


def test_ml_within_decomposes():
    model = DnfModel(random_flow(3, 2, seed=4), ["a", "b"], means=np.ones((2, 3)))
    x = np.random.default_rng(0).standard_normal((6, 3))
    t = ml_within(model, x, ["a", "b"] * 3)
    assert t.total.item() == pytest.approx(t.prior.item() + t.entropy.item(), abs=1e-12)


def test_ml_within_ascent_is_monotone_on_toy_gmm():
    rng = np.random.default_rng(5)
    x = np.concatenate([rng.normal(-3, 1, (20, 2)), rng.normal(3, 1, (20, 2))])
    lab = ["a"] * 20 + ["b"] * 20
    model = DnfModel(FlowModel(2, 2, seed=0), ["a", "b"])
    model.init_means(x, lab)
    state = dc.AdamState(lr=1e-3)
    params = model.parameters()
    values = []
    for _ in range(50):
        with dc.Tape() as tape:
            leaves = [tape.watch(p) for p in params]
            obj = ml_within(model, x, lab, leaves).total
        values.append(obj.item())
        params, state = dc.adam_step(params, [-g for g in tape.gradient(obj)], state)
        model.load_parameters(params)
    assert np.all(np.diff(values) > 0)


def test_ml_between_identity_zero_means():
    model = DnfModel(FlowModel(2, 1), list("abcd"))
    assert ml_between(model).item() == pytest.approx(4 * -np.log(2 * np.pi))


def test_ml_between_scaling_block():
    flow = FlowModel(3, 1)
    flow.blocks[0].params["bs"] = np.full(3, 5 * np.arctanh(np.log(2) / 5))
    model = DnfModel(flow, ["a"], means=np.zeros((1, 3)))
    prior = -1.5 * np.log(2 * np.pi)
    assert ml_between(model).item() == pytest.approx(prior - 3 * np.log(2), abs=1e-12)


def test_ml_between_relabel_invariant():
    means = np.random.default_rng(0).standard_normal((4, 3))
    flow = random_flow(3, 2, seed=1)
    a = ml_between(DnfModel(flow, list("abcd"), means)).item()
    b = ml_between(DnfModel(flow, list("dcba"), means[::-1])).item()
    assert a == pytest.approx(b, abs=1e-12)


# -- MG criteria --------------------------------------------------------------------

def test_mg_between_on_sphere_orthogonal_is_zero():
    d = 4
    assert mg_between(np.eye(d) * np.sqrt(d), ObjectiveSpec()).item() == 0.0


def test_mg_between_hinge_arithmetic():
    spec = ObjectiveSpec()
    d = 4
    # two orthogonal means with squared norm deviation delta + 0.01 each
    r = np.sqrt(d) + np.sqrt(spec.delta + 0.01)
    means = np.eye(d)[:2] * r
    assert mg_between(means, spec).item() == pytest.approx(-0.1, abs=1e-12)


def test_mg_between_matches_transliteration():
    rng = np.random.default_rng(11)
    means = rng.standard_normal((50, 32))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    spec = ObjectiveSpec()
    ref = oracle_mg_between(means, spec.alpha, spec.beta_between, spec.delta, spec.delta_prime)
    assert mg_between(means, spec).item() == pytest.approx(ref, abs=1e-10, rel=1e-12)


def test_mg_between_rotation_invariant():
    rng = np.random.default_rng(2)
    means = rng.standard_normal((6, 5))
    q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    spec = ObjectiveSpec()
    assert mg_between(means @ q, spec).item() == pytest.approx(mg_between(means, spec).item(), rel=1e-10)


def test_mg_within_zero_on_sphere():
    d = 3
    model = DnfModel(FlowModel(d, 1), ["a"], means=np.zeros((1, d)))
    z = np.eye(d) * np.sqrt(d)
    assert mg_within(model, z, ["a"] * 3, ObjectiveSpec(within="MG")).item() == 0.0


def test_mg_within_antiparallel_pair():
    d = 4
    spec = ObjectiveSpec(within="MG")
    model = DnfModel(FlowModel(d, 1), ["a"], means=np.zeros((1, d)))
    z = np.array([[2.0, 0, 0, 0], [-2.0, 0, 0, 0]])  # on the sqrt(d)=2 sphere: length term 0
    assert mg_within(model, z, ["a", "a"], spec).item() == pytest.approx(-10 * (1 - 0.002))


def test_mg_within_matches_transliteration():
    rng = np.random.default_rng(3)
    d, k = 16, 5
    labels = [f"c{i}" for i in range(k) for _ in range(8)]
    means = rng.standard_normal((k, d))
    z = rng.standard_normal((40, d)) * 1.3 + np.repeat(means, 8, axis=0)
    model = DnfModel(FlowModel(d, 1), [f"c{i}" for i in range(k)], means=means)
    spec = ObjectiveSpec(within="MG")
    ref = oracle_mg_within(z, labels, dict(zip(model.classes, means)), spec.alpha, spec.beta_within,
                           spec.delta, spec.delta_prime)
    assert mg_within(model, z, labels, spec).item() == pytest.approx(ref, abs=1e-10, rel=1e-12)


def test_mg_within_no_pairs_means_no_angle_term():
    model = DnfModel(FlowModel(2, 1), ["a", "b"], means=np.zeros((2, 2)))
    z = np.array([[np.sqrt(2), 0.0], [np.sqrt(2), 0.0]])
    assert mg_within(model, z, ["a", "b"], ObjectiveSpec(within="MG")).item() == 0.0


def test_within_pairs_skip_repeated_samples():
    p = within_pairs(["a", "a", "a", "b"], sample_ids=[7, 7, 8, 9])
    assert p.sum() == 2 and p[0, 1] == 0


# -- spec and composition ---------------------------------------------------------

def test_default_hyperparameters():
    s = ObjectiveSpec()
    assert (s.alpha, s.beta_within, s.beta_between, s.delta, s.delta_prime, s.eps) == (10, 10, 500, 0.03, 0.002, 1.0)
    assert s.xi_for(512) == 1 / 512


@pytest.mark.parametrize("bad", [dict(within=None), dict(eps=0), dict(xi=-1.0), dict(delta=-0.1),
                                 dict(between="XX"), dict(alpha=0)])
def test_spec_validation(bad):
    with pytest.raises(ValueError):
        ObjectiveSpec(**bad)


@pytest.mark.parametrize("name", ["NF-ML", "NF-MG", "DNF-N-L", "DNF-L-L", "DNF-G-L", "DNF-G-G", "DNF-G-LG"])
def test_variant_names_round_trip(name):
    assert variant_name(parse_variant(name)) == name
    assert ObjectiveSpec.from_dict(parse_variant(name).to_dict()) == parse_variant(name)


def test_unknown_variant():
    with pytest.raises(ValueError):
        parse_variant("DNF-X-L")


def _instance():
    rng = np.random.default_rng(0)
    model = DnfModel(random_flow(4, 2, seed=0, scale=0.2), ["a", "b", "c"], means=rng.standard_normal((3, 4)))
    x = rng.standard_normal((12, 4)) * 1.5
    return model, x, ["a", "b", "c"] * 4


def test_compose_n_l_is_ml_within():
    model, x, lab = _instance()
    obj = compose(parse_variant("DNF-N-L"), model, x, lab)
    assert set(obj.terms) == {"prior", "entropy"}
    assert obj.total.item() == ml_within(model, x, lab).total.item()


def test_compose_g_g_terms():
    model, x, lab = _instance()
    spec = parse_variant("DNF-G-G")
    obj = compose(spec, model, x, lab)
    assert set(obj.terms) == {"between_mg", "within_mg", "entropy"}
    z, ld = model.normalize(x)
    expect = mg_between(model.means, spec).item() + mg_within(model, z, lab, spec).item() + ld.value.sum()
    assert obj.total.item() == pytest.approx(expect, rel=1e-12)


def test_compose_g_lg_terms():
    model, x, lab = _instance()
    obj = compose(parse_variant("DNF-G-LG"), model, x, lab)
    assert set(obj.terms) == {"between_mg", "prior", "entropy", "within_mg"}


@pytest.mark.parametrize("name", ["NF-ML", "NF-MG", "DNF-N-L", "DNF-L-L", "DNF-G-L", "DNF-G-G", "DNF-G-LG"])
def test_terms_sum_to_total(name):
    model, x, lab = _instance()
    obj = compose(parse_variant(name), model if name.startswith("DNF") else model.flow, x, lab)
    assert sum(t.item() for t in obj.terms.values()) == pytest.approx(obj.total.item(), abs=1e-8)
