import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar
from scipy.special import expit, log_expit
from scipy.stats import norm

from lana import dataio, leveled, simgen
from lana.dataio import Interaction
from lana.errors import ContractViolation
from lana.leveled import (RaschFit, cold_start_ability, finetune_layers, fit_rasch, layer_gaussians,
                          membership_matrix, membership_probs, topk_fuse)
from lana.model import LanaHyper, init_params
from lana.training import TrainConfig, predict_windows, train, weighted_loss
from lana import tensor as T

finite = st.floats(-6, 6, allow_nan=False)


# ---------------------------------------------------------- layer Gaussians

def test_four_layers():
    spec = layer_gaussians(0.0, 4.0, 4, 1.0)
    assert spec.means == (-1.5, -0.5, 0.5, 1.5)
    assert spec.variances == (1.0, 1.0, 1.0, 1.0)


def test_single_layer():
    spec = layer_gaussians(0.37, 2.5, 1, 3.0)
    assert spec.means == (0.37,) and spec.variances == (2.5,)


def test_two_layers():
    spec = layer_gaussians(0.0, 2.0, 2, 2.0)
    assert spec.means == (-1.0, 1.0) and spec.variances == (1.0, 1.0)


@pytest.mark.parametrize("args", [(0, 0.0, 2, 1), (0, -1.0, 2, 1), (0, 1.0, 0, 1), (0, 1.0, 2, -0.5), (0, 1.0, 2.5, 1)])
def test_layer_gaussians_errors(args):
    with pytest.raises(ContractViolation):
        layer_gaussians(*args)


@settings(max_examples=100, deadline=None)
@given(st.integers(-64, 64), st.integers(1, 64), st.integers(1, 8), st.integers(0, 16))
def test_dyadic_layers_satisfy_spacing_and_variance_split_exactly(mu8, var4, L, tau4):
    mu, var, tau = mu8 / 8, var4 / 4, tau4 / 4
    spec = layer_gaussians(mu, var, L, tau)
    for i, m in enumerate(spec.means):
        assert m == mu - (L - 1) / 2 * tau + i * tau
    assert all(v == var / L for v in spec.variances)
    assert math.fsum(spec.means) / L == mu
    assert spec.means == tuple(2 * mu - m for m in reversed(spec.means))


@settings(max_examples=100, deadline=None)
@given(finite, st.floats(0.05, 10), st.integers(1, 9), st.floats(0, 3))
def test_layer_means_centre_on_population_mean(mu, var, L, tau):
    spec = layer_gaussians(mu, var, L, tau)
    assert abs(math.fsum(spec.means) / L - mu) < 1e-12
    assert abs(math.fsum(spec.variances) - var) < 1e-12 * max(1.0, var)


# -------------------------------------------------------------- membership

def test_symmetric_membership():
    spec = layer_gaussians(0.0, 2.0, 2, 2.0)
    np.testing.assert_array_equal(membership_probs(0.0, spec), [0.5, 0.5])


def test_membership_density_ratio():
    spec = layer_gaussians(0.0, 2.0, 2, 2.0)
    e2 = math.exp(-2)
    got = membership_probs(1.0, spec)
    np.testing.assert_allclose(got, [e2 / (1 + e2), 1 / (1 + e2)], rtol=0, atol=1e-12)
    np.testing.assert_allclose(got, [0.1192, 0.8808], atol=5e-5)


def test_single_layer_membership():
    assert membership_probs(3.3, layer_gaussians(0.0, 1.0, 1, 1.0)).tolist() == [1.0]


def test_membership_matches_scipy_densities():
    spec = layer_gaussians(0.2, 1.7, 5, 0.8)
    for a in (-2.0, 0.1, 0.9, 3.0):
        phi = norm.pdf(a, loc=spec.means, scale=np.sqrt(spec.variances))
        np.testing.assert_allclose(membership_probs(a, spec), phi / phi.sum(), rtol=1e-12)


@settings(max_examples=150, deadline=None)
@given(finite, finite, st.floats(0.1, 5), st.integers(2, 8), st.floats(0.1, 2))
def test_membership_sums_to_one(a, mu, var, L, tau):
    p = membership_probs(a, layer_gaussians(mu, var, L, tau))
    assert abs(p.sum() - 1) <= 1e-12
    assert np.all((p >= 0) & (p <= 1))


@settings(max_examples=150, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0.5, 3), st.integers(2, 8), st.floats(0.1, 0.5))
def test_membership_is_strictly_inside_the_simplex(a, mu, per_layer_var, L, tau):
    # kept where every log density ratio is far from the double-precision floor
    p = membership_probs(a, layer_gaussians(mu, per_layer_var * L, L, tau))
    assert np.all((p > 0) & (p < 1))


@settings(max_examples=150, deadline=None)
@given(finite, finite, st.floats(-5, 5), st.floats(0.1, 5), st.integers(2, 8), st.floats(0.1, 2))
def test_membership_shift_equivariance(a, mu, c, var, L, tau):
    p0 = membership_probs(a, layer_gaussians(mu, var, L, tau))
    p1 = membership_probs(a + c, layer_gaussians(mu + c, var, L, tau))
    np.testing.assert_allclose(p0, p1, rtol=0, atol=1e-12)


def test_extreme_ability_stays_finite():
    p = membership_probs(1e6, layer_gaussians(0.0, 1.0, 3, 1.0))
    assert np.all(np.isfinite(p)) and p[-1] == 1.0


def test_non_finite_ability():
    with pytest.raises(ContractViolation):
        membership_probs(float("nan"), layer_gaussians(0.0, 1.0, 2, 1.0))


# ---------------------------------------------------------- weighted loss

@pytest.mark.parametrize("p,loss,expected", [(1.0, 0.6931, 0.6931), (0.0, 0.6931, 0.0), (0.5, 0.6931, 0.34655)])
def test_weighted_loss(p, loss, expected):
    assert abs(float(weighted_loss(loss, p)) - expected) <= 1e-12


def test_weighted_loss_zero_gives_no_gradient():
    x = T.Tensor(np.array([0.3, -0.2]), requires_grad=True)
    with T.Tape() as tape:
        T.backward(weighted_loss(T.sum_(T.mul(x, x)), 0.0), tape)
    assert np.all(x.grad == 0.0)


def test_weighted_loss_range():
    with pytest.raises(ContractViolation):
        weighted_loss(1.0, 1.5)


# ------------------------------------------------------------------ fusion

def test_topk_one_is_best_layer():
    preds = np.array([[0.1, 0.2], [0.7, 0.8], [0.4, 0.6]])
    np.testing.assert_array_equal(topk_fuse(preds, [0.2, 0.5, 0.3], 1), preds[1])


def test_topk_two_equal_weights_is_mean():
    a, b = np.array([0.2, 0.9]), np.array([0.6, 0.3])
    np.testing.assert_allclose(topk_fuse(np.stack([a, b]), [0.5, 0.5], 2), (a + b) / 2, rtol=0, atol=1e-15)


def test_topk_hand_weighting():
    rng = np.random.default_rng(0)
    a, b, c = rng.random((3, 4, 5))
    got = topk_fuse(np.stack([a, b, c]), [0.6, 0.3, 0.1], 2)
    np.testing.assert_allclose(got, (0.6 * a + 0.3 * b) / 0.9, rtol=0, atol=1e-12)


def test_topk_ties_prefer_lower_index():
    preds = np.array([[1.0], [2.0], [3.0]])
    # layers 0 and 1 tie for second place; layer 0 wins
    assert topk_fuse(preds, [0.25, 0.25, 0.5], 2).item() == pytest.approx((0.25 * 1 + 0.5 * 3) / 0.75, abs=1e-15)
    assert topk_fuse(preds, [0.4, 0.2, 0.4], 1).tolist() == [1.0]


@pytest.mark.parametrize("k", [0, 4, 1.5])
def test_topk_range(k):
    with pytest.raises(ContractViolation):
        topk_fuse(np.zeros((3, 2)), [0.2, 0.3, 0.5], k)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(0.01, 1), min_size=1, max_size=7), st.integers(0, 10**6))
def test_k_equals_L_is_full_weighted_average(raw, seed):
    p = np.array(raw) / np.sum(raw)
    preds = np.random.default_rng(seed).random((len(p), 6))
    np.testing.assert_allclose(topk_fuse(preds, p, len(p)), (p / p.sum()) @ preds, rtol=0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 10**6))
def test_fused_output_stays_a_probability(L, b, seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(L), size=b)
    preds = rng.random((L, b, 4))
    for k in range(1, L + 1):
        out = topk_fuse(preds, p, k)
        assert out.shape == (b, 4)
        assert np.all(out >= preds.min(0) - 1e-15) and np.all(out <= preds.max(0) + 1e-15)


def test_per_row_memberships_match_row_by_row():
    rng = np.random.default_rng(3)
    p = rng.dirichlet(np.ones(4), size=3)
    preds = rng.random((4, 3, 5))
    got = topk_fuse(preds, p, 2)
    for r in range(3):
        np.testing.assert_allclose(got[r], topk_fuse(preds[:, r], p[r], 2), rtol=0, atol=1e-15)


def test_sigmoid_variant_is_literal():
    preds = np.array([[0.8], [0.6]])
    got = topk_fuse(preds, [0.7, 0.3], 2, sigmoid=True)
    assert abs(got.item() - (expit(0.7) * 0.8 + expit(0.3) * 0.6)) < 1e-15


# ----------------------------------------------------------------- Rasch

def _rec(s, q, c):
    return Interaction(s, q, 1, 1000 * q, 0, c, 0)


def test_closed_form_logit_of_accuracy():
    recs = [_rec(0, q, c) for q, c in enumerate([1, 1, 0, 1])]
    fit = fit_rasch(recs, iterations=400, l2_reg=0.0, pinned={q: 0.0 for q in range(4)})
    assert abs(fit.abilities[0] - math.log(3)) < 1e-9


def test_identical_patterns_identical_abilities():
    pattern = [1, 0, 1, 1, 0]
    recs = [_rec(s, q, c) for s in (4, 9) for q, c in enumerate(pattern)]
    recs.append(_rec(2, 0, 0))
    fit = fit_rasch(recs)
    assert fit.abilities[4] == fit.abilities[9]


def test_all_correct_matches_penalised_grid_oracle():
    n, l2 = 4, 0.05
    recs = [_rec(s, q, 1) for s in range(3) for q in range(n)]
    fit = fit_rasch(recs, iterations=20_000, l2_reg=l2, pinned={q: 0.0 for q in range(n)})

    def neg(a):
        return -(n * log_expit(a) - l2 * a * a)

    grid = np.linspace(0, 20, 200_001)
    coarse = grid[np.argmin(neg(grid))]
    best = minimize_scalar(neg, bracket=(coarse - 1e-3, coarse, coarse + 1e-3), tol=1e-12).x
    values = list(fit.abilities.values())
    assert all(np.isfinite(values)) and len(set(values)) == 1
    assert abs(values[0] - best) < 1e-6


def test_difficulties_are_centred_and_objective_monotone():
    truth = simgen.describe(simgen.SimConfig(n_students=50, n_questions=40, interactions_mean=60,
                                             interactions_jitter=10, boost=0.0, drift=0.0, seed=4))
    recs = simgen.generate(simgen.SimConfig(n_students=50, n_questions=40, interactions_mean=60,
                                            interactions_jitter=10, boost=0.0, drift=0.0, seed=4))
    fit = fit_rasch(recs)
    assert abs(np.mean(list(fit.difficulties.values()))) < 1e-12
    assert all(b >= a - 1e-9 for a, b in zip(fit.history, fit.history[1:]))
    assert len(truth) == 90


def test_fit_rasch_rejects_empty():
    with pytest.raises(ContractViolation):
        fit_rasch([])


def test_cold_start():
    fit = RaschFit({1: 0.5, 2: -1.5, 3: 2.0}, {}, 0.0)
    assert cold_start_ability(fit, 2) == -1.5
    assert cold_start_ability(fit, 77) == pytest.approx(1 / 3, abs=1e-15)
    assert all(cold_start_ability(fit, s) == fit.mean_ability for s in (10, 11, 12))


def test_fit_tables_round_trip(tmp_path):
    recs = [_rec(s, q, (s + q) % 2) for s in range(4) for q in range(5)]
    fit = fit_rasch(recs, iterations=20)
    leveled.write_abilities(fit, tmp_path / "a.csv")
    leveled.write_difficulties(fit, tmp_path / "d.csv")
    back = leveled.read_fit(tmp_path / "a.csv", tmp_path / "d.csv")
    assert back.abilities == fit.abilities and back.difficulties == fit.difficulties


# --------------------------------------------------------------- ensemble

TINY = LanaHyper(d_model=8, n_heads=2, n_encoder_layers=1, n_decoder_layers=1, seq_len=10, d_piv=2, d_ff=8,
                 question_vocab=31)
TINY_TRAIN = TrainConfig(epochs=1, batch_size=8, lr=1e-3)


@pytest.fixture(scope="module")
def tiny_world():
    cfg = simgen.SimConfig(n_students=12, n_questions=30, interactions_mean=25, interactions_jitter=5, seed=2)
    recs = simgen.generate(cfg)
    windows = dataio.windows_from_records(recs, TINY.seq_len)
    return recs, windows, fit_rasch(recs, iterations=50)


def test_single_layer_finetune_is_plain_training(tiny_world):
    recs, windows, fit = tiny_world
    base = init_params(TINY, seed=0)
    spec = layer_gaussians(fit.mean_ability, fit.ability_variance, 1, 0.0)
    ens = finetune_layers(base, fit, spec, windows, TINY_TRAIN)
    plain = base.clone()
    train(plain, windows, TINY_TRAIN)
    for (n, a), (_, b) in zip(ens.models[0].items(), plain.items()):
        assert np.array_equal(a.data, b.data), n


def test_clones_start_from_pretrained_and_empty_layers_warn(tiny_world):
    _, windows, fit = tiny_world
    base = init_params(TINY, seed=1)
    spec = layer_gaussians(fit.mean_ability, fit.ability_variance, 3, 1.0)
    with pytest.warns(RuntimeWarning, match="no qualifying windows"):
        ens = finetune_layers(base, fit, spec, windows, TINY_TRAIN, threshold=1.01)
    for model in ens.models:
        assert all(np.array_equal(a.data, b.data) for a, b in zip(model, base))
        assert all(a is not b for a, b in zip(model, base))


def test_parallel_finetune_matches_serial(tiny_world):
    _, windows, fit = tiny_world
    base = init_params(TINY, seed=2)
    spec = layer_gaussians(fit.mean_ability, fit.ability_variance, 2, 1.0)
    serial = finetune_layers(base, fit, spec, windows, TINY_TRAIN)
    parallel = finetune_layers(base, fit, spec, windows, TINY_TRAIN, workers=2)
    for m1, m2 in zip(serial.models, parallel.models):
        assert all(np.array_equal(a.data, b.data) for a, b in zip(m1, m2))


def test_encoder_only_finetune_freezes_decoder(tiny_world):
    _, windows, fit = tiny_world
    base = init_params(TINY, seed=3)
    spec = layer_gaussians(fit.mean_ability, fit.ability_variance, 2, 1.0)
    ens = finetune_layers(base, fit, spec, windows, TINY_TRAIN, encoder_only=True)
    encoder_side = ("emb.question", "emb.part", "enc", "msrfe", "psrfe")
    for model in ens.models:
        moved = {n for n, t in model.items() if not np.array_equal(t.data, base[n].data)}
        assert moved and all(n.startswith(encoder_side) for n in moved)


def test_ensemble_round_trip_and_L1_equivalence(tiny_world, tmp_path):
    _, windows, fit = tiny_world
    base = init_params(TINY, seed=4)
    spec = layer_gaussians(fit.mean_ability, fit.ability_variance, 3, 1.0)
    ens = finetune_layers(base, fit, spec, windows, TINY_TRAIN)
    manifest = leveled.save_ensemble(ens, tmp_path)
    back = leveled.load_ensemble(manifest)
    assert back.spec == ens.spec
    for k in (1, 2, 3):
        assert np.array_equal(leveled.ensemble_predict(ens, windows, k), leveled.ensemble_predict(back, windows, k))
    one = leveled.LayerEnsemble(layer_gaussians(0.0, 1.0, 1, 0.0), [ens.models[1]], fit)
    assert np.array_equal(leveled.ensemble_predict(one, windows, 1), predict_windows(ens.models[1], windows))


def test_ensemble_rejects_mixed_hyperparameters(tiny_world):
    _, _, fit = tiny_world
    other = LanaHyper(**{**TINY.as_dict(), "d_piv": 3})
    with pytest.raises(ContractViolation):
        leveled.LayerEnsemble(layer_gaussians(0.0, 1.0, 2, 1.0), [init_params(TINY), init_params(other)], fit)


def test_cold_start_students_get_population_mean_memberships(tiny_world):
    _, _, fit = tiny_world
    spec = layer_gaussians(fit.mean_ability, fit.ability_variance, 4, 1.0)
    ens = leveled.LayerEnsemble(spec, [init_params(TINY)] * 4, fit)
    np.testing.assert_array_equal(ens.abilities_for([10_001, 10_002]), [fit.mean_ability] * 2)
    p = ens.memberships([10_001])[0]
    np.testing.assert_allclose(p, p[::-1], rtol=0, atol=1e-12)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert p.sum() == pytest.approx(1.0, abs=1e-12)
