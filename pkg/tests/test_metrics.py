import json
import math

import numpy as np
import pytest
import scipy.stats

from slowlab.metrics import (
    MetricInput,
    betavae_score,
    discrete_entropy,
    discrete_mi,
    factorvae_score,
    mcc,
    metric_report,
    mi_matrix,
    mig,
    modularity,
    modularity_from_mi,
    sap,
    spearman,
)
from slowlab.synthgen import FactorGrid, sample_factor_batch


def grid_input(sizes, n, seed, latent_fn, extra_latents=0, kinds=None):
    grid = FactorGrid(tuple(sizes))
    rng = np.random.default_rng(seed)
    factors = sample_factor_batch(grid, n, rng)
    lat = latent_fn(factors.astype(float))
    if extra_latents:
        lat = np.hstack([lat, rng.standard_normal((n, extra_latents))])
    return MetricInput(lat, factors, kinds or ("categorical",) * len(sizes))


def make_sampler(grid, seed):
    rng = np.random.default_rng(seed)
    return lambda fixed, n: sample_factor_batch(grid, n, rng, fixed)


# ---------------------------------------------------------------------------
# input validation


def test_metric_input_validation():
    lat = np.random.default_rng(0).standard_normal((1500, 4))
    fac = np.random.default_rng(1).standard_normal((1500, 2))
    MetricInput(lat, fac)
    with pytest.raises(ValueError):
        MetricInput(lat[:500], fac[:500])
    with pytest.raises(ValueError):
        MetricInput(lat[:, :1], fac)
    with pytest.raises(ValueError):
        MetricInput(lat, fac, ("continuous",))
    with pytest.raises(ValueError):
        MetricInput(lat, fac, ("continuous", "ordinal"))


# ---------------------------------------------------------------------------
# spearman


def test_spearman_monotone_invariance():
    x = np.random.default_rng(2).standard_normal(5000)
    assert spearman(x, x**3) == pytest.approx(1.0, abs=1e-12)
    assert spearman(x, -x) == pytest.approx(-1.0, abs=1e-12)


def test_spearman_null_bound():
    rng = np.random.default_rng(3)
    assert abs(spearman(rng.standard_normal(10_000), rng.standard_normal(10_000))) <= 0.05


def test_spearman_matches_scipy_with_ties():
    rng = np.random.default_rng(4)
    x = rng.integers(0, 5, 400).astype(float)
    y = x + rng.integers(0, 3, 400)
    ref = scipy.stats.spearmanr(x, y).statistic
    assert spearman(x, y) == pytest.approx(ref, abs=1e-12)


# ---------------------------------------------------------------------------
# mcc


def test_mcc_perfect_permutation_sign_flip():
    rng = np.random.default_rng(5)
    fac = rng.standard_normal((5000, 4))
    lat = fac[:, [2, 0, 3, 1]] * np.array([1.0, -1.0, -1.0, 1.0])
    rep = mcc(MetricInput(lat, fac))
    assert rep.score == pytest.approx(100.0, abs=1e-9)
    assert rep.assignment == {0: 1, 1: 3, 2: 0, 3: 2}
    assert sorted(rep.assignment.values()) == [0, 1, 2, 3]


def test_mcc_monotone_transform_spearman():
    rng = np.random.default_rng(6)
    fac = rng.standard_normal((5000, 3))
    lat = np.column_stack([
        np.exp(fac[:, 1]),
        np.arctan(fac[:, 2]),
        fac[:, 0] ** 3,
    ])
    rep = mcc(MetricInput(lat, fac))
    assert rep.score == pytest.approx(100.0, abs=1e-9)


def test_mcc_with_noise_channels():
    rng = np.random.default_rng(7)
    fac = rng.standard_normal((5000, 3))
    lat = np.hstack([-fac[:, [1, 0, 2]], rng.standard_normal((5000, 4))])
    rep = mcc(MetricInput(lat, fac))
    assert rep.score > 99.9
    assert rep.corr.shape == (7, 3)


def test_mcc_null_level():
    rng = np.random.default_rng(8)
    lat = rng.standard_normal((10_000, 10))
    fac = rng.standard_normal((10_000, 4))
    assert mcc(MetricInput(lat, fac)).score <= 10.0


def test_mcc_constant_latent_warns_not_raises():
    rng = np.random.default_rng(9)
    fac = rng.standard_normal((2000, 2))
    lat = np.hstack([fac, np.ones((2000, 1))])
    with pytest.warns(UserWarning):
        rep = mcc(MetricInput(lat, fac))
    assert rep.score > 99.9


def test_mcc_invariance_property():
    rng = np.random.default_rng(10)
    fac = rng.standard_normal((4000, 3))
    lat = np.hstack([fac @ np.linalg.qr(rng.standard_normal((3, 3)))[0],
                     rng.standard_normal((4000, 2))])
    base = mcc(MetricInput(lat, fac)).score
    transformed = np.column_stack([
        np.tanh(lat[:, 4]),
        -np.exp(lat[:, 2]),
        lat[:, 0] ** 3,
        lat[:, 3],
        -lat[:, 1],
    ])
    assert abs(mcc(MetricInput(transformed, fac)).score - base) < 1e-12


def test_mcc_assignment_beats_random_injections():
    rng = np.random.default_rng(11)
    lat = rng.standard_normal((2000, 6))
    fac = rng.standard_normal((2000, 6))
    rep = mcc(MetricInput(lat, fac))
    c = rep.corr
    best = sum(c[rep.assignment[j], j] for j in range(6))
    for _ in range(10_000):
        perm = rng.permutation(6)
        assert sum(c[perm[j], j] for j in range(6)) <= best + 1e-12


def test_mcc_pearson_mode():
    rng = np.random.default_rng(12)
    fac = rng.standard_normal((3000, 3))
    rep = mcc(MetricInput(2.5 * fac[:, [1, 2, 0]], fac), correlation="pearson")
    assert rep.score == pytest.approx(100.0, abs=1e-9)
    with pytest.raises(ValueError):
        mcc(MetricInput(fac, fac), correlation="kendall")


def test_mcc_categorical_warns_and_relabel_flag():
    grid = FactorGrid((3, 4))
    rng = np.random.default_rng(13)
    fac = sample_factor_batch(grid, 6000, rng)
    # scramble the labels of factor 0: latent sees a different coding
    scramble = np.array([2, 0, 1])
    lat = np.column_stack([scramble[fac[:, 0]].astype(float), fac[:, 1].astype(float)])
    with pytest.warns(UserWarning):
        plain = mcc(MetricInput(lat, fac, ("categorical", "categorical")))
    with pytest.warns(UserWarning):
        fixed = mcc(MetricInput(lat, fac, ("categorical", "categorical")),
                    relabel_categories=True)
    assert plain.matched[0] < 0.9
    assert fixed.matched[0] > 0.999
    assert fixed.score > plain.score


# ---------------------------------------------------------------------------
# discrete mutual information


def test_discrete_mi_equals_entropy_on_copy():
    rng = np.random.default_rng(14)
    a = rng.integers(0, 20, 100_000)
    mi = discrete_mi(a, a)
    assert mi == pytest.approx(discrete_entropy(a), abs=1e-12)
    assert mi == pytest.approx(math.log(20), abs=0.01)


def test_discrete_mi_independent_near_bias():
    rng = np.random.default_rng(15)
    n = 100_000
    a = rng.standard_normal(n)
    b = rng.standard_normal(n)
    bias = (20 - 1) * (20 - 1) / (2 * n)
    assert discrete_mi(a, b) <= bias + 0.01


def test_discrete_mi_symmetry():
    rng = np.random.default_rng(16)
    a = rng.integers(0, 7, 5000)
    b = rng.standard_normal(5000) + a
    assert discrete_mi(a, b) == pytest.approx(discrete_mi(b, a), abs=1e-12)
    assert discrete_mi(a, b) > 0.5


def test_discrete_mi_validation():
    with pytest.raises(ValueError):
        discrete_mi([1.0, 2.0], [1.0])


# ---------------------------------------------------------------------------
# mig


def test_mig_copy_construction():
    inp = grid_input((10, 8, 5), 100_000, 17, lambda f: f, extra_latents=3)
    assert mig(inp) >= 0.9


def test_mig_random_null():
    inp = grid_input((10, 8, 5), 10_000, 18, lambda f: 0.0 * f, extra_latents=0)
    rng = np.random.default_rng(19)
    inp.latents = rng.standard_normal(inp.latents.shape)
    assert mig(inp) <= 0.05


def test_mig_duplicated_latent_collapses_gap():
    grid = FactorGrid((8, 8))
    rng = np.random.default_rng(20)
    fac = sample_factor_batch(grid, 50_000, rng)
    lat = np.column_stack([fac[:, 0], fac[:, 0], fac[:, 1]]).astype(float)
    inp = MetricInput(lat, fac, ("categorical", "categorical"))
    m = mi_matrix(inp)
    # factor 0's top two MIs are equal, so only factor 1 contributes
    col = np.sort(m[:, 0])[::-1]
    assert col[0] == pytest.approx(col[1], abs=1e-12)
    assert mig(inp) == pytest.approx(0.5, abs=0.05)


def test_mig_constant_factor_raises():
    rng = np.random.default_rng(21)
    fac = np.hstack([rng.integers(0, 4, (2000, 1)), np.zeros((2000, 1), dtype=np.int64)])
    inp = MetricInput(rng.standard_normal((2000, 3)), fac, ("categorical", "categorical"))
    with pytest.raises(ValueError):
        mig(inp)


# ---------------------------------------------------------------------------
# modularity


def test_modularity_formula_cases():
    one_hot = np.array([[0.9, 0.0, 0.0], [0.0, 0.4, 0.0], [0.0, 0.0, 0.7]])
    assert modularity_from_mi(one_hot) == pytest.approx(1.0, abs=1e-12)
    flat = np.full((4, 3), 0.5)
    assert modularity_from_mi(flat) == pytest.approx(0.0, abs=1e-12)
    # a zero row is dropped by the selection rule, not divided by
    with_dead = np.array([[0.9, 0.0], [0.0, 0.0]])
    assert modularity_from_mi(with_dead) == pytest.approx(0.5, abs=1e-12)
    assert modularity_from_mi(np.array([[0.3], [0.4]])) == pytest.approx(1.0, abs=1e-12)


def test_modularity_transcription_oracle():
    inp = grid_input((6, 9), 5000, 22, lambda f: 0.0 * f, extra_latents=0)
    rng = np.random.default_rng(23)
    inp.latents = rng.standard_normal(inp.latents.shape)
    m = mi_matrix(inp)
    d_lat, d_fac = m.shape
    # direct transcription with the zero-max selection rule
    acc = 0.0
    for i in range(d_lat):
        msq = m[i] ** 2
        top = msq.max()
        if top > 0:
            acc += 1.0 - (msq.sum() - top) / (top * (d_fac - 1))
    assert modularity(inp) == pytest.approx(acc / d_lat, abs=1e-12)


def test_modularity_near_one_on_copy():
    inp = grid_input((10, 8, 5), 50_000, 24, lambda f: f)
    assert modularity(inp) >= 0.95


# ---------------------------------------------------------------------------
# sap


def test_sap_identity_categorical_gap():
    inp = grid_input((10, 10, 10), 4000, 25, lambda f: f)
    assert sap(inp) > 0.3


def test_sap_latent_permutation_invariant():
    inp = grid_input((6, 4), 2000, 26, lambda f: f, extra_latents=1)
    base = sap(inp)
    permuted = MetricInput(inp.latents[:, [2, 0, 1]], inp.factors, inp.factor_kinds)
    assert sap(permuted) == pytest.approx(base, abs=1e-12)


def test_sap_random_null_continuous():
    rng = np.random.default_rng(27)
    lat = rng.standard_normal((10_000, 5))
    fac = rng.standard_normal((10_000, 3))
    assert sap(MetricInput(lat, fac)) <= 0.05


def test_sap_continuous_perfect_factor():
    rng = np.random.default_rng(28)
    fac = rng.standard_normal((4000, 2))
    lat = np.hstack([fac, rng.standard_normal((4000, 2))])
    assert sap(MetricInput(lat, fac)) > 0.9


# ---------------------------------------------------------------------------
# factorvae score


def test_factorvae_identity_encoder():
    grid = FactorGrid((3, 6, 40))
    score = factorvae_score(make_sampler(grid, 1), lambda f: np.asarray(f, float),
                            rng=np.random.default_rng(2))
    assert score >= 0.95


def test_factorvae_constant_encoder_errors():
    grid = FactorGrid((3, 6, 40))
    with pytest.raises(ValueError):
        factorvae_score(make_sampler(grid, 3), lambda f: np.zeros((len(f), 4)),
                        rng=np.random.default_rng(4))


def test_factorvae_noise_dominated_encoder_at_chance():
    grid = FactorGrid((3, 6, 40))
    proj = np.random.default_rng(5).standard_normal((3, 8))
    noise = np.random.default_rng(100)

    def encoder(f):
        f = np.asarray(f, dtype=float)
        return f @ proj + 300.0 * noise.standard_normal((len(f), 8))

    score = factorvae_score(make_sampler(grid, 3), encoder, rng=np.random.default_rng(4))
    assert abs(score - 1.0 / 3.0) <= 0.1


def test_factorvae_deterministic():
    grid = FactorGrid((3, 6, 40))
    ident = lambda f: np.asarray(f, float)
    a = factorvae_score(make_sampler(grid, 1), ident, rng=np.random.default_rng(2))
    b = factorvae_score(make_sampler(grid, 1), ident, rng=np.random.default_rng(2))
    assert a == b


# ---------------------------------------------------------------------------
# betavae score


def test_betavae_identity_encoder():
    grid = FactorGrid((3, 6, 40))
    score = betavae_score(make_sampler(grid, 9), lambda f: np.asarray(f, float),
                          batches=400, rng=np.random.default_rng(10))
    assert score >= 0.95


def test_betavae_uninformative_encoder_at_chance():
    grid = FactorGrid((3, 6, 40))
    noise = np.random.default_rng(200)
    score = betavae_score(make_sampler(grid, 9), lambda f: noise.standard_normal((len(f), 6)),
                          batches=400, rng=np.random.default_rng(10))
    assert abs(score - 1.0 / 3.0) <= 0.1


def test_betavae_deterministic():
    grid = FactorGrid((4, 4))
    ident = lambda f: np.asarray(f, float)
    a = betavae_score(make_sampler(grid, 11), ident, batches=150, rng=np.random.default_rng(12))
    b = betavae_score(make_sampler(grid, 11), ident, batches=150, rng=np.random.default_rng(12))
    assert a == b


# ---------------------------------------------------------------------------
# range properties


def test_score_ranges_on_random_inputs():
    rng = np.random.default_rng(30)
    for _ in range(1000):
        lat = rng.standard_normal((1000, 5))
        fac = rng.standard_normal((1000, 3))
        inp = MetricInput(lat, fac)
        rep = mcc(inp)
        assert 0.0 <= rep.score <= 100.0
        assert len(set(rep.assignment.values())) == 3
        assert 0.0 <= mig(inp) <= 1.0
        assert 0.0 <= modularity(inp) <= 1.0
        assert 0.0 <= sap(inp) <= 1.0


# ---------------------------------------------------------------------------
# reporting


def test_metric_report_json():
    rep = metric_report("mcc", 87.5, config={"correlation": "spearman"}, seed=3,
                        n_samples=10_000, matrices={"corr": np.eye(2)})
    blob = json.loads(json.dumps(rep))
    assert blob["metric_name"] == "mcc"
    assert blob["score"] == 87.5
    assert blob["matrices"]["corr"] == [[1.0, 0.0], [0.0, 1.0]]
