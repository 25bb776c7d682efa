import numpy as np
import pytest

from spiritdiff.calibration import calibrate, extract_acs
from spiritdiff.grid import SamplingMask, crandn, fft2c
from spiritdiff.operators import ImageKernel, q_project
from spiritdiff.scores import (
    GaussianPrior,
    LinearScoreModel,
    TrainConfig,
    TrainingDivergedError,
    dsm_bin_optimum,
    dsm_loss,
    fit_gaussian_prior,
    gaussian_score,
    train_dsm,
)
from spiritdiff.sde import SamplerConfig, SdeSchedule, sample_reverse
from spiritdiff.simdata import make_phase_ramp_sensitivities, make_sensitivities


@pytest.fixture(scope="module")
def maps():
    return make_phase_ramp_sensitivities(2, 8, 8)


def gaussian_data(s, n, var=1.0, seed=0, shape=(8, 8)):
    rng = np.random.default_rng(seed)
    mean = 0.5 * np.ones(shape)
    return s.expand(mean + np.sqrt(var) * crandn(rng, (n, *shape))), s.expand(mean)


def test_score_zero_at_mean(maps, rng):
    mean = maps.expand(crandn(rng, (8, 8)))
    p = GaussianPrior(mean, 0.7)
    assert not gaussian_score(p, SdeSchedule(), mean, 0.4, maps).any()


def test_score_t0_closed_form(maps, rng):
    p = GaussianPrior(np.zeros((2, 8, 8)), 1.0)
    x = crandn(rng, (2, 8, 8))
    assert np.allclose(gaussian_score(p, SdeSchedule(), x, 0.0, maps), -q_project(maps, x), atol=1e-15)


def test_score_in_range_of_q(maps, rng):
    p = GaussianPrior(crandn(rng, (2, 8, 8)), 0.3)
    g = gaussian_score(p, SdeSchedule(), crandn(rng, (2, 8, 8)), 0.5, maps)
    assert np.linalg.norm(q_project(maps, g) - g) <= 1e-12 * np.linalg.norm(g)


def test_prior_validation_and_fit(maps):
    with pytest.raises(ValueError):
        GaussianPrior(np.zeros((1, 2, 2)), 0.0)
    data, _ = gaussian_data(maps, 4000, var=2.0)
    p = fit_gaussian_prior(data)
    # per coil entry variance is var * |s_i|^2 = var / 2 with two unit-norm phase ramps
    assert p.var == pytest.approx(1.0, rel=0.03)
    with pytest.raises(ValueError):
        fit_gaussian_prior(data[:1])


@pytest.mark.parametrize("name", ["ve_like", "consistent"])
def test_reverse_population_matches_prior(maps, name):
    """500 chains from the prior marginal at T land on the prior at t_min."""
    var = 1.0
    mu = maps.expand(0.5 * np.ones((8, 8)))
    prior = GaussianPrior(mu, var)
    if name == "ve_like":
        sch, ik = SdeSchedule(eta_min=0.0, eta_max=0.0, n_steps=1000), None
    else:
        sch = SdeSchedule(variance="driftless", eta_min=50.0, eta_max=50.0, n_steps=1000)
        k = fft2c(maps.expand(np.outer(np.hanning(10)[1:-1], np.hanning(10)[1:-1])))
        ik = ImageKernel(calibrate(extract_acs(k, SamplingMask.full(8, 8), (3, 3)), 3, 3,
                                   lambda_rel=1e-6), (8, 8))
    n = 500
    rng = np.random.default_rng(21)
    x0 = mu + np.sqrt(var + sch.kernel_var(sch.T)) * q_project(maps, crandn(rng, (n, 2, 8, 8)))
    cfg = SamplerConfig(dc="none", denoise=False)
    m = SamplingMask.full(8, 8)
    x = sample_reverse(np.zeros((2, 8, 8)), m, prior.score_fn(sch, maps), sch, ik, maps, rng, cfg,
                       x_init=x0)
    c = maps.combine(x - mu)  # coordinates in range(Q), 64 per chain
    target = var + sch.kernel_var(sch.t_min)
    # mean: every pixel's chain average is CN(0, target / n)
    z2 = np.abs(c.mean(axis=0)) ** 2 / (target / n)
    assert abs(z2.sum() - 64) / np.sqrt(64) < 3
    # variance: per-chain estimator, compared with its own standard error
    est = np.mean(np.abs(c) ** 2, axis=(1, 2))
    se = est.std(ddof=1) / np.sqrt(n)
    assert abs(est.mean() - target) < 3 * se


def test_dsm_loss_nonnegative_and_zero_hook(maps, rng):
    data, mean = gaussian_data(maps, 16)
    model = LinearScoreModel.zeros(mean)
    assert dsm_loss(model, data, 0.3, SdeSchedule(), maps, rng, noise=False) == 0.0
    rand = LinearScoreModel(rng.standard_normal(10), rng.standard_normal(10), mean)
    for t in (0.01, 0.5, 1.0):
        assert dsm_loss(rand, data, t, SdeSchedule(), maps, rng) >= 0


def test_dsm_loss_deterministic(maps):
    data, mean = gaussian_data(maps, 16)
    model = LinearScoreModel(-np.ones(10), np.ones(10), mean)
    a = dsm_loss(model, data, 0.5, SdeSchedule(), maps, np.random.default_rng(3))
    b = dsm_loss(model, data, 0.5, SdeSchedule(), maps, np.random.default_rng(3))
    assert a == b


def test_dsm_loss_errors(maps, rng):
    model = LinearScoreModel.zeros(np.zeros((2, 8, 8)))
    with pytest.raises(ValueError, match="empty"):
        dsm_loss(model, np.zeros((0, 2, 8, 8)), 0.5, SdeSchedule(), maps, rng)
    with pytest.raises(ValueError, match="t_min"):
        dsm_loss(model, np.zeros((1, 2, 8, 8)), 1e-4, SdeSchedule(), maps, rng)


@pytest.mark.parametrize("t", [0.05, 0.5, 1.0])
def test_dsm_loss_floor_at_optimum(maps, t):
    sch, var = SdeSchedule(), 1.0
    data, mean = gaussian_data(maps, 20000, var=var, seed=4)
    kv = sch.kernel_var(t)
    a = -1.0 / (var + kv)
    model = LinearScoreModel(np.full(10, a), np.full(10, -a), mean)
    loss = dsm_loss(model, data, t, sch, maps, np.random.default_rng(5))
    floor = 0.5 * var / (var + kv)  # 1/ncoils of the entries carry the subspace
    assert loss == pytest.approx(floor, rel=0.02)


def test_linear_model_bins():
    m = LinearScoreModel(np.arange(4.0), np.zeros(4), np.zeros((1, 2, 2)), t_min=0.0, T=1.0)
    assert list(m.bin_of([0.0, 0.24, 0.26, 0.99, 1.0])) == [0, 0, 1, 3, 3]
    with pytest.raises(ValueError):
        LinearScoreModel(np.zeros(3), np.zeros(4), np.zeros(1))


def test_train_dsm_recovers_bin_optimum():
    s = make_phase_ramp_sensitivities(2, 4, 4)
    data, _ = gaussian_data(s, 256, shape=(4, 4))
    sch = SdeSchedule()
    res = train_dsm(data, sch, s, TrainConfig(epochs=200))
    e = res.model.edges
    for k in range(10):
        opt = dsm_bin_optimum(sch, 1.0, e[k], e[k + 1])
        assert res.model.a[k] == pytest.approx(opt, rel=0.05)
        assert res.model.b[k] == pytest.approx(-opt, rel=0.1)


def test_train_dsm_more_data_not_worse():
    s = make_phase_ramp_sensitivities(2, 4, 4)
    sch = SdeSchedule()
    held, _ = gaussian_data(s, 4000, shape=(4, 4), seed=99)

    def heldout(model):
        ts = np.linspace(sch.t_min, 1, 4000)
        return dsm_loss(model, held, ts, sch, s, np.random.default_rng(0))

    small, _ = gaussian_data(s, 64, shape=(4, 4), seed=1)
    big, _ = gaussian_data(s, 128, shape=(4, 4), seed=1)
    l_small = heldout(train_dsm(small, sch, s, TrainConfig(epochs=150)).model)
    l_big = heldout(train_dsm(big, sch, s, TrainConfig(epochs=150)).model)
    assert l_big <= l_small * 1.01


def test_train_dsm_errors():
    s = make_phase_ramp_sensitivities(2, 4, 4)
    with pytest.raises(ValueError, match="non-empty"):
        train_dsm(np.zeros((0, 2, 4, 4)), SdeSchedule(), s)
    data, _ = gaussian_data(s, 32, shape=(4, 4))
    with pytest.raises(TrainingDivergedError):
        train_dsm(data, SdeSchedule(), s, TrainConfig(lr=3.0, epochs=300))
