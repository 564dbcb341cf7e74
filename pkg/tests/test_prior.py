import threading
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import check_grad

from prism.datagen import generate_motion_kernel, generate_texture_image
from prism.errors import BridgeTimeout, DegenerateScale, MalformedResponse
from prism.forward import ForwardModel, Kernel, delta_kernel, support_mask
from prism.grid import fft2, ifft2, make_rng, write_pgrd
from prism.likelihood import dense_oracle
from prism.prior import (
    BridgeSampler,
    ConditionedKernelPrior,
    GaussianPrior,
    KernelConditioning,
    PointMassPrior,
    echo_handler,
    gaussian_denoise_sample,
    gaussian_handler,
    has_signal,
    kernel_base_prior,
    kernel_marginal_nll,
    project_kernel,
    recentred_kernel_mean,
    respond_pending,
    serve_bridge,
    texture_prior,
)


def random_prior(rng, shape):
    # symmetric spectrum so the covariance is real
    s = rng.random(shape) + 0.1
    s = 0.5 * (s + np.roll(s[::-1, ::-1], 1, axis=(0, 1)))
    return GaussianPrior(rng.random(shape), s)


@pytest.fixture
def responder(tmp_path):
    """Run a bridge responder thread; yields a function taking the handler."""
    stop = threading.Event()
    threads = []

    def start(handler):
        t = threading.Thread(target=serve_bridge, args=(tmp_path, handler, stop), daemon=True)
        t.start()
        threads.append(t)
        return tmp_path

    yield start
    stop.set()
    for t in threads:
        t.join(timeout=2)


# -- Gaussian prior ------------------------------------------------------------------------


def test_flat_prior_returns_observation(rng):
    v = rng.standard_normal((6, 6))
    prior = GaussianPrior(np.zeros((6, 6)), 1e12)
    np.testing.assert_allclose(prior.posterior(v, 0.1).mean, v, atol=1e-5)


def test_vanishing_rho_returns_input(rng):
    v = rng.standard_normal((6, 6))
    out = gaussian_denoise_sample(random_prior(rng, (6, 6)), v, 1e-9, make_rng(0))
    assert np.linalg.norm(out - v) <= 1e-5 * np.linalg.norm(v)


def test_posterior_matches_dense_gaussian(rng):
    prior = random_prior(rng, (4, 4))
    v, rho = rng.standard_normal((4, 4)), 0.7
    cov_prior = GaussianPrior(np.zeros((4, 4)), prior.spectral_variance)
    # prior covariance by pushing identity columns through the spectral operator
    n = 16
    basis = np.eye(n).reshape(n, 4, 4)
    sigma = ifft2(fft2(basis) * cov_prior.spectral_variance).reshape(n, n)
    q = np.linalg.inv(sigma) + np.eye(n) / rho**2
    mean = np.linalg.solve(q, np.linalg.solve(sigma, prior.mean.ravel()) + v.ravel() / rho**2)
    post = prior.posterior(v, rho)
    np.testing.assert_allclose(post.mean.ravel(), mean, atol=1e-10)
    np.testing.assert_allclose(post.covariance(), np.linalg.inv(q), atol=1e-10)


def test_conjugate_moments_monte_carlo():
    rng = np.random.default_rng(3)
    prior = random_prior(rng, (8, 8))
    v, rho = rng.standard_normal((8, 8)), 0.5
    post = prior.posterior(v, rho)
    n = 100_000
    draws = post.sample(make_rng(11), size=n)
    sd = np.sqrt(post.variance)
    assert np.all(np.abs(draws.mean(axis=0) - post.mean) < 4 * sd / np.sqrt(n))
    # second moment: per-pixel variance within a 4-sigma band of its sampling error
    var_se = post.variance * np.sqrt(2 / n)
    assert np.all(np.abs(draws.var(axis=0) - post.variance) < 4 * var_se)


def test_prior_validation():
    with pytest.raises(DegenerateScale):
        GaussianPrior(np.zeros((3, 3)), 0.0)
    with pytest.raises(DegenerateScale):
        GaussianPrior(np.zeros((3, 3)), 1.0).sample(np.zeros((3, 3)), 0.0, make_rng(0))


def test_prior_draw_statistics():
    prior = texture_prior((16, 16), 2.0, 0.5, 0.1)
    draws = np.array([prior.draw(make_rng(s)) for s in range(400)])
    assert draws.mean() == pytest.approx(0.5, abs=0.01)
    assert draws.var(axis=0).mean() == pytest.approx(0.01, rel=0.1)


def test_point_mass_prior(rng):
    value = rng.random((4, 4))
    out = PointMassPrior(value).sample(np.zeros((4, 4)), 0.3, make_rng(0))
    assert np.array_equal(out, value)


# -- kernel projection ---------------------------------------------------------------------


def test_project_normalized_unchanged(rng):
    g = rng.random((8, 8))
    k = Kernel(g / g.sum(), normalized=True)
    np.testing.assert_allclose(project_kernel(k).grid, k.grid, atol=1e-12)


def test_project_all_negative_gives_delta():
    out = project_kernel(Kernel(-np.ones((5, 5))))
    assert np.array_equal(out.grid, delta_kernel((5, 5)).grid)
    assert out.normalized


kernel_grids = st.integers(0, 2**32 - 1).map(lambda s: np.random.default_rng(s).standard_normal((6, 6)))


@given(kernel_grids, st.sampled_from([None, 3, (3, 5)]))
def test_project_postconditions_and_idempotence(g, support):
    once = project_kernel(Kernel(g, support))
    assert once.normalized and once.grid.min() >= 0
    assert once.grid.sum() == pytest.approx(1.0, abs=1e-12)
    if support is not None:
        assert np.all(once.grid[~support_mask(g.shape, support)] == 0)
    twice = project_kernel(once)
    assert twice.grid.tobytes() == once.grid.tobytes()


# -- measurement-conditioned kernel prior --------------------------------------------------


def test_marginal_nll_gradient():
    rng = np.random.default_rng(0)
    shape = (8, 8)
    prior = texture_prior(shape, 2.0, 0.5, 0.2)
    k = generate_motion_kernel(shape, 3, 0.5, make_rng(1))
    y = ForwardModel(k, 0.05).measure(prior.draw(make_rng(2)), make_rng(3))
    index = np.flatnonzero(support_mask(shape, 3))
    kp = kernel_base_prior(shape, 3, sd=0.1)
    x0 = rng.random(len(index))
    for kprior in (None, kp):
        err = check_grad(
            lambda v: kernel_marginal_nll(v, fft2(y), prior, 0.05, index, kprior)[0],
            lambda v: kernel_marginal_nll(v, fft2(y), prior, 0.05, index, kprior)[1],
            x0,
        )
        scale = np.linalg.norm(kernel_marginal_nll(x0, fft2(y), prior, 0.05, index, kprior)[1])
        assert err < 1e-5 * scale


def test_has_signal():
    noise = 0.05 * make_rng(0).standard_normal((32, 32))
    assert not has_signal(noise, 0.05)
    img = generate_texture_image((32, 32), 2.0, make_rng(1))
    assert has_signal(img + noise, 0.05)


@pytest.mark.parametrize("method", ["marginal", "inverse"])
def test_pure_noise_falls_back_to_base(method):
    shape = (16, 16)
    base = kernel_base_prior(shape, 5)
    y = 0.02 * make_rng(4).standard_normal(shape)
    cfg = KernelConditioning(method=method, noise_sigma=0.02, support=(5, 5),
                             image_prior=texture_prior(shape, 2.0, 0.5, 0.2))
    np.testing.assert_array_equal(recentred_kernel_mean(y, base, cfg), base.mean)


def test_oracle_proxy_recentring_beats_base():
    shape = (32, 32)
    base = kernel_base_prior(shape, 5)
    wins = 0
    for seed in range(50):
        x = generate_texture_image(shape, 2.0, make_rng(seed, 2))
        k = generate_motion_kernel(shape, 5, 0.5, make_rng(seed, 1))
        y = ForwardModel(k, 1e-6).measure(x, make_rng(seed, 3))
        cfg = KernelConditioning(method="inverse", noise_sigma=1e-6, support=(5, 5), proxy=x)
        prior = ConditionedKernelPrior(y, base, cfg)
        wins += np.linalg.norm(prior.mean - k.grid) < np.linalg.norm(base.mean - k.grid)
    assert wins >= 45


def test_marginal_recentring_moves_towards_truth():
    shape = (32, 32)
    image_prior = texture_prior(shape, 3.0, 0.5, 0.15)
    base = kernel_base_prior(shape, 5)
    wins = 0
    for seed in range(10):
        k = generate_motion_kernel(shape, 5, 0.5, make_rng(seed, 1))
        y = ForwardModel(k, 0.02).measure(image_prior.draw(make_rng(seed, 2)), make_rng(seed, 3))
        cfg = KernelConditioning(noise_sigma=0.02, support=(5, 5), image_prior=image_prior)
        mean = ConditionedKernelPrior(y, base, cfg).mean
        assert mean.min() >= 0 and mean.sum() == pytest.approx(1.0)
        wins += np.linalg.norm(mean - k.grid) < np.linalg.norm(base.mean - k.grid)
    assert wins >= 7


def test_conditioned_sampler_vanishing_rho(rng):
    shape = (16, 16)
    y = generate_texture_image(shape, 2.0, make_rng(0))
    prior = ConditionedKernelPrior(y, kernel_base_prior(shape, 3),
                                   KernelConditioning(method="inverse", noise_sigma=0.01, support=(3, 3)))
    m = rng.standard_normal(shape)
    out = prior.sample(m, 1e-9, make_rng(0))
    assert np.linalg.norm(out - m) <= 1e-5 * np.linalg.norm(m)


def test_unknown_method():
    shape = (8, 8)
    y = generate_texture_image(shape, 1.0, make_rng(0))
    with pytest.raises(ValueError):
        recentred_kernel_mean(y, kernel_base_prior(shape, 3), KernelConditioning(method="bogus", noise_sigma=0.01))


# -- bridge --------------------------------------------------------------------------------


def test_bridge_loopback(responder, rng):
    endpoint = responder(echo_handler)
    sampler = BridgeSampler(endpoint, timeout=5)
    v = rng.standard_normal((8, 6))
    assert np.array_equal(sampler.sample(v, 0.3, make_rng(0)), v)
    assert np.array_equal(sampler.sample(2 * v, 0.3, make_rng(1)), 2 * v)
    # exchange files are cleaned up after each call
    assert not list(endpoint.glob("req_*")) and not list(endpoint.glob("resp_*"))


def test_bridge_gaussian_matches_in_process(responder, rng):
    prior = random_prior(rng, (8, 8))
    endpoint = responder(gaussian_handler(prior))
    sampler = BridgeSampler(endpoint, timeout=5)
    v = rng.standard_normal((8, 8))
    for seed in range(5):
        got = sampler.sample(v, 0.4, make_rng(seed))
        child = int(make_rng(seed).integers(0, 2**63))
        assert np.array_equal(got, prior.sample(v, 0.4, make_rng(child)))


def test_bridge_request_format(tmp_path, rng):
    seen = {}

    def fake_responder():
        while not list(tmp_path.glob("req_*.meta")):
            time.sleep(0.001)
        meta = next(tmp_path.glob("req_*.meta"))
        seen["name"] = meta.name
        seen["text"] = meta.read_text()
        respond_pending(tmp_path, echo_handler)

    t = threading.Thread(target=fake_responder)
    t.start()
    y = rng.random((4, 4))
    BridgeSampler(tmp_path, timeout=5, measurement=y).sample(np.ones((4, 4)), 0.25, make_rng(0))
    t.join()
    assert seen["name"] == "req_00000001.meta"
    lines = dict(line.split("=", 1) for line in seen["text"].splitlines())
    assert float(lines["rho"]) == 0.25
    assert lines["measurement"].endswith("measurement.pgrd")
    assert int(lines["seed"]) >= 0


def test_bridge_timeout(tmp_path):
    sampler = BridgeSampler(tmp_path, timeout=0.3)
    start = time.monotonic()
    with pytest.raises(BridgeTimeout):
        sampler.sample(np.zeros((3, 3)), 0.1, make_rng(0))
    assert 0.27 <= time.monotonic() - start <= 0.33


def test_bridge_malformed_responses(responder):
    endpoint = responder(lambda v, rho, seed, meas: np.zeros((2, 2)))
    with pytest.raises(MalformedResponse):
        BridgeSampler(endpoint, timeout=5).sample(np.zeros((3, 3)), 0.1, make_rng(0))


def test_bridge_nan_response(responder):
    endpoint = responder(lambda v, rho, seed, meas: np.full(v.shape, np.nan))
    with pytest.raises(MalformedResponse):
        BridgeSampler(endpoint, timeout=5).sample(np.zeros((3, 3)), 0.1, make_rng(0))


def test_bridge_counter_is_monotone(tmp_path):
    write_pgrd(tmp_path / "resp_00000007.pgrd", np.zeros((1, 1)))
    assert BridgeSampler(tmp_path)._counter == 7


def test_bridge_missing_endpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        BridgeSampler(tmp_path / "absent")


def test_bridge_deterministic_responder(tmp_path, rng):
    prior = random_prior(rng, (5, 5))
    handler = gaussian_handler(prior)
    v = rng.standard_normal((5, 5))
    assert np.array_equal(handler(v, 0.2, 99, None), handler(v, 0.2, 99, None))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_dense_oracle_agrees_with_prior_posterior_on_delta_operator(seed):
    # white prior == identity-operator Gaussian problem
    r = np.random.default_rng(seed)
    s2, rho = r.uniform(0.1, 2.0), r.uniform(0.1, 2.0)
    v, mu = r.standard_normal((3, 3)), r.standard_normal((3, 3))
    post = GaussianPrior(mu, s2).posterior(v, rho)
    mean, cov = dense_oracle(delta_kernel((3, 3)).grid, mu, v, rho, np.sqrt(s2))
    np.testing.assert_allclose(post.mean, mean, atol=1e-10)
    np.testing.assert_allclose(post.covariance(), cov, atol=1e-10)
