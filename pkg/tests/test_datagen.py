import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prism.datagen import (
    generate_motion_kernel,
    generate_texture_image,
    learn_kernel_prior,
    learn_texture_prior,
    load_instance,
    make_instance,
    motion_trajectory,
    radial_power,
    rasterize_path,
    save_instance,
)
from prism.errors import BadSupport
from prism.forward import ForwardModel, support_mask
from prism.grid import fft2, frequency_radius, make_rng


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([3, 5, 7, 15]), st.floats(0.0, 1.0))
def test_kernels_are_normalized(seed, support, intensity):
    k = generate_motion_kernel((32, 32), support, intensity, make_rng(seed))
    assert k.normalized and k.grid.min() >= 0
    assert abs(k.grid.sum() - 1.0) <= 1e-9
    assert np.all(k.grid[~support_mask((32, 32), support)] == 0)


def test_kernel_determinism():
    a = generate_motion_kernel((32, 32), 9, 0.5, make_rng(3))
    b = generate_motion_kernel((32, 32), 9, 0.5, make_rng(3))
    assert a.grid.tobytes() == b.grid.tobytes()


@pytest.mark.parametrize("support", [1, 2, 4, 17])
def test_bad_support(support):
    with pytest.raises(BadSupport):
        generate_motion_kernel((32, 32), support, 0.5, make_rng(0))


def test_straight_trajectory_at_zero_intensity():
    for seed in range(100):
        path = motion_trajectory(64, 0.0, make_rng(seed))
        length = np.linalg.norm(np.diff(path, axis=0), axis=1).sum()
        assert np.linalg.norm(np.diff(path, n=2, axis=0)) < 0.1 * length


def test_trajectory_curvature_grows_with_intensity():
    def curvature(intensity):
        return np.mean([np.linalg.norm(np.diff(motion_trajectory(64, intensity, make_rng(s)), n=2, axis=0))
                        for s in range(100)])

    assert curvature(0.0) < curvature(0.3) < curvature(1.0)


def test_rasterize_conserves_mass():
    path = motion_trajectory(64, 0.7, make_rng(1))
    canvas = rasterize_path(path, 9)
    assert canvas.min() >= 0
    # bilinear weights sum to one per resampled point
    assert canvas.sum() == pytest.approx(round(canvas.sum()), abs=1e-9)


def test_texture_range_and_determinism():
    a = generate_texture_image((32, 24), 2.0, make_rng(0))
    assert a.min() == 0.0 and a.max() == 1.0
    assert np.array_equal(a, generate_texture_image((32, 24), 2.0, make_rng(0)))
    with pytest.raises(ValueError):
        generate_texture_image((8, 8), 4.5, make_rng(0))


def ensemble_power(slope, n=100, shape=(64, 64)):
    imgs = [generate_texture_image(shape, slope, make_rng(s)) for s in range(n)]
    return np.mean([np.abs(fft2(g - g.mean())) ** 2 for g in imgs], axis=0)


def test_white_texture_is_flat():
    power = ensemble_power(0.0)[frequency_radius((64, 64)) > 0]
    flatness = np.exp(np.mean(np.log(power))) / np.mean(power)
    assert flatness > 0.9


@pytest.mark.parametrize("slope", [1.0, 2.0, 3.0])
def test_texture_slope_regression(slope):
    power = ensemble_power(slope)
    r = frequency_radius((64, 64))
    mask = r > 0
    fitted = -np.polyfit(np.log1p(r[mask]), np.log(power[mask]), 1)[0]
    assert abs(fitted - slope) < 0.1 * slope


def test_radial_power_decreases():
    img = generate_texture_image((64, 64), 3.0, make_rng(2))
    _, p = radial_power(img)
    assert p[0] > p[10] > p[-1]


def test_instance_noise_level():
    inst = make_instance(64, kernel_support=9, sigma=0.05, seed=4)
    resid = inst.y - ForwardModel(inst.truth_kernel).apply(inst.truth_x)
    assert 0.045 <= np.linalg.norm(resid) / 64 <= 0.055


def test_noiseless_instance():
    inst = make_instance(32, kernel_support=5, sigma=0.0, seed=1)
    assert np.array_equal(inst.y, ForwardModel(inst.truth_kernel).apply(inst.truth_x))


def test_instance_regeneration_bit_exact(tmp_path):
    inst = make_instance(32, kernel_support=5, sigma=0.02, seed=9)
    again = make_instance(32, kernel_support=5, sigma=0.02, seed=9)
    assert inst.y.tobytes() == again.y.tobytes()
    # from stored truth, kernel, sigma and seed
    regen = make_instance(image=inst.truth_x, kernel=inst.truth_kernel, sigma=inst.noise_sigma, seed=inst.seed)
    assert regen.y.tobytes() == inst.y.tobytes()
    save_instance(inst, tmp_path / "inst")
    loaded = load_instance(tmp_path / "inst")
    assert loaded.y.tobytes() == inst.y.tobytes()
    assert loaded.truth_kernel.grid.tobytes() == inst.truth_kernel.grid.tobytes()
    assert loaded.truth_kernel.normalized and loaded.truth_kernel.support == (5, 5)
    assert loaded.noise_sigma == inst.noise_sigma and loaded.seed == 9


def test_supplied_image():
    img = np.random.default_rng(0).random((20, 24))
    inst = make_instance(image=img, kernel_support=5, sigma=0.01, seed=2)
    assert inst.y.shape == (20, 24) and inst.provenance["image"] == "supplied"


def test_learned_priors():
    tp = learn_texture_prior((16, 16), 2.0, n_images=64)
    assert 0.3 < tp.mean.mean() < 0.7
    kp = learn_kernel_prior((16, 16), 5, n_kernels=64)
    assert kp.mean.sum() == pytest.approx(1.0)
    assert np.all(kp.mean[~support_mask((16, 16), 5)] == 0)
