import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from ccm_utilities.errors import NumericError, DimensionError, FormatError
from ccm_utilities.LinearReconstructor import choose_rank, fit_svd, reconstruct_linear, save_reconstructor, \
    load_reconstructor
from ccm_utilities.ForwardModel import make_forward_model, calibration_scan
from ccm_utilities.utilities import normalize_unit


def test_choose_rank():
    assert choose_rank([1.0], 'energy:0.99') == 1
    assert choose_rank([1.0, 1.0, 1.0, 1.0], 'energy:0.5') == 2
    assert choose_rank([3.0, 2.0, 1.0], 'fixed:2') == 2
    assert choose_rank([3.0, 2.0, 1.0], 'fixed:10') == 3
    with pytest.raises(ValueError):
        choose_rank([], 'energy:0.99')
    with pytest.raises(ValueError):
        choose_rank([1.0], 'energy:1.5')
    with pytest.raises(ValueError):
        choose_rank([1.0], 'median')


def test_choose_rank_geometric_decay():
    s = 0.5 ** np.arange(30)
    # energy of the first k values: (1 - 0.25^k) / (1 - 0.25^30)
    total = (1 - 0.25 ** 30) / 0.75
    expected = next(k for k in range(1, 31) if (1 - 0.25 ** k) / 0.75 >= 0.99 * total)
    assert expected == 4
    assert choose_rank(s, 'energy:0.99') == expected


def test_identity_and_rank_one():
    r = fit_svd(np.eye(16), 'energy:1.0')
    assert r.rank == 16
    y = np.random.default_rng(0).uniform(size=(4, 4))
    assert_allclose(reconstruct_linear(r, y), normalize_unit(y), atol=1e-12)

    rng = np.random.default_rng(1)
    u = rng.uniform(size=(9, 1))
    v = rng.uniform(size=(1, 9))
    assert fit_svd(u @ v, 'energy:0.01').rank == 1
    assert fit_svd(u @ v, 'energy:1.0').rank == 1


def test_full_rank_round_trip():
    rng = np.random.default_rng(2)
    a = rng.uniform(size=(256, 256)) + 16 * np.eye(256)
    assert np.linalg.cond(a) < 1e4
    x = rng.uniform(size=256)
    r = fit_svd(a, 'fixed:256')
    x_hat = reconstruct_linear(r, a @ x, normalize=False)
    assert np.linalg.norm(x_hat - x) / np.linalg.norm(x) < 1e-6
    assert_allclose(x_hat, np.linalg.solve(a, a @ x), rtol=1e-6, atol=1e-9)


def test_truncation_residual_is_monotone():
    a = np.random.default_rng(3).normal(size=(20, 16))
    y = a @ np.random.default_rng(4).normal(size=16)
    residuals = []
    for k in range(1, 17):
        x_hat = reconstruct_linear(fit_svd(a, 'fixed:%d' % k), y, normalize=False)
        residuals.append(np.linalg.norm(a @ x_hat - y))
    assert all(b <= a_ + 1e-9 for a_, b in zip(residuals, residuals[1:]))


def test_calibrated_reconstruction_of_a_forward_model():
    fm = make_forward_model(64, 64, seed=0, noise_sigma=0.0)
    _, a = calibration_scan(fm, 1)
    r = fit_svd(a, 'energy:1.0')
    x = np.zeros(64)
    x[[9, 27, 50]] = 1.0
    x_hat = reconstruct_linear(r, a @ x, normalize=False)
    assert np.linalg.norm(a @ x_hat - a @ x) < 1e-4 * np.linalg.norm(a @ x)
    assert reconstruct_linear(r, a @ x).shape == (8, 8)


def test_zero_measurement_and_errors():
    r = fit_svd(np.eye(16) * 2, 'energy:0.99')
    assert_array_equal(reconstruct_linear(r, np.zeros(16)), 0)
    with pytest.raises(DimensionError):
        reconstruct_linear(r, np.zeros(9))
    bad = np.eye(4)
    bad[0, 0] = np.nan
    with pytest.raises(NumericError):
        fit_svd(bad)
    with pytest.raises(ValueError):
        fit_svd(np.zeros((4, 4)))


def test_reconstructor_file_round_trip(tmp_path):
    a = np.random.default_rng(5).uniform(size=(16, 16))
    r = fit_svd(a, 'energy:0.9', layer=2)
    path = str(tmp_path / 'svd.ccml')
    save_reconstructor(r, path)
    back = load_reconstructor(path)
    assert back.rank == r.rank and back.layer == 2 and back.rank_policy == 'energy:0.9'
    y = np.random.default_rng(6).uniform(size=16)
    assert_array_equal(reconstruct_linear(back, y), reconstruct_linear(r, y))
    with open(path, 'r+b') as f:
        f.write(b'XXXX')
    with pytest.raises(FormatError):
        load_reconstructor(path)
