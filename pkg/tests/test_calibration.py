import numpy as np
import pytest
import scipy.linalg as sla

from spiritdiff.calibration import (
    CalibrationError,
    IllConditionedError,
    SpiritKernel,
    calibrate,
    calibration_residual,
    calibration_system,
    extract_acs,
    kernel_adjoint,
)
from spiritdiff.grid import SamplingMask, fft2c, inner
from spiritdiff.operators import SensitivityMaps, phi_kspace
from spiritdiff.simdata import default_phantom_spec, make_phantom, make_sensitivities


def centered_acs(n, a):
    keep = np.ones((n, n), bool)
    r0 = n // 2 - a // 2
    return SamplingMask(keep, (r0, r0 + a, r0, r0 + a))


@pytest.fixture(scope="module")
def phantom_kspace():
    ph = make_phantom(default_phantom_spec(64))
    s = make_sensitivities(4, 64, 64)
    return fft2c(s.expand(ph))


def normal_eq_oracle(acs, kh, kw, tik):
    """Weights from a dense Cholesky solve of (A^H A + tik^2 I) w = A^H b."""
    A_full = calibration_system(acs, kh, kw)
    nc = acs.shape[0]
    W = np.zeros((nc, nc * kh * kw), complex)
    for i in range(nc):
        col = (i * kh + kh // 2) * kw + kw // 2
        A = np.delete(A_full, col, axis=1)
        b = A_full[:, col]
        M = A.conj().T @ A + tik**2 * np.eye(A.shape[1])
        W[i] = np.insert(sla.cho_solve(sla.cho_factor(M), A.conj().T @ b), col, 0)
    return W.reshape(nc, nc, kh, kw)


def test_extract_acs_block():
    k = np.arange(2 * 32 * 32, dtype=complex).reshape(2, 32, 32)
    keep = np.zeros((32, 32), bool)
    keep[12:20] = True
    m = SamplingMask(keep, (12, 20, 0, 32))
    blk = extract_acs(k, m)
    assert blk.shape == (2, 8, 32)
    assert np.array_equal(blk, k[:, 12:20, :])


def test_extract_acs_too_small():
    keep = np.zeros((32, 32), bool)
    keep[14:18] = True
    with pytest.raises(CalibrationError, match="too small"):
        extract_acs(np.zeros((1, 32, 32)), SamplingMask(keep, (14, 18, 0, 32)))


def test_identical_coils_exact():
    rng = np.random.default_rng(0)
    img = np.outer(np.hanning(32), np.hanning(32)) * (1 + rng.random((32, 32)))
    s = SensitivityMaps.from_raw(np.ones((3, 32, 32)))
    acs = extract_acs(fft2c(s.expand(img)), centered_acs(32, 16), (3, 3))
    with pytest.raises(IllConditionedError):
        calibrate(acs, 3, 3, tik=0.0)  # duplicated columns
    tik = 1e-8 * np.linalg.norm(calibration_system(acs, 3, 3))
    ker = calibrate(acs, 3, 3, tik=tik)
    assert calibration_residual(ker, acs) < 1e-6
    ref = normal_eq_oracle(acs, 3, 3, tik)
    assert calibration_residual(SpiritKernel(ref), acs) < 1e-6


def test_phantom_four_coils_matches_oracle(phantom_kspace):
    acs = extract_acs(phantom_kspace, centered_acs(64, 24))
    tik = 0.01 * np.linalg.norm(calibration_system(acs, 5, 5))
    ker = calibrate(acs, 5, 5, tik=tik)
    ref = normal_eq_oracle(acs, 5, 5, tik)
    assert np.linalg.norm(ker.weights - ref) <= 1e-8 * np.linalg.norm(ref)
    assert calibration_residual(ker, acs) < 0.05
    # default relative regularization is the same 0.01 * ||A||_F
    assert np.allclose(calibrate(acs).weights, ker.weights, rtol=0, atol=1e-12)


def test_self_center_tap_zero(phantom_kspace):
    ker = calibrate(extract_acs(phantom_kspace, centered_acs(64, 16)), lambda_rel=1e-4)
    for i in range(ker.ncoils):
        assert ker.weights[i, i, 2, 2] == 0


def test_regularization_shrinks_weights(phantom_kspace):
    acs = extract_acs(phantom_kspace, centered_acs(64, 16), (3, 3))
    base = np.linalg.norm(calibration_system(acs, 3, 3))
    norms = [np.linalg.norm(calibrate(acs, 3, 3, tik=f * base).weights)
             for f in (1e-4, 1e-3, 1e-2, 1e-1, 1, 10, 1e3)]
    assert all(b < a for a, b in zip(norms, norms[1:]))
    assert norms[-1] < 1e-3 * norms[0]


def test_heldout_residual_nonincreasing_in_acs(phantom_kspace):
    # scored on one fixed central block so every kernel answers the same question
    held = extract_acs(phantom_kspace, centered_acs(64, 48))
    for tik in (1e-3, 1.0):
        res = [calibration_residual(calibrate(extract_acs(phantom_kspace, centered_acs(64, n)),
                                              tik=tik), held)
               for n in (16, 20, 24, 28, 32, 40)]
        assert all(b <= a * (1 + 1e-9) for a, b in zip(res, res[1:])), res


def test_calibrate_errors():
    with pytest.raises(CalibrationError, match="odd"):
        calibrate(np.zeros((1, 10, 10)), 4, 5)
    with pytest.raises(CalibrationError, match="unknowns"):
        calibrate(np.ones((4, 6, 6)), 5, 5)
    with pytest.raises(CalibrationError, match="non-negative"):
        calibrate(np.ones((1, 12, 12)), 3, 3, tik=-1.0)


def test_adjoint_involution_and_zero(rng):
    w = rng.standard_normal((3, 3, 5, 3)) + 1j * rng.standard_normal((3, 3, 5, 3))
    w[np.arange(3), np.arange(3), 2, 1] = 0
    ker = SpiritKernel(w)
    assert np.array_equal(kernel_adjoint(kernel_adjoint(ker)).weights, ker.weights)
    assert not kernel_adjoint(SpiritKernel.zeros(3)).weights.any()


def test_adjoint_inner_product(phantom_kspace, rand_c):
    ker = calibrate(extract_acs(phantom_kspace, centered_acs(64, 24)), lambda_rel=1e-4)
    adj = kernel_adjoint(ker)
    a, b = rand_c(4, 64, 64), rand_c(4, 64, 64)
    lhs, rhs = inner(phi_kspace(ker, a), b), inner(a, phi_kspace(adj, b))
    assert abs(lhs - rhs) <= 1e-10 * abs(lhs)
