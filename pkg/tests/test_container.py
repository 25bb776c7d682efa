import numpy as np
import pytest

from spiritdiff.calibration import SpiritKernel, calibrate, extract_acs
from spiritdiff.container import (
    Container,
    ContainerError,
    ContainerFormatError,
    ContainerShapeError,
    ContainerTruncatedError,
    ContainerVersionError,
    from_bytes,
    pack,
    read_container,
    to_bytes,
    write_container,
)
from spiritdiff.grid import SamplingMask, crandn, fft2c, ifft2c
from spiritdiff.operators import phi_image, phi_kspace
from spiritdiff.scores import GaussianPrior, LinearScoreModel
from spiritdiff.simdata import make_mask, make_sensitivities


def test_roundtrip_coil_image_bit_exact(tmp_path, rng):
    x = crandn(rng, (4, 16, 12))
    x[0, 0, 0] = -0.0 + 1e-310j  # signed zero and a subnormal survive
    write_container(tmp_path / "x.spd", x, "coil_image", {"note": "r"})
    c = read_container(tmp_path / "x.spd")
    assert c.role == "coil_image" and c.meta == {"note": "r"}
    assert c.data.tobytes() == x.tobytes()


def test_roundtrip_typed_objects(tmp_path, rng):
    m = make_mask(32, 32, 3, 8)
    s = make_sensitivities(3, 32, 32)
    ker = SpiritKernel(crandn(rng, (3, 3, 5, 5)) * (1 - np.eye(3)[:, :, None, None] *
                                                   (np.arange(25).reshape(5, 5) == 12)))
    prior = GaussianPrior(crandn(rng, (3, 32, 32)), 0.25)
    model = LinearScoreModel(rng.standard_normal(10), rng.standard_normal(10),
                             crandn(rng, (3, 32, 32)), 1e-3, 1.0)
    for name, obj in [("m", m), ("s", s), ("k", ker), ("p", prior), ("l", model)]:
        write_container(tmp_path / name, obj)
    m2 = read_container(tmp_path / "m", "mask").to_object()
    assert np.array_equal(m2.keep, m.keep) and m2.acs == m.acs
    s2 = read_container(tmp_path / "s", "maps").to_object()
    assert np.array_equal(s2.maps, s.maps) and np.array_equal(s2.norm, s.norm)
    assert np.array_equal(read_container(tmp_path / "k").to_object().weights, ker.weights)
    p2 = read_container(tmp_path / "p").to_object()
    assert p2.var == prior.var and np.array_equal(p2.mean, prior.mean)
    l2 = read_container(tmp_path / "l").to_object()
    assert np.array_equal(l2.a, model.a) and np.array_equal(l2.mean_est, model.mean_est)


def test_kernel_from_calibration_usable_by_operators(tmp_path, rng):
    s = make_sensitivities(2, 32, 32)
    k = fft2c(s.expand(np.outer(np.hanning(32), np.hanning(32))))
    ker = calibrate(extract_acs(k, SamplingMask.full(32, 32)))
    write_container(tmp_path / "kernel.spd", ker)
    back = read_container(tmp_path / "kernel.spd", "kernel").to_object()
    z = crandn(rng, (2, 32, 32))
    assert np.array_equal(phi_kspace(back, z), phi_kspace(ker, z))
    assert np.allclose(phi_image(back, ifft2c(z)), ifft2c(phi_kspace(ker, z)), atol=1e-12)


def test_header_is_text_with_version(rng):
    raw = to_bytes(pack(crandn(rng, (2, 3)), "image"))
    first, second, _ = raw.split(b"\n", 2)
    assert first == b"SPIRITDIFF-CONTAINER 1"
    assert b'"role":"image"' in second and b'"shape":[2,3]' in second
    assert len(raw) - len(first) - len(second) - 2 == 16 * 6


def test_payload_little_endian(rng):
    raw = to_bytes(Container("image", np.array([[1.5 - 2j]])))
    assert raw.endswith(np.array([1.5, -2.0], dtype="<f8").tobytes())


def test_version_mismatch(rng):
    raw = to_bytes(pack(crandn(rng, (2, 2)), "image")).replace(b"CONTAINER 1", b"CONTAINER 7", 1)
    with pytest.raises(ContainerVersionError):
        from_bytes(raw)


def test_shape_length_mismatch(rng):
    raw = to_bytes(pack(crandn(rng, (2, 2)), "image"))
    with pytest.raises(ContainerShapeError):
        from_bytes(raw.replace(b'"shape":[2,2]', b'"shape":[2,3]'))
    with pytest.raises(ContainerShapeError):
        from_bytes(raw + b"\x00" * 16)


def test_truncated(rng):
    raw = to_bytes(pack(crandn(rng, (4, 4)), "image"))
    with pytest.raises(ContainerTruncatedError):
        from_bytes(raw[:-5])
    with pytest.raises(ContainerTruncatedError):
        from_bytes(raw[:30])


def test_error_classes_distinct():
    classes = {ContainerVersionError, ContainerShapeError, ContainerTruncatedError, ContainerFormatError}
    assert len(classes) == 4 and all(issubclass(c, ContainerError) for c in classes)
    for a in classes:
        for b in classes - {a}:
            assert not issubclass(a, b)


def test_bad_magic_and_role(tmp_path, rng):
    with pytest.raises(ContainerFormatError):
        from_bytes(b"P5\n2 2\n255\n....")
    with pytest.raises(ContainerError):
        to_bytes(Container("banana", np.zeros(2)))
    write_container(tmp_path / "x", crandn(rng, (2, 2)), "image")
    with pytest.raises(ContainerFormatError, match="expected"):
        read_container(tmp_path / "x", "kernel")
    with pytest.raises(ContainerError):
        pack(np.zeros(3))
