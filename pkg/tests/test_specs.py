import pytest
import torch

from physsm.errors import ConfigurationError, DisjointSupportError
from physsm.specs import (
    RECOVERY_KNOWN,
    RECOVERY_MASK,
    build_pendulum_spec,
    build_recovery_spec,
    build_sir_spec,
    get_spec,
)


class TestPendulumSpec:
    def test_augmentation(self):
        spec = build_pendulum_spec()
        z = torch.tensor([0.3, -1.1], dtype=torch.float64)
        zbar = spec.augment(z)
        assert zbar.shape == (4,)
        assert torch.allclose(zbar[:2], z)
        assert zbar[2] == pytest.approx(float(torch.sin(z[0])))
        assert zbar[3] == pytest.approx(float(torch.cos(z[0])))

    def test_known_matrix_rotation_rows_track_omega(self):
        spec = build_pendulum_spec()
        zbar = spec.augment(torch.tensor([0.1, 2.0], dtype=torch.float64))
        k = spec.known_matrix(zbar, torch.tensor(0.0))
        assert torch.equal(k[2], torch.tensor([0.0, 0.0, 0.0, 2.0], dtype=torch.float64))
        assert torch.equal(k[3], torch.tensor([0.0, 0.0, -2.0, 0.0], dtype=torch.float64))
        assert torch.equal(k[0], torch.tensor([0.0, 1.0, 0.0, 0.0], dtype=torch.float64))
        assert torch.all(k[1] == 0)

    def test_mask_rows(self):
        spec = build_pendulum_spec()
        assert torch.all(spec.mask_A[0] == 0)  # theta' = omega fully known
        assert torch.all(spec.mask_A[1] == 1)
        assert torch.all(spec.mask_A[2:] == 0)
        assert spec.mask_B.squeeze(-1).tolist() == [0.0, 1.0, 0.0, 0.0]

    def test_disjoint_support_product(self):
        spec = build_pendulum_spec()
        gen = torch.Generator().manual_seed(4)
        zbar = torch.randn(10, 4, generator=gen, dtype=torch.float64)
        t = torch.randn(10, generator=gen, dtype=torch.float64)
        overlap = spec.mask_A * spec.known_matrix(zbar, t)
        assert torch.all(overlap == 0)

    def test_batched_known_matrix(self):
        spec = build_pendulum_spec()
        zbar = torch.randn(3, 5, 4, dtype=torch.float64)
        k = spec.known_matrix(zbar, torch.zeros(3, 5, dtype=torch.float64))
        assert k.shape == (3, 5, 4, 4)
        assert torch.allclose(k[..., 2, 3], zbar[..., 1])


class TestSirSpec:
    def test_mask_pattern(self):
        spec = build_sir_spec()
        expected = [
            [1.0, 0.0, 0.0],
            [1.0, 1.0, 1.0],
            [0.0, 1.0, 0.0],
        ]
        assert spec.mask_A.tolist() == expected
        # no direct S <- I flow outside the infection term
        assert spec.mask_A[0, 1] == 0
        # removal rate is unknown
        assert spec.mask_A[2, 1] == 1

    def test_known_matrix_zero(self):
        spec = build_sir_spec()
        zbar = torch.rand(6, 3, dtype=torch.float64)
        assert torch.all(spec.known_matrix(zbar, torch.zeros(6)) == 0)

    def test_factor_vanishes_without_infections(self):
        spec = build_sir_spec()
        zbar = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
        f = spec.unknown_factor_A(zbar, torch.tensor(0.0))
        raw = torch.ones(3, 3, dtype=torch.float64)
        contribution = f * (spec.mask_A * raw)
        assert torch.all(contribution[:, 0] == 0)

    def test_factor_signs(self):
        spec = build_sir_spec()
        zbar = torch.tensor([0.7, 0.2, 0.1], dtype=torch.float64)
        f = spec.unknown_factor_A(zbar, torch.tensor(0.0))
        assert f[0, 0] == pytest.approx(-0.2)
        assert f[1, 0] == pytest.approx(0.2)
        assert f[1, 1] == 1.0 and f[2, 1] == 1.0


class TestRecoverySpec:
    def test_supports_are_disjoint(self):
        assert torch.all(RECOVERY_MASK * RECOVERY_KNOWN == 0)
        build_recovery_spec()  # validates at construction

    def test_overlap_fails_at_build_time(self):
        with pytest.raises(DisjointSupportError):
            build_recovery_spec(overlap=True)


def test_get_spec_unknown_name():
    with pytest.raises(ConfigurationError, match="unknown system"):
        get_spec("lorenz")


def test_masks_are_binary():
    for name in ("pendulum", "sir", "linear4"):
        spec = get_spec(name)
        assert torch.all((spec.mask_A == 0) | (spec.mask_A == 1))
