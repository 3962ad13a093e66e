"""Partial-knowledge specifications of dynamical systems.

A DynamicsSpec tells the model which part of a system's state matrix is known
physics and which entries the unknown-dynamics learner may fill in. All
callables operate on torch tensors with arbitrary leading batch dimensions so
the same spec drives both single-trajectory rollouts and batched training.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import torch

from .errors import ConfigurationError, DisjointSupportError

__all__ = [
    "DynamicsSpec",
    "build_pendulum_spec",
    "build_sir_spec",
    "build_recovery_spec",
    "get_spec",
    "RECOVERY_KNOWN",
    "RECOVERY_MASK",
    "RECOVERY_TRUE_UNKNOWN",
]

MatrixBuilder = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def _as_binary(mask: torch.Tensor, name: str) -> torch.Tensor:
    mask = mask.to(torch.float64)
    if not torch.all((mask == 0.0) | (mask == 1.0)):
        raise ConfigurationError(f"{name} entries must be 0 or 1")
    return mask


@dataclass(frozen=True)
class DynamicsSpec:
    """Structure of one system: state augmentation, known matrix, masks.

    augment        maps base states z (..., state_dim) to extended states
                   (..., augmented_dim); the first state_dim components are z.
    known_matrix   (zbar, t) -> (..., d, d) known part of the state matrix,
                   differentiable in zbar.
    mask_A/mask_B  binary matrices selecting the learnable entries.
    unknown_factor_A  optional (zbar, t) -> (..., d, d) elementwise multipliers
                   applied to the masked learner output (partially known
                   entries whose known factor is reintroduced after masking).
    known_input    optional (zbar, t) -> (..., d, d_u) known input matrix.
    """

    name: str
    state_dim: int
    augmented_dim: int
    control_dim: int
    augment: Callable[[torch.Tensor], torch.Tensor]
    known_matrix: MatrixBuilder
    mask_A: torch.Tensor
    mask_B: torch.Tensor
    unknown_factor_A: Optional[MatrixBuilder] = None
    known_input: Optional[MatrixBuilder] = None

    def __post_init__(self) -> None:
        d, du = self.augmented_dim, self.control_dim
        object.__setattr__(self, "mask_A", _as_binary(self.mask_A, "mask_A"))
        object.__setattr__(self, "mask_B", _as_binary(self.mask_B, "mask_B"))
        if self.mask_A.shape != (d, d):
            raise ConfigurationError(
                f"mask_A must be {d}x{d}, got {tuple(self.mask_A.shape)}"
            )
        if self.mask_B.shape != (d, max(du, 1)) and self.mask_B.shape != (d, du):
            raise ConfigurationError(
                f"mask_B must be {d}x{du}, got {tuple(self.mask_B.shape)}"
            )
        self.validate_disjoint_support()

    def validate_disjoint_support(self, n_probes: int = 32, seed: int = 0) -> None:
        """Check that the known matrix is zero wherever the mask allows learning.

        The known builder is probed at seeded random extended states and times;
        any nonzero known entry under a mask-1 position raises.
        """
        gen = torch.Generator().manual_seed(seed)
        zbar = torch.randn(n_probes, self.augmented_dim, generator=gen, dtype=torch.float64)
        t = torch.randn(n_probes, generator=gen, dtype=torch.float64)
        known = self.known_matrix(zbar, t)
        overlap = (self.mask_A * known).abs().max().item()
        if overlap != 0.0:
            raise DisjointSupportError(
                f"spec '{self.name}': known matrix is nonzero at a masked "
                f"(learnable) entry, max |overlap| = {overlap:.3g}"
            )


def _pendulum_augment(z: torch.Tensor) -> torch.Tensor:
    theta = z[..., 0:1]
    omega = z[..., 1:2]
    return torch.cat([theta, omega, torch.sin(theta), torch.cos(theta)], dim=-1)


def _pendulum_known_matrix(zbar: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    # rows: theta' = omega; omega' fully unknown; s' = omega*c; c' = -omega*s
    omega = zbar[..., 1]
    k = zbar.new_zeros(zbar.shape[:-1] + (4, 4))
    k[..., 0, 1] = 1.0
    k[..., 2, 3] = omega
    k[..., 3, 2] = -omega
    return k


def build_pendulum_spec() -> DynamicsSpec:
    """Controlled damped pendulum with unknown second row and control column.

    Extended state (theta, omega, sin theta, cos theta); only the angular
    acceleration row is learnable, and the single control channel enters
    through that row as well.
    """
    mask_a = torch.zeros(4, 4, dtype=torch.float64)
    mask_a[1, :] = 1.0
    mask_b = torch.zeros(4, 1, dtype=torch.float64)
    mask_b[1, 0] = 1.0
    return DynamicsSpec(
        name="pendulum",
        state_dim=2,
        augmented_dim=4,
        control_dim=1,
        augment=_pendulum_augment,
        known_matrix=_pendulum_known_matrix,
        mask_A=mask_a,
        mask_B=mask_b,
    )


def _identity_augment(z: torch.Tensor) -> torch.Tensor:
    return z


def _zero_known_3(zbar: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    return zbar.new_zeros(zbar.shape[:-1] + (3, 3))


def _sir_unknown_factor(zbar: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    # Latent state is (S, I, R) as population fractions, so I/N is just I.
    i_frac = zbar[..., 1]
    f = zbar.new_ones(zbar.shape[:-1] + (3, 3))
    f[..., 0, 0] = -i_frac
    f[..., 1, 0] = i_frac
    return f


def build_sir_spec() -> DynamicsSpec:
    """SIR epidemic with unknown, possibly time-varying contact/removal rates.

    No state extension; the known matrix is zero. Learnable entries follow
    the partial-knowledge pattern: (S,S) and (I,S) carry the known -I/N and
    +I/N factors (applied after masking), (I,I), (I,R) and (R,I) are free.
    """
    mask_a = torch.tensor(
        [
            [1.0, 0.0, 0.0],
            [1.0, 1.0, 1.0],
            [0.0, 1.0, 0.0],
        ],
        dtype=torch.float64,
    )
    mask_b = torch.zeros(3, 0, dtype=torch.float64)
    return DynamicsSpec(
        name="sir",
        state_dim=3,
        augmented_dim=3,
        control_dim=0,
        augment=_identity_augment,
        known_matrix=_zero_known_3,
        mask_A=mask_a,
        mask_B=mask_b,
        unknown_factor_A=_sir_unknown_factor,
    )


# 4-dim linear benchmark used by the decomposition-recovery experiment and the
# miniature gradient checks. Known entries and learnable support are disjoint
# by construction; the "true" unknown entries generate the synthetic data.
RECOVERY_KNOWN = torch.tensor(
    [
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 0.5],
        [0.0, 0.0, 0.0, 1.0],
        [0.0, 0.0, 0.0, 0.0],
    ],
    dtype=torch.float64,
)

RECOVERY_MASK = torch.tensor(
    [
        [0.0, 0.0, 0.0, 0.0],
        [1.0, 1.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 0.0],
        [1.0, 0.0, 1.0, 0.0],
    ],
    dtype=torch.float64,
)

RECOVERY_TRUE_UNKNOWN = torch.tensor(
    [
        [0.0, 0.0, 0.0, 0.0],
        [-2.0, -0.6, 0.8, 0.0],
        [0.0, 0.0, 0.0, 0.0],
        [0.7, 0.0, -1.5, 0.0],
    ],
    dtype=torch.float64,
)


def build_recovery_spec(overlap: bool = False) -> DynamicsSpec:
    """4-dim linear system with constant known entries and 5 learnable entries.

    ``overlap=True`` deliberately violates the disjoint-support premise and
    must fail construction (negative test hook).
    """
    mask = RECOVERY_MASK.clone()
    if overlap:
        mask[0, 1] = 1.0  # collides with the known (0,1)=1 entry

    def known(zbar: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        shape = zbar.shape[:-1] + (4, 4)
        return RECOVERY_KNOWN.to(zbar).expand(shape).clone()

    return DynamicsSpec(
        name="linear4",
        state_dim=4,
        augmented_dim=4,
        control_dim=0,
        augment=_identity_augment,
        known_matrix=known,
        mask_A=mask,
        mask_B=torch.zeros(4, 0, dtype=torch.float64),
    )


_BUILDERS = {
    "pendulum": build_pendulum_spec,
    "sir": build_sir_spec,
    "linear4": build_recovery_spec,
}


def get_spec(name: str) -> DynamicsSpec:
    try:
        builder = _BUILDERS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown system '{name}', expected one of {sorted(_BUILDERS)}"
        ) from None
    return builder()
