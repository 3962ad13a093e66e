"""Training objective: reconstruction, step-wise KL, physics-state regularizer.

Reduction convention: sums over feature dimensions, means over timesteps and
batch, so the weights stay comparable across horizon lengths.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

__all__ = [
    "kl_gaussian_diag",
    "physics_state_reg",
    "chebyshev_state_reg",
    "cosine_state_reg",
    "REG_METRICS",
    "recon_loss",
    "total_loss",
    "LossBreakdown",
]

_EPS = 1e-12


def kl_gaussian_diag(
    q_mean: torch.Tensor,
    q_std: torch.Tensor,
    p_mean: torch.Tensor,
    p_std: torch.Tensor,
) -> torch.Tensor:
    """KL(q || p) for diagonal Gaussians, summed over the last dimension and
    averaged over all leading (time/batch) dimensions."""
    if torch.any(q_std <= 0) or torch.any(p_std <= 0):
        raise ValueError("standard deviations must be positive")
    var_ratio = (q_std / p_std) ** 2
    mean_term = ((q_mean - p_mean) / p_std) ** 2
    kl = 0.5 * (var_ratio + mean_term - 1.0 - torch.log(var_ratio))
    return kl.sum(dim=-1).mean()


def physics_state_reg(z_prior: torch.Tensor, z_post: torch.Tensor) -> torch.Tensor:
    """Mean squared Euclidean distance between prior and posterior samples."""
    _check_pair(z_prior, z_post)
    return ((z_prior - z_post) ** 2).sum(dim=-1).mean()


def chebyshev_state_reg(z_prior: torch.Tensor, z_post: torch.Tensor) -> torch.Tensor:
    """Mean max-abs (Chebyshev) distance; subgradient at ties."""
    _check_pair(z_prior, z_post)
    return (z_prior - z_post).abs().max(dim=-1).values.mean()


def cosine_state_reg(z_prior: torch.Tensor, z_post: torch.Tensor) -> torch.Tensor:
    """Mean cosine distance 1 - cos(z, z*); zero for identical sequences."""
    _check_pair(z_prior, z_post)
    dot = (z_prior * z_post).sum(dim=-1)
    norms = z_prior.norm(dim=-1) * z_post.norm(dim=-1)
    return (1.0 - (dot + _EPS) / (norms + _EPS)).mean()


def _check_pair(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"sequence shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


REG_METRICS = {
    "euclidean": physics_state_reg,
    "chebyshev": chebyshev_state_reg,
    "cosine": cosine_state_reg,
}


def recon_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Negative Gaussian log-likelihood with fixed unit scale, up to constants:
    squared error summed over observation dims, averaged over steps/batch."""
    if pred.shape != target.shape:
        raise ValueError(
            f"prediction shape {tuple(pred.shape)} != target {tuple(target.shape)}"
        )
    return ((pred - target) ** 2).sum(dim=-1).mean()


@dataclass
class LossBreakdown:
    recon: float
    kl: float
    reg: float
    total: float
    beta: float
    lambda_: float


def total_loss(
    recon: torch.Tensor,
    kl: torch.Tensor,
    reg: torch.Tensor,
    beta: float,
    lambda_: float,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Compose total = recon + beta*kl + lambda*reg; returns the scalar tensor
    for backprop plus a float breakdown for logging."""
    for name, term in (("recon", recon), ("kl", kl), ("reg", reg)):
        if not torch.isfinite(term):
            raise ValueError(f"non-finite {name} term: {term.item()}")
    total = recon + beta * kl + lambda_ * reg
    breakdown = LossBreakdown(
        recon=float(recon.detach()),
        kl=float(kl.detach()),
        reg=float(reg.detach()),
        total=float(total.detach()),
        beta=beta,
        lambda_=lambda_,
    )
    return total, breakdown
