"""Sequential VAE with a physics-informed latent transition.

The encoder turns observations into per-step Gaussian posteriors with memory;
the transition (physics unit or a purely data-driven stack for the ablation)
produces the per-step physics prior; the decoder maps latents back to
observation space. Everything runs in float64 on (batch, time, feature)
tensors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from .specs import DynamicsSpec
from .ssm import DTYPE, SSMStack
from .unit import PhySSMUnit, UnknownDynamicsLearner

__all__ = [
    "GaussianSeq",
    "reparameterize",
    "SequentialEncoder",
    "Decoder",
    "PhysicsTransition",
    "DataDrivenTransition",
    "PhySSM",
    "ModelOutputs",
    "build_model",
]

LOG_STD_MIN = -6.0
LOG_STD_MAX = 2.0


@dataclass
class GaussianSeq:
    """Per-step diagonal Gaussians: means/stds (..., T, d), times (..., T)."""

    means: torch.Tensor
    stds: torch.Tensor
    times: torch.Tensor

    def __post_init__(self) -> None:
        if self.means.shape != self.stds.shape:
            raise ValueError("means and stds must share a shape")
        if self.means.shape[:-1] != self.times.shape:
            raise ValueError("times must match the step dimensions")


def _sample(
    mean: torch.Tensor, std: torch.Tensor, generator: Optional[torch.Generator]
) -> torch.Tensor:
    eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
    return mean + std * eps


def reparameterize(gauss: GaussianSeq, seed: int) -> torch.Tensor:
    """Draw mean + std * eps per step, deterministic for a given seed."""
    gen = torch.Generator().manual_seed(seed)
    return _sample(gauss.means, gauss.stds, gen)


def _mlp(in_dim: int, hidden: int, out_dim: int, n_layers: int) -> nn.Sequential:
    dims = [in_dim] + [hidden] * max(n_layers - 1, 0) + [out_dim]
    layers: list[nn.Module] = []
    for k in range(len(dims) - 1):
        layers.append(nn.Linear(dims[k], dims[k + 1], dtype=DTYPE))
        if k < len(dims) - 2:
            layers.append(nn.GELU())
    return nn.Sequential(*layers)


class GaussianHead(nn.Module):
    """Linear map to (mean, log-std) with the log-std clamped to a finite range."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.mean = nn.Linear(in_dim, out_dim, dtype=DTYPE)
        self.log_std = nn.Linear(in_dim, out_dim, dtype=DTYPE)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mu = self.mean(x)
        log_std = torch.clamp(self.log_std(x), LOG_STD_MIN, LOG_STD_MAX)
        return mu, torch.exp(log_std)


class SequentialEncoder(nn.Module):
    """Causal posterior estimator: pre-net MLP, SSM memory, Gaussian head.

    The Gaussian at step i depends only on observations up to and including i.
    """

    def __init__(
        self,
        obs_dim: int,
        latent_dim: int,
        mlp_hidden: int = 64,
        mlp_layers: int = 2,
        ssm_width: int = 32,
        ssm_layers: int = 2,
        delta_mode: str = "raw",
    ):
        super().__init__()
        self.obs_dim = obs_dim
        self.latent_dim = latent_dim
        self.prenet = _mlp(obs_dim, mlp_hidden, mlp_hidden, mlp_layers)
        self.ssm = SSMStack(mlp_hidden, ssm_width, ssm_layers, delta_mode=delta_mode)
        self.head = GaussianHead(ssm_width, latent_dim)

    def forward(
        self, obs: torch.Tensor, deltas: torch.Tensor, times: torch.Tensor
    ) -> GaussianSeq:
        if obs.shape[-1] != self.obs_dim:
            raise ValueError(f"observation dim {obs.shape[-1]} != {self.obs_dim}")
        feats = self.ssm(self.prenet(obs), deltas)
        mu, std = self.head(feats)
        if not torch.isfinite(mu).all():
            bad = torch.nonzero(~torch.isfinite(mu).all(dim=-1))
            step = int(bad[0, -1]) if bad.numel() else -1
            raise FloatingPointError(f"non-finite encoder output at step {step}")
        return GaussianSeq(means=mu, stds=std, times=times)


class Decoder(nn.Module):
    """MLP emission: latent state -> observation mean (unit-scale Gaussian)."""

    def __init__(self, latent_dim: int, obs_dim: int, hidden: int = 64, n_layers: int = 2):
        super().__init__()
        self.net = _mlp(latent_dim, hidden, obs_dim, n_layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z)


class PhysicsTransition(nn.Module):
    """Latent prior from the physics unit plus a linear Gaussian map."""

    def __init__(self, spec: DynamicsSpec, latent_dim: int, **learner_kwargs):
        super().__init__()
        self.spec = spec
        self.unit = PhySSMUnit(
            spec,
            UnknownDynamicsLearner(spec.augmented_dim, spec.control_dim, **learner_kwargs),
        )
        self.head = GaussianHead(spec.augmented_dim, latent_dim)

    def prior_predict(self, state, z_prev, u, delta):
        """One conditioned step: re-anchor on z_prev, advance, map to (mu, std)."""
        state = self.unit.reanchor(state, z_prev)
        state = self.unit.step(state, u, delta)
        mu, std = self.head(state.zbar)
        return state, mu, std

    def window(self, z_post, controls, times, gaps):
        """Priors at steps 1..T-1, each anchored on the previous posterior.

        z_post: (B, T, d_z); controls: (B, >=T-1, d_u); gaps: (B, T-1).
        Returns (mu, std) of shape (B, T-1, d_z) and the carry state.
        """
        T = z_post.shape[-2]
        anchors = self.spec.augment(z_post[..., : T - 1, :])
        hidden = self.unit.learner.init_hidden(z_post.shape[:-2])
        z_next, hidden = self.unit.window_steps(
            hidden,
            anchors,
            controls[..., : T - 1, :],
            times[..., : T - 1],
            gaps[..., : T - 1],
        )
        mu, std = self.head(z_next)
        carry = {"hidden": hidden, "t": times[..., T - 1]}
        return mu, std, carry

    def forecast(self, carry, z_last, controls, deltas):
        """Autoregressive rollout from the last posterior sample."""
        from .unit import PhySSMState

        state = PhySSMState(
            zbar=self.spec.augment(z_last), t=carry["t"], learner_hidden=carry["hidden"]
        )
        zbar_seq, state = self.unit.rollout(state, controls, deltas)
        mu, std = self.head(zbar_seq)
        return mu, std, state

    def consistency_gap(self, state) -> torch.Tensor:
        """Drift of the extended components away from augment(base) (diagnostic)."""
        expected = self.spec.augment(state.zbar[..., : self.spec.state_dim])
        return (state.zbar - expected).abs().amax(dim=-1)


class DataDrivenTransition(nn.Module):
    """Purely learned latent transition (the no-physics ablation).

    Same interface as PhysicsTransition: within the window each step consumes
    the previous posterior sample; forecasting feeds back the predicted mean.
    """

    def __init__(
        self,
        latent_dim: int,
        control_dim: int,
        width: int = 32,
        n_layers: int = 2,
        delta_mode: str = "raw",
    ):
        super().__init__()
        self.latent_dim = latent_dim
        self.control_dim = control_dim
        self.stack = SSMStack(latent_dim + control_dim, width, n_layers, delta_mode=delta_mode)
        self.head = GaussianHead(width, latent_dim)

    def _join(self, z, u):
        return torch.cat([z, u], dim=-1) if self.control_dim > 0 else z

    def prior_predict(self, state, z_prev, u, delta):
        hidden, y = self.stack.step(state["hidden"], self._join(z_prev, u), delta)
        mu, std = self.head(y)
        return {"hidden": hidden, "t": state["t"] + delta}, mu, std

    def window(self, z_post, controls, times, gaps):
        T = z_post.shape[-2]
        x = self._join(z_post[..., : T - 1, :], controls[..., : T - 1, :])
        feats, hidden = self.stack(x, gaps[..., : T - 1], return_hidden=True)
        mu, std = self.head(feats)
        carry = {"hidden": hidden, "t": times[..., T - 1]}
        return mu, std, carry

    def forecast(self, carry, z_last, controls, deltas):
        hidden = carry["hidden"]
        z = z_last
        L = deltas.shape[-1]
        table = self.stack.precompute(deltas) if L else None
        mus, stds = [], []
        for j in range(L):
            u = controls[..., j, :] if self.control_dim > 0 else None
            hidden, y = self.stack.step_indexed(hidden, self._join(z, u), table, j)
            mu, std = self.head(y)
            mus.append(mu)
            stds.append(std)
            z = mu
        if L == 0:
            empty = z_last.new_zeros(z_last.shape[:-1] + (0, self.latent_dim))
            return empty, empty.clone(), {"hidden": hidden}
        return torch.stack(mus, dim=-2), torch.stack(stds, dim=-2), {"hidden": hidden}

    def consistency_gap(self, state) -> torch.Tensor:
        return torch.zeros((), dtype=DTYPE)


@dataclass
class ModelOutputs:
    posterior: GaussianSeq
    prior: GaussianSeq
    z_post: torch.Tensor
    z_prior: torch.Tensor
    recon: torch.Tensor
    extrap: torch.Tensor
    extrap_prior: Optional[GaussianSeq]
    consistency_gap: torch.Tensor


class PhySSM(nn.Module):
    """Encoder + latent transition + decoder over one observation window."""

    def __init__(
        self,
        spec: DynamicsSpec,
        encoder: SequentialEncoder,
        transition: nn.Module,
        decoder: nn.Module,
    ):
        super().__init__()
        self.spec = spec
        self.encoder = encoder
        self.transition = transition
        self.decoder = decoder
        self.latent_dim = encoder.latent_dim

    def forward_full(
        self,
        obs: torch.Tensor,       # (B, T, d_x) observation window
        controls: torch.Tensor,  # (B, T + l, d_u)
        times: torch.Tensor,     # (B, T + l)
        horizon: int,
        dt_nominal: float,
        sample: bool = True,
        generator: Optional[torch.Generator] = None,
    ) -> ModelOutputs:
        """Posterior, physics prior, reconstruction and extrapolation.

        The prior at the first step is standard normal (no earlier state
        exists); within the window the transition is re-anchored on the
        posterior each step; beyond it the latent rolls out autoregressively
        from the last posterior state.
        """
        B, T, _ = obs.shape
        l = horizon
        if times.shape[-1] < T + l:
            raise ValueError(f"need {T + l} timestamps, got {times.shape[-1]}")
        gaps = times[..., 1:] - times[..., :-1]
        first = torch.full_like(times[..., :1], dt_nominal)
        deltas_window = torch.cat([first, gaps[..., : T - 1]], dim=-1)

        posterior = self.encoder(obs, deltas_window, times[..., :T])
        z_post = (
            _sample(posterior.means, posterior.stds, generator)
            if sample
            else posterior.means
        )

        mu_w, std_w, carry = self.transition.window(z_post, controls, times, gaps)
        prior = GaussianSeq(
            means=torch.cat([torch.zeros_like(z_post[..., :1, :]), mu_w], dim=-2),
            stds=torch.cat([torch.ones_like(z_post[..., :1, :]), std_w], dim=-2),
            times=times[..., :T],
        )
        z_prior = _sample(prior.means, prior.stds, generator) if sample else prior.means

        recon = self.decoder(z_post)

        if l > 0:
            mu_e, std_e, final_state = self.transition.forecast(
                carry,
                z_post[..., T - 1, :],
                controls[..., T - 1 : T - 1 + l, :],
                gaps[..., T - 1 : T - 1 + l],
            )
            extrap_prior = GaussianSeq(
                means=mu_e, stds=std_e, times=times[..., T : T + l]
            )
            extrap = self.decoder(mu_e)
            gap_diag = (
                self.transition.consistency_gap(final_state)
                if hasattr(final_state, "zbar")
                else torch.zeros((), dtype=obs.dtype)
            )
        else:
            extrap_prior = None
            extrap = obs.new_zeros((B, 0, obs.shape[-1]))
            gap_diag = torch.zeros((), dtype=obs.dtype)
        return ModelOutputs(
            posterior=posterior,
            prior=prior,
            z_post=z_post,
            z_prior=z_prior,
            recon=recon,
            extrap=extrap,
            extrap_prior=extrap_prior,
            consistency_gap=gap_diag,
        )


def build_model(
    spec: DynamicsSpec,
    obs_dim: int,
    unit: str = "physics",
    enc_mlp_hidden: int = 64,
    enc_mlp_layers: int = 2,
    enc_ssm_width: int = 32,
    enc_ssm_layers: int = 2,
    learner_width: int = 32,
    learner_layers: int = 2,
    learner_b_width: int = 16,
    learner_b_layers: int = 1,
    dd_width: int = 32,
    dd_layers: int = 2,
    dec_hidden: int = 64,
    dec_layers: int = 2,
    delta_mode: str = "raw",
    seed: int = 0,
) -> PhySSM:
    """Construct the full model (or its data-driven ablation) deterministically."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        encoder = SequentialEncoder(
            obs_dim,
            spec.state_dim,
            mlp_hidden=enc_mlp_hidden,
            mlp_layers=enc_mlp_layers,
            ssm_width=enc_ssm_width,
            ssm_layers=enc_ssm_layers,
            delta_mode=delta_mode,
        )
        if unit == "physics":
            transition: nn.Module = PhysicsTransition(
                spec,
                spec.state_dim,
                width=learner_width,
                n_layers=learner_layers,
                width_b=learner_b_width,
                n_layers_b=learner_b_layers,
                delta_mode=delta_mode,
            )
        elif unit == "datadriven":
            transition = DataDrivenTransition(
                spec.state_dim,
                spec.control_dim,
                width=dd_width,
                n_layers=dd_layers,
                delta_mode=delta_mode,
            )
        else:
            raise ValueError(f"unknown unit kind '{unit}'")
        decoder = Decoder(spec.state_dim, obs_dim, hidden=dec_hidden, n_layers=dec_layers)
        return PhySSM(spec, encoder, transition, decoder)
