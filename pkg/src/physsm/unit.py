"""Physics-enhanced latent transition: learned unknown matrices behind a
knowledge mask, composed with the known dynamics and stepped by bilinear
discretization.

Two execution paths produce identical numbers: a step-by-step path (used for
autoregressive forecasting and as the reference semantics) and a vectorized
path over a whole window of posterior-anchored states (used in training, where
every step re-anchors on the posterior so steps decouple).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import torch
from torch import nn

from .specs import DynamicsSpec
from .ssm import DTYPE, DiscretizationCache, SSMStack, discretize_bilinear

__all__ = [
    "apply_knowledge_mask",
    "UnknownDynamicsLearner",
    "ConstantDynamicsLearner",
    "PhySSMState",
    "PhySSMUnit",
    "compose_and_step",
]


def apply_knowledge_mask(raw: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Hadamard product raw * mask; zeros freeze known physics entries."""
    if raw.shape[-2:] != mask.shape[-2:]:
        raise ValueError(
            f"matrix shape {tuple(raw.shape[-2:])} != mask shape {tuple(mask.shape[-2:])}"
        )
    return raw * mask


class UnknownDynamicsLearner(nn.Module):
    """Structured-SSM learner of the unknown continuous dynamics matrices.

    Consumes (extended state, control) per step; a fully connected layer
    reshapes each stack's output into matrix form. The input-matrix stack is
    only built when the system has control channels.
    """

    def __init__(
        self,
        aug_dim: int,
        control_dim: int,
        width: int = 32,
        n_layers: int = 2,
        width_b: Optional[int] = None,
        n_layers_b: int = 1,
        learn_b: bool = True,
        delta_mode: str = "raw",
    ):
        super().__init__()
        self.aug_dim = aug_dim
        self.control_dim = control_dim
        in_dim = aug_dim + control_dim
        self.stack_a = SSMStack(in_dim, width, n_layers, delta_mode=delta_mode)
        self.proj_a = nn.Linear(width, aug_dim * aug_dim, dtype=DTYPE)
        self.has_b = learn_b and control_dim > 0
        if self.has_b:
            wb = width if width_b is None else width_b
            self.stack_b = SSMStack(in_dim, wb, n_layers_b, delta_mode=delta_mode)
            self.proj_b = nn.Linear(wb, aug_dim * control_dim, dtype=DTYPE)

    def init_hidden(self, batch_shape: tuple = ()) -> dict:
        hidden = {"a": self.stack_a.init_hidden(batch_shape)}
        if self.has_b:
            hidden["b"] = self.stack_b.init_hidden(batch_shape)
        return hidden

    def _join(self, zbar: torch.Tensor, u: Optional[torch.Tensor]) -> torch.Tensor:
        if self.control_dim > 0:
            return torch.cat([zbar, u], dim=-1)
        return zbar

    def _shape_a(self, ya: torch.Tensor) -> torch.Tensor:
        return self.proj_a(ya).reshape(ya.shape[:-1] + (self.aug_dim, self.aug_dim))

    def _shape_b(self, yb: torch.Tensor) -> torch.Tensor:
        return self.proj_b(yb).reshape(yb.shape[:-1] + (self.aug_dim, self.control_dim))

    def step(
        self,
        hidden: dict,
        zbar: torch.Tensor,
        u: Optional[torch.Tensor],
        delta: torch.Tensor,
        cache: Optional[DiscretizationCache] = None,
    ) -> tuple[dict, torch.Tensor, Optional[torch.Tensor]]:
        """Advance one step; returns (hidden, raw A, raw B or None)."""
        x = self._join(zbar, u)
        hidden_a, ya = self.stack_a.step(hidden["a"], x, delta, cache)
        new_hidden = {"a": hidden_a}
        b_raw = None
        if self.has_b:
            hidden_b, yb = self.stack_b.step(hidden["b"], x, delta, cache)
            new_hidden["b"] = hidden_b
            b_raw = self._shape_b(yb)
        return new_hidden, self._shape_a(ya), b_raw

    def precompute(self, deltas: torch.Tensor) -> dict:
        tables = {"a": self.stack_a.precompute(deltas)}
        if self.has_b:
            tables["b"] = self.stack_b.precompute(deltas)
        return tables

    def step_indexed(self, hidden, zbar, u, tables: dict, step: int):
        x = self._join(zbar, u)
        hidden_a, ya = self.stack_a.step_indexed(hidden["a"], x, tables["a"], step)
        new_hidden = {"a": hidden_a}
        b_raw = None
        if self.has_b:
            hidden_b, yb = self.stack_b.step_indexed(hidden["b"], x, tables["b"], step)
            new_hidden["b"] = hidden_b
            b_raw = self._shape_b(yb)
        return new_hidden, self._shape_a(ya), b_raw

    def run_sequence(self, hidden, zbar_seq, u_seq, deltas):
        """Whole-sequence pass: inputs (..., T, *) -> raw matrix sequences."""
        x = self._join(zbar_seq, u_seq)
        table = self.stack_a.precompute(deltas)
        hidden_a = hidden["a"]
        outs = []
        for t in range(x.shape[-2]):
            hidden_a, y = self.stack_a.step_indexed(hidden_a, x[..., t, :], table, t)
            outs.append(y)
        a_raw = self._shape_a(torch.stack(outs, dim=-2))
        new_hidden = {"a": hidden_a}
        b_raw = None
        if self.has_b:
            table_b = self.stack_b.precompute(deltas)
            hidden_b = hidden["b"]
            outs_b = []
            for t in range(x.shape[-2]):
                hidden_b, y = self.stack_b.step_indexed(hidden_b, x[..., t, :], table_b, t)
                outs_b.append(y)
            b_raw = self._shape_b(torch.stack(outs_b, dim=-2))
            new_hidden["b"] = hidden_b
        return new_hidden, a_raw, b_raw


class ConstantDynamicsLearner(nn.Module):
    """Learner constrained to constant matrices (decomposition-recovery tool)."""

    def __init__(self, aug_dim: int, control_dim: int = 0, learn_b: bool = False):
        super().__init__()
        self.aug_dim = aug_dim
        self.control_dim = control_dim
        self.raw_a = nn.Parameter(torch.zeros(aug_dim, aug_dim, dtype=DTYPE))
        self.has_b = learn_b and control_dim > 0
        if self.has_b:
            self.raw_b = nn.Parameter(torch.zeros(aug_dim, control_dim, dtype=DTYPE))

    def init_hidden(self, batch_shape: tuple = ()) -> dict:
        return {}

    def step(self, hidden, zbar, u, delta, cache=None):
        shape = zbar.shape[:-1]
        a = self.raw_a.expand(shape + self.raw_a.shape)
        b = self.raw_b.expand(shape + self.raw_b.shape) if self.has_b else None
        return hidden, a, b

    def precompute(self, deltas: torch.Tensor) -> dict:
        return {}

    def step_indexed(self, hidden, zbar, u, tables, step):
        return self.step(hidden, zbar, u, None)

    def run_sequence(self, hidden, zbar_seq, u_seq, deltas):
        shape = zbar_seq.shape[:-1]
        a = self.raw_a.expand(shape + self.raw_a.shape)
        b = self.raw_b.expand(shape + self.raw_b.shape) if self.has_b else None
        return hidden, a, b


@dataclass
class PhySSMState:
    """Per-sequence state: extended latent, current time, learner memory."""

    zbar: torch.Tensor
    t: torch.Tensor
    learner_hidden: dict


def compose_and_step(
    spec: DynamicsSpec,
    state: PhySSMState,
    a_unk: torch.Tensor,
    b_unk: Optional[torch.Tensor],
    u: Optional[torch.Tensor],
    delta: torch.Tensor,
) -> PhySSMState:
    """Advance the extended latent one step under known + masked unknown dynamics.

    The known matrix is evaluated at the pre-step state; partially known
    entries multiply their stored factors into the masked learner output.
    """
    zbar, t = state.zbar, state.t
    z_next = _advance(spec, zbar, t, a_unk, b_unk, u, delta)
    return PhySSMState(zbar=z_next, t=t + delta, learner_hidden=state.learner_hidden)


def _advance(spec, zbar, t, a_unk, b_unk, u, delta):
    if spec.unknown_factor_A is not None:
        a_unk = spec.unknown_factor_A(zbar, t) * a_unk
    a = spec.known_matrix(zbar, t) + a_unk
    if spec.control_dim > 0 and b_unk is not None:
        b = b_unk
        if spec.known_input is not None:
            b = b + spec.known_input(zbar, t)
        abar, bbar = discretize_bilinear(a, b, delta)
        return torch.einsum("...ij,...j->...i", abar, zbar) + torch.einsum(
            "...ij,...j->...i", bbar, u
        )
    dummy_b = a.new_zeros(a.shape[:-1] + (1,))
    abar, _ = discretize_bilinear(a, dummy_b, delta)
    return torch.einsum("...ij,...j->...i", abar, zbar)


class PhySSMUnit(nn.Module):
    """Wires a learner, knowledge masks and the known dynamics into one step."""

    def __init__(self, spec: DynamicsSpec, learner: nn.Module):
        super().__init__()
        spec.validate_disjoint_support()
        self.spec = spec
        self.learner = learner
        self.register_buffer("mask_a", spec.mask_A.clone())
        self.register_buffer("mask_b", spec.mask_B.clone())

    def init_state(self, z: torch.Tensor, t: torch.Tensor) -> PhySSMState:
        """Start a trajectory: extend the base state, reset learner memory."""
        zbar = self.spec.augment(z)
        return PhySSMState(
            zbar=zbar,
            t=t,
            learner_hidden=self.learner.init_hidden(zbar.shape[:-1]),
        )

    def reanchor(self, state: PhySSMState, z: torch.Tensor) -> PhySSMState:
        """Replace the extended state with augment(z), keeping learner memory."""
        return replace(state, zbar=self.spec.augment(z))

    def _mask(self, a_raw, b_raw):
        a_unk = apply_knowledge_mask(a_raw, self.mask_a)
        b_unk = apply_knowledge_mask(b_raw, self.mask_b) if b_raw is not None else None
        return a_unk, b_unk

    def step(
        self,
        state: PhySSMState,
        u: Optional[torch.Tensor],
        delta: torch.Tensor,
        cache: Optional[DiscretizationCache] = None,
    ) -> PhySSMState:
        hidden, a_raw, b_raw = self.learner.step(
            state.learner_hidden, state.zbar, u, delta, cache
        )
        a_unk, b_unk = self._mask(a_raw, b_raw)
        pre = PhySSMState(zbar=state.zbar, t=state.t, learner_hidden=hidden)
        return compose_and_step(self.spec, pre, a_unk, b_unk, u, delta)

    def _step_indexed(self, state, u, delta, tables, idx):
        hidden, a_raw, b_raw = self.learner.step_indexed(
            state.learner_hidden, state.zbar, u, tables, idx
        )
        a_unk, b_unk = self._mask(a_raw, b_raw)
        pre = PhySSMState(zbar=state.zbar, t=state.t, learner_hidden=hidden)
        return compose_and_step(self.spec, pre, a_unk, b_unk, u, delta)

    def rollout(
        self,
        state: PhySSMState,
        controls: Optional[torch.Tensor],
        deltas: torch.Tensor,
    ) -> tuple[torch.Tensor, PhySSMState]:
        """Autoregressive latent prediction.

        controls: (..., L, d_u) or None; deltas: (..., L). Returns the
        extended-state sequence (..., L, d) after each step plus the final
        state. L = 0 yields an empty sequence.
        """
        L = deltas.shape[-1]
        if L == 0:
            empty = state.zbar.new_zeros(
                state.zbar.shape[:-1] + (0, self.spec.augmented_dim)
            )
            return empty, state
        tables = self.learner.precompute(deltas)
        outs = []
        for i in range(L):
            u = controls[..., i, :] if controls is not None else None
            try:
                state = self._step_indexed(state, u, deltas[..., i], tables, i)
            except Exception as exc:
                raise type(exc)(f"rollout step {i}: {exc}") from exc
            outs.append(state.zbar)
        return torch.stack(outs, dim=-2), state

    def window_steps(
        self,
        hidden: dict,
        zbar_anchors: torch.Tensor,  # (..., T', d) pre-step extended states
        controls: Optional[torch.Tensor],  # (..., T', d_u)
        times: torch.Tensor,         # (..., T') pre-step timestamps
        deltas: torch.Tensor,        # (..., T')
    ) -> tuple[torch.Tensor, dict]:
        """Vectorized one-step advances from externally anchored states.

        Semantically identical to calling step() on each anchor in turn
        (anchors do not feed back, so only the learner memory is sequential).
        Returns the advanced states (..., T', d) and the final learner memory.
        """
        hidden, a_raw, b_raw = self.learner.run_sequence(
            hidden, zbar_anchors, controls, deltas
        )
        a_unk, b_unk = self._mask(a_raw, b_raw)
        u = controls if self.spec.control_dim > 0 else None
        z_next = _advance(self.spec, zbar_anchors, times, a_unk, b_unk, u, deltas)
        return z_next, hidden

    def composed_matrix(
        self, state: PhySSMState, u: Optional[torch.Tensor], delta: torch.Tensor
    ) -> torch.Tensor:
        """Continuous A(t) = known + masked unknown at the current state (diagnostic)."""
        _, a_raw, _ = self.learner.step(state.learner_hidden, state.zbar, u, delta)
        a_unk = apply_knowledge_mask(a_raw, self.mask_a)
        if self.spec.unknown_factor_A is not None:
            a_unk = self.spec.unknown_factor_A(state.zbar, state.t) * a_unk
        return self.spec.known_matrix(state.zbar, state.t) + a_unk
