"""Continuous-time structured SSM layers with per-step bilinear discretization.

Layers keep continuous parameters (A, B, C) and discretize at each step's
delta, so irregular sampling is handled natively. Because layer matrices are
fixed within a forward pass, discretization is computed once per unique delta
value and gathered per step; regular sampling therefore costs one solve per
layer per pass.
"""

from __future__ import annotations

import math
from typing import Optional

import torch
from torch import nn

from .errors import DiscretizationSingularError

__all__ = [
    "hippo_legs",
    "discretize_bilinear",
    "SSMLayer",
    "SSMStack",
    "run_ssm_stack",
    "DiscretizationCache",
    "DiscretizationTable",
]

DTYPE = torch.float64


def hippo_legs(n: int, dtype: torch.dtype = DTYPE) -> torch.Tensor:
    """HiPPO-LegS state matrix: lower-triangular, eigenvalues in the left half plane.

    Entry (i, k) = -sqrt(2i+1)*sqrt(2k+1) for i > k, -(i+1) on the diagonal,
    0 above it (0-indexed).
    """
    if n < 1:
        raise ValueError(f"state size must be >= 1, got {n}")
    idx = torch.arange(n, dtype=dtype)
    root = torch.sqrt(2.0 * idx + 1.0)
    a = -root[:, None] * root[None, :]
    a = torch.tril(a, diagonal=-1)
    a -= torch.diag(idx + 1.0)
    return a


def _check_delta(delta: torch.Tensor) -> torch.Tensor:
    if not torch.is_tensor(delta):
        delta = torch.as_tensor(delta, dtype=DTYPE)
    if delta.numel() and torch.any(delta <= 0):
        raise ValueError("step size delta must be positive")
    return delta


def discretize_bilinear(
    A: torch.Tensor, B: torch.Tensor, delta: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Bilinear (Tustin) discretization of a continuous pair (A, B).

    Abar = (I - delta/2 A)^-1 (I + delta/2 A)
    Bbar = (I - delta/2 A)^-1 delta B

    ``delta`` may be a scalar or carry batch dimensions broadcastable against
    leading dimensions of A and B. Raises DiscretizationSingularError when
    (I - delta/2 A) is singular.
    """
    delta = _check_delta(delta).to(A.dtype)
    n = A.shape[-1]
    m = B.shape[-1]
    eye = torch.eye(n, dtype=A.dtype, device=A.device)
    half = delta[..., None, None] * 0.5 if delta.ndim > 0 else delta * 0.5
    dfull = delta[..., None, None] if delta.ndim > 0 else delta
    lhs = eye - half * A
    rhs_a = eye + half * A
    rhs_b = dfull * B
    batch = torch.broadcast_shapes(lhs.shape[:-2], rhs_a.shape[:-2], rhs_b.shape[:-2])
    lhs = lhs.expand(batch + (n, n))
    rhs = torch.cat(
        [rhs_a.expand(batch + (n, n)), rhs_b.expand(batch + (n, m))], dim=-1
    )
    try:
        solved = torch.linalg.solve(lhs, rhs)
    except torch.linalg.LinAlgError as exc:
        with torch.no_grad():
            cond = torch.linalg.cond(lhs.detach().reshape(-1, n, n)).max().item()
        raise DiscretizationSingularError(
            f"(I - delta/2 A) singular at delta="
            f"{delta.reshape(-1)[0].item() if delta.ndim else float(delta):.6g}, "
            f"condition estimate {cond:.3g}"
        ) from exc
    return solved[..., :n], solved[..., n:]


class DiscretizationCache:
    """Memoizes per-layer (Abar, Bbar) for repeated deltas within one pass."""

    def __init__(self) -> None:
        self._store: dict = {}

    def get(self, owner: object, A: torch.Tensor, B: torch.Tensor, delta: torch.Tensor):
        if torch.is_tensor(delta) and delta.ndim > 0:
            key = (id(owner), delta.shape, tuple(delta.reshape(-1).tolist()))
        else:
            key = (id(owner), float(delta))
        hit = self._store.get(key)
        if hit is None:
            hit = discretize_bilinear(A, B, delta)
            self._store[key] = hit
        return hit


class DiscretizationTable:
    """Per-layer discrete matrices for every unique delta in a step sequence.

    ``index`` maps each (batch, step) position to its row in the tables, so a
    step's matrices are a cheap gather instead of a fresh solve.
    """

    def __init__(self, tables: list[tuple[torch.Tensor, torch.Tensor]], index: torch.Tensor):
        self.tables = tables
        self.index = index  # same shape as the delta sequence

    def select(self, layer_idx: int, step: int) -> tuple[torch.Tensor, torch.Tensor]:
        abar, bbar = self.tables[layer_idx]
        idx = self.index[..., step]
        return abar[idx], bbar[idx]


class SSMLayer(nn.Module):
    """One continuous SSM layer h' = A h + B u, y = C h (feedthrough fixed 0).

    A starts from HiPPO-LegS; B and C use fan-in scaled normal init.
    """

    def __init__(self, in_dim: int, state_dim: int, out_dim: int):
        super().__init__()
        self.in_dim = in_dim
        self.state_dim = state_dim
        self.out_dim = out_dim
        self.A = nn.Parameter(hippo_legs(state_dim))
        self.B = nn.Parameter(
            torch.randn(state_dim, in_dim, dtype=DTYPE) / math.sqrt(in_dim)
        )
        self.C = nn.Parameter(
            torch.randn(out_dim, state_dim, dtype=DTYPE) / math.sqrt(state_dim)
        )

    def init_hidden(self, batch_shape: tuple = ()) -> torch.Tensor:
        return torch.zeros(
            batch_shape + (self.state_dim,), dtype=DTYPE, device=self.A.device
        )

    def apply_discrete(
        self, h_prev: torch.Tensor, u: torch.Tensor, abar: torch.Tensor, bbar: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        h = torch.einsum("...ij,...j->...i", abar, h_prev) + torch.einsum(
            "...ij,...j->...i", bbar, u
        )
        y = torch.einsum("ij,...j->...i", self.C, h)
        return h, y

    def step(
        self,
        h_prev: torch.Tensor,
        u: torch.Tensor,
        delta: torch.Tensor,
        cache: Optional[DiscretizationCache] = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        if u.shape[-1] != self.in_dim:
            raise ValueError(f"input dim {u.shape[-1]} != layer in_dim {self.in_dim}")
        if cache is None:
            abar, bbar = discretize_bilinear(self.A, self.B, delta)
        else:
            abar, bbar = cache.get(self, self.A, self.B, delta)
        return self.apply_discrete(h_prev, u, abar, bbar)


class SSMStack(nn.Module):
    """Stacked SSM layers with GELU between layers.

    delta_mode "raw" feeds observation gaps straight into every layer;
    "scaled" multiplies them by a learnable per-layer timescale exp(s).
    """

    def __init__(
        self,
        in_dim: int,
        width: int,
        n_layers: int,
        out_dim: Optional[int] = None,
        delta_mode: str = "raw",
    ):
        super().__init__()
        if n_layers < 1:
            raise ValueError("need at least one layer")
        if delta_mode not in ("raw", "scaled"):
            raise ValueError(f"unknown delta_mode '{delta_mode}'")
        self.in_dim = in_dim
        self.width = width
        self.out_dim = width if out_dim is None else out_dim
        self.delta_mode = delta_mode
        dims = [in_dim] + [width] * (n_layers - 1)
        outs = [width] * (n_layers - 1) + [self.out_dim]
        self.layers = nn.ModuleList(
            SSMLayer(m, width, p) for m, p in zip(dims, outs)
        )
        if delta_mode == "scaled":
            self.log_delta_scale = nn.Parameter(torch.zeros(n_layers, dtype=DTYPE))
        self.act = nn.GELU()

    def init_hidden(self, batch_shape: tuple = ()) -> list[torch.Tensor]:
        return [layer.init_hidden(batch_shape) for layer in self.layers]

    def _layer_delta(self, k: int, delta: torch.Tensor) -> torch.Tensor:
        if self.delta_mode == "scaled":
            return delta * torch.exp(self.log_delta_scale[k])
        return delta

    def precompute(self, deltas: torch.Tensor) -> DiscretizationTable:
        """One discretization per layer per unique delta value in the sequence."""
        deltas = _check_delta(deltas)
        unique, inverse = torch.unique(deltas.detach(), return_inverse=True)
        tables = [
            discretize_bilinear(layer.A, layer.B, self._layer_delta(k, unique))
            for k, layer in enumerate(self.layers)
        ]
        return DiscretizationTable(tables, inverse.reshape(deltas.shape))

    def step(
        self,
        hidden: list[torch.Tensor],
        u: torch.Tensor,
        delta: torch.Tensor,
        cache: Optional[DiscretizationCache] = None,
    ) -> tuple[list[torch.Tensor], torch.Tensor]:
        new_hidden = []
        x = u
        for k, layer in enumerate(self.layers):
            h, x = layer.step(hidden[k], x, self._layer_delta(k, delta), cache)
            new_hidden.append(h)
            if k < len(self.layers) - 1:
                x = self.act(x)
        return new_hidden, x

    def step_indexed(
        self,
        hidden: list[torch.Tensor],
        u: torch.Tensor,
        table: DiscretizationTable,
        step: int,
    ) -> tuple[list[torch.Tensor], torch.Tensor]:
        """Advance one step using precomputed discretizations."""
        new_hidden = []
        x = u
        for k, layer in enumerate(self.layers):
            abar, bbar = table.select(k, step)
            h, x = layer.apply_discrete(hidden[k], x, abar, bbar)
            new_hidden.append(h)
            if k < len(self.layers) - 1:
                x = self.act(x)
        return new_hidden, x

    def forward(
        self,
        inputs: torch.Tensor,
        deltas: torch.Tensor,
        return_hidden: bool = False,
    ):
        """Run the full recurrence from zero hidden state.

        inputs: (..., T, in_dim); deltas: (..., T) positive steps.
        Returns outputs (..., T, out_dim), plus the final hidden state when
        ``return_hidden`` is set.
        """
        if inputs.shape[:-1] != deltas.shape:
            raise ValueError(
                f"inputs {tuple(inputs.shape)} and deltas {tuple(deltas.shape)} disagree"
            )
        batch_shape = inputs.shape[:-2]
        T = inputs.shape[-2]
        hidden = self.init_hidden(batch_shape)
        if T == 0:
            out = inputs.new_zeros(batch_shape + (0, self.out_dim))
            return (out, hidden) if return_hidden else out
        table = self.precompute(deltas)
        outs = []
        for t in range(T):
            hidden, y = self.step_indexed(hidden, inputs[..., t, :], table, t)
            outs.append(y)
        out = torch.stack(outs, dim=-2)
        return (out, hidden) if return_hidden else out


def run_ssm_stack(
    stack: SSMStack, inputs: torch.Tensor, deltas: torch.Tensor
) -> torch.Tensor:
    """Sequential recurrence through the whole stack (zero initial state)."""
    return stack(inputs, deltas)
