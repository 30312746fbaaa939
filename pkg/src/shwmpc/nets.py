"""Conditioning networks and shared torch helpers.

All networks run in float64. Derivatives with respect to network *inputs*
are propagated forward by hand (tangent matrices of shape ``(..., dim, k)``)
so that parameter gradients never need double backward.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

DTYPE = torch.float64


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.array(x, dtype=float), dtype=DTYPE)


def to_numpy(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy()


def matvec(W: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """``W @ x`` over the last axis of x, broadcasting leading dims."""
    return x @ W.transpose(-1, -2)


def mat_tangent(W: torch.Tensor, dx: torch.Tensor) -> torch.Tensor:
    """Apply W to a tangent stack ``(..., n, k)``."""
    return W @ dx


class Mlp(nn.Module):
    """Three-layer tanh network ``W2 tanh(W1 x + b1) + b2``."""

    def __init__(self, n_in: int, n_out: int, width: int = 16, init_std: float = 0.05,
                 out_bias=None, generator: torch.Generator | None = None):
        super().__init__()
        self.n_in, self.n_out, self.width = n_in, n_out, width
        self.W1 = nn.Parameter(torch.randn(width, n_in, dtype=DTYPE, generator=generator) * init_std)
        self.b1 = nn.Parameter(torch.randn(width, dtype=DTYPE, generator=generator) * init_std)
        self.W2 = nn.Parameter(torch.randn(n_out, width, dtype=DTYPE, generator=generator) * init_std)
        b2 = torch.randn(n_out, dtype=DTYPE, generator=generator) * init_std
        if out_bias is not None:
            b2 = b2 + as_tensor(out_bias).reshape(n_out)
        self.b2 = nn.Parameter(b2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return matvec(self.W2, torch.tanh(matvec(self.W1, x) + self.b1)) + self.b2

    def with_tangent(self, x: torch.Tensor, dx: torch.Tensor | None):
        h = torch.tanh(matvec(self.W1, x) + self.b1)
        out = matvec(self.W2, h) + self.b2
        if dx is None:
            return out, None
        dh = (1.0 - h * h).unsqueeze(-1) * mat_tangent(self.W1, dx)
        return out, mat_tangent(self.W2, dh)

    @torch.no_grad()
    def set_constant(self, value) -> None:
        """Make the network output ``value`` for every input."""
        self.W1.zero_()
        self.b1.zero_()
        self.W2.zero_()
        self.b2.copy_(as_tensor(value).reshape(self.n_out))
