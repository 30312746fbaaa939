"""Smooth partially input convex networks.

``Xi(xi, eta)`` is convex in ``xi`` for every ``eta``: the ``zeta`` path only
passes through nonnegative weights (softplus of raw parameters) and convex
nondecreasing activations, while ``eta`` drives a separate context path
that produces per-layer gates and offsets.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn
from torch.nn.functional import softplus

from .errors import DimensionError
from .nets import DTYPE, as_tensor, matvec, to_numpy


def _param(shape, std, generator, mean=0.0):
    return nn.Parameter(torch.randn(*shape, dtype=DTYPE, generator=generator) * std + mean)


class Picnn(nn.Module):
    """Partially input convex network with softplus activations.

    Parameters
    ----------
    n_xi, n_eta, n_out:
        Convex input, context input and output sizes.
    hidden:
        Widths of the hidden convex layers; depth is ``len(hidden) + 1``.
    eta_hidden:
        Widths of the context path; defaults to ``hidden``.
    final_activation:
        ``"softplus"`` or ``"linear"`` (both convex and nondecreasing).
    """

    def __init__(self, n_xi: int, n_eta: int, n_out: int, hidden=(16,), eta_hidden=None,
                 init_std: float = 0.05, final_activation: str = "softplus",
                 generator: torch.Generator | None = None, wz_mean: float = -2.0):
        super().__init__()
        hidden = list(hidden)
        eta_hidden = list(hidden if eta_hidden is None else eta_hidden)
        if len(eta_hidden) != len(hidden):
            raise ValueError("eta path needs one width per hidden layer")
        if final_activation not in ("softplus", "linear"):
            raise ValueError(f"unknown final activation {final_activation!r}")
        self.n_xi, self.n_eta, self.n_out = n_xi, n_eta, n_out
        self.hidden, self.eta_hidden = hidden, eta_hidden
        self.final_activation = final_activation
        self.depth = len(hidden) + 1
        zs = [n_xi] + hidden + [n_out]
        es = [n_eta] + eta_hidden
        g = generator
        self.wz_raw = nn.ParameterList()
        self.w_xi = nn.ParameterList()
        self.w_zeta_eta = nn.ParameterList()
        self.b_zeta_eta = nn.ParameterList()
        self.w_xi_eta = nn.ParameterList()
        self.b_xi_eta = nn.ParameterList()
        self.w_eta_eta = nn.ParameterList()
        self.b_eta_eta = nn.ParameterList()
        self.w_eta = nn.ParameterList()
        self.b_eta = nn.ParameterList()
        for i in range(1, self.depth + 1):
            h_prev, h, m_prev = zs[i - 1], zs[i], es[i - 1]
            self.wz_raw.append(_param((h, h_prev), init_std, g, wz_mean))
            self.w_xi.append(_param((h, n_xi), init_std, g))
            self.w_zeta_eta.append(_param((h_prev, m_prev), init_std, g))
            self.b_zeta_eta.append(_param((h_prev,), init_std, g))
            self.w_xi_eta.append(_param((n_xi, m_prev), init_std, g))
            self.b_xi_eta.append(_param((n_xi,), init_std, g, 1.0))
            self.w_eta_eta.append(_param((h, m_prev), init_std, g))
            self.b_eta_eta.append(_param((h,), init_std, g))
            if i < self.depth:
                self.w_eta.append(_param((es[i], m_prev), init_std, g))
                self.b_eta.append(_param((es[i],), init_std, g))
        self.register_buffer("input_mask", torch.ones(n_xi, dtype=DTYPE))

    def effective_wz(self):
        """Nonnegative convex-path weights actually used in evaluation."""
        return [softplus(w) for w in self.wz_raw]

    @torch.no_grad()
    def mask_inputs(self, keep) -> None:
        """Structurally remove dependence on the convex inputs where ``keep`` is False."""
        self.input_mask.copy_(as_tensor(np.asarray(keep, dtype=float)))

    def _act(self, a, last: bool):
        if last and self.final_activation == "linear":
            one = torch.ones_like(a)
            return a, one, torch.zeros_like(a)
        s = torch.sigmoid(a)
        return softplus(a), s, s * (1.0 - s)

    def derivatives(self, xi, eta, order: int = 0):
        """Value and, up to ``order`` (0, 1, 2), derivatives with respect to ``xi``.

        Returns ``(value, jac, hess)`` with shapes ``(..., n_out)``,
        ``(..., n_out, n_xi)`` and ``(..., n_out, n_xi, n_xi)``; entries beyond
        ``order`` are None.
        """
        xi, eta = as_tensor(xi), as_tensor(eta)
        if xi.shape[-1] != self.n_xi or eta.shape[-1] != self.n_eta:
            raise DimensionError(
                f"expected xi dim {self.n_xi} and eta dim {self.n_eta}, got {xi.shape[-1]} and {eta.shape[-1]}")
        batch = torch.broadcast_shapes(xi.shape[:-1], eta.shape[:-1])
        xi = xi.expand(*batch, self.n_xi) * self.input_mask
        eta = eta.expand(*batch, self.n_eta)
        n = self.n_xi
        zeta = xi
        dz = torch.diag(self.input_mask).expand(*batch, n, n) if order >= 1 else None
        d2z = torch.zeros(*batch, n, n, n, dtype=DTYPE) if order >= 2 else None
        ctx = eta
        for i in range(self.depth):
            last = i == self.depth - 1
            gate = softplus(matvec(self.w_zeta_eta[i], ctx) + self.b_zeta_eta[i])
            v_xi = matvec(self.w_xi_eta[i], ctx) + self.b_xi_eta[i]
            v_eta = matvec(self.w_eta_eta[i], ctx) + self.b_eta_eta[i]
            Wz = softplus(self.wz_raw[i])
            Wx = self.w_xi[i]
            a = matvec(Wz, zeta * gate) + matvec(Wx, xi * v_xi) + v_eta
            zeta_new, s1, s2 = self._act(a, last)
            if order >= 1:
                da = Wz @ (gate.unsqueeze(-1) * dz) + Wx * (v_xi * self.input_mask).unsqueeze(-2)
                if order >= 2:
                    d2a = torch.einsum("oh,...hjk->...ojk", Wz, gate[..., :, None, None] * d2z)
                    d2z = (s2[..., None, None] * da.unsqueeze(-1) * da.unsqueeze(-2)
                           + s1[..., None, None] * d2a)
                dz = s1.unsqueeze(-1) * da
            zeta = zeta_new
            if not last:
                ctx = softplus(matvec(self.w_eta[i], ctx) + self.b_eta[i])
        return zeta, dz, d2z

    def forward(self, xi, eta):
        return self.derivatives(xi, eta, 0)[0]

    def grad_xi(self, xi, eta):
        return self.derivatives(xi, eta, 1)[1]

    @torch.no_grad()
    def zero_(self) -> None:
        """All weights and biases zero (effective convex weights become ``softplus`` of -inf = 0)."""
        for p in self.parameters():
            p.zero_()
        for w in self.wz_raw:
            w.fill_(-1e4)


def picnn_forward(p: Picnn, xi, eta) -> np.ndarray:
    with torch.no_grad():
        return to_numpy(p(xi, eta))


def picnn_grad_xi(p: Picnn, xi, eta) -> np.ndarray:
    with torch.no_grad():
        return to_numpy(p.grad_xi(xi, eta))
