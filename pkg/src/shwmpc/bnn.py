"""Bijective neural networks conditioned on an exogenous input.

Each layer maps ``xi -> phi(Omega(eta) xi + beta(eta), eta)`` with a
nonsingular ``Omega`` and the strictly increasing activation
``phi(p, eta) = asinh(alpha(eta) + sinh(p))``, so the whole stack has a
closed-form inverse. The *diagonal* variant keeps ``Omega`` diagonal with
entries ``s * exp(theta)``, which makes the map act coordinate by
coordinate.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .errors import ConditioningError, DimensionError
from .nets import DTYPE, Mlp, as_tensor, to_numpy

DET_FLOOR = 1e-12
_BIG = 20.0


def _activation_parts(p: torch.Tensor, a: torch.Tensor):
    """Value of ``asinh(a + sinh p)`` with its partials in p and a.

    For ``|p| > 20`` uses ``asinh(a + sinh p) = sign(p) (|p| + log1p(2 sign(p) a e^{-|p|}))``
    (error below 1e-17 there), which does not overflow.
    """
    big = p.abs() > _BIG
    p_small = torch.where(big, torch.zeros_like(p), p)
    s = a + torch.sinh(p_small)
    root = torch.sqrt(1.0 + s * s)
    val_small = torch.asinh(s)
    dp_small = torch.cosh(p_small) / root
    da_small = 1.0 / root

    sgn = torch.where(p >= 0, torch.ones_like(p), -torch.ones_like(p))
    q = torch.where(big, p.abs(), torch.full_like(p, _BIG + 1.0))
    e = torch.exp(-q)
    t = torch.clamp(2.0 * sgn * a * e, min=-1.0 + 1e-15)
    val_big = sgn * (q + torch.log1p(t))
    dp_big = 1.0 / (1.0 + t)
    da_big = 2.0 * e / (1.0 + t)

    return (torch.where(big, val_big, val_small),
            torch.where(big, dp_big, dp_small),
            torch.where(big, da_big, da_small))


def asinh_sinh(xi, alpha):
    """``asinh(alpha + sinh(xi))`` elementwise."""
    return _activation_parts(as_tensor(xi), as_tensor(alpha))[0]


def asinh_sinh_inverse(w, alpha):
    return _activation_parts(as_tensor(w), -as_tensor(alpha))[0]


def asinh_sinh_derivative(xi, alpha):
    return _activation_parts(as_tensor(xi), as_tensor(alpha))[1]


class BnnLayer(nn.Module):
    def __init__(self, n_xi: int, n_eta: int, variant: str = "general", width: int = 16,
                 init_std: float = 0.05, generator: torch.Generator | None = None, signs=None):
        super().__init__()
        if variant not in ("general", "diagonal"):
            raise ValueError(f"unknown BNN variant {variant!r}")
        self.n_xi, self.n_eta, self.variant = n_xi, n_eta, variant
        if variant == "general":
            self.omega_net = Mlp(n_eta, n_xi * n_xi, width, init_std, np.eye(n_xi).reshape(-1), generator)
        else:
            self.omega_net = Mlp(n_eta, n_xi, width, init_std, None, generator)
        signs = np.ones(n_xi) if signs is None else np.asarray(signs, dtype=float)
        self.register_buffer("signs", as_tensor(signs))
        self.beta_net = Mlp(n_eta, n_xi, width, init_std, None, generator)
        self.alpha_net = Mlp(n_eta, n_xi, width, init_std, None, generator)

    # Omega as a dense matrix (general) or its diagonal (diagonal variant)
    def omega(self, eta, deta=None):
        raw, draw = self.omega_net.with_tangent(eta, deta)
        n = self.n_xi
        if self.variant == "general":
            Om = raw.reshape(*raw.shape[:-1], n, n)
            dOm = None if draw is None else draw.reshape(*draw.shape[:-2], n, n, draw.shape[-1])
            return Om, dOm
        diag = self.signs * torch.exp(raw)
        ddiag = None if draw is None else diag.unsqueeze(-1) * draw
        return diag, ddiag

    def check_omega(self, Om) -> None:
        if self.variant != "general":
            return
        det = torch.linalg.det(Om.detach())
        bad = det.abs() <= DET_FLOOR
        if bool(bad.any()):
            raise ConditioningError(
                f"layer weight matrix near singular: min |det| = {float(det.abs().min()):.3e}")

    def forward_tangent(self, xi, eta, dxi=None, deta=None, check: bool = True):
        Om, dOm = self.omega(eta, deta)
        beta, dbeta = self.beta_net.with_tangent(eta, deta)
        alpha, dalpha = self.alpha_net.with_tangent(eta, deta)
        if self.variant == "general":
            if check:
                self.check_omega(Om)
            pre = (Om @ xi.unsqueeze(-1)).squeeze(-1) + beta
        else:
            pre = Om * xi + beta
        out, d_p, d_a = _activation_parts(pre, alpha)
        if dxi is None and deta is None:
            return out, None
        dpre = 0.0
        if dxi is not None:
            dpre = Om @ dxi if self.variant == "general" else Om.unsqueeze(-1) * dxi
        if deta is not None:
            if self.variant == "general":
                dpre = dpre + torch.einsum("...ijk,...j->...ik", dOm, xi)
            else:
                dpre = dpre + dOm * xi.unsqueeze(-1)
            dpre = dpre + dbeta
        dout = d_p.unsqueeze(-1) * dpre
        if deta is not None:
            dout = dout + d_a.unsqueeze(-1) * dalpha
        return out, dout

    def inverse(self, w, eta, check: bool = True):
        Om, _ = self.omega(eta)
        beta = self.beta_net(eta)
        alpha = self.alpha_net(eta)
        pre = _activation_parts(w, -alpha)[0] - beta
        if self.variant == "general":
            if check:
                self.check_omega(Om)
            return torch.linalg.solve(Om, pre.unsqueeze(-1)).squeeze(-1)
        return pre / Om


class Bnn(nn.Module):
    """Stack of :class:`BnnLayer` with analytic inverse and Jacobians.

    Inputs broadcast over leading batch dimensions: ``xi`` is ``(..., n_xi)``
    and ``eta`` is ``(..., n_eta)``.
    """

    def __init__(self, n_xi: int, n_eta: int, depth: int = 2, variant: str = "general",
                 width: int = 16, init_std: float = 0.05, generator: torch.Generator | None = None,
                 signs=None):
        super().__init__()
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self.n_xi, self.n_eta, self.depth, self.variant, self.width = n_xi, n_eta, depth, variant, width
        self.layers = nn.ModuleList(
            BnnLayer(n_xi, n_eta, variant, width, init_std, generator, signs if i == 0 else None)
            for i in range(depth)
        )

    def _check(self, xi, eta):
        if xi.shape[-1] != self.n_xi:
            raise DimensionError(f"xi has dimension {xi.shape[-1]}, expected {self.n_xi}")
        if eta.shape[-1] != self.n_eta:
            raise DimensionError(f"eta has dimension {eta.shape[-1]}, expected {self.n_eta}")

    def forward(self, xi, eta):
        xi, eta = as_tensor(xi), as_tensor(eta)
        self._check(xi, eta)
        eta = _expand_eta(eta, xi)
        xi = xi.expand(*eta.shape[:-1], self.n_xi)
        for layer in self.layers:
            xi, _ = layer.forward_tangent(xi, eta)
        return xi

    def forward_tangent(self, xi, eta, dxi=None, deta=None):
        """Value and directional derivatives along tangent stacks.

        ``dxi`` is ``(..., n_xi, k)``, ``deta`` is ``(..., n_eta, k)``;
        either may be None (zero).
        """
        xi, eta = as_tensor(xi), as_tensor(eta)
        self._check(xi, eta)
        eta = _expand_eta(eta, xi)
        xi = xi.expand(*eta.shape[:-1], self.n_xi)
        d = dxi
        for layer in self.layers:
            xi, d = layer.forward_tangent(xi, eta, d, deta)
        return xi, d

    def inverse(self, w, eta):
        w, eta = as_tensor(w), as_tensor(eta)
        self._check(w, eta)
        eta = _expand_eta(eta, w)
        w = w.expand(*eta.shape[:-1], self.n_xi)
        for layer in reversed(self.layers):
            w = layer.inverse(w, eta)
        return w

    def jacobian(self, xi, eta):
        """``d forward / d xi`` with shape ``(..., n_xi, n_xi)``."""
        xi = as_tensor(xi)
        eye = torch.eye(self.n_xi, dtype=DTYPE).expand(*xi.shape[:-1], self.n_xi, self.n_xi)
        return self.forward_tangent(xi, eta, dxi=eye)[1]

    def value_jacobian_jvp(self, xi, eta, deta_dir):
        """Forward value, ``d/dxi``, and the derivative along ``eta`` direction ``deta_dir``.

        One pass with ``n_xi + 1`` tangent columns.
        """
        xi, eta, deta_dir = as_tensor(xi), as_tensor(eta), as_tensor(deta_dir)
        n, m = self.n_xi, self.n_eta
        batch = torch.broadcast_shapes(xi.shape[:-1], eta.shape[:-1], deta_dir.shape[:-1])
        dxi = torch.zeros(*batch, n, n + 1, dtype=DTYPE)
        dxi[..., :, :n] = torch.eye(n, dtype=DTYPE)
        deta = torch.zeros(*batch, m, n + 1, dtype=DTYPE)
        deta[..., :, n] = deta_dir.expand(*batch, m)
        val, d = self.forward_tangent(xi.expand(*batch, n), eta.expand(*batch, m), dxi, deta)
        return val, d[..., :n], d[..., n]

    def min_abs_det(self, eta) -> float:
        """Smallest ``|det Omega|`` over layers and the given conditioning values."""
        eta = as_tensor(eta)
        with torch.no_grad():
            vals = []
            for layer in self.layers:
                Om, _ = layer.omega(eta)
                if self.variant == "general":
                    vals.append(torch.linalg.det(Om).abs().min())
                else:
                    vals.append(Om.abs().prod(-1).min())
            return float(torch.stack(vals).min())

    def monotone_sign(self) -> torch.Tensor:
        """Per-coordinate direction of a diagonal BNN (+1 increasing, -1 decreasing)."""
        if self.variant != "diagonal":
            raise ValueError("only diagonal BNNs act coordinatewise")
        s = torch.ones(self.n_xi, dtype=DTYPE)
        for layer in self.layers:
            s = s * layer.signs
        return s

    @torch.no_grad()
    def set_affine(self, scale, shift=None, alpha=None) -> None:
        """Constant configuration: first layer ``Omega = diag/matrix scale``, bias ``shift``;
        every other layer the identity. ``alpha`` sets the first layer's activation offset."""
        n = self.n_xi
        for i, layer in enumerate(self.layers):
            if i == 0:
                S = np.asarray(scale, dtype=float)
                if layer.variant == "general":
                    S = np.diag(np.broadcast_to(S, (n,))) if S.ndim < 2 else S
                    layer.omega_net.set_constant(S.reshape(-1))
                else:
                    d = np.broadcast_to(S, (n,)).astype(float)
                    layer.signs.copy_(as_tensor(np.sign(d)))
                    layer.omega_net.set_constant(np.log(np.abs(d)))
                layer.beta_net.set_constant(np.broadcast_to(0.0 if shift is None else shift, (n,)))
                layer.alpha_net.set_constant(np.broadcast_to(0.0 if alpha is None else alpha, (n,)))
            else:
                if layer.variant == "general":
                    layer.omega_net.set_constant(np.eye(n).reshape(-1))
                else:
                    layer.signs.fill_(1.0)
                    layer.omega_net.set_constant(np.zeros(n))
                layer.beta_net.set_constant(np.zeros(n))
                layer.alpha_net.set_constant(np.zeros(n))

    def set_identity(self) -> None:
        self.set_affine(1.0)


def _expand_eta(eta, xi):
    shape = torch.broadcast_shapes(eta.shape[:-1], xi.shape[:-1])
    return eta.expand(*shape, eta.shape[-1])


# numpy-facing convenience wrappers ------------------------------------------

def bnn_forward(p: Bnn, xi, eta) -> np.ndarray:
    with torch.no_grad():
        return to_numpy(p(xi, eta))


def bnn_inverse(p: Bnn, xi_out, eta) -> np.ndarray:
    with torch.no_grad():
        return to_numpy(p.inverse(xi_out, eta))


def bnn_jacobian(p: Bnn, xi, eta) -> np.ndarray:
    with torch.no_grad():
        return to_numpy(p.jacobian(xi, eta))
