import numpy as np
import pytest
import torch

from shwmpc.errors import DimensionError
from shwmpc.nets import as_tensor, to_numpy
from shwmpc.picnn import Picnn, picnn_forward, picnn_grad_xi


def random_picnn(seed, n_xi=4, n_eta=2, n_out=2, hidden=(8, 8), std=0.5, final="softplus"):
    g = torch.Generator().manual_seed(seed)
    return Picnn(n_xi, n_eta, n_out, hidden, init_std=std, final_activation=final, generator=g, wz_mean=0.0)


def softplus(x):
    return np.logaddexp(0.0, x)


def test_zero_weights_single_layer_is_log2():
    p = Picnn(3, 2, 1, hidden=())
    p.zero_()
    assert np.allclose(picnn_forward(p, np.array([1.0, -2.0, 0.5]), np.zeros(2)), np.log(2.0), atol=1e-15)
    assert np.allclose(picnn_grad_xi(p, np.array([1.0, -2.0, 0.5]), np.zeros(2)), 0.0)


def test_reduces_to_softplus():
    p = Picnn(1, 1, 1, hidden=())
    p.zero_()
    with torch.no_grad():
        p.w_xi[0].fill_(1.0)
        p.b_xi_eta[0].fill_(1.0)
    xs = np.linspace(-5, 5, 21)
    vals = np.array([picnn_forward(p, [x], [0.3])[0] for x in xs])
    grads = np.array([picnn_grad_xi(p, [x], [0.3])[0, 0] for x in xs])
    assert np.allclose(vals, softplus(xs), atol=1e-14)
    assert np.allclose(grads, 1 / (1 + np.exp(-xs)), atol=1e-14)


def test_two_layer_hand_computation():
    # depth 2, width 1, all weights zero except: layer-1 xi path 1, layer-2 convex weight softplus(0)=ln2, gate softplus(0)
    p = Picnn(1, 1, 1, hidden=(1,))
    p.zero_()
    with torch.no_grad():
        p.w_xi[0].fill_(1.0)
        p.b_xi_eta[0].fill_(1.0)
        p.wz_raw[1].fill_(0.0)
    x = 0.7
    expected = softplus(np.log(2) * np.log(2) * softplus(x))
    assert abs(picnn_forward(p, [x], [0.0])[0] - expected) < 1e-14


def test_jensen_probes(rng):
    for seed in range(5):
        p = random_picnn(seed)
        eta = as_tensor(rng.normal(size=(2000, 2)))
        a, b = rng.normal(size=(2, 2000, 4)) * 2
        t = rng.uniform(0, 1, (2000, 1))
        with torch.no_grad():
            mid = p(as_tensor(t * a + (1 - t) * b), eta)
            ends = as_tensor(t) * p(as_tensor(a), eta) + as_tensor(1 - t) * p(as_tensor(b), eta)
        assert float((mid - ends).max()) <= 1e-10


def test_gradient_monotone(rng):
    p = random_picnn(11)
    eta = as_tensor(rng.normal(size=(1000, 2)))
    a, b = (as_tensor(v) for v in rng.normal(size=(2, 1000, 4)))
    with torch.no_grad():
        ga, gb = p.grad_xi(a, eta), p.grad_xi(b, eta)
    inner = torch.einsum("bok,bk->bo", ga - gb, a - b)
    assert float(inner.min()) >= -1e-10


def test_gradient_and_hessian_finite_differences(rng):
    for seed in range(3):
        p = random_picnn(seed, final="linear" if seed == 2 else "softplus")
        x, eta = rng.normal(size=4), rng.normal(size=2)
        with torch.no_grad():
            _, J, H = p.derivatives(as_tensor(x), as_tensor(eta), 2)
        J, H = to_numpy(J), to_numpy(H)
        h = 1e-5
        fdJ = np.stack([(picnn_forward(p, x + h * e, eta) - picnn_forward(p, x - h * e, eta)) / (2 * h)
                        for e in np.eye(4)], -1)
        fdH = np.stack([(picnn_grad_xi(p, x + h * e, eta) - picnn_grad_xi(p, x - h * e, eta)) / (2 * h)
                        for e in np.eye(4)], -1)
        assert np.linalg.norm(J - fdJ) <= 1e-5 * np.linalg.norm(J)
        assert np.linalg.norm(H - fdH) <= 1e-5 * np.linalg.norm(H)
        for o in range(H.shape[0]):
            assert np.linalg.eigvalsh(0.5 * (H[o] + H[o].T)).min() >= -1e-12


def test_fd_second_order_convergence(rng):
    p = random_picnn(5)
    x, eta = rng.normal(size=4), rng.normal(size=2)
    J = picnn_grad_xi(p, x, eta)

    def fd(h):
        return np.stack([(picnn_forward(p, x + h * e, eta) - picnn_forward(p, x - h * e, eta)) / (2 * h)
                         for e in np.eye(4)], -1)

    e1, e2 = np.linalg.norm(fd(1e-2) - J), np.linalg.norm(fd(1e-3) - J)
    assert e2 < e1 / 30


def test_nonnegative_convex_weights_after_updates(rng):
    p = random_picnn(6)
    opt = torch.optim.Adam(p.parameters(), lr=0.5)
    target = as_tensor(rng.normal(size=(32, 2)))
    for _ in range(50):
        opt.zero_grad()
        out = p(as_tensor(rng.normal(size=(32, 4))), as_tensor(rng.normal(size=(32, 2))))
        ((out - target) ** 2).mean().backward()
        opt.step()
    with torch.no_grad():
        assert all(bool(torch.all(w >= 0)) for w in p.effective_wz())


def test_input_mask_removes_dependence(rng):
    p = random_picnn(7)
    p.mask_inputs([True, True, False, False])
    x, eta = rng.normal(size=4), rng.normal(size=2)
    x2 = x.copy()
    x2[2:] += rng.normal(size=2)
    assert np.array_equal(picnn_forward(p, x, eta), picnn_forward(p, x2, eta))
    assert np.all(picnn_grad_xi(p, x, eta)[:, 2:] == 0)


def test_dimension_mismatch():
    p = random_picnn(8)
    with pytest.raises(DimensionError):
        picnn_forward(p, np.zeros(3), np.zeros(2))
