import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from sslpoison import ssl
from sslpoison.ssl import SSLConfig, sharpen


def sharpen_oracle(p, T):
    q = [x ** (1.0 / T) for x in p]
    s = sum(q)
    return [x / s for x in q]


def test_sharpen_worked_example():
    assert np.allclose(sharpen([0.6, 0.3, 0.1], 0.5), [0.36 / 0.46, 0.09 / 0.46, 0.01 / 0.46], rtol=1e-12)


def test_sharpen_oracle_many_inputs():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        p = rng.dirichlet(np.ones(rng.integers(2, 11)))
        T = rng.uniform(0.2, 2.0)
        got = sharpen(p, T)
        ref = np.array(sharpen_oracle(p.tolist(), T))
        assert np.max(np.abs(got - ref) / np.maximum(ref, 1e-300)) <= 1e-9


def test_sharpen_t1_identity_and_limit():
    p = np.array([0.5, 0.3, 0.2])
    assert np.allclose(sharpen(p, 1.0), p, rtol=1e-12)
    assert np.allclose(sharpen(p, 1e-3), [1, 0, 0])


def test_sharpen_rejects_zero_distribution():
    with pytest.raises(ValueError):
        sharpen([0.0, 0.0], 0.5)
    with pytest.raises(ValueError):
        sharpen(torch.zeros(1, 3), 0.5)


def test_sharpen_torch_matches_numpy():
    p = np.random.default_rng(1).dirichlet(np.ones(5), size=4)
    assert np.allclose(sharpen(torch.tensor(p), 0.5).numpy(), sharpen(p, 0.5), rtol=1e-9)


@settings(max_examples=100, deadline=None)
@given(p=arrays(np.float64, st.integers(2, 8), elements=st.floats(1e-3, 1.0)), T=st.floats(0.1, 1.0))
def test_sharpen_keeps_order_and_mass(p, T):
    q = sharpen(p / p.sum(), T)
    assert abs(q.sum() - 1) < 1e-9
    assert np.argmax(q) == np.argmax(p)
    # lower temperature never lowers the top probability
    assert q.max() >= (p / p.sum()).max() - 1e-12


def test_config_defaults():
    assert SSLConfig("mixmatch").lambda_u == 100
    assert SSLConfig("uda").lambda_u == 1 and SSLConfig("fixmatch").lambda_u == 1
    with pytest.raises(ValueError):
        SSLConfig("meanteacher")
    with pytest.raises(NotImplementedError):
        SSLConfig("mixmatch", mixup=True)


def test_fixmatch_threshold_strict():
    probs = torch.tensor([[0.8, 0.2], [0.81, 0.19], [0.5, 0.5]])
    targets, mask = ssl.fixmatch_targets(probs, 0.8)
    assert mask.tolist() == [0.0, 1.0, 0.0]
    # ties go to the lowest index
    assert targets[2].tolist() == [1.0, 0.0]


def test_argmax_lowest():
    p = torch.tensor([[0.2, 0.4, 0.4], [0.9, 0.05, 0.05]])
    assert ssl.argmax_lowest(p).tolist() == [1, 0]


class Lin(nn.Module):
    def __init__(self, d=6, c=3):
        super().__init__()
        self.fc = nn.Linear(d, c)

    def forward(self, x):
        return self.fc(x.reshape(len(x), -1))


def test_guess_label_average():
    torch.manual_seed(0)
    m = Lin()
    x = torch.randn(4, 6)
    g = ssl.guess_label(m, x, K=3)
    assert torch.allclose(g, torch.softmax(m(x), -1))
    assert torch.allclose(g.sum(-1), torch.ones(4))
    with pytest.raises(ValueError):
        ssl.guess_label(m, x, K=0)


def _rel_err(a, b):
    return float((a - b).norm() / max(float(b.norm()), 1e-30))


def _numeric_grad(f, x, h=1e-6):
    g = torch.zeros_like(x)
    flat = x.view(-1)
    for i in range(flat.numel()):
        old = float(flat[i])
        flat[i] = old + h
        up = float(f(x))
        flat[i] = old - h
        dn = float(f(x))
        flat[i] = old
        g.view(-1)[i] = (up - dn) / (2 * h)
    return g


def test_mixmatch_gradient():
    torch.manual_seed(0)
    lx = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
    lv = torch.randn(2, 5, 3, dtype=torch.float64, requires_grad=True)
    y = torch.tensor([0, 1, 2, 1])
    guess = sharpen(torch.softmax(torch.randn(5, 3, dtype=torch.float64), -1), 0.5)
    total = lambda a, b: ssl.mixmatch_objective(a, y, b, guess, 100.0)[2]
    total(lx, lv).backward()
    assert _rel_err(lx.grad, _numeric_grad(lambda a: total(a, lv.detach()), lx.detach().clone())) < 1e-4
    assert _rel_err(lv.grad, _numeric_grad(lambda b: total(lx.detach(), b), lv.detach().clone())) < 1e-4


@pytest.mark.parametrize("soft", [True, False])
def test_consistency_gradient(soft):
    torch.manual_seed(1)
    lx = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
    ls = torch.randn(6, 3, dtype=torch.float64, requires_grad=True)
    y = torch.tensor([0, 1, 2, 0])
    probs = torch.softmax(torch.randn(6, 3, dtype=torch.float64) * 3, -1)
    if soft:
        targets, mask = sharpen(probs, 0.5), (probs.max(-1).values > 0.5).double()
    else:
        targets, mask = ssl.fixmatch_targets(probs, 0.5)
    f = lambda a, b: sum(ssl.consistency_objective(a, y, b, targets, mask))
    f(lx, ls).backward()
    assert _rel_err(ls.grad, _numeric_grad(lambda b: f(lx.detach(), b), ls.detach().clone())) < 1e-4
    assert _rel_err(lx.grad, _numeric_grad(lambda a: f(a, ls.detach()), lx.detach().clone())) < 1e-4


def test_masked_samples_get_no_gradient():
    ls = torch.randn(3, 4, requires_grad=True)
    targets = torch.eye(4)[:3]
    mask = torch.tensor([1.0, 0.0, 1.0])
    _, lu = ssl.consistency_objective(torch.randn(2, 4), torch.tensor([0, 1]), ls, targets, mask)
    lu.backward()
    assert torch.all(ls.grad[1] == 0) and torch.any(ls.grad[0] != 0)


def test_targets_are_constants_in_steps():
    torch.manual_seed(0)
    m = Lin()
    x, y = torch.randn(4, 6), torch.tensor([0, 1, 2, 0])
    weak, strong = torch.randn(8, 6) * 5, torch.randn(8, 6)
    cfg = SSLConfig("fixmatch", tau=0.0)
    _, lu, rate = ssl.fixmatch_step(m, (x, y), (weak, strong), cfg)
    # gradient of L_U equals the one computed with a frozen target tensor
    lu.backward()
    g_step = m.fc.weight.grad.clone()
    m.zero_grad()
    with torch.no_grad():
        t, mask = ssl.fixmatch_targets(torch.softmax(m(weak), -1), 0.0)
    (ssl.soft_cross_entropy(m(strong), t) * mask).mean().backward()
    assert torch.allclose(g_step, m.fc.weight.grad, atol=1e-6)
    assert rate == 1.0


def test_uda_mask_rate_and_empty_batch():
    torch.manual_seed(0)
    m = Lin()
    x, y = torch.randn(4, 6), torch.tensor([0, 1, 2, 0])
    _, lu, rate = ssl.uda_step(m, (x, y), (torch.zeros(0, 6), torch.zeros(0, 6)), SSLConfig("uda"))
    assert float(lu) == 0 and rate == 0.0
    _, _, rate = ssl.uda_step(m, (x, y), (torch.randn(5, 6), torch.randn(5, 6)), SSLConfig("uda", tau=1.0))
    assert rate == 0.0


def test_mixmatch_lambda_zero_is_supervised():
    torch.manual_seed(0)
    m = Lin()
    x, y = torch.randn(4, 6), torch.tensor([0, 1, 2, 0])
    lx, lu, tot = ssl.mixmatch_step(m, (x, y), (torch.randn(2, 3, 6),), SSLConfig("mixmatch", lambda_u=0.0))
    assert float(lu) == 0 and torch.allclose(tot, nn.functional.cross_entropy(m(x), y))
