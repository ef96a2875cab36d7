import numpy as np
import pytest

from crosstok_kd import tensor as T
from crosstok_kd.divergences import KINDS, DivergenceKind, akl_alpha, divergence, head_mask, row_divergence
from crosstok_kd.tensor import ContractError, Tensor
from helpers import check_gradients


def dirichlet(rng, n, v, conc=1.0):
    return rng.dirichlet(np.full(v, conc), size=n)


def np_kl(p, q):
    p, q = np.asarray(p), np.asarray(q)
    return np.sum(p * (np.log(np.maximum(p, 1e-12)) - np.log(np.maximum(q, 1e-12))), axis=-1)


def reference(kind, p, q, lam=0.1, mu=0.5):
    if kind == "kl":
        return np_kl(p, q)
    if kind == "rkl":
        return np_kl(q, p)
    if kind == "skl":
        return np_kl(p, lam * p + (1 - lam) * q)
    if kind == "srkl":
        return np_kl(q, lam * q + (1 - lam) * p)
    if kind == "jsd":
        m = (p + q) / 2
        return 0.5 * np_kl(p, m) + 0.5 * np_kl(q, m)
    out = []
    for pr, qr in zip(p, q):
        order = sorted(range(len(pr)), key=lambda i: (-pr[i], i))
        head, mass = set(), 0.0
        for i in order:
            if mass >= mu:
                break
            head.add(i)
            mass += pr[i]
        gh = sum(abs(pr[i] - qr[i]) for i in head)
        gt = sum(abs(pr[i] - qr[i]) for i in range(len(pr)) if i not in head)
        a = 0.5 if gh + gt == 0 else gh / (gh + gt)
        out.append(a * np_kl(pr, qr) + (1 - a) * np_kl(qr, pr))
    return np.array(out)


@pytest.mark.parametrize("kind", KINDS)
def test_matches_direct_formula(kind):
    rng = np.random.default_rng(0)
    p, q = dirichlet(rng, 20, 7), dirichlet(rng, 20, 7)
    got = row_divergence(DivergenceKind(kind), Tensor(p), Tensor(q)).data
    np.testing.assert_allclose(got, reference(kind, p, q), rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("kind", KINDS)
def test_zero_at_equal_rows(kind):
    rng = np.random.default_rng(1)
    p = dirichlet(rng, 30, 6)
    assert abs(divergence(DivergenceKind(kind), Tensor(p), Tensor(p.copy())).item()) < 1e-12


def test_kl_analytic_example():
    assert abs(divergence(DivergenceKind("kl"), Tensor([[1.0, 0.0]]), Tensor([[0.5, 0.5]])).item() - np.log(2)) < 1e-15


def test_jsd_symmetric_and_bounded():
    rng = np.random.default_rng(2)
    p, q = dirichlet(rng, 1000, 5, 0.3), dirichlet(rng, 1000, 5, 0.3)
    k = DivergenceKind("jsd")
    a, b = row_divergence(k, Tensor(p), Tensor(q)).data, row_divergence(k, Tensor(q), Tensor(p)).data
    np.testing.assert_allclose(a, b, atol=1e-15)
    assert a.max() <= np.log(2)


def softmax_pairs(rng, n, v):
    z = rng.normal(size=(2, n, v))
    e = np.exp(z - z.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def test_skew_limit_approaches_kl():
    p, q = softmax_pairs(np.random.default_rng(3), 1000, 8)
    skl = row_divergence(DivergenceKind("skl", skew_lambda=1e-6), Tensor(p), Tensor(q)).data
    assert np.max(np.abs(skl - np_kl(p, q))) < 1e-4


def test_skew_gap_is_first_order_in_lambda():
    # KL(p||q) - SKL = lam * (chi2(p||q)) + O(lam^2); the gap grows with chi2, not only lam
    rng = np.random.default_rng(4)
    p, q = dirichlet(rng, 50, 6), dirichlet(rng, 50, 6)
    lam = 1e-6
    skl = row_divergence(DivergenceKind("skl", skew_lambda=lam), Tensor(p), Tensor(q)).data
    chi2 = (p * p / q).sum(-1) - 1.0
    np.testing.assert_allclose(np_kl(p, q) - skl, lam * chi2, rtol=1e-2, atol=1e-9)


def test_head_mask_and_alpha_range():
    p = np.array([[0.5, 0.3, 0.2], [0.1, 0.2, 0.7]])
    assert head_mask(p, 0.5).tolist() == [[1, 0, 0], [0, 0, 1]]
    assert head_mask(p, 0.6).tolist() == [[1, 1, 0], [0, 0, 1]]
    rng = np.random.default_rng(5)
    a = akl_alpha(Tensor(dirichlet(rng, 500, 5)), Tensor(dirichlet(rng, 500, 5)), 0.5).data
    assert a.min() >= 0.0 and a.max() <= 1.0
    same = Tensor(np.array([[0.2, 0.8]]))
    assert akl_alpha(same, same, 0.5).data.tolist() == [0.5]


def test_mask_selects_rows():
    rng = np.random.default_rng(5)
    p, q = dirichlet(rng, 4, 3), dirichlet(rng, 4, 3)
    mask = np.array([True, False, True, False])
    got = divergence(DivergenceKind("kl"), Tensor(p), Tensor(q), mask).item()
    assert abs(got - np_kl(p, q)[mask].mean()) < 1e-15


def test_contract_errors():
    k = DivergenceKind("kl")
    with pytest.raises(ContractError):
        divergence(k, Tensor([[0.5, 0.6]]), Tensor([[0.5, 0.5]]))
    with pytest.raises(ContractError):
        divergence(k, Tensor([[0.5, 0.5]]), Tensor([[1.0, 0.0, 0.0]]))
    with pytest.raises(ContractError):
        divergence(k, Tensor([[0.5, 0.5]]), Tensor([[0.5, 0.5]]), np.array([False]))
    with pytest.raises(ContractError):
        DivergenceKind("tv")
    with pytest.raises(ContractError):
        DivergenceKind("skl", skew_lambda=1.0)


@pytest.mark.parametrize("kind", KINDS)
def test_gradients_on_both_sides(kind):
    rng = np.random.default_rng(6)
    zp = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    zq = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    k = DivergenceKind(kind)

    def loss():
        return divergence(k, T.softmax_rows(zp), T.softmax_rows(zq))

    assert check_gradients(loss, [zp, zq]) < 1e-3
