import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from hgd import losses as L
from hgd.config import LossConfig

D = torch.float64


def one_hot_rows(n, dim):
    return torch.eye(dim, dtype=D)[:n]


def test_info_nce_closed_form():
    e = one_hot_rows(5, 5)
    anchor, pos, negs = e[0], e[0:1], e[1:5]
    loss = L.info_nce(anchor, pos, torch.cat([pos, negs]), tau=1.0)
    assert float(loss) == pytest.approx(-math.log(math.e / (math.e + 4)), abs=1e-12)
    assert float(loss) == pytest.approx(0.9048324, abs=1e-6)


def test_info_nce_high_temperature_limit():
    e = one_hot_rows(5, 5)
    pool = torch.cat([e[0:1], e[1:5]])
    loss100 = float(L.info_nce(e[0], e[0:1], pool, tau=100.0))
    assert loss100 == pytest.approx(math.log(1 + 4 * math.exp(-0.01)), abs=1e-12)
    assert float(L.info_nce(e[0], e[0:1], pool, tau=1e5)) == pytest.approx(math.log(5), abs=1e-3)


@pytest.mark.parametrize("tau", [0.05, 0.5, 1.0, 7.0])
@pytest.mark.parametrize("size", [1, 3, 9])
def test_info_nce_uniform_pool(tau, size):
    v = torch.tensor([0.3, -1.2, 2.0], dtype=D)
    pool = v.expand(size, -1)
    loss = L.info_nce(torch.tensor([1.0, 0.0, 0.5], dtype=D), v[None], pool, tau)
    assert float(loss) == pytest.approx(math.log(size), abs=1e-9)


def test_info_nce_errors():
    with pytest.raises(ValueError):
        L.info_nce(torch.ones(3), torch.ones(1, 3), torch.ones(2, 3), tau=0.0)
    assert L.info_nce(torch.ones(3), torch.ones(1, 3), torch.zeros(0, 3), tau=1.0) is None


def _orthogonal_maps(c, h, w):
    """Content map whose pixel vectors are mutually orthogonal one-hots."""
    z = torch.zeros(c, h, w, dtype=D)
    for n in range(h * w):
        z[n, n // w, n % w] = 1.0
    return z


def test_pgd_identical_translation_closed_form():
    z = _orthogonal_maps(8, 2, 2)
    other = torch.zeros(8, 2, 2, dtype=D)
    other[4:8] = _orthogonal_maps(4, 2, 2)
    loss = L.pgd_loss(z, z.clone(), [other], tau1=1.0)
    # each anchor: positive sim 1, 3 own negatives + 4 cross-subject negatives all at sim 0
    assert float(loss) == pytest.approx(math.log(math.e + 7) - 1.0, abs=1e-12)
    loss_own = L.pgd_loss(z, z.clone(), [], tau1=1.0)
    assert float(loss_own) == pytest.approx(math.log(math.e + 3) - 1.0, abs=1e-12)


def test_pgd_permutation_invariance():
    g = torch.Generator().manual_seed(0)
    a, b, o = (torch.randn(4, 3, 5, generator=g, dtype=D) for _ in range(3))
    perm = torch.randperm(15, generator=g)
    shuf = lambda z: z.reshape(4, -1)[:, perm].reshape(4, 3, 5)
    l1 = L.pgd_loss(a, b, [o], 0.5)
    l2 = L.pgd_loss(shuf(a), shuf(b), [shuf(o)], 0.5)
    assert float(l1) == pytest.approx(float(l2), abs=1e-12)


def test_pgd_misaligned():
    with pytest.raises(ValueError):
        L.pgd_loss(torch.randn(4, 2, 2), torch.randn(4, 2, 3))


def test_pgd_anchor_subsampling_is_seeded():
    a, b = torch.randn(4, 20, 20), torch.randn(4, 20, 20)
    x = L.pgd_loss(a, b, [], 0.5, 50, torch.Generator().manual_seed(1))
    y = L.pgd_loss(a, b, [], 0.5, 50, torch.Generator().manual_seed(1))
    assert torch.equal(x, y)


def test_mask_structure_examples():
    z = torch.randn(3, 4, 4)
    assert torch.equal(L.mask_structure(z, torch.full((4, 4), 2), 2), z)
    assert torch.equal(L.mask_structure(z, torch.full((4, 4), 1), 2), torch.zeros_like(z))
    with pytest.raises(ValueError):
        L.mask_structure(z, torch.zeros(4, 4, dtype=torch.long), 4, num_classes=4)
    with pytest.raises(ValueError):
        L.mask_structure(z, torch.zeros(4, 4, dtype=torch.long), -1)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 6))
def test_mask_partition_identity(seed, k):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(3, 5, 6, generator=g)
    labels = torch.randint(0, k, (5, 6), generator=g)
    total = sum(L.mask_structure(z, labels, s) for s in range(k))
    assert torch.equal(total, z)


def test_deformation_examples():
    g = torch.Generator().manual_seed(0)
    a = torch.randn(3, 4, 4, generator=g, dtype=D)
    assert float(L.deformation(a, a)) == 0.0
    b = a.clone()
    b[1, 2, 3] += 1.0
    assert float(L.deformation(a, b)) == pytest.approx(1.0, abs=1e-12)
    c = torch.randn(3, 4, 4, generator=g, dtype=D)
    oracle = sum(abs(x - y) for x, y in zip(a.flatten().tolist(), c.flatten().tolist()))
    assert float(L.deformation(a, c)) == pytest.approx(oracle, abs=1e-12)
    with pytest.raises(ValueError):
        L.deformation(a, a[:, :2])


def test_rank_weights_examples():
    w = L.rank_weights([5.0, 2.0, 1.0], 0.5)
    assert list(w) == [1.0, math.exp(-0.5), math.exp(-1.0)]
    assert list(L.rank_weights([3.0], 0.5)) == [1.0]
    assert list(L.rank_weights([2.0, 2.0, 2.0], 0.5)) == [1.0, 1.0, 1.0]
    assert list(L.rank_weights([1.0, 4.0, 4.0], 0.5)) == [math.exp(-1.0), 1.0, 1.0]
    with pytest.raises(ValueError):
        L.rank_weights([1.0, -0.1])
    with pytest.raises(ValueError):
        L.rank_weights([])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=1, max_size=12), st.floats(0.01, 5))
def test_rank_weight_properties(d, alpha):
    w = L.rank_weights(d, alpha)
    assert np.all((w > 0) & (w <= 1))
    top = np.asarray(d) == max(d)
    assert np.all(w[top] == 1.0)
    order = np.argsort(-np.asarray(d), kind="stable")
    assert np.all(np.diff(w[order]) <= 0)
    w2 = L.rank_weights(d, 2 * alpha)
    assert np.all(w2[~top] <= w[~top])


def _structured_map(c, labels, classes, basis_offset=0):
    """Each structure s gets a constant one-hot feature e_{s + offset} on its pixels."""
    z = torch.zeros(c, *labels.shape, dtype=D)
    for s in classes:
        z[s + basis_offset][labels == s] = 1.0
    return z


def test_sgd_identical_translation_closed_form():
    labels = torch.tensor([[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])
    z = _structured_map(8, labels, range(4))
    other = _structured_map(8, labels, range(4), basis_offset=4)
    loss = L.sgd_loss(z, z.clone(), labels, [(other, labels)], tau2=1.0, alpha_s=0.5)
    # all deformations are 0 -> every weight 1; negatives: 3 own + 3 translated + 4 other, all at sim 0
    assert float(loss) == pytest.approx(math.log(math.e + 10) - 1.0, abs=1e-12)


def test_sgd_mean_feature_runs():
    labels = torch.randint(0, 3, (4, 4))
    a, b = torch.randn(5, 4, 4), torch.randn(5, 4, 4)
    loss = L.sgd_loss(a, b, labels, [(torch.randn(5, 4, 4), labels)], feature="mean")
    assert torch.isfinite(loss)


def test_sgd_single_structure_without_pool_is_excluded():
    labels = torch.zeros(3, 3, dtype=torch.long)
    a = torch.randn(2, 3, 3, requires_grad=True)
    loss = L.sgd_loss(a, torch.randn(2, 3, 3), labels, [])
    assert float(loss.detach()) == 0.0


def test_ggd_closed_form_and_symmetry():
    e = torch.eye(4, dtype=D)
    a = e[0].reshape(1, 2, 2)
    others = [e[1].reshape(1, 2, 2), e[2].reshape(1, 2, 2)]
    assert float(L.ggd_loss(a, a.clone(), others, tau2=1.0)) == pytest.approx(math.log(math.e + 2) - 1, abs=1e-12)
    g = torch.Generator().manual_seed(4)
    x, y = torch.randn(3, 2, 2, generator=g, dtype=D), torch.randn(3, 2, 2, generator=g, dtype=D)
    pool = [torch.randn(3, 2, 2, generator=g, dtype=D) for _ in range(2)]
    assert float(L.ggd_loss(x, y, pool)) == pytest.approx(float(L.ggd_loss(y, x, pool)), abs=1e-12)
    assert float(L.ggd_loss(x, y, [])) == 0.0


def _random_orthogonal(c, seed):
    g = torch.Generator().manual_seed(seed)
    q, _ = torch.linalg.qr(torch.randn(c, c, generator=g, dtype=D))
    return q


def _signed_permutation(c, seed):
    g = torch.Generator().manual_seed(seed)
    p = torch.eye(c, dtype=D)[torch.randperm(c, generator=g)]
    return p * (torch.randint(0, 2, (c, 1), generator=g, dtype=D) * 2 - 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_contrastive_losses_rotation_invariant(seed):
    g = torch.Generator().manual_seed(seed)
    c = 4
    a, b, o = (torch.randn(c, 3, 3, generator=g, dtype=D) for _ in range(3))
    labels = torch.randint(0, 3, (3, 3), generator=g)
    q = _random_orthogonal(c, seed + 1)
    rot = lambda z, m=q: torch.einsum("dc,chw->dhw", m, z)
    pairs = [
        (L.pgd_loss(a, b, [o]), L.pgd_loss(rot(a), rot(b), [rot(o)])),
        (L.ggd_loss(a, b, [o]), L.ggd_loss(rot(a), rot(b), [rot(o)])),
        # zero deformation everywhere: the weights cannot depend on the rotation
        (L.sgd_loss(a, a.clone(), labels, [(o, labels)]), L.sgd_loss(rot(a), rot(a), labels, [(rot(o), labels)])),
    ]
    # the L1 deformation ranking is preserved by signed permutations, which are rotations too
    sp = _signed_permutation(c, seed + 2)
    pairs.append((L.sgd_loss(a, b, labels, [(o, labels)]),
                  L.sgd_loss(rot(a, sp), rot(b, sp), labels, [(rot(o, sp), labels)])))
    for x, y in pairs:
        assert float(x) >= 0
        assert float(x) == pytest.approx(float(y), abs=1e-9)


def _fd_check(fn, x, h=1e-4, tol=1e-4):
    x = x.clone().requires_grad_(True)
    fn(x).backward()
    analytic = x.grad.detach().clone()
    numeric = torch.zeros_like(analytic)
    flat = x.detach().view(-1)
    for k in range(flat.numel()):
        orig = flat[k].item()
        flat[k] = orig + h
        up = fn(x.detach()).item()
        flat[k] = orig - h
        down = fn(x.detach()).item()
        flat[k] = orig
        numeric.view(-1)[k] = (up - down) / (2 * h)
    err = (analytic - numeric).norm() / max(numeric.norm().item(), 1e-12)
    assert err < tol, f"relative gradient error {err:.3e}"
    return float(err)


GRAD_SHAPE = (4, 2, 2)  # 16 scalars per map


def _maps(seed, n=3):
    g = torch.Generator().manual_seed(seed)
    return [torch.randn(*GRAD_SHAPE, generator=g, dtype=D) for _ in range(n)]


def test_pgd_gradient():
    a, b, o = _maps(0)
    _fd_check(lambda t: L.pgd_loss(a, t, [o], 0.5), b)
    _fd_check(lambda t: L.pgd_loss(t, b, [o], 0.5), a)


def test_sgd_gradient():
    a, b, o = _maps(1)
    labels = torch.tensor([[0, 1], [2, 1]])
    _fd_check(lambda t: L.sgd_loss(a, t, labels, [(o, labels)], 0.5, 0.5), b)
    _fd_check(lambda t: L.sgd_loss(t, b, labels, [(o, labels)], 0.5, 0.5), a)


def test_ggd_gradient():
    a, b, o = _maps(2)
    _fd_check(lambda t: L.ggd_loss(a, t, [o], 0.5), b)
    _fd_check(lambda t: L.ggd_loss(t, b, [o], 0.5), a)


def test_cycle_gradient():
    g = torch.Generator().manual_seed(3)
    m = torch.randn(1, 1, 4, 4, generator=g, dtype=D)
    _fd_check(lambda t: L.cycle_loss(m, t), torch.randn(1, 1, 4, 4, generator=g, dtype=D))


def test_l1_terms():
    m = torch.zeros(1, 1, 64, 64)
    assert float(L.cycle_loss(m, m)) == 0.0
    m2 = m.clone()
    m2[0, 0, 3, 3] = 1.0
    assert float(L.self_recon_loss(m, m2)) == pytest.approx(1 / 4096)
    g = torch.Generator().manual_seed(0)
    a, b = torch.randn(10, generator=g, dtype=D), torch.randn(10, generator=g, dtype=D)
    assert float(L.cycle_loss(a, b)) == pytest.approx(sum(abs(x - y) for x, y in zip(a.tolist(), b.tolist())) / 10)


def test_lsgan_terms():
    ones, zeros = torch.ones(1, 1, 4, 4), torch.zeros(1, 1, 4, 4)
    d, g = L.adv_domain_loss([ones], [zeros])
    assert float(d) == 0.0 and float(g) == 1.0
    d, g = L.adv_domain_loss([ones], [ones])
    assert float(g) == 0.0
    half = torch.full((1, 1, 2, 2), 0.5)
    d, g = L.adv_domain_loss([half], [half])
    assert float(d) == pytest.approx(0.5) and float(g) == pytest.approx(0.25)
    # hand-evaluated 2-sample probe
    real, fake = torch.tensor([0.8, 1.3]), torch.tensor([0.1, -0.4])
    d, g = L.adv_domain_loss(real, fake)
    assert float(d) == pytest.approx((0.04 + 0.09) / 2 + (0.01 + 0.16) / 2)
    assert float(g) == pytest.approx((0.81 + 1.96) / 2)


def test_content_adversarial_terms():
    scores = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    d, g = L.adv_content_loss(scores, [0, 1])
    assert float(d) == 0.0 and float(g) == pytest.approx(0.25)
    uniform = torch.full((2, 2), 0.5)
    d, g = L.adv_content_loss(uniform, [0, 1])
    assert float(g) == 0.0 and float(d) == pytest.approx(0.25)


def test_total_loss():
    cfg = LossConfig()
    zero = {k: torch.tensor(0.0) for k in L.TERM_WEIGHTS}
    total, br = L.total_loss(zero, cfg)
    assert float(total) == 0.0
    terms = {k: torch.tensor(float(n + 1)) for n, k in enumerate(L.TERM_WEIGHTS)}
    total, br = L.total_loss(terms, cfg)
    cfg2 = LossConfig(lambda6=2 * cfg.lambda6)
    total2, br2 = L.total_loss(terms, cfg2)
    assert br2["sgd"] == 2 * br["sgd"]
    assert all(br2[k] == br[k] for k in L.TERM_WEIGHTS if k != "sgd")
    assert abs(sum(br[k] for k in L.TERM_WEIGHTS) - br["total"]) < 1e-9
    with pytest.raises(KeyError):
        L.total_loss({"bogus": torch.tensor(1.0)}, cfg)
    with pytest.raises(FloatingPointError):
        L.total_loss({"cycle": torch.tensor(float("nan"))}, cfg)


def test_default_loss_config():
    cfg = LossConfig()
    assert (cfg.lambda5, cfg.lambda6, cfg.lambda7) == (1.0, 2.0, 1.0)
    assert (cfg.alpha_p, cfg.alpha_s) == (0.01, 0.5)
    assert cfg.tau1 > 0 and cfg.tau2 > 0
