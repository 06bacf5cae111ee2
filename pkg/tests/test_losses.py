import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from idreveal import autodiff as ad
from idreveal import generator as gen
from idreveal import losses, tid_net
from idreveal.errors import ConfigError, DomainError, EmptyInputError

from conftest import SMALL_GEN, SMALL_TID

TAU = 0.08


def unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def sim_oracle(pivot, seq, tau):
    best = math.inf
    for v in seq:
        best = min(best, sum((a - b) ** 2 for a, b in zip(pivot, v)))
    return -best / tau


def prob_oracle(emb, tau):
    """Literal double loop over (k, j) for every pivot (c, i, t)."""
    N, M, T, _ = emb.shape
    p = np.zeros((N, M, T))
    for c in range(N):
        for i in range(M):
            for t in range(T):
                num = den = 0.0
                for k in range(N):
                    for j in range(M):
                        if k == c and j == i:
                            continue
                        e = math.exp(sim_oracle(emb[c, i, t], emb[k, j], tau))
                        den += e
                        if k == c:
                            num += e
                p[c, i, t] = num / den
    return p


def adv_oracle(g, targets, real, tau):
    Q, T, _ = g.shape
    N, M = real.shape[:2]
    p = np.zeros((Q, T))
    for q in range(Q):
        for t in range(T):
            num = den = 0.0
            for k in range(N):
                for j in range(M):
                    e = math.exp(sim_oracle(g[q, t], real[k, j], tau))
                    den += e
                    num += e if k == targets[q] else 0.0
            p[q, t] = num / den
    return p


def random_emb(seed, N=2, M=2, T=4, D=6, scale=1.0):
    return unit(np.random.default_rng(seed).normal(size=(N, M, T, D))) * scale


# --- similarity -------------------------------------------------------------------

def test_similarity_self():
    seq = unit(np.random.default_rng(0).normal(size=(5, 4)))
    assert losses.similarity(seq[2], seq, TAU) == 0.0


def test_similarity_value():
    pivot = np.zeros(3)
    other = np.array([[math.sqrt(0.08), 0, 0], [1.0, 1.0, 0]])
    assert losses.similarity(pivot, other, 0.08) == pytest.approx(-1.0, abs=1e-12)


def test_similarity_monotone_and_permutation():
    rng = np.random.default_rng(1)
    pivot, other = rng.normal(size=4), rng.normal(size=(6, 4))
    s = losses.similarity(pivot, other, TAU)
    assert losses.similarity(pivot, np.vstack([other, [100, 100, 100, 100]]), TAU) >= s
    assert losses.similarity(pivot, other[rng.permutation(6)], TAU) == s
    with pytest.raises(EmptyInputError):
        losses.similarity(pivot, np.zeros((0, 4)), TAU)


def test_cross_similarity_oracle():
    rng = np.random.default_rng(2)
    q, r = rng.normal(size=(3, 4, 5)), rng.normal(size=(2, 2, 6, 5))
    S = losses.cross_similarity(q, r, TAU).data
    for a in range(3):
        for t in range(4):
            for k in range(2):
                for j in range(2):
                    assert S[a, t, k, j] == pytest.approx(sim_oracle(q[a, t], r[k, j], TAU), abs=1e-10)
    assert np.all(S <= 0)


# --- probabilities -------------------------------------------------------------------

def test_symmetric_batch_one_ninth():
    emb = np.ones((8, 8, 3, 4)) / 2.0
    p = losses.batch_probabilities(emb, TAU)
    assert np.allclose(p, 1 / 9, atol=1e-12, rtol=0)


@pytest.mark.parametrize("N,M", [(2, 3), (3, 2), (4, 4)])
def test_symmetric_batch_general(N, M):
    p = losses.batch_probabilities(np.zeros((N, M, 2, 3)), TAU)
    assert np.allclose(p, (M - 1) / ((M - 1) + (N - 1) * M), atol=1e-12, rtol=0)


def test_dominance_limit():
    # identity clusters far apart: same-identity distances 0, cross huge
    emb = np.zeros((2, 2, 3, 2))
    emb[1] = 10.0
    p = losses.batch_probabilities(emb, TAU)
    assert np.all(p > 1 - 1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_probabilities_match_double_loop(seed):
    emb = random_emb(seed)
    assert np.allclose(losses.batch_probabilities(emb, TAU), prob_oracle(emb, TAU), atol=1e-12, rtol=0)


def test_probabilities_in_open_unit_and_reconstruct():
    emb = random_emb(9, N=3, M=3, T=5)
    N, M, T, D = emb.shape
    S = losses.cross_similarity(emb.reshape(N * M, T, D), emb, TAU).data
    num, den = losses.real_masks(N, M)
    cross = den & ~num
    e = np.exp(S)
    num_sum = (e * num).sum(axis=(2, 3))
    cross_sum = (e * cross).sum(axis=(2, 3))
    den_sum = (e * den).sum(axis=(2, 3))
    assert np.allclose(num_sum + cross_sum, den_sum, atol=1e-12, rtol=0)
    p = losses.batch_probabilities(emb, TAU).reshape(N * M, T)
    assert np.allclose(p, num_sum / den_sum, atol=1e-12, rtol=0)
    assert np.all((p > 0) & (p < 1))


def test_softmax_shift_invariance():
    rng = np.random.default_rng(3)
    S = -rng.uniform(0, 5, size=(4, 3, 2, 2))
    num, den = losses.real_masks(2, 2)
    shift = rng.normal(size=(4, 3, 1, 1)) * 50
    a = losses.log_probabilities(S, num, den).data
    b = losses.log_probabilities(S + shift, num, den).data
    assert np.allclose(a, b, atol=1e-10, rtol=0)


def test_no_underflow_far_apart():
    emb = random_emb(4) * 30.0  # squared distances up to ~3600, S ~ -45000
    lp = losses.batch_log_probabilities(emb, TAU).data
    assert np.all(np.isfinite(lp)) and np.all(lp <= 0)


def test_grid_errors():
    with pytest.raises(ConfigError):
        losses.batch_probabilities(np.zeros((1, 4, 2, 3)), TAU)
    with pytest.raises(ConfigError):
        losses.identification_accuracy(np.zeros((3, 1, 2, 3)), TAU)


# --- losses ----------------------------------------------------------------------------

def test_rec_loss_values():
    assert losses.rec_loss(np.full(7, 1 / math.e)) == pytest.approx(7.0, abs=1e-12)
    assert losses.rec_loss(np.full(3, 1 - 1e-15)) < 1e-13
    p = np.random.default_rng(0).uniform(0.01, 0.99, size=(2, 3, 4))
    assert losses.rec_loss(p) == pytest.approx(sum(-math.log(v) for v in p.ravel()), abs=1e-12)


@pytest.mark.parametrize("bad", [0.0, 1.0, -0.1, 1.5])
def test_domain_errors(bad):
    for f in (losses.rec_loss, losses.adv_loss, losses.inv_loss):
        with pytest.raises(DomainError):
            f(np.array([0.5, bad]))


def test_adv_inv_half():
    p = np.full((3, 5), 0.5)
    assert losses.adv_loss(p) == pytest.approx(15 * math.log(2), abs=1e-12)
    assert losses.inv_loss(p) == pytest.approx(15 * math.log(2), abs=1e-12)


def test_adv_inv_monotone_and_oracle():
    assert losses.adv_loss([0.3]) > losses.adv_loss([0.6])
    assert losses.inv_loss([0.3]) < losses.inv_loss([0.6])
    p = np.random.default_rng(5).uniform(0.01, 0.99, size=20)
    assert losses.adv_loss(p) == pytest.approx(sum(-math.log(v) for v in p), abs=1e-12)
    assert losses.inv_loss(p) == pytest.approx(sum(-math.log(1 - v) for v in p), abs=1e-12)


def test_log_space_losses_agree():
    p = np.random.default_rng(6).uniform(0.01, 0.99, size=(4, 3))
    assert losses.nll_from_log(np.log(p)).data == pytest.approx(losses.adv_loss(p), abs=1e-12)
    assert losses.inv_from_log(np.log(p)).data == pytest.approx(losses.inv_loss(p), abs=1e-12)


def test_totals():
    assert losses.total_generator_loss(2.0, 3.0, 1.0) == 5.0
    assert losses.total_tid_loss(2.0, 3.0, 0.001) == pytest.approx(2.003)
    assert losses.total_generator_loss(2.0, 3.0, 0.0) == 2.0
    assert losses.total_tid_loss(2.0, 3.0, 0.0) == 2.0
    for lam in (0.5, 2.0):
        assert losses.total_generator_loss(4.0, 6.0, lam) == 2 * losses.total_generator_loss(2.0, 3.0, lam)
        assert losses.total_tid_loss(4.0, 6.0, lam) == 2 * losses.total_tid_loss(2.0, 3.0, lam)
    with pytest.raises(DomainError):
        losses.total_tid_loss(1.0, 1.0, -0.1)


# --- identification accuracy ---------------------------------------------------------------

def accuracy_oracle(emb, tau):
    N, M, T, _ = emb.shape
    hits = 0
    for c in range(N):
        for i in range(M):
            for t in range(T):
                same = max(sim_oracle(emb[c, i, t], emb[c, j], tau) for j in range(M) if j != i)
                other = max(sim_oracle(emb[c, i, t], emb[k, j], tau)
                            for k in range(N) if k != c for j in range(M))
                hits += same > other
    return hits / (N * M * T)


def test_accuracy_clustered_and_ties():
    emb = np.zeros((3, 2, 4, 3))
    for c in range(3):
        emb[c, :, :, c] = 1.0
    assert losses.identification_accuracy(emb, TAU) == 1.0
    assert losses.identification_accuracy(np.zeros((3, 2, 4, 3)), TAU) == 0.0


@pytest.mark.parametrize("seed", range(4))
def test_accuracy_oracle(seed):
    emb = random_emb(seed, N=3, M=2, T=3, D=3)
    assert losses.identification_accuracy(emb, TAU) == accuracy_oracle(emb, TAU)


# --- adversarial probabilities ----------------------------------------------------------

@pytest.mark.parametrize("seed", range(3))
def test_adv_probabilities_oracle(seed):
    rng = np.random.default_rng(seed)
    real = random_emb(seed + 10)
    g = unit(rng.normal(size=(3, 4, 6)))
    targets = [0, 1, 1]
    lp = losses.adv_log_probabilities(g, targets, real, TAU).data
    assert np.allclose(np.exp(lp), adv_oracle(g, targets, real, TAU), atol=1e-12, rtol=0)


def test_adv_dominance():
    real = np.zeros((2, 2, 3, 2))
    real[1] = 10.0
    g = real[0, :1].copy()  # a generated sequence sitting on identity 0
    p = np.exp(losses.adv_log_probabilities(g, [0], real, TAU).data)
    assert np.all(p > 1 - 1e-12)


def test_adv_identity_generator_reduces_to_real():
    """With x* = x the generated similarities are the real-vs-real ones."""
    cfg = SMALL_TID
    params = tid_net.init(cfg, 0)
    x = np.random.default_rng(0).normal(size=(2, 2, 6, 62))
    real = tid_net.embed_batch(params, x.reshape(4, 6, 62), cfg).reshape(2, 2, 6, -1)
    fake = gen.forward(gen.init(SMALL_GEN, 0), x[0, 0], x[0].mean(axis=(0, 1)), SMALL_GEN).data
    S_gen = losses.cross_similarity(tid_net.embed_batch(params, fake[None], cfg), real, TAU).data
    S_real = losses.cross_similarity(real[0, :1], real, TAU).data
    assert np.array_equal(S_gen, S_real)


# --- cycle loss --------------------------------------------------------------------------------

def test_cycle_identity_generator_zero():
    p = gen.init(SMALL_GEN, 0)
    x = np.random.default_rng(0).normal(size=(8, 62))
    g = lambda f, m: gen.forward(p, f, m, SMALL_GEN)
    assert losses.cycle_loss(g, x, np.ones(62), np.zeros(62)).data == 0.0


def test_cycle_constant_offsets():
    rng = np.random.default_rng(1)
    v, w = rng.normal(size=62), rng.normal(size=62)
    mc, mi = np.full(62, 1.0), np.full(62, 2.0)

    def g(f, m):
        return f + (v if m.data[0] == 1.0 else w)

    x = rng.normal(size=(8, 62))
    assert losses.cycle_loss(g, x, mc, mi).data == pytest.approx(8 * np.sum((v + w) ** 2), rel=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_cycle_nonnegative(seed):
    rng = np.random.default_rng(seed)
    p = gen.init(SMALL_GEN, seed)
    p["exit.w"].data[...] = rng.normal(0, 0.5, p["exit.w"].shape)
    x = rng.normal(size=(5, 62))
    g = lambda f, m: gen.forward(p, f, m, SMALL_GEN)
    assert losses.cycle_loss(g, x, rng.normal(size=62), rng.normal(size=62)).data >= 0


# --- gradient checks on tiny batches (N = M = 2, T = 8) ----------------------------------------

def _emb_input(seed):
    return np.random.default_rng(seed).normal(size=(2, 2, 8, 5))


def test_grad_rec():
    f = lambda e: losses.nll_from_log(losses.batch_log_probabilities(ad.l2_normalize(e), TAU))
    assert ad.grad_check(f, _emb_input(0)) < 1e-4


def test_grad_adv_and_inv():
    real = _emb_input(1)
    g = np.random.default_rng(2).normal(size=(3, 8, 5))
    tg = [0, 1, 0]
    lp = lambda a, b: losses.adv_log_probabilities(ad.l2_normalize(a), tg, ad.l2_normalize(b), TAU)
    assert ad.grad_check(lambda a, b: losses.nll_from_log(lp(a, b)), [g, real]) < 1e-4
    assert ad.grad_check(lambda a, b: losses.inv_from_log(lp(a, b)), [g, real]) < 1e-4


def test_grad_cycle_and_generator_total():
    rng = np.random.default_rng(3)
    p = gen.init(SMALL_GEN, 0)
    p["exit.w"].data[...] = rng.normal(0, 0.3, p["exit.w"].shape)
    x, mc, mi = rng.normal(size=(8, 62)), rng.normal(size=62), rng.normal(size=62)
    real = ad.l2_normalize(np.random.default_rng(4).normal(size=(2, 2, 8, SMALL_TID.out_channels))).data
    tid_p = tid_net.init(SMALL_TID, 1).frozen()

    def f(w, b):
        q = dict(p)
        q["exit.w"], q["exit.b"] = w, b
        g = lambda a, m: gen.forward(q, a, m, SMALL_GEN)
        cyc = losses.cycle_loss(g, x, mc, mi)
        emb = tid_net.forward(tid_p, g(x, mc).reshape(1, 8, 62), SMALL_TID)
        adv = losses.nll_from_log(losses.adv_log_probabilities(emb, [0], real, TAU))
        return losses.total_generator_loss(adv, cyc, 1.0)

    assert ad.grad_check(f, [p["exit.w"].data, rng.normal(size=62) * 0.1]) < 1e-4


def test_grad_tid_total():
    params = tid_net.init(SMALL_TID, 2)
    x = np.random.default_rng(5).normal(size=(4, 8, 62))
    fake = np.random.default_rng(6).normal(size=(2, 8, 62))
    names = ["block04.conv1.w", "exit.w", "entry.b"]

    def f(*arrs):
        q = dict(params)
        q.update(dict(zip(names, arrs)))
        real = tid_net.forward(q, x, SMALL_TID).reshape(2, 2, 8, -1)
        rec = losses.nll_from_log(losses.batch_log_probabilities(real, TAU))
        g = tid_net.forward(q, fake, SMALL_TID)
        inv = losses.inv_from_log(losses.adv_log_probabilities(g, [0, 1], real, TAU))
        return losses.total_tid_loss(rec, inv, 0.5)

    assert ad.grad_check(f, [params[n].data.copy() for n in names]) < 1e-4
