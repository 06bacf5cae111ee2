"""Min-distance similarities, softmax identity probabilities and training losses.

Shapes used throughout:
    real embeddings  (N, M, T, D)  N identities x M videos x T frames
    query embeddings (Q, T, D)     e.g. the embeddings of generated sequences
    similarities     (Q, T, N, M)  one row of the table per pivot frame

Probabilities are carried in log space; ``exp`` is taken only at the API
boundary.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DomainError, EmptyInputError


def similarity(pivot, other, tau: float) -> float:
    """-(1/tau) * min_t' |pivot - other[t']|^2 for one pivot vector."""
    if tau <= 0:
        raise DomainError("tau must be positive")
    other = np.asarray(getattr(other, "vectors", other), dtype=np.float64)
    if other.size == 0:
        raise EmptyInputError("similarity needs a nonempty sequence")
    d = np.sum((other - np.asarray(pivot, dtype=np.float64)) ** 2, axis=1)
    return -float(np.min(d)) / tau


def cross_similarity(query, real, tau: float) -> Tensor:
    """S[q, t, k, j] = -(1/tau) min_t' |query[q, t] - real[k, j, t']|^2."""
    query, real = ad.as_tensor(query), ad.as_tensor(real)
    Q, T, D = query.shape
    N, M, T2, _ = real.shape
    d2 = ad.pairwise_sqdist(query.reshape(Q * T, D), real.reshape(N * M * T2, D))
    dmin = ad.tmin(d2.reshape(Q, T, N, M, T2), axis=4)
    return dmin * (-1.0 / tau)


def _check_grid(N, M):
    if N < 2 or M < 2:
        raise ConfigError(f"need at least 2 identities and 2 videos per identity, got N={N}, M={M}")


def real_masks(N: int, M: int):
    """Numerator/denominator masks over (k, j) for every real pivot (c, i).

    Returned with shape (N*M, 1, N, M) so they broadcast over time.
    """
    c = np.arange(N)[:, None, None, None]
    i = np.arange(M)[None, :, None, None]
    k = np.arange(N)[None, None, :, None]
    j = np.arange(M)[None, None, None, :]
    same_id = (k == c)
    self_pair = same_id & (j == i)
    num = same_id & ~self_pair
    den = ~self_pair
    return num.reshape(N * M, 1, N, M), den.reshape(N * M, 1, N, M)


def target_masks(targets, N: int, M: int):
    """Masks for queries that are not members of the real grid: all M videos of
    the target identity form the numerator, every real video the denominator."""
    targets = np.asarray(targets)
    num = np.broadcast_to((np.arange(N)[None, :] == targets[:, None])[:, :, None],
                          (len(targets), N, M))
    den = np.ones_like(num)
    return num[:, None], den[:, None]


def log_probabilities(S, num_mask, den_mask) -> Tensor:
    """log p = LSE(S over numerator set) - LSE(S over denominator set).

    S has shape (Q, T, N, M); the masks broadcast against it.
    """
    S = ad.as_tensor(S)
    Q, T, N, M = S.shape
    flat = S.reshape(Q, T, N * M)
    nm = np.broadcast_to(num_mask, (Q, T, N, M)).reshape(Q, T, N * M)
    dm = np.broadcast_to(den_mask, (Q, T, N, M)).reshape(Q, T, N * M)
    return ad.logsumexp(flat, axis=2, mask=nm) - ad.logsumexp(flat, axis=2, mask=dm)


def batch_log_probabilities(emb, tau: float) -> Tensor:
    """log p[c, i, t] for a real batch; output shape (N, M, T)."""
    emb = ad.as_tensor(emb)
    N, M, T, D = emb.shape
    _check_grid(N, M)
    S = cross_similarity(emb.reshape(N * M, T, D), emb, tau)
    num, den = real_masks(N, M)
    return log_probabilities(S, num, den).reshape(N, M, T)


def batch_probabilities(emb, tau: float) -> np.ndarray:
    with ad.no_grad():
        return np.exp(batch_log_probabilities(emb, tau).data)


def adv_log_probabilities(gen_emb, targets, real_emb, tau: float) -> Tensor:
    """log p*[q, t] of generated embeddings (Q, T, D) against the real batch.

    ``targets[q]`` is the identity index the q-th generated sequence imitates.
    """
    real_emb = ad.as_tensor(real_emb)
    N, M = real_emb.shape[:2]
    _check_grid(N, M)
    S = cross_similarity(gen_emb, real_emb, tau)
    num, den = target_masks(targets, N, M)
    return log_probabilities(S, num, den)


def adv_probabilities(tid_params, generated, targets, real_emb, tau: float, cfg) -> np.ndarray:
    """p* for generated 3DMM sequences (Q, T, 62), embedded with the temporal network."""
    from . import tid_net

    with ad.no_grad():
        g = tid_net.forward(tid_params, generated, cfg)
        return np.exp(adv_log_probabilities(g, targets, real_emb, tau).data)


def _check_open_unit(p):
    p = np.asarray(getattr(p, "data", p), dtype=np.float64)
    if not np.all((p > 0) & (p < 1)):
        raise DomainError("probabilities must lie strictly inside (0, 1)")
    return p


def rec_loss(p) -> float:
    return float(np.sum(-np.log(_check_open_unit(p))))


def adv_loss(p) -> float:
    return float(np.sum(-np.log(_check_open_unit(p))))


def inv_loss(p) -> float:
    return float(np.sum(-np.log1p(-_check_open_unit(p))))


def nll_from_log(logp) -> Tensor:
    """sum -log p, i.e. the reconstruction / adversarial loss from log p."""
    return -ad.tsum(ad.as_tensor(logp))


def inv_from_log(logp) -> Tensor:
    """sum -log(1 - p) from log p."""
    return -ad.tsum(ad.log1mexp(ad.as_tensor(logp)))


def identification_accuracy(emb, tau: float) -> float:
    """Fraction of pivots whose best same-identity similarity strictly beats
    every similarity to other identities."""
    emb = np.asarray(getattr(emb, "data", emb), dtype=np.float64)
    N, M, T, D = emb.shape
    _check_grid(N, M)
    with ad.no_grad():
        S = cross_similarity(emb.reshape(N * M, T, D), emb, tau).data
    num, _ = real_masks(N, M)
    c = np.repeat(np.arange(N), M)
    other = np.broadcast_to((np.arange(N)[None, :] != c[:, None])[:, None, :, None], S.shape)
    num = np.broadcast_to(num, S.shape)
    best_same = np.where(num, S, -np.inf).max(axis=(2, 3))
    best_other = np.where(other, S, -np.inf).max(axis=(2, 3))
    return float(np.mean(best_same > best_other))


def cycle_loss(gen, x, mean_target, mean_source) -> Tensor:
    """sum_t |x(t) - gen(gen(x(t), mean_target), mean_source)|^2.

    ``gen(frames, mean)`` is any differentiable frame map, typically
    ``lambda f, m: generator.forward(params, f, m, cfg)``.
    """
    x = ad.as_tensor(x)
    there = gen(x, mean_target)
    back = gen(there, mean_source)
    return ad.tsum(ad.square(x - back))


def total_generator_loss(adv, cycle, lambda_cycle: float):
    if lambda_cycle < 0:
        raise DomainError("lambda_cycle must be non-negative")
    return adv + cycle * lambda_cycle


def total_tid_loss(rec, inv, lambda_inv: float):
    if lambda_inv < 0:
        raise DomainError("lambda_inv must be non-negative")
    return rec + inv * lambda_inv
