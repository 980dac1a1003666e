"""Hot numeric loops with a numba path and a pure-numpy path.

Public wrappers dispatch on :data:`geo_exec._accel.USE_NUMBA`; the ``_nb`` and
``_np`` variants stay importable so tests and the benchmark can compare them
directly.
"""

import numpy as np
from scipy.signal import lfilter

from ._accel import USE_NUMBA, njit

__all__ = [
    "segment_starts",
    "exp_filter",
    "lag_matrix",
    "impact_accumulate",
    "gae",
]


def segment_starts(lengths):
    """Per-index start offset of the segment each index belongs to."""
    lengths = np.asarray(lengths, dtype=np.int64)
    ends = np.cumsum(lengths)
    starts = ends - lengths
    return np.repeat(starts, lengths)


# ---------------------------------------------------------------------------
# y_t = decay * y_{t-1} + x_t, restarting at each segment start


@njit(cache=True)
def _exp_filter_nb(x, decay, seg_start):
    n = x.shape[0]
    y = np.empty(n)
    prev = 0.0
    for t in range(n):
        if seg_start[t] == t:
            prev = 0.0
        prev = decay * prev + x[t]
        y[t] = prev
    return y


def _exp_filter_np(x, decay, seg_start):
    x = np.asarray(x, dtype=np.float64)
    y = np.empty_like(x)
    bounds = np.flatnonzero(seg_start == np.arange(x.size))
    bounds = np.append(bounds, x.size)
    for a, b in zip(bounds[:-1], bounds[1:]):
        y[a:b] = lfilter([1.0], [1.0, -decay], x[a:b])
    return y


def exp_filter(x, decay, seg_start=None):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if seg_start is None:
        seg_start = np.zeros(x.size, dtype=np.int64)
    seg_start = np.ascontiguousarray(seg_start, dtype=np.int64)
    if USE_NUMBA:
        return _exp_filter_nb(x, float(decay), seg_start)
    return _exp_filter_np(x, float(decay), seg_start)


# ---------------------------------------------------------------------------
# M[t, l-1] = f_{t-l} for l = 1..L, zero where the lag crosses a segment start


@njit(cache=True)
def _lag_matrix_nb(f, L, seg_start):
    n = f.shape[0]
    out = np.zeros((n, L))
    for t in range(n):
        lo = seg_start[t]
        for lag in range(1, L + 1):
            j = t - lag
            if j < lo:
                break
            out[t, lag - 1] = f[j]
    return out


def _lag_matrix_np(f, L, seg_start):
    n = f.size
    out = np.zeros((n, L))
    idx = np.arange(n)
    for lag in range(1, L + 1):
        ok = idx - lag >= seg_start
        out[ok, lag - 1] = f[idx[ok] - lag]
    return out


def lag_matrix(f, L, seg_start=None):
    f = np.ascontiguousarray(f, dtype=np.float64)
    if seg_start is None:
        seg_start = np.zeros(f.size, dtype=np.int64)
    seg_start = np.ascontiguousarray(seg_start, dtype=np.int64)
    if USE_NUMBA:
        return _lag_matrix_nb(f, int(L), seg_start)
    return _lag_matrix_np(f, int(L), seg_start)


# ---------------------------------------------------------------------------
# A_k = A_{k-1} * exp(-advance_k / tau) + contrib_k


@njit(cache=True)
def _impact_accumulate_nb(contrib, advance, tau, a0):
    n = contrib.shape[0]
    out = np.empty(n)
    acc = a0
    for k in range(n):
        acc = acc * np.exp(-advance[k] / tau) + contrib[k]
        out[k] = acc
    return out


def _impact_accumulate_np(contrib, advance, tau, a0):
    # closed form A_k = exp(-T_k/tau) * (a0 + sum_j c_j exp(T_j/tau)), evaluated
    # in blocks so the exponents stay bounded
    n = contrib.size
    out = np.empty(n)
    times = np.cumsum(advance) / tau
    acc, t0, k = a0, 0.0, 0
    span = 40.0
    while k < n:
        stop = k + int(np.searchsorted(times[k:], t0 + span, side="right"))
        stop = max(stop, k + 1)
        rel = times[k:stop] - t0
        partial = np.cumsum(contrib[k:stop] * np.exp(rel))
        out[k:stop] = np.exp(-rel) * (acc + partial)
        acc = out[stop - 1]
        t0 = times[stop - 1]
        k = stop
    return out


def impact_accumulate(contrib, advance, tau, a0=0.0):
    contrib = np.ascontiguousarray(contrib, dtype=np.float64)
    advance = np.ascontiguousarray(np.broadcast_to(advance, contrib.shape), dtype=np.float64)
    if USE_NUMBA:
        return _impact_accumulate_nb(contrib, advance, float(tau), float(a0))
    return _impact_accumulate_np(contrib, advance, float(tau), float(a0))


# ---------------------------------------------------------------------------
# generalised advantage estimation over a flat rollout with episode ends


@njit(cache=True)
def _gae_nb(rewards, values, dones, gamma, lam):
    n = rewards.shape[0]
    adv = np.empty(n)
    last = 0.0
    for t in range(n - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * values[t + 1] * live - values[t]
        last = delta + gamma * lam * live * last
        adv[t] = last
    return adv


def _gae_np(rewards, values, dones, gamma, lam):
    live = 1.0 - dones
    deltas = rewards + gamma * values[1:] * live - values[:-1]
    adv = np.empty_like(deltas)
    ends = np.flatnonzero(dones > 0.5)
    stops = np.append(ends + 1, deltas.size)
    start = 0
    for stop in np.unique(stops):
        if stop <= start:
            continue
        seg = deltas[start:stop][::-1]
        adv[start:stop] = lfilter([1.0], [1.0, -gamma * lam], seg)[::-1]
        start = stop
    return adv


def gae(rewards, values, dones, gamma, lam):
    rewards = np.ascontiguousarray(rewards, dtype=np.float64)
    values = np.ascontiguousarray(values, dtype=np.float64)
    dones = np.ascontiguousarray(dones, dtype=np.float64)
    if USE_NUMBA:
        return _gae_nb(rewards, values, dones, float(gamma), float(lam))
    return _gae_np(rewards, values, dones, float(gamma), float(lam))
