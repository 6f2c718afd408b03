"""Hot inner loops, each in a numba and a pure-numpy flavour.

The numba versions are used when numba imports and ``MFRELAX_BACKEND`` is not
set to ``numpy``.  Both flavours are always importable as ``<name>_nb`` /
``<name>_np`` so they can be compared against each other.
"""
import os

import numpy as np

try:
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

BACKEND = os.environ.get("MFRELAX_BACKEND", "numba" if HAVE_NUMBA else "numpy").lower()
if BACKEND not in ("numba", "numpy"):
    raise ImportError(f"MFRELAX_BACKEND must be 'numba' or 'numpy', got {BACKEND!r}")
if BACKEND == "numba" and not HAVE_NUMBA:  # pragma: no cover
    BACKEND = "numpy"

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_KP = np.uint64(0xD1B54A32D192ED03)
_KK = np.uint64(0xABC98388FB8FAC03)
_KA = np.uint64(0x8CB92BA72F3D8DD7)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_ONE = np.uint64(1)
_TWO = np.uint64(2)
_INV53 = 1.0 / 9007199254740992.0
_TWO_PI = 2.0 * np.pi


# --------------------------------------------------------------------------
# counter-based normals: one value per (seed, particle, step, action)
# --------------------------------------------------------------------------

def _mix_np(z):
    z = z + _GOLDEN
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def counter_normals_np(seed, step, pidx, aidx):
    pidx = np.asarray(pidx, dtype=np.uint64)
    aidx = np.asarray(aidx, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = _mix_np(np.full(pidx.shape, np.uint64(seed), dtype=np.uint64) ^ (pidx * _KP))
        z = _mix_np(z ^ (np.uint64(step) * _KK))
        z = _mix_np(z ^ (aidx * _KA))
        z1 = _mix_np(z ^ _ONE)
        z2 = _mix_np(z ^ _TWO)
    u1 = ((z1 >> _S11).astype(np.float64) + 0.5) * _INV53
    u2 = (z2 >> _S11).astype(np.float64) * _INV53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(_TWO_PI * u2)


def counter_normals_dense_np(seed, step, pidx, n_actions):
    pidx = np.asarray(pidx, dtype=np.int64)
    p = np.repeat(pidx, n_actions)
    a = np.tile(np.arange(n_actions, dtype=np.int64), pidx.size)
    return counter_normals_np(seed, step, p, a).reshape(pidx.size, n_actions)


# --------------------------------------------------------------------------
# relaxed Euler combine over active (particle, action) pairs, rows sorted
# --------------------------------------------------------------------------

def pair_step_np(x, rows, w, drift, diff, z, dt, sqrt_dt):
    n = x.shape[0]
    sw = np.sqrt(w)
    dw = sqrt_dt * z
    dsum = np.bincount(rows, weights=w * drift, minlength=n)
    ssum = np.bincount(rows, weights=diff * sw * dw, minlength=n)
    eff = np.bincount(rows, weights=sw * dw, minlength=n)
    return x + dsum * dt + ssum, eff


# --------------------------------------------------------------------------
# largest-remainder chattering allocation
# --------------------------------------------------------------------------

def chatter_indices_np(alpha, m, r):
    n_part, n = alpha.shape
    scaled = alpha * m
    counts = np.floor(scaled)
    rem = scaled - counts
    extra = m - counts.sum(axis=1)
    order = np.argsort(-rem, axis=1, kind="stable")
    rank = np.empty_like(order)
    rows = np.arange(n_part)[:, None]
    rank[rows, order] = np.arange(n)[None, :]
    counts = counts + (rank < extra[:, None])
    cum = np.cumsum(counts, axis=1)
    idx = (cum <= r).sum(axis=1)
    return np.minimum(idx, n - 1).astype(np.int64)


# --------------------------------------------------------------------------
# per-bin column means of a (particles x actions) table: argmax (ties to the
# lowest index), the maximal mean, and the bin counts
# --------------------------------------------------------------------------

def bin_argmax_np(bin_idx, values, n_bins):
    n = values.shape[1]
    sums = np.zeros((n_bins, n))
    np.add.at(sums, bin_idx, values)
    counts = np.bincount(bin_idx, minlength=n_bins)
    means = sums / np.maximum(counts, 1)[:, None]
    best = np.argmax(means, axis=1).astype(np.int64)
    return best, means[np.arange(n_bins), best], counts.astype(np.int64)


if HAVE_NUMBA:

    @njit(cache=True, inline="always")
    def _mix_nb(z):
        z = z + _GOLDEN
        z = (z ^ (z >> _S30)) * _M1
        z = (z ^ (z >> _S27)) * _M2
        return z ^ (z >> _S31)

    @njit(cache=True, nogil=True)
    def _normal_nb(seed, step, p, a):
        z = _mix_nb(seed ^ (p * _KP))
        z = _mix_nb(z ^ (step * _KK))
        z = _mix_nb(z ^ (a * _KA))
        z1 = _mix_nb(z ^ _ONE)
        z2 = _mix_nb(z ^ _TWO)
        u1 = (np.float64(z1 >> _S11) + 0.5) * _INV53
        u2 = np.float64(z2 >> _S11) * _INV53
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(_TWO_PI * u2)

    @njit(cache=True, nogil=True)
    def _counter_normals_nb(seed, step, pidx, aidx):
        out = np.empty(pidx.shape[0])
        s = np.uint64(seed)
        k = np.uint64(step)
        for j in range(pidx.shape[0]):
            out[j] = _normal_nb(s, k, np.uint64(pidx[j]), np.uint64(aidx[j]))
        return out

    def counter_normals_nb(seed, step, pidx, aidx):
        pidx = np.ascontiguousarray(pidx, dtype=np.int64).ravel()
        aidx = np.ascontiguousarray(aidx, dtype=np.int64).ravel()
        return _counter_normals_nb(np.uint64(seed), np.uint64(step), pidx, aidx)

    @njit(cache=True, nogil=True)
    def _counter_normals_dense_nb(seed, step, pidx, n_actions):
        out = np.empty((pidx.shape[0], n_actions))
        s = np.uint64(seed)
        k = np.uint64(step)
        for j in range(pidx.shape[0]):
            p = np.uint64(pidx[j])
            for i in range(n_actions):
                out[j, i] = _normal_nb(s, k, p, np.uint64(i))
        return out

    def counter_normals_dense_nb(seed, step, pidx, n_actions):
        pidx = np.ascontiguousarray(pidx, dtype=np.int64).ravel()
        return _counter_normals_dense_nb(np.uint64(seed), np.uint64(step), pidx, n_actions)

    @njit(cache=True, nogil=True)
    def pair_step_nb(x, rows, w, drift, diff, z, dt, sqrt_dt):
        n = x.shape[0]
        dsum = np.zeros(n)
        ssum = np.zeros(n)
        eff = np.zeros(n)
        for j in range(rows.shape[0]):
            r = rows[j]
            sw = np.sqrt(w[j])
            dw = sqrt_dt * z[j]
            dsum[r] += w[j] * drift[j]
            ssum[r] += diff[j] * sw * dw
            eff[r] += sw * dw
        out = np.empty(n)
        for r in range(n):
            out[r] = x[r] + dsum[r] * dt + ssum[r]
        return out, eff

    @njit(cache=True, nogil=True)
    def chatter_indices_nb(alpha, m, r):
        n_part, n = alpha.shape
        out = np.empty(n_part, dtype=np.int64)
        counts = np.empty(n)
        rem = np.empty(n)
        for j in range(n_part):
            total = 0.0
            for i in range(n):
                s = alpha[j, i] * m
                c = np.floor(s)
                counts[i] = c
                rem[i] = s - c
                total += c
            extra = m - total
            order = np.argsort(-rem, kind="mergesort")
            for pos in range(n):
                if pos < extra:
                    counts[order[pos]] += 1.0
            acc = 0.0
            idx = n - 1
            for i in range(n):
                acc += counts[i]
                if acc > r:
                    idx = i
                    break
            out[j] = idx
        return out

    @njit(cache=True, nogil=True)
    def bin_argmax_nb(bin_idx, values, n_bins):
        n = values.shape[1]
        sums = np.zeros((n_bins, n))
        counts = np.zeros(n_bins, dtype=np.int64)
        for j in range(bin_idx.shape[0]):
            b = bin_idx[j]
            counts[b] += 1
            for i in range(n):
                sums[b, i] += values[j, i]
        best = np.zeros(n_bins, dtype=np.int64)
        tops = np.empty(n_bins)
        for b in range(n_bins):
            c = max(counts[b], 1)
            top = sums[b, 0] / c
            for i in range(1, n):
                v = sums[b, i] / c
                if v > top:
                    top = v
                    best[b] = i
            tops[b] = top
        return best, tops, counts

if BACKEND == "numba":
    counter_normals = counter_normals_nb
    counter_normals_dense = counter_normals_dense_nb
    pair_step = pair_step_nb
    chatter_indices = chatter_indices_nb
    bin_argmax = bin_argmax_nb
else:
    counter_normals = counter_normals_np
    counter_normals_dense = counter_normals_dense_np
    pair_step = pair_step_np
    chatter_indices = chatter_indices_np
    bin_argmax = bin_argmax_np
