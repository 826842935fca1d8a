"""Counter-based random streams.

Every draw is a pure function of ``(key, counter)`` where the key is derived
from ``(master_seed, replication)`` and the counter holds the step index.  The
block cipher is Philox4x32-10 (Salmon et al., Random123), so replications can
be simulated in any order, on any number of workers, and still produce the
same numbers.

Counter layout: ``(n_lo, n_hi, block, purpose)``.  One block yields four
32-bit words, i.e. two 53-bit uniforms, i.e. two normals via Box-Muller.
"""

import numpy as np
from numba import njit

MASK64 = (1 << 64) - 1

# purposes (fourth counter word)
STEP_NOISE = 0
START_POINT = 1
ORACLE_NOISE = 2

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_LO = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_TWO_PI = 2.0 * np.pi
_INV53 = 1.0 / 9007199254740992.0


def splitmix64(z):
    z = (z + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def stream_key(seed, index):
    """Hash ``(seed, index)`` into a pair of 32-bit Philox key words."""
    if seed < 0 or index < 0:
        raise ValueError("seed and index must be non-negative")
    h = splitmix64(splitmix64(seed & MASK64) ^ (index & MASK64))
    return h & 0xFFFFFFFF, h >> 32


@njit(cache=True, nogil=True)
def philox4x32(c0, c1, c2, c3, k0, k1):
    c0 = np.uint64(c0)
    c1 = np.uint64(c1)
    c2 = np.uint64(c2)
    c3 = np.uint64(c3)
    k0 = np.uint64(k0)
    k1 = np.uint64(k1)
    for _ in range(10):
        p0 = _M0 * c0
        p1 = _M1 * c2
        n0 = ((p1 >> _S32) ^ c1 ^ k0) & _LO
        n1 = p1 & _LO
        n2 = ((p0 >> _S32) ^ c3 ^ k1) & _LO
        n3 = p0 & _LO
        c0, c1, c2, c3 = n0, n1, n2, n3
        k0 = (k0 + _W0) & _LO
        k1 = (k1 + _W1) & _LO
    return c0, c1, c2, c3


@njit(cache=True, nogil=True)
def _uniform53(a, b):
    # strictly inside (0, 1) so that log() below is finite
    return ((a >> np.uint64(5)) * 67108864.0 + (b >> np.uint64(6)) + 0.5) * _INV53


@njit(cache=True, nogil=True)
def fill_normals(k0, k1, n, purpose, out):
    """Write ``len(out)`` standard normals for step ``n`` into ``out``."""
    n = np.uint64(n)
    lo = n & _LO
    hi = n >> _S32
    m = out.shape[0]
    for blk in range((m + 1) // 2):
        r0, r1, r2, r3 = philox4x32(lo, hi, blk, purpose, k0, k1)
        u1 = _uniform53(r0, r1)
        u2 = _uniform53(r2, r3)
        rad = np.sqrt(-2.0 * np.log(u1))
        out[2 * blk] = rad * np.cos(_TWO_PI * u2)
        if 2 * blk + 1 < m:
            out[2 * blk + 1] = rad * np.sin(_TWO_PI * u2)


@njit(cache=True, nogil=True)
def fill_signs(k0, k1, n, purpose, out):
    """Rademacher draws: one bit of the cipher output per coordinate."""
    n = np.uint64(n)
    lo = n & _LO
    hi = n >> _S32
    m = out.shape[0]
    for blk in range((m + 127) // 128):
        r = philox4x32(lo, hi, blk, purpose, k0, k1)
        for j in range(128):
            i = blk * 128 + j
            if i >= m:
                break
            word = r[j // 32]
            out[i] = 1.0 if (word >> np.uint64(j % 32)) & np.uint64(1) else -1.0


@njit(cache=True, nogil=True)
def fill_uniforms(k0, k1, n, purpose, out):
    n = np.uint64(n)
    lo = n & _LO
    hi = n >> _S32
    m = out.shape[0]
    for blk in range((m + 1) // 2):
        r0, r1, r2, r3 = philox4x32(lo, hi, blk, purpose, k0, k1)
        out[2 * blk] = _uniform53(r0, r1)
        if 2 * blk + 1 < m:
            out[2 * blk + 1] = _uniform53(r2, r3)


@njit(cache=True, nogil=True)
def _normals_over_steps(k0, k1, n_start, count, dim, purpose):
    out = np.empty((count, dim))
    for i in range(count):
        fill_normals(k0, k1, n_start + i, purpose, out[i])
    return out


class Stream:
    """Deterministic generator positioned by ``(seed, index, n)``.

    Holding a ``Stream`` does not advance any state; asking twice for step
    ``n`` returns the same numbers.
    """

    def __init__(self, seed, index=0):
        self.seed = int(seed)
        self.index = int(index)
        self.key = stream_key(self.seed, self.index)

    def __repr__(self):
        return f"Stream(seed={self.seed}, index={self.index})"

    def normals(self, n, dim, purpose=STEP_NOISE):
        out = np.empty(dim)
        fill_normals(self.key[0], self.key[1], n, purpose, out)
        return out

    def signs(self, n, dim, purpose=STEP_NOISE):
        out = np.empty(dim)
        fill_signs(self.key[0], self.key[1], n, purpose, out)
        return out

    def uniforms(self, n, dim, purpose=STEP_NOISE):
        out = np.empty(dim)
        fill_uniforms(self.key[0], self.key[1], n, purpose, out)
        return out

    def normal_block(self, n_start, count, dim, purpose=STEP_NOISE):
        """Normals for steps ``n_start .. n_start+count-1``, one row per step."""
        return _normals_over_steps(self.key[0], self.key[1], n_start, count, dim, purpose)
