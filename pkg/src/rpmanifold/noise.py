"""Martingale-difference perturbations with a known limiting covariance."""

from dataclasses import dataclass

import numpy as np
from numba import njit

from .streams import STEP_NOISE, fill_normals, fill_signs

GAUSSIAN_IID = 0
STATE_DEPENDENT = 1
BOUNDED_RADEMACHER = 2

KINDS = {"gaussian_iid": GAUSSIAN_IID, "state_dependent": STATE_DEPENDENT,
         "bounded_rademacher": BOUNDED_RADEMACHER}


class NotPSDError(ValueError):
    pass


def factorize(Gamma):
    """Lower-triangular ``L`` with ``L @ L.T == Gamma`` for a (possibly singular) PSD matrix.

    Eigenvalues down to ``-1e-8 * spectral_radius`` are treated as zero.
    """
    G = np.atleast_2d(np.asarray(Gamma, dtype=float))
    if G.shape[0] != G.shape[1]:
        raise ValueError("covariance must be square")
    if not np.allclose(G, G.T, rtol=1e-12, atol=1e-14):
        raise ValueError("covariance must be symmetric")
    G = 0.5 * (G + G.T)
    w, V = np.linalg.eigh(G)
    scale = np.abs(w).max() if w.size else 0.0
    if scale == 0:
        return np.zeros_like(G)
    if w.min() < -1e-8 * scale:
        raise NotPSDError(f"covariance has eigenvalue {w.min():.3g} (spectral radius {scale:.3g})")
    root = V * np.sqrt(np.clip(w, 0, None))     # G = root @ root.T
    _, T = np.linalg.qr(root.T)                 # root.T = Q T  =>  G = T.T @ T
    L = T.T
    L = L * np.where(np.diag(L) < 0, -1.0, 1.0)  # non-negative diagonal
    return np.ascontiguousarray(L)


def parse_gamma(spec, dim):
    """Covariance from config: a full matrix or the string ``"identity*<scale>"``."""
    if isinstance(spec, str):
        head, _, tail = spec.partition("*")
        if head.strip() != "identity":
            raise ValueError(f"unrecognised covariance spec {spec!r}")
        return float(tail) * np.eye(dim) if tail else np.eye(dim)
    G = np.asarray(spec, dtype=float)
    if G.shape != (dim, dim):
        raise ValueError(f"covariance must be {dim}x{dim}, got {G.shape}")
    return G


def default_inflation(dist):
    return min(dist, 1.0)


@dataclass(frozen=True, eq=False)
class NoiseModel:
    kind: str
    Gamma_limit: np.ndarray
    L: np.ndarray
    distance: object = None   # x -> d(x, M), required for state_dependent

    @property
    def kind_id(self):
        return KINDS[self.kind]

    @property
    def dim(self):
        return self.L.shape[0]


def make_noise(kind, Gamma, distance=None):
    if kind not in KINDS:
        raise ValueError(f"unknown noise kind {kind!r}")
    if kind == "state_dependent" and distance is None:
        raise ValueError("state_dependent noise needs a distance function")
    G = np.atleast_2d(np.asarray(Gamma, dtype=float))
    return NoiseModel(kind, G, factorize(G), distance)


@njit(cache=True, nogil=True)
def noise_into(kind, L, inflation, k0, k1, n, z, out):
    """``out = sqrt(1 + inflation) * L @ z`` with ``z`` normal, or ``L @ s`` with Rademacher ``s``."""
    d = out.shape[0]
    if kind == BOUNDED_RADEMACHER:
        fill_signs(k0, k1, n, STEP_NOISE, z)
        scale = 1.0
    else:
        fill_normals(k0, k1, n, STEP_NOISE, z)
        scale = np.sqrt(1.0 + inflation) if kind == STATE_DEPENDENT else 1.0
    for i in range(d):
        s = 0.0
        for j in range(i + 1):
            s += L[i, j] * z[j]
        out[i] = scale * s


def sample(model, state, n, rng):
    """One draw of ``D_n`` at ``state`` from the stream ``rng`` positioned at step ``n``."""
    infl = 0.0
    if model.kind == "state_dependent":
        infl = default_inflation(model.distance(state))
    out = np.empty(model.dim)
    noise_into(model.kind_id, model.L, infl, rng.key[0], rng.key[1], n, np.empty(model.dim), out)
    return out


@njit(cache=True, nogil=True)
def _batch(kind, L, inflation, k0, k1, n_start, count):
    d = L.shape[0]
    out = np.empty((count, d))
    z = np.empty(d)
    for i in range(count):
        noise_into(kind, L, inflation, k0, k1, n_start + i, z, out[i])
    return out


def sample_steps(model, state, n_start, count, rng):
    """Draws for steps ``n_start .. n_start+count-1`` at a fixed state, one row each."""
    infl = default_inflation(model.distance(state)) if model.kind == "state_dependent" else 0.0
    return _batch(model.kind_id, model.L, infl, rng.key[0], rng.key[1], n_start, count)
