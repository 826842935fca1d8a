"""Test problems with a manifold of maximisers and the associated limit laws.

Each problem exposes the objective ``F``, its gradient ``f``, the Hessian
``Df``, and the closest-point projection onto the manifold ``M = {f = 0}``
inside a tube around ``M``.  The recursion ascends ``F``: ``Df`` is negative
definite in normal directions and vanishes along ``M``.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .schedules import c_rho
from .streams import START_POINT


class GeometryError(ValueError):
    pass


class OutsideTubeError(GeometryError):
    """Point lies outside the attractor tube where the projection is defined."""


class EigenGapError(GeometryError):
    """Hessian spectrum does not split cleanly into kernel and negative part."""


class SingularityError(GeometryError):
    pass


class ChartDomainError(GeometryError):
    pass


@dataclass(frozen=True)
class Tube:
    delta: float
    tube_radius: float


class Problem:
    kind = None
    kind_id = None

    def __init__(self, dim, manifold_dim, tube):
        self.dim = dim
        self.manifold_dim = manifold_dim
        self.tube = tube

    @property
    def normal_dim(self):
        return self.dim - self.manifold_dim

    # compiled-kernel arguments: (kind id, flat split index, matrix A, constant c)
    def kernel_args(self):
        raise NotImplementedError

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        out = np.empty_like(x)
        kid, dz, A, c = self.kernel_args()
        K.gradient_into(kid, x, dz, A, c, out)
        return out

    def _foot(self, x):
        """Return ``(projection, distance)`` without tube checks."""
        raise NotImplementedError

    def in_tube(self, x):
        raise NotImplementedError

    def project(self, x):
        x = np.asarray(x, dtype=float)
        if not self.in_tube(x):
            raise OutsideTubeError(f"{self.kind}: point {x} is outside the attractor tube")
        return self._foot(x)[0]

    def distance(self, x):
        x = np.asarray(x, dtype=float)
        if not self.in_tube(x):
            raise OutsideTubeError(f"{self.kind}: point {x} is outside the attractor tube")
        return self._foot(x)[1]

    def foot_distance(self, x):
        """Distance to the nearest point found by the foot solver, with no tube check."""
        return self._foot(np.asarray(x, dtype=float))[1]

    def stability(self):
        """Smallest normal curvature ``L`` of ``-F`` over the manifold part of the tube."""
        raise NotImplementedError

    def to_dict(self):
        raise NotImplementedError


class FlatQuadratic(Problem):
    """``F(zeta, theta) = -theta^T A theta / 2``; the manifold is ``theta = 0``."""

    kind = "flat_quadratic"
    kind_id = K.FLAT

    def __init__(self, A, manifold_dim=1, tube_radius=1.0):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        if A.shape[0] != A.shape[1]:
            raise ValueError("A must be square")
        if not np.allclose(A, A.T, rtol=0, atol=1e-14):
            raise ValueError("A must be symmetric")
        if np.linalg.eigvalsh(A).min() <= 0:
            raise ValueError("A must be positive definite")
        if manifold_dim < 0:
            raise ValueError("manifold_dim must be non-negative")
        super().__init__(manifold_dim + A.shape[0], manifold_dim, Tube(math.inf, tube_radius))
        self.A = A
        self._kargs = (K.FLAT, manifold_dim, np.ascontiguousarray(A), 0.0)

    def kernel_args(self):
        return self._kargs

    def objective(self, x):
        th = np.asarray(x, dtype=float)[self.manifold_dim:]
        return -0.5 * th @ self.A @ th

    def hessian(self, x):
        H = np.zeros((self.dim, self.dim))
        H[self.manifold_dim:, self.manifold_dim:] = -self.A
        return H

    def _foot(self, x):
        m = x.copy()
        m[self.manifold_dim:] = 0.0
        return m, float(np.linalg.norm(x[self.manifold_dim:]))

    def in_tube(self, x):
        return bool(np.all(np.isfinite(x))) and np.linalg.norm(x[self.manifold_dim:]) < self.tube.tube_radius

    def stability(self):
        return float(np.linalg.eigvalsh(self.A).min())

    def start_point(self, d0, stream):
        z = 2 * stream.uniforms(0, max(self.manifold_dim, 1), START_POINT)[: self.manifold_dim] - 1
        v = stream.normals(1, self.normal_dim, START_POINT)
        return np.concatenate([z, d0 * v / np.linalg.norm(v)])

    def sample_tube(self, count, rng, span=1.0):
        z = rng.uniform(-span, span, (count, self.manifold_dim))
        v = rng.standard_normal((count, self.normal_dim))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        r = self.tube.tube_radius * rng.uniform(0, 0.999, (count, 1))
        return np.hstack([z, r * v])

    def to_dict(self):
        return {"kind": self.kind, "A": self.A.tolist(), "manifold_dim": self.manifold_dim}


class SphereWell(Problem):
    """``F(x) = -(|x|^2 - 1)^2 / 4``; the manifold is the unit sphere."""

    kind = "sphere_well"
    kind_id = K.SPHERE

    def __init__(self, dim=2, delta=0.5, tube_radius=0.25):
        if dim < 2:
            raise ValueError("sphere_well needs dim >= 2")
        super().__init__(dim, dim - 1, Tube(delta, tube_radius))
        self._kargs = (K.SPHERE, 0, np.zeros((1, 1)), 0.0)

    def kernel_args(self):
        return self._kargs

    def objective(self, x):
        x = np.asarray(x, dtype=float)
        return -0.25 * (x @ x - 1) ** 2

    def hessian(self, x):
        x = np.asarray(x, dtype=float)
        return -(x @ x - 1) * np.eye(self.dim) - 2 * np.outer(x, x)

    def _foot(self, x):
        r = np.linalg.norm(x)
        return x / r, abs(r - 1)

    def in_tube(self, x):
        return bool(np.all(np.isfinite(x))) and abs(np.linalg.norm(x) - 1) < self.tube.tube_radius

    def stability(self):
        return 2.0

    def start_point(self, d0, stream):
        u = stream.normals(1, self.dim, START_POINT)
        s = 1.0 if stream.uniforms(0, 1, START_POINT)[0] < 0.5 else -1.0
        return (1 + s * d0) * u / np.linalg.norm(u)

    def sample_tube(self, count, rng):
        u = rng.standard_normal((count, self.dim))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        h = self.tube.tube_radius * rng.uniform(-0.999, 0.999, (count, 1))
        return (1 + h) * u

    def to_dict(self):
        return {"kind": self.kind, "dim": self.dim}


class HyperbolaToy(Problem):
    """``F(a, b) = -(ab - c)^2 / 2``; the manifold is the branch ``{ab = c, a > 0}``."""

    kind = "hyperbola_toy"
    kind_id = K.HYPERBOLA

    def __init__(self, c=1.0, tube_radius=0.2, a_range=(0.5, 2.0)):
        if c == 0:
            raise ValueError("hyperbola_toy needs c != 0")
        super().__init__(2, 1, Tube(math.nan, tube_radius))
        self.c = float(c)
        self.a_range = tuple(float(v) for v in a_range)
        self._kargs = (K.HYPERBOLA, 0, np.zeros((1, 1)), self.c)

    def kernel_args(self):
        return self._kargs

    def curve(self, t):
        return np.array([t, self.c / t])

    def unit_normal(self, t):
        v = np.array([self.c / t**2, 1.0])
        return v / np.linalg.norm(v)

    def objective(self, x):
        a, b = x
        return -0.5 * (a * b - self.c) ** 2

    def hessian(self, x):
        a, b = x
        off = -(2 * a * b - self.c)
        return np.array([[-b * b, off], [off, -a * a]])

    def _foot(self, x):
        t = K.hyperbola_foot(float(x[0]), float(x[1]), self.c)
        m = self.curve(t)
        return m, float(np.hypot(*(x - m)))

    def in_tube(self, x):
        if not np.all(np.isfinite(x)):
            return False
        dist, t = K.distance(K.HYPERBOLA, np.asarray(x, dtype=float), 0, self.c)
        return dist < self.tube.tube_radius and self.a_range[0] <= t <= self.a_range[1]

    def stability(self):
        lo, hi = self.a_range
        ts = [lo, hi]
        s = math.sqrt(abs(self.c))
        if lo <= s <= hi:
            ts.append(s)
        return min(t * t + self.c**2 / t**2 for t in ts)

    def start_point(self, d0, stream):
        u = stream.uniforms(0, 2, START_POINT)
        t = self.a_range[0] + (self.a_range[1] - self.a_range[0]) * u[0]
        s = 1.0 if u[1] < 0.5 else -1.0
        return self.curve(t) + s * d0 * self.unit_normal(t)

    def sample_tube(self, count, rng):
        lo, hi = self.a_range
        t = rng.uniform(lo + 0.05, hi - 0.05, count)
        h = self.tube.tube_radius * rng.uniform(-0.95, 0.95, count)
        return np.array([self.curve(ti) + hi_ * self.unit_normal(ti) for ti, hi_ in zip(t, h)])

    def to_dict(self):
        return {"kind": self.kind, "c": self.c}


_PROBLEMS = {}


def make_problem(kind, **params):
    """Build a problem by name; ``params`` are the constructor keywords."""
    if not _PROBLEMS:
        _PROBLEMS.update({c.kind: c for c in (FlatQuadratic, SphereWell, HyperbolaToy)})
    if kind not in _PROBLEMS:
        raise ValueError(f"unknown problem kind {kind!r}")
    if kind == "flat_quadratic":
        params = {"A": np.eye(2), **params}
    try:
        return _PROBLEMS[kind](**params)
    except TypeError as e:
        raise ValueError(f"bad parameters for {kind}: {e}") from None


def project(prob, x):
    return prob.project(x)


def distance_to_M(prob, x):
    return prob.distance(x)


def _require_on_manifold(prob, m):
    m = np.asarray(m, dtype=float)
    res = np.linalg.norm(prob.project(m) - m)
    if res > 1e-8:
        raise GeometryError(f"point is not on the manifold (projection residual {res:.3g})")
    return m


def spectral_split(prob, m):
    """Eigenpairs of ``Df(m)`` split into tangent (kernel) and normal (negative) parts.

    Returns ``(normal_values, normal_vectors, tangent_vectors)``.
    """
    H = prob.hessian(m)
    w, V = np.linalg.eigh(0.5 * (H + H.T))
    thr = 1e-8 * (1 + np.abs(w).max())
    if np.any(w > thr):
        raise EigenGapError(f"positive Hessian eigenvalue {w.max():.3g} on the manifold")
    normal = w < -thr
    if normal.sum() != prob.normal_dim:
        raise EigenGapError(
            f"expected {prob.normal_dim} negative eigenvalues, found {int(normal.sum())} "
            f"(spectrum {w})"
        )
    return w[normal], V[:, normal], V[:, ~normal]


def normal_projector(prob, m):
    m = _require_on_manifold(prob, m)
    _, Vn, _ = spectral_split(prob, m)
    return Vn @ Vn.T


def restricted_inverse(prob, m):
    """``(Df(m)|_N)^{-1}`` composed with the normal projector."""
    m = _require_on_manifold(prob, m)
    wn, Vn, _ = spectral_split(prob, m)
    if np.any(np.abs(wn) < 1e-12):
        raise SingularityError("normal eigenvalue too close to zero")
    return (Vn / wn) @ Vn.T


@dataclass
class LimitLaw:
    limit_point: np.ndarray
    B: np.ndarray
    Sigma: np.ndarray
    perf_spectrum: np.ndarray
    factor: float


def limit_law(prob, m, Gamma, rho):
    """Limit covariance of the rescaled average and the F-performance spectrum.

    ``Sigma = c(rho)^2 B Gamma B^T`` with ``B`` the restricted inverse;
    ``perf_spectrum`` holds the eigenvalues of
    ``c(rho)^2 S Gamma S^T`` on the normal space, ``S = (-Df|_N)^{-1/2}``.
    """
    m = _require_on_manifold(prob, m)
    Gamma = np.asarray(Gamma, dtype=float)
    wn, Vn, _ = spectral_split(prob, m)
    B = (Vn / wn) @ Vn.T
    c2 = c_rho(rho) ** 2
    Sigma = c2 * B @ Gamma @ B.T
    Sigma = 0.5 * (Sigma + Sigma.T)
    Sn = Vn / np.sqrt(-wn)                  # columns: normal eigvecs scaled
    core = c2 * Sn.T @ Gamma @ Sn
    spec = np.clip(np.linalg.eigvalsh(0.5 * (core + core.T)), 0, None)[::-1]
    return LimitLaw(m, B, Sigma, spec, math.sqrt(c2))


class NiceRepresentation:
    """Coordinates ``(zeta, theta)`` with ``M = {theta = 0}`` and ``|theta| = d(x, M)``."""

    def __init__(self, psi, phi, in_domain, manifold_dim):
        self._psi = psi
        self._phi = phi
        self.in_domain = in_domain
        self.manifold_dim = manifold_dim

    def psi(self, x):
        x = np.asarray(x, dtype=float)
        if not self.in_domain(x):
            raise ChartDomainError(f"point {x} is outside the chart domain")
        return self._psi(x)

    def phi(self, zeta, theta):
        return self._phi(np.atleast_1d(np.asarray(zeta, float)), np.atleast_1d(np.asarray(theta, float)))


def _tangent_basis(p):
    d = p.shape[0]
    Q, _ = np.linalg.qr(np.column_stack([p, np.eye(d)]))
    return Q[:, 1:d]


def nice_representation(prob, base=None):
    """Analytic Fermi-type chart for the built-in problems.

    ``sphere_well`` uses geodesic normal coordinates around ``base`` (default
    ``e_1``) on the open hemisphere, with ``theta = |x| - 1``.
    ``hyperbola_toy`` uses the foot parameter ``t`` and the signed normal
    offset.  ``flat_quadratic`` is the identity.
    """
    if isinstance(prob, FlatQuadratic):
        dz = prob.manifold_dim
        return NiceRepresentation(
            lambda x: (x[:dz].copy(), x[dz:].copy()),
            lambda z, th: np.concatenate([z, th]),
            lambda x: prob.in_tube(x),
            dz,
        )
    if isinstance(prob, SphereWell):
        p = np.zeros(prob.dim)
        p[0] = 1.0
        if base is not None:
            p = np.asarray(base, float) / np.linalg.norm(base)
        E = np.eye(prob.dim)[:, 1:] if base is None else _tangent_basis(p)

        def psi(x):
            r = np.linalg.norm(x)
            u = x / r
            v = E.T @ u
            s = np.linalg.norm(v)
            ang = math.atan2(s, float(u @ p))
            z = v * (ang / s) if s > 0 else np.zeros(prob.dim - 1)
            return z, np.array([r - 1])

        def phi(z, th):
            a = np.linalg.norm(z)
            w = E @ z
            u = p * math.cos(a) + (w * (math.sin(a) / a) if a > 0 else 0.0)
            return (1 + th[0]) * u

        def dom(x):
            if not prob.in_tube(x):
                return False
            return float(x @ p) > 0

        return NiceRepresentation(psi, phi, dom, prob.manifold_dim)
    if isinstance(prob, HyperbolaToy):

        def psi(x):
            m, _ = prob._foot(x)
            t = m[0]
            return np.array([t]), np.array([float((x - m) @ prob.unit_normal(t))])

        def phi(z, th):
            t = z[0]
            return prob.curve(t) + th[0] * prob.unit_normal(t)

        return NiceRepresentation(psi, phi, prob.in_tube, 1)
    raise ValueError(f"no analytic chart for {prob!r}")
