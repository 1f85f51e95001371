"""Embedded manifolds: projections, their derivatives, tangent frames and metrics.

Every manifold is the fixed-point set of a projection ``proj: R^m -> R^m``.
All operations are vectorised over leading axes, so a batch of points has
shape ``(..., m)``. SO(3) points are stored as row-major length-9 vectors.
"""
from dataclasses import dataclass
import math

import numpy as np
from scipy.special import gammaln

from .exceptions import DegenerateInput, OffManifold, SingularPolar

_ROW_NORM_MIN = 1e-12


@dataclass(frozen=True)
class TangentFrame:
    """Orthonormal tangent basis at a point.

    ``basis`` has shape ``(..., m, n)`` and ``projector == basis @ basis^T``.
    """

    point: np.ndarray
    basis: np.ndarray
    projector: np.ndarray


class Manifold:
    """Base class for an ``n``-dimensional manifold embedded in ``R^m``."""

    kind = "generic"
    isometric = True

    def __init__(self, n, m, on_manifold_tol=1e-6):
        if n < 1:
            raise ValueError(f"intrinsic dimension must be positive, got {n}")
        self.n = int(n)
        self.m = int(m)
        self.on_manifold_tol = float(on_manifold_tol)

    def __repr__(self):
        return f"{type(self).__name__}(n={self.n})"

    def __eq__(self, other):
        return type(self) is type(other) and self.describe() == other.describe()

    def __hash__(self):
        return hash(tuple(sorted(self.describe().items())))

    def describe(self):
        return {"kind": self.kind, "n": self.n, "on_manifold_tol": self.on_manifold_tol}

    # -- projection -------------------------------------------------------
    def project(self, y):
        raise NotImplementedError

    def project_jvp(self, y, v):
        """Directional derivative ``proj'(y) v``."""
        raise NotImplementedError

    def project_vjp(self, y, u):
        """``proj'(y)^T u``. All implemented projections have symmetric derivatives."""
        return self.project_jvp(y, u)

    def project_hvp(self, y, t, u):
        """Gradient w.r.t. ``y`` of ``<u, proj'(y) t>``.

        This is the second-order term needed to differentiate a Jacobian-vector
        product through the projection.
        """
        raise NotImplementedError

    # -- checks -----------------------------------------------------------
    def _check_dim(self, y):
        y = np.asarray(y, dtype=float)
        if y.shape[-1] != self.m:
            raise DegenerateInput(f"expected last axis of size {self.m}, got {y.shape}")
        return y

    def distance_to_manifold(self, x):
        x = self._check_dim(x)
        return np.linalg.norm(self.project(x) - x, axis=-1)

    def check_on_manifold(self, x, tol=None):
        """Raise :class:`OffManifold` if any point is off the manifold."""
        tol = self.on_manifold_tol if tol is None else tol
        try:
            dist = self.distance_to_manifold(x)
        except DegenerateInput as exc:
            raise OffManifold(str(exc)) from exc
        worst = float(np.max(dist, initial=0.0))
        if worst > tol:
            raise OffManifold(f"point is {worst:.3g} away from {self!r} (tol {tol:g})")
        return np.asarray(x, dtype=float)

    # -- tangent spaces ---------------------------------------------------
    def tangent_projector(self, x):
        """Orthogonal projector onto the tangent space, shape ``(..., m, m)``."""
        x = self._check_dim(x)
        eye = np.broadcast_to(np.eye(self.m), x.shape[:-1] + (self.m, self.m))
        cols = self.project_jvp(x[..., None, :], eye)
        return np.swapaxes(cols, -1, -2)

    def tangent_frame(self, x):
        x = self._check_dim(x)
        proj = self.tangent_projector(x)
        u, s, _ = np.linalg.svd(proj)
        count = np.sum(s > 0.5, axis=-1)
        if np.any(count != self.n):
            raise DegenerateInput(f"tangent projector rank differs from n={self.n}")
        basis = u[..., :, : self.n]
        return TangentFrame(point=x, basis=basis, projector=proj)

    def tangent_basis(self, x):
        return self.tangent_frame(x).basis

    # -- metric -----------------------------------------------------------
    def metric(self, x):
        x = self._check_dim(x)
        return np.broadcast_to(np.eye(self.m), x.shape[:-1] + (self.m, self.m)).copy()

    def half_log_metric_det(self, x):
        """``0.5 * log|Q^T G(x) Q|`` for an orthonormal tangent basis ``Q``."""
        x = self._check_dim(x)
        return np.zeros(x.shape[:-1])

    def grad_half_log_metric_det(self, x):
        """Ambient gradient of :meth:`half_log_metric_det`."""
        x = self._check_dim(x)
        return np.zeros_like(x)

    # -- misc -------------------------------------------------------------
    @property
    def volume(self):
        """Riemannian volume, ``inf`` for non-compact manifolds."""
        return math.inf

    def geodesic_distance(self, a, b):
        raise NotImplementedError

    def sample_uniform(self, count, rng):
        raise NotImplementedError


# ---------------------------------------------------------------------------
# unit-sphere helpers acting on the last axis

def _sphere_project(y):
    r = np.linalg.norm(y, axis=-1, keepdims=True)
    if np.any(r < _ROW_NORM_MIN):
        raise DegenerateInput("cannot project a zero vector onto the sphere")
    return y / r


def _sphere_jvp(y, v):
    r = np.linalg.norm(y, axis=-1, keepdims=True)
    if np.any(r < _ROW_NORM_MIN):
        raise DegenerateInput("cannot project a zero vector onto the sphere")
    yh = y / r
    return (v - yh * np.sum(yh * v, axis=-1, keepdims=True)) / r


def _sphere_hvp(y, t, u):
    r2 = np.sum(y * y, axis=-1, keepdims=True)
    r = np.sqrt(r2)
    if np.any(r < _ROW_NORM_MIN):
        raise DegenerateInput("cannot project a zero vector onto the sphere")
    ut = np.sum(u * t, axis=-1, keepdims=True)
    uy = np.sum(u * y, axis=-1, keepdims=True)
    yt = np.sum(y * t, axis=-1, keepdims=True)
    r3 = r2 * r
    return -ut * y / r3 - (u * yt + t * uy) / r3 + 3.0 * uy * yt * y / (r3 * r2)


class Sphere(Manifold):
    """Unit sphere ``S^n`` in ``R^(n+1)``."""

    kind = "sphere"

    def __init__(self, n, on_manifold_tol=1e-6):
        super().__init__(n, n + 1, on_manifold_tol)

    def project(self, y):
        return _sphere_project(self._check_dim(y))

    def project_jvp(self, y, v):
        return _sphere_jvp(self._check_dim(y), v)

    def project_hvp(self, y, t, u):
        return _sphere_hvp(self._check_dim(y), t, u)

    def tangent_projector(self, x):
        x = self._check_dim(x)
        return np.eye(self.m) - x[..., :, None] * x[..., None, :]

    @property
    def volume(self):
        k = self.n + 1
        return float(np.exp(math.log(2.0) + 0.5 * k * math.log(math.pi) - gammaln(0.5 * k)))

    def geodesic_distance(self, a, b):
        # half-angle form stays accurate near 0 and pi, unlike arccos of the dot product
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        return 2.0 * np.arctan2(np.linalg.norm(a - b, axis=-1), np.linalg.norm(a + b, axis=-1))

    def sample_uniform(self, count, rng):
        g = rng.standard_normal((count, self.m))
        return g / np.linalg.norm(g, axis=-1, keepdims=True)


class Torus(Manifold):
    """Flat torus ``T^n = (S^1)^n`` embedded as ``n`` unit circles in ``R^(2n)``."""

    kind = "torus"

    def __init__(self, n, on_manifold_tol=1e-6):
        super().__init__(n, 2 * n, on_manifold_tol)

    def _blocks(self, y):
        y = self._check_dim(y)
        return y.reshape(y.shape[:-1] + (self.n, 2))

    def _flat(self, y):
        return y.reshape(y.shape[:-2] + (self.m,))

    def project(self, y):
        return self._flat(_sphere_project(self._blocks(y)))

    def project_jvp(self, y, v):
        v = np.asarray(v, dtype=float)
        vb = v.reshape(v.shape[:-1] + (self.n, 2))
        return self._flat(_sphere_jvp(self._blocks(y), vb))

    def project_hvp(self, y, t, u):
        t = np.asarray(t, dtype=float)
        u = np.asarray(u, dtype=float)
        tb = t.reshape(t.shape[:-1] + (self.n, 2))
        ub = u.reshape(u.shape[:-1] + (self.n, 2))
        return self._flat(_sphere_hvp(self._blocks(y), tb, ub))

    @property
    def volume(self):
        return (2.0 * math.pi) ** self.n

    def to_angles(self, x):
        b = self._blocks(x)
        return np.arctan2(b[..., 1], b[..., 0])

    def from_angles(self, angles):
        angles = np.asarray(angles, dtype=float)
        out = np.stack([np.cos(angles), np.sin(angles)], axis=-1)
        return self._flat(out)

    def geodesic_distance(self, a, b):
        d = self.to_angles(a) - self.to_angles(b)
        d = np.abs((d + math.pi) % (2.0 * math.pi) - math.pi)
        return np.sqrt(np.sum(d * d, axis=-1))

    def sample_uniform(self, count, rng):
        return self.from_angles(rng.uniform(0.0, 2.0 * math.pi, size=(count, self.n)))


class SpecialOrthogonal3(Manifold):
    """Rotation group SO(3) embedded in ``R^9`` (row-major 3x3 matrices).

    The projection solves the constrained Procrustes problem. Densities use
    the bi-invariant volume of total mass ``8 pi^2``, whose geodesic distance
    is the rotation angle.
    """

    kind = "so3"
    tie_tol = 1e-9
    polar_tol = 1e-10

    def __init__(self, n=3, on_manifold_tol=1e-6):
        if n != 3:
            raise ValueError("SO(3) has intrinsic dimension 3")
        super().__init__(3, 9, on_manifold_tol)

    @staticmethod
    def _mat(y):
        return y.reshape(y.shape[:-1] + (3, 3))

    @staticmethod
    def _vec(a):
        return a.reshape(a.shape[:-2] + (9,))

    def _factor(self, y):
        """Procrustes factors: rotation ``Q`` plus the SVD of ``y``."""
        mat = self._mat(self._check_dim(y))
        u, s, vt = np.linalg.svd(mat)
        sign = np.sign(np.linalg.det(u @ vt))
        sign = np.where(sign == 0, 1.0, sign)
        scale = s[..., :1]
        if np.any(scale < _ROW_NORM_MIN):
            raise DegenerateInput("cannot project a zero matrix onto SO(3)")
        flipped = sign < 0
        gap = (s[..., 1] - s[..., 2]) / scale[..., 0]
        if np.any(flipped & (gap < self.tie_tol)):
            raise DegenerateInput("nearest rotation is not unique (repeated smallest singular value)")
        diag = np.ones(s.shape)
        diag[..., 2] = sign
        q = (u * diag[..., None, :]) @ vt
        # H = Q^T Y = V diag(diag * s) V^T
        h = diag * s
        return mat, q, vt, h

    def project(self, y):
        _, q, _, _ = self._factor(y)
        return self._vec(q)

    def _sylvester(self, vt, h, c):
        """Solve ``H X + X H = C`` with ``H = V diag(h) V^T``."""
        pair = h[..., :, None] + h[..., None, :]
        if np.any(pair < self.polar_tol):
            raise SingularPolar("polar factor derivative is singular")
        v = np.swapaxes(vt, -1, -2)
        inner = vt @ c @ v
        return v @ (inner / pair) @ vt

    def project_jvp(self, y, v):
        _, q, vt, h = self._factor(y)
        vm = self._mat(np.asarray(v, dtype=float))
        qt = np.swapaxes(q, -1, -2)
        c = qt @ vm - np.swapaxes(vm, -1, -2) @ q
        x = self._sylvester(vt, h, c)
        return self._vec(q @ x)

    def project_hvp(self, y, t, u):
        mat, q, vt, h = self._factor(y)
        tm = self._mat(np.asarray(t, dtype=float))
        um = self._mat(np.asarray(u, dtype=float))
        qt = np.swapaxes(q, -1, -2)
        x = self._sylvester(vt, h, qt @ tm - np.swapaxes(tm, -1, -2) @ q)
        hmat = qt @ mat
        hdot = qt @ tm - x @ hmat
        b = qt @ um
        a = self._sylvester(vt, h, b)
        adot = self._sylvester(vt, h, -x @ b - hdot @ a - a @ hdot)
        skew_a = a - np.swapaxes(a, -1, -2)
        skew_adot = adot - np.swapaxes(adot, -1, -2)
        return self._vec(q @ x @ skew_a + q @ skew_adot)

    def tangent_projector(self, x):
        # at a rotation X: V -> X skew(X^T V), i.e. the polar derivative with H = I
        x = self._check_dim(x)
        xm = self._mat(x)
        eye = np.eye(9).reshape(9, 3, 3)
        xb = xm[..., None, :, :]
        xtv = np.swapaxes(xb, -1, -2) @ eye
        cols = xb @ (0.5 * (xtv - np.swapaxes(xtv, -1, -2)))
        cols = cols.reshape(cols.shape[:-2] + (9,))
        return np.swapaxes(cols, -1, -2)

    @property
    def volume(self):
        return 8.0 * math.pi**2

    def geodesic_distance(self, a, b):
        am = self._mat(np.asarray(a, dtype=float))
        bm = self._mat(np.asarray(b, dtype=float))
        tr = np.sum(am * bm, axis=(-1, -2))
        # ||A - B||_F^2 = 8 sin^2(theta / 2) and (1 + tr(A^T B)) / 4 = cos^2(theta / 2)
        half_sin = np.sqrt(np.sum((am - bm) ** 2, axis=(-1, -2)) / 8.0)
        half_cos = np.sqrt(np.maximum(0.25 * (1.0 + tr), 0.0))
        return 2.0 * np.arctan2(half_sin, half_cos)

    def sample_uniform(self, count, rng):
        g = rng.standard_normal((count, 3, 3))
        q, r = np.linalg.qr(g)
        signs = np.sign(np.diagonal(r, axis1=-2, axis2=-1))
        signs = np.where(signs == 0, 1.0, signs)
        q = q * signs[..., None, :]
        det = np.linalg.det(q)
        q[..., :, 0] *= np.where(det < 0, -1.0, 1.0)[..., None]
        return self._vec(q)


class PoincareBall(Manifold):
    """Hyperbolic space ``H^n`` in the Poincare ball model (curvature -1).

    The projection clamps points to the ball of radius ``1 - epsilon``.
    """

    kind = "poincare"
    isometric = False

    def __init__(self, n, epsilon=1e-5, on_manifold_tol=1e-6):
        if not 0.0 < epsilon < 1.0:
            raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
        super().__init__(n, n, on_manifold_tol)
        self.epsilon = float(epsilon)

    def describe(self):
        d = super().describe()
        d["epsilon"] = self.epsilon
        return d

    @property
    def radius(self):
        return 1.0 - self.epsilon

    def _outside(self, y):
        # points clamped exactly onto the radius count as interior
        return np.linalg.norm(y, axis=-1, keepdims=True) > self.radius * (1.0 + 1e-12)

    def project(self, y):
        y = self._check_dim(y)
        r = np.linalg.norm(y, axis=-1, keepdims=True)
        scale = np.minimum(1.0, self.radius / np.maximum(r, _ROW_NORM_MIN))
        return y * scale

    def project_jvp(self, y, v):
        y = self._check_dim(y)
        v = np.asarray(v, dtype=float)
        out = self._outside(y)
        if not np.any(out):
            return np.broadcast_to(v, np.broadcast_shapes(y.shape, v.shape)).copy()
        safe = np.where(out, y, 1.0)
        clamped = self.radius * _sphere_jvp(safe, v)
        return np.where(out, clamped, v)

    def project_hvp(self, y, t, u):
        y = self._check_dim(y)
        out = self._outside(y)
        shape = np.broadcast_shapes(y.shape, np.shape(t), np.shape(u))
        if not np.any(out):
            return np.zeros(shape)
        safe = np.where(out, y, 1.0)
        return np.where(out, self.radius * _sphere_hvp(safe, t, u), 0.0)

    def tangent_projector(self, x):
        x = self._check_dim(x)
        return np.broadcast_to(np.eye(self.m), x.shape[:-1] + (self.m, self.m)).copy()

    def conformal_factor(self, x):
        x = np.asarray(x, dtype=float)
        return 2.0 / (1.0 - np.sum(x * x, axis=-1))

    def metric(self, x):
        x = self._check_dim(x)
        lam = self.conformal_factor(x)
        return (lam**2)[..., None, None] * np.eye(self.m)

    def half_log_metric_det(self, x):
        x = self._check_dim(x)
        return self.n * np.log(self.conformal_factor(x))

    def grad_half_log_metric_det(self, x):
        x = self._check_dim(x)
        return (self.n * self.conformal_factor(x))[..., None] * x

    def geodesic_distance(self, a, b):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        num = 2.0 * np.sum((a - b) ** 2, axis=-1)
        den = (1.0 - np.sum(a * a, axis=-1)) * (1.0 - np.sum(b * b, axis=-1))
        t = num / den
        return np.log1p(t + np.sqrt(t * (t + 2.0)))

    def sample_uniform(self, count, rng):
        """Lebesgue-uniform points on the ball of radius ``1 - epsilon``."""
        g = rng.standard_normal((count, self.m))
        g /= np.linalg.norm(g, axis=-1, keepdims=True)
        r = self.radius * rng.uniform(size=(count, 1)) ** (1.0 / self.n)
        return g * r


def exp0_poincare(v):
    """Exponential map at the origin of the Poincare ball."""
    v = np.asarray(v, dtype=float)
    r = np.linalg.norm(v, axis=-1, keepdims=True)
    small = r < 1e-8
    scale = np.where(small, 1.0, np.tanh(r) / np.where(small, 1.0, r))
    return v * scale


def log0_poincare(x):
    """Inverse of :func:`exp0_poincare` on the open unit ball."""
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x, axis=-1, keepdims=True)
    small = r < 1e-8
    scale = np.where(small, 1.0, np.arctanh(np.where(small, 0.0, r)) / np.where(small, 1.0, r))
    return x * scale


def logdet_jac_exp0(v):
    """``log|det J_exp0(v)|`` for ``v`` in ``R^n``.

    Radial factor ``sech^2 |v|`` times ``(tanh|v| / |v|)^(n-1)`` for the
    ``n - 1`` angular directions; for ``n = 2`` this is
    ``tanh|v| / (|v| cosh^2 |v|)``.
    """
    v = np.asarray(v, dtype=float)
    n = v.shape[-1]
    r = np.linalg.norm(v, axis=-1)
    small = r < 1e-8
    rs = np.where(small, 1.0, r)
    # log cosh r = r + log1p(exp(-2r)) - log 2, stable for large r
    log_cosh = rs + np.log1p(np.exp(-2.0 * rs)) - math.log(2.0)
    log_ratio = np.log(np.tanh(rs)) - np.log(rs)
    val = -2.0 * log_cosh + (n - 1) * log_ratio
    return np.where(small, 0.0, val)


_KINDS = {
    "sphere": Sphere,
    "torus": Torus,
    "so3": SpecialOrthogonal3,
    "poincare": PoincareBall,
}


def make_manifold(kind, n=None, **kwargs):
    """Build a manifold from its kind name (``sphere``, ``torus``, ``so3``, ``poincare``)."""
    key = kind.lower().replace("_", "").replace("-", "")
    aliases = {"specialorthogonal3": "so3", "poincareball": "poincare", "hyperbolic": "poincare"}
    key = aliases.get(key, key)
    if key not in _KINDS:
        raise ValueError(f"unknown manifold kind {kind!r}")
    if key == "so3":
        return SpecialOrthogonal3(**kwargs)
    if n is None:
        raise ValueError(f"manifold {kind!r} needs an intrinsic dimension")
    return _KINDS[key](n, **kwargs)


def manifold_from_description(desc):
    desc = dict(desc)
    kind = desc.pop("kind")
    return make_manifold(kind, **desc)
