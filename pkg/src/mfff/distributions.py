"""Latent and target densities on manifolds.

Densities are with respect to the Riemannian volume of the manifold. Wrapped
distributions on the Poincare ball push a tangent-space density at the
origin through ``exp0``, correcting for the exponential map's Jacobian and
the ratio between the ball metric and the Euclidean tangent metric.
"""
import math

import numpy as np
from scipy.optimize import brentq
from scipy.special import logsumexp

from . import geometry
from .exceptions import NonDifferentiable, OutOfSupport
from .geometry import PoincareBall, Sphere

LOG_2PI = math.log(2.0 * math.pi)


class Distribution:
    """Base class; subclasses implement ``_log_prob``, ``_grad`` and ``sample``."""

    kind = None

    def __init__(self, manifold):
        self.manifold = manifold

    def log_prob(self, x):
        x = self.manifold.check_on_manifold(x)
        return self._log_prob(x)

    def grad_log_prob(self, x):
        """Tangential gradient of the log-density in embedding coordinates."""
        x = self.manifold.check_on_manifold(x)
        return self._grad(x)

    def _log_prob(self, x):
        raise NotImplementedError

    def _grad(self, x):
        raise NotImplementedError

    def sample(self, count, rng):
        raise NotImplementedError

    def params(self):
        return {}

    def to_dict(self):
        return {"kind": self.kind, "manifold": self.manifold.describe(), **self.params()}

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.params().items())
        return f"{type(self).__name__}({self.manifold!r}{', ' if args else ''}{args})"


class UniformManifold(Distribution):
    kind = "uniform"

    def __init__(self, manifold):
        if not math.isfinite(manifold.volume):
            raise ValueError(f"{manifold!r} has infinite volume; no uniform density")
        super().__init__(manifold)

    def _log_prob(self, x):
        return np.full(np.shape(x)[:-1], -math.log(self.manifold.volume))

    def _grad(self, x):
        return np.zeros(np.shape(x))

    def sample(self, count, rng):
        return self.manifold.sample_uniform(count, rng)


def log_vmf_normalizer(kappa):
    """``log C(kappa)`` for the vMF density ``C(kappa) exp(kappa mu.x)`` on S^2."""
    kappa = np.asarray(kappa, dtype=float)
    # log sinh k = k + log(1 - exp(-2k)) - log 2, and log(k / sinh k) -> 0 as k -> 0
    log_sinh = kappa + np.log(-np.expm1(-2.0 * kappa)) - math.log(2.0)
    return np.log(kappa) - math.log(4.0 * math.pi) - log_sinh


def vmf_mean_resultant(kappa):
    """Mean resultant length ``A(kappa) = coth(kappa) - 1/kappa`` on S^2."""
    kappa = np.asarray(kappa, dtype=float)
    return 1.0 / np.tanh(kappa) - 1.0 / kappa


class VonMisesFisherMixture(Distribution):
    """Mixture of von Mises-Fisher distributions on S^2."""

    kind = "vmf_mixture"

    def __init__(self, manifold, means, kappas, weights=None):
        if not (isinstance(manifold, Sphere) and manifold.n == 2):
            raise ValueError("the vMF mixture is implemented for S^2 only")
        super().__init__(manifold)
        means = np.atleast_2d(np.asarray(means, dtype=float))
        kappas = np.atleast_1d(np.asarray(kappas, dtype=float))
        if weights is None:
            weights = np.full(len(kappas), 1.0 / len(kappas))
        weights = np.atleast_1d(np.asarray(weights, dtype=float))
        if means.shape != (len(kappas), 3) or weights.shape != kappas.shape:
            raise ValueError("means, kappas and weights disagree in length")
        if np.any(kappas <= 0) or np.any(weights <= 0):
            raise ValueError("kappas and weights must be positive")
        if abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must sum to one")
        if np.max(np.abs(np.linalg.norm(means, axis=1) - 1.0)) > 1e-9:
            raise ValueError("vMF means must be unit vectors")
        self.means = means
        self.kappas = kappas
        self.weights = weights

    def _component_logits(self, x):
        return (np.log(self.weights) + log_vmf_normalizer(self.kappas)
                + self.kappas * (x @ self.means.T))

    def _log_prob(self, x):
        return logsumexp(self._component_logits(x), axis=-1)

    def _grad(self, x):
        logits = self._component_logits(x)
        resp = np.exp(logits - logsumexp(logits, axis=-1, keepdims=True))
        g = resp @ (self.kappas[:, None] * self.means)
        return g - x * np.sum(g * x, axis=-1, keepdims=True)

    def sample(self, count, rng):
        comp = rng.choice(len(self.kappas), size=count, p=self.weights)
        out = np.empty((count, 3))
        for k in np.unique(comp):
            idx = np.flatnonzero(comp == k)
            out[idx] = sample_vmf_s2(self.means[k], self.kappas[k], len(idx), rng)
        return out

    def params(self):
        return {"means": self.means.tolist(), "kappas": self.kappas.tolist(),
                "weights": self.weights.tolist()}


def _orthonormal_complement(mu):
    a = np.eye(3)[np.argmin(np.abs(mu))]
    e1 = a - mu * (a @ mu)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(mu, e1)


def sample_vmf_s2(mu, kappa, count, rng):
    """Exact vMF sampler on S^2 via the inverse CDF of ``w = mu . x``."""
    mu = np.asarray(mu, dtype=float)
    u = rng.uniform(size=count)
    w = 1.0 + np.log(u + (1.0 - u) * np.exp(-2.0 * kappa)) / kappa
    w = np.clip(w, -1.0, 1.0)
    phi = rng.uniform(0.0, 2.0 * math.pi, size=count)
    e1, e2 = _orthonormal_complement(mu)
    s = np.sqrt(1.0 - w * w)
    return (w[:, None] * mu + (s * np.cos(phi))[:, None] * e1
            + (s * np.sin(phi))[:, None] * e2)


def _kappa_from_resultant(rbar):
    rbar = float(np.clip(rbar, 1e-6, 1.0 - 1e-9))
    return brentq(lambda k: float(vmf_mean_resultant(k)) - rbar, 1e-8, 1e9)


def fit_vmf_mixture(points, n_components, rng, iterations=50):
    """Fixed vMF mixture fitted by spherical k-means and moment matching.

    Each cluster's mean direction is its normalised centroid and its
    concentration solves ``A(kappa) = ||centroid||``.
    """
    points = np.asarray(points, dtype=float)
    centers = points[rng.choice(len(points), size=n_components, replace=False)]
    for _ in range(iterations):
        labels = np.argmax(points @ centers.T, axis=1)
        new = np.array([points[labels == k].mean(axis=0) if np.any(labels == k) else centers[k]
                        for k in range(n_components)])
        new /= np.linalg.norm(new, axis=1, keepdims=True)
        if np.allclose(new, centers):
            break
        centers = new
    labels = np.argmax(points @ centers.T, axis=1)
    kappas, weights = [], []
    for k in range(n_components):
        members = points[labels == k]
        if len(members) == 0:
            kappas.append(1e-3)
            weights.append(1.0)
            continue
        kappas.append(_kappa_from_resultant(np.linalg.norm(members.mean(axis=0))))
        weights.append(len(members))
    weights = np.asarray(weights, dtype=float)
    return VonMisesFisherMixture(Sphere(2), centers, kappas, weights / weights.sum())


# ---------------------------------------------------------------------------
# wrapped distributions on the Poincare ball

class WrappedDistribution(Distribution):
    """Tangent-space density at the origin pushed onto the ball through ``exp0``."""

    def __init__(self, manifold):
        if not isinstance(manifold, PoincareBall):
            raise ValueError("wrapped distributions live on the Poincare ball")
        super().__init__(manifold)

    def tangent_log_prob(self, v):
        raise NotImplementedError

    def tangent_grad(self, v):
        raise NotImplementedError

    def tangent_sample(self, count, rng):
        raise NotImplementedError

    def log_prob(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(np.linalg.norm(x, axis=-1) >= 1.0):
            raise OutOfSupport("wrapped densities need points strictly inside the unit ball")
        return self._log_prob(x)

    def grad_log_prob(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(np.linalg.norm(x, axis=-1) >= 1.0):
            raise OutOfSupport("wrapped densities need points strictly inside the unit ball")
        return self._grad(x)

    def _log_prob(self, x):
        v = geometry.log0_poincare(x)
        return (self.tangent_log_prob(v) - geometry.logdet_jac_exp0(v)
                - self.manifold.half_log_metric_det(x))

    def _grad(self, x):
        n = self.manifold.n
        v = geometry.log0_poincare(x)
        g = self.tangent_grad(v)
        r = np.linalg.norm(x, axis=-1, keepdims=True)
        small = r < 1e-4
        rs = np.where(small, 0.5, r)  # placeholder, replaced below
        rho = np.arctanh(np.minimum(rs, 1.0 - 1e-16))
        one_m = 1.0 - rs * rs
        xhat = x / rs
        g_par = np.sum(g * xhat, axis=-1, keepdims=True)
        # log0 Jacobian: (rho/r)(I - xx^T) + xx^T / (1 - r^2)
        pulled = (rho / rs) * (g - g_par * xhat) + g_par * xhat / one_m
        radial = (n - 1) * (-2.0 * rs / one_m + 1.0 / (rho * one_m) - 1.0 / rs)
        extra = radial * xhat
        # near the origin: log0 Jacobian -> I and the radial term -> -(4/3)(n-1) x
        pulled = np.where(small, g, pulled)
        extra = np.where(small, -(4.0 / 3.0) * (n - 1) * x, extra)
        return pulled + extra

    def sample(self, count, rng):
        return geometry.exp0_poincare(self.tangent_sample(count, rng))


class WrappedNormal(WrappedDistribution):
    """Isotropic normal ``N(0, sigma^2 I)`` at the origin, wrapped onto the ball."""

    kind = "wrapped_normal"

    def __init__(self, manifold, sigma=0.5):
        super().__init__(manifold)
        if not (math.isfinite(sigma) and sigma > 0):
            raise ValueError("sigma must be finite and positive")
        self.sigma = float(sigma)

    def tangent_log_prob(self, v):
        n = v.shape[-1]
        return -0.5 * n * (LOG_2PI + 2.0 * math.log(self.sigma)) - 0.5 * np.sum(v * v, -1) / self.sigma**2

    def tangent_grad(self, v):
        return -v / self.sigma**2

    def tangent_sample(self, count, rng):
        return self.sigma * rng.standard_normal((count, self.manifold.n))

    def params(self):
        return {"sigma": self.sigma}


class FiveGaussians(WrappedDistribution):
    """Equal mixture of isotropic normals with means on a ring in the tangent plane."""

    kind = "five_gaussians"

    def __init__(self, manifold, radius=1.5, sigma=0.3, count=5):
        super().__init__(manifold)
        if manifold.n != 2:
            raise ValueError("toy targets are defined on H^2")
        self.radius, self.sigma, self.count = float(radius), float(sigma), int(count)
        ang = 2.0 * math.pi * np.arange(self.count) / self.count
        self.centers = self.radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)

    def _logits(self, v):
        d2 = np.sum((v[..., None, :] - self.centers) ** 2, axis=-1)
        return (-math.log(self.count) - LOG_2PI - 2.0 * math.log(self.sigma)
                - 0.5 * d2 / self.sigma**2)

    def tangent_log_prob(self, v):
        return logsumexp(self._logits(v), axis=-1)

    def tangent_grad(self, v):
        logits = self._logits(v)
        resp = np.exp(logits - logsumexp(logits, axis=-1, keepdims=True))
        return np.einsum("...k,...kd->...d", resp, self.centers - v[..., None, :]) / self.sigma**2

    def tangent_sample(self, count, rng):
        idx = rng.integers(self.count, size=count)
        return self.centers[idx] + self.sigma * rng.standard_normal((count, 2))

    def params(self):
        return {"radius": self.radius, "sigma": self.sigma, "count": self.count}


class Swish(WrappedDistribution):
    """Normal band around the curve ``v2 = silu(2 v1) / 2 - 1/4``."""

    kind = "swish"

    def __init__(self, manifold, spread=0.6, width=0.15):
        super().__init__(manifold)
        if manifold.n != 2:
            raise ValueError("toy targets are defined on H^2")
        self.spread, self.width = float(spread), float(width)

    @staticmethod
    def _curve(t):
        s = 0.5 * (1.0 + np.tanh(t))
        return t * s - 0.25, s * (1.0 + 2.0 * t * (1.0 - s))

    def tangent_log_prob(self, v):
        c, _ = self._curve(v[..., 0])
        r = v[..., 1] - c
        return (-LOG_2PI - math.log(self.spread) - math.log(self.width)
                - 0.5 * v[..., 0] ** 2 / self.spread**2 - 0.5 * r**2 / self.width**2)

    def tangent_grad(self, v):
        c, dc = self._curve(v[..., 0])
        r = (v[..., 1] - c) / self.width**2
        return np.stack([-v[..., 0] / self.spread**2 + r * dc, -r], axis=-1)

    def tangent_sample(self, count, rng):
        t = self.spread * rng.standard_normal(count)
        c, _ = self._curve(t)
        return np.stack([t, c + self.width * rng.standard_normal(count)], axis=1)

    def params(self):
        return {"spread": self.spread, "width": self.width}


class Checkerboard(WrappedDistribution):
    """Uniform density on alternating cells of a square grid in the tangent plane.

    ``cells x cells`` squares cover ``[-half_width, half_width]^2``; cells with
    even ``i + j`` carry the mass.
    """

    kind = "checkerboard"

    def __init__(self, manifold, cells=4, half_width=2.0):
        super().__init__(manifold)
        if manifold.n != 2:
            raise ValueError("toy targets are defined on H^2")
        self.cells, self.half_width = int(cells), float(half_width)
        self.cell_size = 2.0 * self.half_width / self.cells
        on = (self.cells * self.cells + 1) // 2
        self.log_density = -math.log(on * self.cell_size**2)

    def _cell_index(self, v):
        return np.floor((v + self.half_width) / self.cell_size).astype(int)

    def on_cells(self, v):
        idx = self._cell_index(v)
        inside = np.all((idx >= 0) & (idx < self.cells), axis=-1)
        return inside & (np.sum(idx, axis=-1) % 2 == 0)

    def tangent_log_prob(self, v):
        return np.where(self.on_cells(v), self.log_density, -np.inf)

    def tangent_grad(self, v):
        if not np.all(self.on_cells(v)):
            raise OutOfSupport("checkerboard density is zero outside its cells")
        scaled = (v + self.half_width) / self.cell_size
        if np.any(np.isclose(scaled, np.round(scaled), rtol=0.0, atol=1e-12)):
            raise NonDifferentiable("point lies on a checkerboard cell boundary")
        return np.zeros_like(v)

    def tangent_sample(self, count, rng):
        cells = [(i, j) for i in range(self.cells) for j in range(self.cells) if (i + j) % 2 == 0]
        pick = np.asarray(cells)[rng.integers(len(cells), size=count)]
        return (pick + rng.uniform(size=(count, 2))) * self.cell_size - self.half_width

    def params(self):
        return {"cells": self.cells, "half_width": self.half_width}


TOY_TARGETS = {
    "one_gaussian": WrappedNormal,
    "five_gaussians": FiveGaussians,
    "swish": Swish,
    "checkerboard": Checkerboard,
}


def toy_target(kind, manifold=None, **params):
    """Build a toy target on ``H^2`` by name."""
    manifold = manifold or PoincareBall(2)
    if kind not in TOY_TARGETS:
        raise ValueError(f"unknown toy target {kind!r}")
    return TOY_TARGETS[kind](manifold, **params)


_REGISTRY = {
    "uniform": UniformManifold,
    "product_uniform_circles": UniformManifold,
    "vmf_mixture": VonMisesFisherMixture,
    "wrapped_normal": WrappedNormal,
    **TOY_TARGETS,
}


def distribution_from_dict(d, manifold=None):
    d = dict(d)
    kind = d.pop("kind")
    desc = d.pop("manifold", None)
    if manifold is None:
        if desc is None:
            raise ValueError("distribution description lacks a manifold")
        manifold = geometry.manifold_from_description(desc)
    if kind not in _REGISTRY:
        raise ValueError(f"unknown distribution kind {kind!r}")
    return _REGISTRY[kind](manifold, **d)
