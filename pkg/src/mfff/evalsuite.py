"""Evaluation: quadrature normalisation checks, test NLL, W2 and estimator statistics."""
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import flow, nnet
from .distributions import UniformManifold
from .exceptions import SizeMismatch
from .geometry import PoincareBall, SpecialOrthogonal3, Sphere, Torus


@dataclass
class QuadratureGrid:
    """Nodes on a manifold with Riemannian volume weights."""

    kind: str
    nodes: np.ndarray
    weights: np.ndarray

    @property
    def total_volume(self):
        return float(self.weights.sum())

    def integrate(self, values):
        return float(np.sum(self.weights * values))


def circle_grid(count=10_000):
    theta = 2.0 * math.pi * np.arange(count) / count
    nodes = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    return QuadratureGrid("sphere1", nodes, np.full(count, 2.0 * math.pi / count))


def sphere_grid(n_theta=400, n_phi=800):
    """Midpoint nodes of colatitude/longitude cells weighted by exact cell area."""
    edges = np.linspace(0.0, math.pi, n_theta + 1)
    theta = 0.5 * (edges[:-1] + edges[1:])
    phi = 2.0 * math.pi * (np.arange(n_phi) + 0.5) / n_phi
    band = (np.cos(edges[:-1]) - np.cos(edges[1:])) * (2.0 * math.pi / n_phi)
    t, p = np.meshgrid(theta, phi, indexing="ij")
    nodes = np.stack([np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)], axis=-1)
    weights = np.repeat(band, n_phi)
    return QuadratureGrid("sphere2", nodes.reshape(-1, 3), weights)


def torus_grid(count=500):
    theta = 2.0 * math.pi * np.arange(count) / count
    a, b = np.meshgrid(theta, theta, indexing="ij")
    nodes = np.stack([np.cos(a), np.sin(a), np.cos(b), np.sin(b)], axis=-1).reshape(-1, 4)
    return QuadratureGrid("torus2", nodes, np.full(count * count, (2.0 * math.pi / count) ** 2))


def poincare_grid(n_radius=300, n_angle=600, epsilon=1e-5):
    """Polar grid on the ball of Euclidean radius ``1 - epsilon``.

    Cells are uniform in hyperbolic radius ``d`` so that the rapidly growing
    area element is resolved; each weight is the exact hyperbolic area
    ``dtheta (cosh d_hi - cosh d_lo)`` of its annular sector.
    """
    d_max = 2.0 * math.atanh(1.0 - epsilon)
    edges = np.linspace(0.0, d_max, n_radius + 1)
    d_mid = 0.5 * (edges[:-1] + edges[1:])
    r = np.tanh(0.5 * d_mid)
    ang = 2.0 * math.pi * (np.arange(n_angle) + 0.5) / n_angle
    ring = (np.cosh(edges[1:]) - np.cosh(edges[:-1])) * (2.0 * math.pi / n_angle)
    rr, aa = np.meshgrid(r, ang, indexing="ij")
    nodes = np.stack([rr * np.cos(aa), rr * np.sin(aa)], axis=-1).reshape(-1, 2)
    return QuadratureGrid("poincare2", nodes, np.repeat(ring, n_angle))


def poincare_truncated_area(epsilon=1e-5):
    """Hyperbolic area of the Euclidean ball of radius ``1 - epsilon`` in H^2."""
    r2 = (1.0 - epsilon) ** 2
    return 4.0 * math.pi * r2 / (1.0 - r2)


def so3_monte_carlo(count, rng):
    """Haar samples with equal weights ``8 pi^2 / count``."""
    man = SpecialOrthogonal3()
    return QuadratureGrid("so3", man.sample_uniform(count, rng), np.full(count, man.volume / count))


def grid_for(manifold, resolution=None, rng=None):
    """Default grid for a supported manifold; ``resolution`` scales the node count."""
    if isinstance(manifold, Sphere) and manifold.n == 1:
        return circle_grid(resolution or 10_000)
    if isinstance(manifold, Sphere) and manifold.n == 2:
        return sphere_grid(resolution or 400, 2 * (resolution or 400))
    if isinstance(manifold, Torus) and manifold.n == 2:
        return torus_grid(resolution or 500)
    if isinstance(manifold, PoincareBall) and manifold.n == 2:
        return poincare_grid(resolution or 300, 2 * (resolution or 300), manifold.epsilon)
    if isinstance(manifold, SpecialOrthogonal3):
        rng = rng if rng is not None else np.random.default_rng(0)
        return so3_monte_carlo(resolution or 100_000, rng)
    raise ValueError(f"no quadrature grid for {manifold!r}")


def normalization_integral(model, grid, direction="encoder", chunk=50_000, stderr=False):
    """``sum_i w_i exp(log p(x_i))``; with ``stderr`` also the Monte-Carlo standard error.

    Nodes where the map has a singular tangent Jacobian (for example points
    the Poincare clamp flattens onto the boundary) contribute zero density.
    """
    logp = np.concatenate([
        flow.exact_log_density(model, grid.nodes[i:i + chunk], direction, on_singular="nan")
        for i in range(0, len(grid.nodes), chunk)])
    vals = np.where(np.isnan(logp), 0.0, np.exp(logp))
    total = grid.integrate(vals)
    if not stderr:
        return total
    contrib = grid.weights * vals * len(vals)
    return total, float(np.std(contrib, ddof=1) / math.sqrt(len(vals)))


@dataclass
class TestNLL:
    mean: float
    std: float
    runs: list
    evaluated: int
    excluded: int


def test_nll(model, data, refine_sigma=0.0, refine_tries=64, runs=1, rng=None):
    """Mean decoder-direction NLL on ``data``.

    With ``refine_sigma > 0`` each point's latent is chosen by
    :func:`flow.refine_latent`; ``runs`` repeats the refinement with fresh
    candidates and reports the spread. Points with a singular decoder
    Jacobian are excluded and counted.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    data = np.asarray(data, dtype=float)
    means, excluded = [], 0
    for _ in range(runs if refine_sigma > 0 else 1):
        z = None
        if refine_sigma > 0:
            z = flow.refine_latent(model, data, refine_sigma, refine_tries, rng)
        logp = flow.exact_log_density(model, data, "decoder", z=z, on_singular="nan")
        ok = np.isfinite(logp)
        excluded = int((~ok).sum())
        means.append(float(-np.mean(logp[ok])))
    return TestNLL(float(np.mean(means)), float(np.std(means)), means,
                   int(len(data) - excluded), excluded)


test_nll.__test__ = False

MAX_W2_POINTS = 1024


def wasserstein2(a, b, manifold):
    """Exact W2 between equal-size empirical measures under geodesic distance."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if len(a) != len(b):
        raise SizeMismatch(f"sample sets differ in size: {len(a)} vs {len(b)}")
    if len(a) > MAX_W2_POINTS:
        raise SizeMismatch(f"at most {MAX_W2_POINTS} points per set, got {len(a)}")
    if len(a) == 0:
        raise SizeMismatch("empty sample sets")
    cost = manifold.geodesic_distance(a[:, None, :], b[None, :, :]) ** 2
    rows, cols = linear_sum_assignment(cost)
    return float(math.sqrt(cost[rows, cols].mean()))


# ---------------------------------------------------------------------------
# estimator statistics

def hutchinson_variance(a, draws, rng):
    """Sample variance of ``v^T A v`` for ``v ~ N(0, I)`` and the reference ``2 ||A||_F^2``.

    The reference holds for symmetric ``A``; only the symmetric part of a
    matrix enters a quadratic form, so it is used for the reference.
    """
    v = rng.standard_normal((draws, a.shape[0]))
    est = np.einsum("bi,ij,bj->b", v, a, v)
    sym = 0.5 * (a + a.T)
    return float(np.var(est, ddof=1)), 2.0 * float(np.sum(sym * sym))


def tangent_vs_ambient_variance(draws, rng):
    """Circle at ``x = (0, 1)`` with tangent ``(1, 0)`` and ``A = diag(1, 0)``.

    The tangent estimator draws ``v`` in the tangent space scaled to length
    ``sqrt(n) = 1`` and is exact. The ambient one draws ``v`` uniformly on
    the circle of radius ``sqrt(m)`` and gives ``2 cos^2(theta)``, whose
    variance is ``1/2``.
    """
    model = _identity_model(Sphere(1))
    z = np.tile([0.0, 1.0], (draws, 1))
    v = flow.sample_tangent_noise(model, z, rng)
    a = np.diag([1.0, 0.0])
    tangent = np.einsum("bi,ij,bj->b", v, a, v)
    g = rng.standard_normal((draws, 2))
    g *= math.sqrt(2.0) / np.linalg.norm(g, axis=1, keepdims=True)
    ambient = np.einsum("bi,ij,bj->b", g, a, g)
    return float(np.var(tangent)), float(np.var(ambient, ddof=1))


def _identity_model(manifold):
    spec = nnet.NetworkSpec(manifold.m, residual_blocks=1, inner_depth=1, inner_width=4, init_scale=0.0)
    rng = np.random.default_rng(0)
    return flow.FlowModel.initialize(manifold, UniformManifold(manifold), rng, spec)


def surrogate_gradient_variance(model, x, draws, average, rng):
    """Mean per-parameter variance of the surrogate gradient at a single point.

    Returns the variance for single-draw estimates and for the mean of
    ``average`` independent draws; their ratio should be close to ``average``.
    """
    xs = np.repeat(np.atleast_2d(x), draws * average, axis=0)
    _, g = flow.surrogate_nll_and_grads(model, xs, rng, per_example=True)
    single = float(np.mean(np.var(g[:draws], axis=0, ddof=1)))
    avg = g.reshape(draws, average, -1).mean(axis=1)
    return single, float(np.mean(np.var(avg, axis=0, ddof=1)))


def estimator_statistics(draws=1_000_000, seed=0, gradient_draws=2000, average=8):
    """Monte-Carlo checks of the trace estimators; returns report rows.

    Each row is ``(name, estimate, reference, relative_error)``.
    """
    rng = np.random.default_rng(seed)
    rows = []
    a = rng.standard_normal((5, 5))
    a = 0.5 * (a + a.T)
    est, ref = hutchinson_variance(a, draws, rng)
    rows.append(("hutchinson_variance", est, ref, abs(est - ref) / ref))
    tangent, ambient = tangent_vs_ambient_variance(draws, rng)
    rows.append(("tangent_estimator_variance", tangent, 0.0, abs(tangent)))
    rows.append(("ambient_estimator_variance", ambient, 0.5, abs(ambient - 0.5) / 0.5))
    man = Sphere(2)
    spec = nnet.NetworkSpec(3, residual_blocks=1, inner_depth=1, inner_width=8,
                            activation="tanh", init_scale=0.5)
    model = flow.FlowModel.initialize(man, UniformManifold(man), rng, spec)
    x = man.sample_uniform(1, rng)
    single, avg = surrogate_gradient_variance(model, x, gradient_draws, average, rng)
    rows.append(("surrogate_variance_ratio", single / avg, float(average),
                 abs(single / avg - average) / average))
    return rows


STATISTICS_HEADER = ("name", "estimate", "reference", "relative_error")
