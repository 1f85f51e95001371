"""Projected encoder/decoder pairs, their training losses and exact densities.

A model holds two residual networks acting on embedding coordinates. The
encoder ``f = proj o f_net`` maps data to latent points and the decoder
``g = proj o g_net`` maps back. Maximum likelihood training only needs a
gradient of the tangent log-determinant of ``f``; it is estimated with one
tangent noise vector ``v`` per item as the gradient of

    -log p_Z(z) - v . J_f(x) SG[J_g(z) v],

where ``SG`` stops gradients. Density evaluation uses full tangent Jacobians.
"""
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import nnet
from .exceptions import SingularJacobian, ZeroTangent

SINGULAR_TOL = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """Coefficients of the regularisers added to the likelihood surrogate."""

    beta_r_x: float = 0.0
    beta_r_z: float = 0.0
    beta_u_x: float = 0.0
    beta_u_z: float = 0.0
    beta_p_x: float = 0.0
    beta_p_z: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not (math.isfinite(value) and value >= 0.0):
                raise ValueError(f"{f.name} must be finite and non-negative, got {value}")

    @property
    def trains_decoder(self):
        """Whether any term sends gradient to the decoder."""
        return any(w > 0 for w in (self.beta_r_x, self.beta_r_z, self.beta_u_x,
                                   self.beta_u_z, self.beta_p_z))

    def to_dict(self):
        return asdict(self)


@dataclass
class LossReport:
    nll_surrogate: float = 0.0
    recon_x: float = 0.0
    recon_z: float = 0.0
    uniform_x: float = 0.0
    uniform_z: float = 0.0
    proj_x: float = 0.0
    proj_z: float = 0.0
    total: float = 0.0

    def to_dict(self):
        return asdict(self)


class FlowModel:
    """Encoder and decoder networks on a manifold plus a latent distribution."""

    def __init__(self, manifold, encoder, decoder, latent):
        m = manifold.m
        if encoder.spec.dim != m or decoder.spec.dim != m:
            raise ValueError(f"network dimensions must equal the embedding dimension {m}")
        if latent.manifold != manifold:
            raise ValueError("latent distribution lives on a different manifold")
        self.manifold = manifold
        self.encoder = encoder
        self.decoder = decoder
        self.latent = latent

    @classmethod
    def initialize(cls, manifold, latent, rng, spec=None, decoder_spec=None):
        """Near-identity encoder and decoder with the given architecture."""
        spec = spec or nnet.NetworkSpec(dim=manifold.m)
        decoder_spec = decoder_spec or spec
        return cls(manifold, nnet.init_near_identity(spec, rng),
                   nnet.init_near_identity(decoder_spec, rng), latent)

    def copy(self):
        return FlowModel(self.manifold, self.encoder.copy(), self.decoder.copy(), self.latent)

    def __repr__(self):
        return (f"FlowModel({self.manifold!r}, encoder={self.encoder.size} params, "
                f"decoder={self.decoder.size} params, latent={self.latent!r})")


# ---------------------------------------------------------------------------
# projected networks

class _Stage:
    """One evaluation of ``proj o net`` that remembers what backward needs."""

    def __init__(self, manifold, params, x, w=None):
        self.manifold = manifold
        self.params = params
        self.raw, self.rawdot, self.trace = nnet.run(params, x, w)
        self.out = manifold.project(self.raw)
        self.outdot = None if w is None else manifold.project_jvp(self.raw, self.rawdot)

    def backward(self, out_bar=None, raw_bar=None, rawdot_bar=None, per_example=False):
        """Adjoints on the projected output and/or the raw output; returns ``(x_bar, grads)``."""
        total = np.zeros_like(self.raw)
        if out_bar is not None:
            total += self.manifold.project_vjp(self.raw, out_bar)
        if raw_bar is not None:
            total += raw_bar
        x_bar, _, grads = nnet.backward(self.params, self.trace, total, rawdot_bar,
                                        per_example=per_example)
        return x_bar, grads


def _batch(x, m):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :], False
    if x.ndim != 2 or x.shape[1] != m:
        raise ValueError(f"expected a (B, {m}) batch, got shape {x.shape}")
    return x, True


def encode(model, x):
    """Return ``(z, raw)`` with ``raw = f_net(x)`` and ``z = proj(raw)``."""
    raw = nnet.forward(model.encoder, x)
    return model.manifold.project(raw), raw


def decode(model, z):
    """Return ``(x, raw)`` with ``raw = g_net(z)`` and ``x = proj(raw)``."""
    raw = nnet.forward(model.decoder, z)
    return model.manifold.project(raw), raw


def _chain_jacobian(manifold, params, x):
    """Output and full Jacobian ``(B, m, m)`` of ``proj o net`` at a batch."""
    m = manifold.m
    b = x.shape[0]
    reps = np.repeat(x, m, axis=0)
    tang = np.tile(np.eye(m), (b, 1))
    raw, rawdot, _ = nnet.run(params, reps, tang)
    cols = manifold.project_jvp(raw, rawdot)
    out = manifold.project(raw[::m])
    return out, np.swapaxes(cols.reshape(b, m, m), -1, -2)


def _grad_of_chain_jvp(manifold, params, x, w, u, per_example=False):
    """Parameter gradient of ``u . J(x) w`` for ``J`` the Jacobian of ``proj o net``."""
    raw, rawdot, trace = nnet.run(params, x, w)
    y_bar = manifold.project_hvp(raw, rawdot, u)
    ydot_bar = manifold.project_vjp(raw, u)
    _, _, grads = nnet.backward(params, trace, y_bar, ydot_bar, per_example=per_example)
    return grads


# ---------------------------------------------------------------------------
# likelihood surrogate

def sample_tangent_noise(model, z, rng, rescale=True):
    """Tangent noise ``v = proj'(z) v_tilde`` with ``v_tilde ~ N(0, I_m)``.

    With ``rescale`` every row is scaled to length ``sqrt(n)``, which keeps
    ``E[v v^T]`` equal to the tangent projector while removing the variance
    of the norm. Rows whose projected noise is numerically zero are redrawn
    once before :class:`ZeroTangent` is raised.
    """
    man = model.manifold
    z, batched = _batch(z, man.m)
    v = man.project_jvp(z, rng.standard_normal(z.shape))
    norm = np.linalg.norm(v, axis=1)
    bad = norm < 1e-12
    if np.any(bad):
        v[bad] = man.project_jvp(z[bad], rng.standard_normal((int(bad.sum()), man.m)))
        norm[bad] = np.linalg.norm(v[bad], axis=1)
        if np.any(norm < 1e-12):
            raise ZeroTangent("projected noise vanished twice in a row")
    if rescale:
        v = v * (math.sqrt(man.n) / norm)[:, None]
    return v if batched else v[0]


def _surrogate(model, x, rng, decoder_jvp=None):
    """Shared work of the surrogate: returns stages, value and encoder adjoints."""
    man = model.manifold
    enc0 = _Stage(man, model.encoder, x)
    z = enc0.out
    v = sample_tangent_noise(model, z, rng)
    dec = _Stage(man, model.decoder, z, v)
    w = dec.outdot if decoder_jvp is None else decoder_jvp(x, z, v)
    enc = _Stage(man, model.encoder, x, w)
    b = x.shape[0]
    # the metric term turns the latent density into one per ambient volume
    nll = -model.latent._log_prob(z) - man.half_log_metric_det(z) + man.half_log_metric_det(x)
    g_lat = model.latent._grad(z) + man.grad_half_log_metric_det(z)
    # d/dtheta of -log p(z) - log vol(z) - v . proj'(r) rdot with v and w held fixed
    raw_bar = (-man.project_vjp(enc.raw, g_lat) - man.project_hvp(enc.raw, enc.rawdot, v)) / b
    rawdot_bar = -man.project_vjp(enc.raw, v) / b
    return enc, dec, nll, raw_bar, rawdot_bar


def surrogate_nll_and_grads(model, x, rng, decoder_jvp=None, per_example=False):
    """Likelihood surrogate value and encoder gradient for a batch.

    The returned value is the batch mean of ``-log p_Z(f(x))`` plus the
    metric correction for non-isometric embeddings. The
    volume-change term of the surrogate is zero in value and only carries
    gradient. ``decoder_jvp(x, z, v)`` can replace the decoder's
    Jacobian-vector product, e.g. by an exact inverse Jacobian.
    """
    x, _ = _batch(x, model.manifold.m)
    enc, _, nll, raw_bar, rawdot_bar = _surrogate(model, x, rng, decoder_jvp)
    if per_example:
        raw_bar, rawdot_bar = raw_bar * x.shape[0], rawdot_bar * x.shape[0]
    _, grads = enc.backward(raw_bar=raw_bar, rawdot_bar=rawdot_bar, per_example=per_example)
    return float(np.mean(nll)), grads


# ---------------------------------------------------------------------------
# regularisers

def _projection_residual_bar(manifold, raw, out, scale):
    """Gradient of ``scale * ||raw - proj(raw)||^2`` with respect to ``raw``."""
    e = raw - out
    return 2.0 * scale * (e - manifold.project_vjp(raw, e))


def _mean_sq(a, b):
    return float(np.mean(np.sum((a - b) ** 2, axis=-1)))


def reconstruction_losses(model, x):
    """``(mean ||x - g(f(x))||^2, mean ||f(x) - f(g(f(x)))||^2)``."""
    x, _ = _batch(x, model.manifold.m)
    z, _ = encode(model, x)
    xh, _ = decode(model, z)
    z2, _ = encode(model, xh)
    return _mean_sq(x, xh), _mean_sq(z, z2)


def _round_trip(manifold, first, second, pts, scale):
    """Value and gradients of ``scale * mean ||pts - second(first(pts))||^2``."""
    b = pts.shape[0]
    s1 = _Stage(manifold, first, pts)
    s2 = _Stage(manifold, second, s1.out)
    value = _mean_sq(pts, s2.out)
    if scale == 0.0:
        return value, None, None
    mid_bar, g2 = s2.backward(out_bar=2.0 * scale * (s2.out - pts) / b)
    _, g1 = s1.backward(out_bar=mid_bar)
    return value, g1, g2


def uniform_recon_losses(model, rng, count, weights=None):
    """Round-trip errors on uniform points, encoder-first and decoder-first."""
    return tuple(v for v, _, _ in _uniform_terms(model, rng, count, weights or LossWeights()))


def _uniform_terms(model, rng, count, weights):
    man = model.manifold
    xu = man.sample_uniform(count, rng)
    zu = man.sample_uniform(count, rng)
    vx, ge, gd = _round_trip(man, model.encoder, model.decoder, xu, weights.beta_u_x)
    vz, gd2, ge2 = _round_trip(man, model.decoder, model.encoder, zu, weights.beta_u_z)
    return (vx, ge, gd), (vz, ge2, gd2)


def projection_losses(model, x):
    """``(mean ||f_net(x) - f(x)||^2, mean ||g_net(z) - g(z)||^2)`` with ``z = f(x)``."""
    x, _ = _batch(x, model.manifold.m)
    z, raw_e = encode(model, x)
    xh, raw_d = decode(model, z)
    return _mean_sq(raw_e, z), _mean_sq(raw_d, xh)


def _add(acc, g):
    if g is not None:
        acc += g


def total_loss_and_grads(model, x, weights, rng, uniform_count=None):
    """Full training objective on a batch.

    Returns ``(report, encoder_grads, decoder_grads)``. The decoder only
    receives gradient from reconstruction, uniform and projection terms.
    """
    man = model.manifold
    x, _ = _batch(x, man.m)
    b = x.shape[0]
    enc, dec, nll, raw_bar, rawdot_bar = _surrogate(model, x, rng)
    z, xh = enc.out, dec.out
    ge = np.zeros(model.encoder.size)
    gd = np.zeros(model.decoder.size)
    report = LossReport(nll_surrogate=float(np.mean(nll)))
    report.recon_x = _mean_sq(x, xh)
    report.proj_x = _mean_sq(enc.raw, z)
    report.proj_z = _mean_sq(dec.raw, xh)

    z_bar = np.zeros_like(z)
    xh_bar = 2.0 * weights.beta_r_x * (xh - x) / b
    enc2 = _Stage(man, model.encoder, xh)
    report.recon_z = _mean_sq(z, enc2.out)
    if weights.beta_r_z > 0:
        diff = 2.0 * weights.beta_r_z * (enc2.out - z) / b
        xin_bar, g = enc2.backward(out_bar=diff)
        ge += g
        xh_bar += xin_bar
        z_bar -= diff
    dec_raw_bar = None
    if weights.beta_p_z > 0:
        dec_raw_bar = _projection_residual_bar(man, dec.raw, xh, weights.beta_p_z / b)
    if weights.trains_decoder:
        zin_bar, g = dec.backward(out_bar=xh_bar, raw_bar=dec_raw_bar)
        gd += g
        z_bar += zin_bar
    if weights.beta_p_x > 0:
        raw_bar = raw_bar + _projection_residual_bar(man, enc.raw, z, weights.beta_p_x / b)
    raw_bar = raw_bar + man.project_vjp(enc.raw, z_bar)
    _, g = enc.backward(raw_bar=raw_bar, rawdot_bar=rawdot_bar)
    ge += g

    count = b if uniform_count is None else uniform_count
    if weights.beta_u_x > 0 or weights.beta_u_z > 0:
        (vx, ge1, gd1), (vz, ge2, gd2) = _uniform_terms(model, rng, count, weights)
        report.uniform_x, report.uniform_z = vx, vz
        for acc, g in ((ge, ge1), (gd, gd1), (ge, ge2), (gd, gd2)):
            _add(acc, g)
    report.total = (report.nll_surrogate
                    + weights.beta_r_x * report.recon_x + weights.beta_r_z * report.recon_z
                    + weights.beta_u_x * report.uniform_x + weights.beta_u_z * report.uniform_z
                    + weights.beta_p_x * report.proj_x + weights.beta_p_z * report.proj_z)
    return report, ge, gd


# ---------------------------------------------------------------------------
# exact densities

def _tangent_logdet(a, on_singular):
    _, logdet = np.linalg.slogdet(a)
    singular = ~(logdet > math.log(SINGULAR_TOL))
    if np.any(singular):
        if on_singular == "raise":
            raise SingularJacobian(f"{int(singular.sum())} tangent Jacobian(s) with |det| <= {SINGULAR_TOL:g}")
        logdet = np.where(singular, np.nan, logdet)
    return logdet


def exact_log_density(model, x, direction="decoder", z=None, on_singular="raise"):
    """Log-density of the model at ``x`` with respect to Riemannian volume.

    ``direction="encoder"`` applies the change of variables through ``f``:
    ``log p_Z(f(x)) + log|det R^T J_f Q|`` with ``Q`` a tangent basis at
    ``x`` and ``R`` one at ``f(x)``. ``direction="decoder"`` uses the
    decoder as the inverse map: ``log p_Z(z) - log|det Q^T J_g R|`` with
    frames at ``z`` and ``g(z)``, where ``z`` defaults to ``f(x)`` and may
    be supplied (e.g. by :func:`refine_latent`). Both add the metric
    correction for non-isometric embeddings. Points whose tangent Jacobian
    is singular raise :class:`SingularJacobian`, or become ``nan`` with
    ``on_singular="nan"``.
    """
    man = model.manifold
    x = man.check_on_manifold(x)
    x, batched = _batch(x, man.m)
    if direction == "encoder":
        z, jac = _chain_jacobian(man, model.encoder, x)
        q = man.tangent_basis(x)
        r = man.tangent_basis(z)
        logdet = _tangent_logdet(np.swapaxes(r, -1, -2) @ jac @ q, on_singular)
        out = (model.latent._log_prob(z) + logdet
               + man.half_log_metric_det(z) - man.half_log_metric_det(x))
    elif direction == "decoder":
        if z is None:
            z, _ = encode(model, x)
        else:
            z, _ = _batch(man.check_on_manifold(z), man.m)
        xh, jac = _chain_jacobian(man, model.decoder, z)
        q = man.tangent_basis(xh)
        r = man.tangent_basis(z)
        logdet = _tangent_logdet(np.swapaxes(q, -1, -2) @ jac @ r, on_singular)
        out = (model.latent._log_prob(z) - logdet
               + man.half_log_metric_det(z) - man.half_log_metric_det(xh))
    else:
        raise ValueError(f"direction must be 'encoder' or 'decoder', got {direction!r}")
    return out if batched else out[0]


def refine_latent(model, x, sigma=1e-2, tries=64, rng=None):
    """Latent points that reconstruct ``x`` at least as well as ``f(x)``.

    Candidates are ``f(x)`` itself, ``tries`` perturbations
    ``proj(f(x) + sigma N)``, ``tries`` perturbations ``proj(x + sigma N)``
    and ``tries`` uniform points; the one with smallest ``||g(z) - x||^2``
    wins, with ties going to ``f(x)``. ``sigma = 0`` disables refinement.
    """
    if tries < 1:
        raise ValueError("tries must be at least 1")
    man = model.manifold
    x, batched = _batch(x, man.m)
    z0, _ = encode(model, x)
    if sigma == 0:
        return z0 if batched else z0[0]
    rng = rng if rng is not None else np.random.default_rng()
    b, m = x.shape
    near_z = man.project(z0[:, None, :] + sigma * rng.standard_normal((b, tries, m)))
    near_x = man.project(x[:, None, :] + sigma * rng.standard_normal((b, tries, m)))
    unif = man.sample_uniform(b * tries, rng).reshape(b, tries, m)
    cand = np.concatenate([z0[:, None, :], near_z, near_x, unif], axis=1)
    xh, _ = decode(model, cand.reshape(-1, m))
    err = np.sum((xh.reshape(cand.shape) - x[:, None, :]) ** 2, axis=-1)
    best = cand[np.arange(b), np.argmin(err, axis=1)]
    return best if batched else best[0]


def sample(model, count, rng):
    """Draw ``count`` points by decoding latent samples."""
    z = model.latent.sample(count, rng)
    return decode(model, z)[0]


# ---------------------------------------------------------------------------
# gradient error bound

def estimator_error_bound(model, x, per_parameter=False):
    """Compare the decoder-based trace gradient with the exact log-det gradient.

    For each point and encoder parameter ``p`` this evaluates

        lhs_p = |tr(R^T dJ_f J_g R) - d log|det R^T J_f Q||
        rhs_p = ||R^T dJ_f J_finv R||_F * ||R^T J_f J_g R - I||_F

    with ``J_finv = Q (R^T J_f Q)^{-1} R^T``. ``J_f`` is taken as the
    encoder Jacobian restricted to the tangent space at ``x`` (equivalently,
    the encoder is preceded by a projection), for which ``lhs_p <= rhs_p``
    holds exactly. Returns per-point ``(max_p lhs_p, max_p rhs_p)`` or the
    full ``(B, P)`` arrays with ``per_parameter=True``.
    """
    man = model.manifold
    x = man.check_on_manifold(x)
    x, batched = _batch(x, man.m)
    b, m, n = x.shape[0], man.m, man.n
    z, jf = _chain_jacobian(man, model.encoder, x)
    _, jg = _chain_jacobian(man, model.decoder, z)
    q = man.tangent_basis(x)
    r = man.tangent_basis(z)
    pix = q @ np.swapaxes(q, -1, -2)
    rt = np.swapaxes(r, -1, -2)
    jf = jf @ pix
    a = rt @ jf @ q
    if np.any(np.abs(np.linalg.det(a)) <= SINGULAR_TOL):
        raise SingularJacobian("encoder tangent Jacobian is singular")
    a_inv = np.linalg.inv(a)
    jfinv_r = q @ a_inv                       # J_finv R, shape (B, m, n)
    # lhs: parameter gradient of tr(M J_f) with M = Pi_x J_g R R^T - J_finv, M fixed
    mmat = pix @ jg @ r @ rt - jfinv_r @ rt
    # tr(M J) = sum_k M[k, :] . J e_k
    w = np.tile(np.eye(m), (b, 1))
    u = mmat.reshape(b * m, m)
    xs = np.repeat(x, m, axis=0)
    g = _grad_of_chain_jvp(man, model.encoder, xs, w, u, per_example=True)
    lhs = np.abs(g.reshape(b, m, -1).sum(axis=1))
    # rhs: entries (i, j) of R^T dJ J_finv R, then Frobenius norm over (i, j)
    xs = np.repeat(x, n * n, axis=0)
    u = np.repeat(r.transpose(0, 2, 1), n, axis=1).reshape(b * n * n, m)
    w = np.tile(jfinv_r.transpose(0, 2, 1), (1, n, 1)).reshape(b * n * n, m)
    g = _grad_of_chain_jvp(man, model.encoder, xs, w, u, per_example=True)
    dnorm = np.sqrt(np.sum(g.reshape(b, n * n, -1) ** 2, axis=1))
    resid = np.linalg.norm(rt @ jf @ jg @ r - np.eye(n), axis=(-2, -1))
    rhs = dnorm * resid[:, None]
    if not per_parameter:
        lhs, rhs = lhs.max(axis=1), rhs.max(axis=1)
    if not batched:
        lhs, rhs = lhs[0], rhs[0]
    return lhs, rhs

