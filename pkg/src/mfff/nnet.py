"""Residual MLPs with hand-written forward and reverse differentiation.

The engine evaluates a network together with a tangent (forward-mode) channel
and can run reverse mode over that dual trace. This yields parameter gradients
of scalars such as ``u . J(x) w``, which the likelihood surrogate needs.

Inputs are batched as ``(B, m)``; a single vector of shape ``(m,)`` is
treated as a batch of one. Parameter gradients are summed over the batch
unless ``per_example=True``.
"""
from dataclasses import asdict, dataclass

import numpy as np

from .exceptions import DimensionMismatch


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _relu(a):
    return np.maximum(a, 0.0)


def _relu_d1(a):
    return (a > 0.0).astype(float)


def _relu_d2(a):
    return np.zeros_like(a)


def _silu(a):
    return a * _sigmoid(a)


def _silu_d1(a):
    s = _sigmoid(a)
    return s * (1.0 + a * (1.0 - s))


def _silu_d2(a):
    s = _sigmoid(a)
    return s * (1.0 - s) * (2.0 + a * (1.0 - 2.0 * s))


def _tanh_d1(a):
    return 1.0 - np.tanh(a) ** 2


def _tanh_d2(a):
    t = np.tanh(a)
    return -2.0 * t * (1.0 - t * t)


# name -> (value, first derivative, second derivative)
ACTIVATIONS = {
    "relu": (_relu, _relu_d1, _relu_d2),
    "silu": (_silu, _silu_d1, _silu_d2),
    "sin": (np.sin, np.cos, lambda a: -np.sin(a)),
    "tanh": (np.tanh, _tanh_d1, _tanh_d2),
}


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture of a residual MLP mapping ``R^dim -> R^dim``.

    Each block is ``h -> h + L_k(act(... act(L_1(h))))`` with
    ``inner_depth`` hidden layers of width ``inner_width``. ``inner_depth=0``
    makes every block a single affine layer. With ``residual=False`` the
    skip connection is dropped.
    """

    dim: int
    residual_blocks: int = 2
    inner_depth: int = 2
    inner_width: int = 64
    activation: str = "silu"
    init_scale: float = 1e-2
    residual: bool = True

    def __post_init__(self):
        if self.dim < 1 or self.residual_blocks < 1 or self.inner_width < 1:
            raise ValueError("network dimensions must be positive")
        if self.inner_depth < 0:
            raise ValueError("inner_depth must be non-negative")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def block_shapes(self):
        """Per block, the ``(out, in)`` shape of each linear layer."""
        if self.inner_depth == 0:
            sizes = [self.dim, self.dim]
        else:
            sizes = [self.dim] + [self.inner_width] * self.inner_depth + [self.dim]
        layer = [(sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)]
        return [layer for _ in range(self.residual_blocks)]

    @property
    def n_params(self):
        return sum(o * i + o for block in self.block_shapes() for o, i in block)

    def to_dict(self):
        return asdict(self)


class NetworkParams:
    """Parameters of a residual MLP stored in one contiguous flat vector.

    ``layers[k][j]`` is the ``(W, b)`` pair of layer ``j`` in block ``k``;
    both are views into ``flat``, so optimiser updates of ``flat`` are seen
    by the network immediately.
    """

    def __init__(self, spec, flat=None):
        self.spec = spec
        if flat is None:
            flat = np.zeros(spec.n_params)
        flat = np.ascontiguousarray(flat, dtype=float)
        if flat.shape != (spec.n_params,):
            raise DimensionMismatch(f"expected {spec.n_params} parameters, got {flat.shape}")
        self.flat = flat
        self.layers = _views(spec, flat)

    @property
    def size(self):
        return self.flat.size

    def copy(self):
        return NetworkParams(self.spec, self.flat.copy())

    def __repr__(self):
        return f"NetworkParams({self.spec}, size={self.size})"


def _views(spec, flat):
    out, offset = [], 0
    for block in spec.block_shapes():
        layers = []
        for o, i in block:
            w = flat[offset: offset + o * i].reshape(o, i)
            offset += o * i
            b = flat[offset: offset + o]
            offset += o
            layers.append((w, b))
        out.append(layers)
    return out


def init_near_identity(spec, rng):
    """Random initialisation whose blocks start close to zero.

    Hidden layers use ``N(0, 1/fan_in)`` weights; the last layer of each block
    is scaled by ``spec.init_scale`` so the residual network starts within
    ``O(init_scale)`` of the identity (exactly the identity for ``0``).
    """
    params = NetworkParams(spec)
    for block in params.layers:
        for j, (w, b) in enumerate(block):
            w[...] = rng.standard_normal(w.shape) / np.sqrt(w.shape[1])
            b[...] = 0.0
            if j == len(block) - 1:
                w *= spec.init_scale
    return params


class _Trace:
    __slots__ = ("records", "batched", "has_tangent")

    def __init__(self, batched, has_tangent):
        self.records = []
        self.batched = batched
        self.has_tangent = has_tangent


def _as_batch(x, dim):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != dim:
        raise DimensionMismatch(f"expected inputs of size {dim}, got shape {x.shape}")
    if x.ndim == 1:
        return x[None, :], False
    if x.ndim != 2:
        raise DimensionMismatch(f"expected a vector or a (B, {dim}) batch, got {x.shape}")
    return x, True


def run(params, x, w=None):
    """Forward pass with an optional tangent channel.

    Returns ``(y, y_dot, trace)`` where ``y_dot = J(x) w`` (or ``None``).
    """
    spec = params.spec
    act, d1, _ = ACTIVATIONS[spec.activation]
    h, batched = _as_batch(x, spec.dim)
    hd = None
    if w is not None:
        hd, _ = _as_batch(w, spec.dim)
        hd = np.broadcast_to(hd, h.shape)
    trace = _Trace(batched, hd is not None)
    for block in params.layers:
        u, ud = h, hd
        recs = []
        last = len(block) - 1
        for j, (wm, b) in enumerate(block):
            pre = u @ wm.T + b
            pred = None if ud is None else ud @ wm.T
            recs.append((u, ud, pre, pred))
            if j < last:
                u = act(pre)
                ud = None if pred is None else d1(pre) * pred
            else:
                u, ud = pre, pred
        if spec.residual:
            h = h + u
            hd = None if hd is None else hd + ud
        else:
            h, hd = u, ud
        trace.records.append(recs)
    return h, hd, trace


def backward(params, trace, y_bar, ydot_bar=None, per_example=False):
    """Reverse pass over a trace from :func:`run`.

    ``y_bar`` and ``ydot_bar`` are adjoints of the primal and tangent outputs.
    Returns ``(x_bar, w_bar, param_grads)``; ``w_bar`` is ``None`` without a
    tangent channel. ``param_grads`` has shape ``(P,)`` or ``(B, P)``.
    """
    spec = params.spec
    _, d1, d2 = ACTIVATIONS[spec.activation]
    hb, _ = _as_batch(y_bar, spec.dim)
    if ydot_bar is not None and not trace.has_tangent:
        raise ValueError("tangent adjoint given but the trace has no tangent channel")
    hdb = None
    if trace.has_tangent:
        hdb = np.zeros_like(hb) if ydot_bar is None else _as_batch(ydot_bar, spec.dim)[0]
    batch = trace.records[0][0][0].shape[0]
    hb = np.broadcast_to(hb, (batch, spec.dim))
    if hdb is not None:
        hdb = np.broadcast_to(hdb, (batch, spec.dim))
    lead = (batch,) if per_example else ()
    gviews = [[(np.zeros(lead + wm.shape), np.zeros(lead + b.shape)) for wm, b in block]
              for block in params.layers]

    for k in range(len(params.layers) - 1, -1, -1):
        block = params.layers[k]
        recs = trace.records[k]
        ub, udb = hb, hdb
        last = len(block) - 1
        for j in range(last, -1, -1):
            u_in, ud_in, pre, pred = recs[j]
            if j < last:
                g1 = d1(pre)
                if udb is None:
                    preb, predb = ub * g1, None
                else:
                    preb = ub * g1 + udb * d2(pre) * pred
                    predb = udb * g1
            else:
                preb, predb = ub, udb
            wm, _ = block[j]
            gw, gb = gviews[k][j]
            if per_example:
                gw += np.einsum("bi,bj->bij", preb, u_in)
                gb += preb
                if predb is not None:
                    gw += np.einsum("bi,bj->bij", predb, ud_in)
            else:
                gw += preb.T @ u_in
                gb += preb.sum(axis=0)
                if predb is not None:
                    gw += predb.T @ ud_in
            ub = preb @ wm
            udb = None if predb is None else predb @ wm
        if spec.residual:
            hb = hb + ub
            hdb = None if hdb is None else hdb + udb
        else:
            hb, hdb = ub, udb

    pieces = []
    for block in gviews:
        for gw, gb in block:
            pieces.append(gw.reshape(lead + (-1,)))
            pieces.append(gb)
    grads = np.concatenate(pieces, axis=-1)
    if not trace.batched:
        hb = hb[0]
        hdb = None if hdb is None else hdb[0]
        if per_example:
            grads = grads[0]
    return np.array(hb), (None if hdb is None else np.array(hdb)), grads


def forward(params, x):
    y, _, trace = run(params, x)
    return y if trace.batched else y[0]


def jvp(params, x, w):
    """Return ``(y, J(x) w)``."""
    y, yd, trace = run(params, x, w)
    if not trace.batched:
        return y[0], yd[0]
    return y, yd


def vjp(params, x, u):
    """Return ``(J(x)^T u, d(u . f(x))/d theta)``."""
    _, _, trace = run(params, x)
    xb, _, g = backward(params, trace, u)
    return xb, g


def grad_of_jvp(params, x, w, u, per_example=False):
    """Parameter gradient of ``u . J(x) w`` with ``w`` held constant."""
    y, _, trace = run(params, x, w)
    _, _, g = backward(params, trace, np.zeros_like(y), u, per_example=per_example)
    return g


def jacobian(params, x):
    """Full Jacobian ``(..., m, m)`` assembled from ``m`` forward-mode passes."""
    m = params.spec.dim
    xb, batched = _as_batch(x, m)
    reps = np.repeat(xb, m, axis=0)
    tang = np.tile(np.eye(m), (xb.shape[0], 1))
    _, yd, _ = run(params, reps, tang)
    jac = np.swapaxes(yd.reshape(xb.shape[0], m, m), -1, -2)
    return jac if batched else jac[0]
