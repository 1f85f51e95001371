"""Training loop: Adam, learning-rate schedules, augmentation and validation."""
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import flow
from .exceptions import NonFiniteGradient, NonFiniteLoss
from .flow import LossWeights


@dataclass(frozen=True)
class Schedule:
    """Learning-rate schedule.

    ``exponential`` multiplies the base rate by ``gamma`` every step.
    ``one_cycle`` warms up linearly from the base rate to ``peak_factor``
    times it over the first ``warmup_fraction`` of training, then follows a
    half cosine down to ``final_fraction`` times the base rate.
    """

    kind: str = "exponential"
    gamma: float = 1.0
    warmup_fraction: float = 0.3
    peak_factor: float = 10.0
    final_fraction: float = 1.0 / 25.0

    def validate(self):
        errors = []
        if self.kind not in ("exponential", "one_cycle"):
            errors.append(f"schedule must be 'exponential' or 'one_cycle', got {self.kind!r}")
        if not (0.0 < self.gamma <= 1.0):
            errors.append(f"gamma must lie in (0, 1], got {self.gamma}")
        if not (0.0 < self.warmup_fraction < 1.0):
            errors.append("warmup_fraction must lie in (0, 1)")
        if not (self.peak_factor > 0 and self.final_fraction > 0):
            errors.append("peak_factor and final_fraction must be positive")
        return errors


def lr_at(schedule, step, total_steps, base_lr):
    """Learning rate used at ``step`` (0-based) of ``total_steps``."""
    if schedule.kind == "exponential":
        return base_lr * schedule.gamma**step
    peak = schedule.peak_factor * base_lr
    final = schedule.final_fraction * base_lr
    warm = schedule.warmup_fraction * total_steps
    if step < warm:
        return base_lr + (peak - base_lr) * step / warm
    frac = min((step - warm) / max(total_steps - 1 - warm, 1e-12), 1.0)
    return final + 0.5 * (peak - final) * (1.0 + math.cos(math.pi * frac))


@dataclass
class TrainConfig:
    batch_size: int = 256
    step_count: int = 1000
    learning_rate: float = 1e-3
    schedule: Schedule = field(default_factory=Schedule)
    grad_clip_norm: float = 0.0
    weight_decay: float = 0.0
    data_noise_sigma: float = 0.0
    seed: int = 0
    validation_every: int = 100
    validation_size: int = 2000
    weights: LossWeights = field(default_factory=LossWeights)

    def validate(self):
        """List of every invalid field (empty when the config is usable)."""
        errors = []
        for name in ("batch_size", "validation_every", "validation_size"):
            if not (isinstance(getattr(self, name), int) and getattr(self, name) > 0):
                errors.append(f"{name} must be a positive integer")
        if not (isinstance(self.step_count, int) and self.step_count >= 0):
            errors.append("step_count must be a non-negative integer")
        for name in ("learning_rate", "grad_clip_norm", "weight_decay", "data_noise_sigma"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                errors.append(f"{name} must be finite and non-negative")
        if not self.learning_rate > 0:
            errors.append("learning_rate must be positive")
        errors.extend(self.schedule.validate())
        return errors

    def to_dict(self):
        return asdict(self)


class AdamState:
    """Adam moments for one flat parameter vector (beta1=0.9, beta2=0.999, eps=1e-8)."""

    beta1 = 0.9
    beta2 = 0.999
    eps = 1e-8

    def __init__(self, size):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.step = 0


def adam_step(state, params, grads, lr, weight_decay=0.0, clip_norm=0.0):
    """One in-place update of ``params``; returns the applied gradient norm.

    The gradient is clipped to global norm ``clip_norm`` (0 disables
    clipping), weight decay is applied to the parameters directly and Adam
    uses the clipped gradient.
    """
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("parameter, gradient and optimiser state sizes differ")
    norm = float(np.linalg.norm(grads))
    if not math.isfinite(norm):
        raise NonFiniteGradient("gradient contains non-finite values")
    if clip_norm > 0 and norm > clip_norm:
        grads = grads * (clip_norm / norm)
        norm = clip_norm
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    if weight_decay:
        params *= 1.0 - lr * weight_decay
    params -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return norm


def augment_batch(manifold, batch, sigma, rng):
    """``proj(x + sigma * N(0, I))``; ``sigma = 0`` returns the batch unchanged."""
    if sigma == 0:
        return batch
    return manifold.project(batch + sigma * rng.standard_normal(batch.shape))


def split_dataset(points, rng, fractions=(0.8, 0.1, 0.1)):
    """Seeded shuffle into train/validation/test parts."""
    order = rng.permutation(len(points))
    n_train = int(round(fractions[0] * len(points)))
    n_val = int(round(fractions[1] * len(points)))
    return (points[order[:n_train]], points[order[n_train:n_train + n_val]],
            points[order[n_train + n_val:]])


def validation_metrics(model, points):
    """Mean decoder-direction NLL, mean reconstruction error and singular count."""
    logp = flow.exact_log_density(model, points, "decoder", on_singular="nan")
    ok = np.isfinite(logp)
    recon_x, _ = flow.reconstruction_losses(model, points)
    nll = float(-np.mean(logp[ok])) if np.any(ok) else math.nan
    return nll, recon_x, int((~ok).sum())


METRIC_FIELDS = ("step", "lr", "nll_surrogate", "recon_x", "recon_z", "uniform_x", "uniform_z",
                 "proj_x", "proj_z", "total", "val_nll", "val_recon", "val_singular")


class _Batches:
    """Endless shuffled minibatches from an array, or draws from a stream."""

    def __init__(self, data, batch_size, rng):
        self.data, self.batch_size, self.rng = data, batch_size, rng
        self.stream = callable(data)
        self.order, self.pos = None, 0

    def next(self):
        if self.stream:
            return np.asarray(self.data(self.batch_size, self.rng), dtype=float)
        n = len(self.data)
        out = []
        need = min(self.batch_size, n)
        while need:
            if self.order is None or self.pos >= n:
                self.order, self.pos = self.rng.permutation(n), 0
            take = self.order[self.pos:self.pos + need]
            self.pos += len(take)
            need -= len(take)
            out.append(take)
        return self.data[np.concatenate(out)]


@dataclass
class TrainResult:
    model: flow.FlowModel
    metrics: list
    best_step: int
    final_model: flow.FlowModel

    def __iter__(self):
        return iter((self.model, self.metrics))


def train(model, data, config, validation=None, on_checkpoint=None, progress=None):
    """Optimise ``model`` and return the best model by validation NLL.

    ``data`` is an ``(N, m)`` array or a stream ``data(count, rng)``. When no
    ``validation`` set is given an array is split 80/10/10 by a seeded
    shuffle (the test tenth is ignored here); a stream supplies a fresh
    validation draw. Metrics are recorded at step 0 and every
    ``validation_every`` steps. ``on_checkpoint(model, step)`` is called
    whenever validation NLL improves. A non-finite loss or gradient raises
    :class:`NonFiniteLoss` carrying ``best_model`` and ``metrics``.
    The result unpacks as ``(model, metrics)``.
    """
    errors = config.validate()
    if errors:
        raise ValueError("; ".join(errors))
    man = model.manifold
    seeds = np.random.SeedSequence(config.seed).spawn(4)
    split_rng, batch_rng, noise_rng, aug_rng = (np.random.default_rng(s) for s in seeds)
    if validation is None:
        if callable(data):
            validation = np.asarray(data(config.validation_size, split_rng), dtype=float)
        else:
            data, validation, _ = split_dataset(np.asarray(data, dtype=float), split_rng)
    else:
        data = data if callable(data) else np.asarray(data, dtype=float)
    validation = np.asarray(validation, dtype=float)[: config.validation_size]
    if not callable(data):
        man.check_on_manifold(data)
    man.check_on_manifold(validation)

    model = model.copy()
    weights = config.weights
    train_decoder = weights.trains_decoder
    enc_n = model.encoder.size
    flat = np.concatenate([model.encoder.flat, model.decoder.flat]) if train_decoder \
        else model.encoder.flat.copy()
    state = AdamState(flat.size)
    batches = _Batches(data, config.batch_size, batch_rng)
    metrics = []
    running = {}

    def record(step, lr):
        val_nll, val_recon, singular = validation_metrics(model, validation)
        row = {"step": step, "lr": lr}
        for key in METRIC_FIELDS[2:10]:
            row[key] = running[key] / running["count"] if running else math.nan
        row.update(val_nll=val_nll, val_recon=val_recon, val_singular=singular)
        metrics.append(row)
        running.clear()
        return val_nll

    best_nll = record(0, lr_at(config.schedule, 0, max(config.step_count, 1), config.learning_rate))
    best_model, best_step = model.copy(), 0
    if on_checkpoint:
        on_checkpoint(best_model, 0)

    for step in range(config.step_count):
        lr = lr_at(config.schedule, step, config.step_count, config.learning_rate)
        batch = augment_batch(man, batches.next(), config.data_noise_sigma, aug_rng)
        report, ge, gd = flow.total_loss_and_grads(model, batch, weights, noise_rng)
        grads = np.concatenate([ge, gd]) if train_decoder else ge
        if not math.isfinite(report.total):
            raise _non_finite(f"non-finite loss at step {step}", best_model, metrics)
        try:
            adam_step(state, flat, grads, lr, config.weight_decay, config.grad_clip_norm)
        except NonFiniteGradient as exc:
            raise _non_finite(f"{exc} at step {step}", best_model, metrics) from exc
        model.encoder.flat[:] = flat[:enc_n]
        if train_decoder:
            model.decoder.flat[:] = flat[enc_n:]
        for key, value in report.to_dict().items():
            running[key] = running.get(key, 0.0) + value
        running["count"] = running.get("count", 0) + 1
        done = step + 1
        if done % config.validation_every == 0 or done == config.step_count:
            val_nll = record(done, lr)
            if progress:
                progress(metrics[-1])
            if val_nll < best_nll or not math.isfinite(best_nll):
                best_nll, best_model, best_step = val_nll, model.copy(), done
                if on_checkpoint:
                    on_checkpoint(best_model, done)
    return TrainResult(best_model, metrics, best_step, model)


def _non_finite(message, best_model, metrics):
    exc = NonFiniteLoss(message)
    exc.best_model = best_model
    exc.metrics = metrics
    return exc


def metrics_rows(metrics):
    return [[row[k] for k in METRIC_FIELDS] for row in metrics]
