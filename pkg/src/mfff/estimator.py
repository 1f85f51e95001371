"""scikit-learn style estimator around :mod:`mfff.flow` and :mod:`mfff.trainer`."""
import numpy as np
from sklearn.base import BaseEstimator, DensityMixin
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_array, check_is_fitted

from . import distributions, flow, geometry, nnet, trainer


class ManifoldFreeFormFlow(DensityMixin, BaseEstimator):
    """Density estimator on an embedded manifold.

    Rows of ``X`` are points in embedding coordinates (for example unit
    vectors on the sphere or flattened rotation matrices for ``so3``).
    After ``fit``, ``score_samples`` returns log-densities with respect to
    Riemannian volume, ``sample`` draws new points, and ``transform`` /
    ``inverse_transform`` apply the encoder and decoder.

    Parameters
    ----------
    manifold : {"sphere", "torus", "so3", "poincare"}
    n : int
        Intrinsic dimension (ignored for ``so3``).
    latent : {"uniform", "vmf_mixture", "wrapped_normal"}
        Latent distribution; a vMF mixture is fitted to the training data
        with ``latent_components`` components.
    beta_r_x, beta_r_z, beta_u_x, beta_u_z, beta_p_x, beta_p_z : float
        Regulariser weights; see :class:`mfff.flow.LossWeights`.
    validation_fraction : float
        Share of ``X`` held out to select the best training step.
    """

    def __init__(self, manifold="sphere", n=2, latent="uniform", latent_sigma=1.0,
                 latent_components=1, residual_blocks=2, inner_depth=2, inner_width=64,
                 activation="silu", init_scale=1e-2, batch_size=256, step_count=1000,
                 learning_rate=1e-3, schedule="exponential", gamma=1.0, grad_clip_norm=0.0,
                 weight_decay=0.0, data_noise_sigma=0.0, beta_r_x=10.0, beta_r_z=0.0,
                 beta_u_x=0.0, beta_u_z=10.0, beta_p_x=0.0, beta_p_z=0.0,
                 validation_fraction=0.1, validation_every=100, random_state=None):
        self.manifold = manifold
        self.n = n
        self.latent = latent
        self.latent_sigma = latent_sigma
        self.latent_components = latent_components
        self.residual_blocks = residual_blocks
        self.inner_depth = inner_depth
        self.inner_width = inner_width
        self.activation = activation
        self.init_scale = init_scale
        self.batch_size = batch_size
        self.step_count = step_count
        self.learning_rate = learning_rate
        self.schedule = schedule
        self.gamma = gamma
        self.grad_clip_norm = grad_clip_norm
        self.weight_decay = weight_decay
        self.data_noise_sigma = data_noise_sigma
        self.beta_r_x = beta_r_x
        self.beta_r_z = beta_r_z
        self.beta_u_x = beta_u_x
        self.beta_u_z = beta_u_z
        self.beta_p_x = beta_p_x
        self.beta_p_z = beta_p_z
        self.validation_fraction = validation_fraction
        self.validation_every = validation_every
        self.random_state = random_state

    def _make_latent(self, man, X, rng):
        if self.latent == "uniform":
            return distributions.UniformManifold(man)
        if self.latent == "wrapped_normal":
            return distributions.WrappedNormal(man, self.latent_sigma)
        if self.latent == "vmf_mixture":
            return distributions.fit_vmf_mixture(X, self.latent_components, rng)
        raise ValueError(f"unknown latent {self.latent!r}")

    def _validate_points(self, X, reset):
        X = check_array(X, dtype=np.float64)
        if reset:
            self.n_features_in_ = X.shape[1]
        elif X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def fit(self, X, y=None):
        man = geometry.make_manifold(self.manifold, self.n)
        X = self._validate_points(X, reset=True)
        if X.shape[1] != man.m:
            raise ValueError(f"{man!r} needs {man.m} columns, X has {X.shape[1]}")
        man.check_on_manifold(X)
        rs = check_random_state(self.random_state)
        seed = int(rs.randint(0, 2**31 - 1))
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(X))
        n_val = max(1, int(round(self.validation_fraction * len(X))))
        val, train = X[order[:n_val]], X[order[n_val:]]
        latent = self._make_latent(man, train, rng)
        spec = nnet.NetworkSpec(man.m, self.residual_blocks, self.inner_depth, self.inner_width,
                                self.activation, self.init_scale)
        model = flow.FlowModel.initialize(man, latent, rng, spec)
        config = trainer.TrainConfig(
            batch_size=self.batch_size, step_count=self.step_count,
            learning_rate=self.learning_rate,
            schedule=trainer.Schedule(self.schedule, self.gamma),
            grad_clip_norm=self.grad_clip_norm, weight_decay=self.weight_decay,
            data_noise_sigma=self.data_noise_sigma, seed=seed,
            validation_every=self.validation_every, validation_size=len(val),
            weights=flow.LossWeights(self.beta_r_x, self.beta_r_z, self.beta_u_x,
                                     self.beta_u_z, self.beta_p_x, self.beta_p_z))
        result = trainer.train(model, train, config, validation=val)
        self.model_ = result.model
        self.manifold_ = man
        self.metrics_ = result.metrics
        self.best_step_ = result.best_step
        return self

    def score_samples(self, X):
        """Log-density of each row (decoder direction), in nats."""
        check_is_fitted(self, "model_")
        X = self._validate_points(X, reset=False)
        return flow.exact_log_density(self.model_, X, "decoder", on_singular="nan")

    def score(self, X, y=None):
        """Mean log-likelihood over rows with a finite density."""
        logp = self.score_samples(X)
        return float(np.mean(logp[np.isfinite(logp)]))

    def sample(self, n_samples=1, random_state=None):
        check_is_fitted(self, "model_")
        rng = np.random.default_rng(check_random_state(random_state).randint(0, 2**31 - 1))
        return flow.sample(self.model_, n_samples, rng)

    def transform(self, X):
        """Latent codes ``f(X)``."""
        check_is_fitted(self, "model_")
        return flow.encode(self.model_, self._validate_points(X, reset=False))[0]

    def inverse_transform(self, Z):
        """Decoded points ``g(Z)``."""
        check_is_fitted(self, "model_")
        return flow.decode(self.model_, self._validate_points(Z, reset=False))[0]
