"""Free-form flows on embedded Riemannian manifolds.

Submodules: :mod:`geometry` (manifolds and projections), :mod:`nnet`
(residual MLPs with forward and reverse differentiation),
:mod:`distributions`, :mod:`flow` (model, losses, densities),
:mod:`trainer`, :mod:`evalsuite`, :mod:`serialization` and :mod:`cli`.
"""
from .distributions import (Checkerboard, FiveGaussians, Swish, UniformManifold,
                            VonMisesFisherMixture, WrappedNormal, toy_target)
from .estimator import ManifoldFreeFormFlow
from .flow import FlowModel, LossReport, LossWeights
from .geometry import PoincareBall, SpecialOrthogonal3, Sphere, Torus, make_manifold
from .nnet import NetworkParams, NetworkSpec
from .trainer import Schedule, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Checkerboard", "FiveGaussians", "FlowModel", "LossReport", "LossWeights",
    "ManifoldFreeFormFlow", "NetworkParams", "NetworkSpec", "PoincareBall", "Schedule",
    "SpecialOrthogonal3", "Sphere", "Swish", "Torus", "TrainConfig", "UniformManifold",
    "VonMisesFisherMixture", "WrappedNormal", "make_manifold", "toy_target", "train",
]
