"""Visual side: composite feature encoding with residue removal, primitive heads.

Backbone features are ingested as plain vectors (the convolutional backbone is
out of scope). A two-layer MLP maps them into the shared feature space, a
learned Gaussian residue is subtracted (sampled during training, mean at
inference), and two head MLPs extract the attribute and object views.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    gaussian_reparameterize,
    leaky_relu,
    matmul,
    sub,
)

LEAKY_SLOPE = 0.1

TRAIN = "train"
INFER = "infer"


@dataclass
class Mlp:
    """Two-layer perceptron with a LeakyReLU(0.1) hidden activation."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, d_in, d_hidden, d_out, rng, dtype=np.float32):
        def layer(fan_in, fan_out):
            w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out)).astype(dtype)
            return Tensor(w, requires_grad=True), Tensor(
                np.zeros(fan_out, dtype=dtype), requires_grad=True
            )

        w1, b1 = layer(d_in, d_hidden)
        w2, b2 = layer(d_hidden, d_out)
        return cls(w1=w1, b1=b1, w2=w2, b2=b2)

    def __call__(self, x):
        hidden = leaky_relu(matmul(x, self.w1) + self.b1, LEAKY_SLOPE)
        return matmul(hidden, self.w2) + self.b2


@dataclass
class ResidueCondition:
    """Optional input-conditioned residue statistics (linear heads on x')."""

    w_mu: Tensor
    b_mu: Tensor
    w_logvar: Tensor
    b_logvar: Tensor

    @classmethod
    def init(cls, dim, rng, dtype=np.float32):
        def layer():
            w = rng.normal(0.0, 1.0 / np.sqrt(dim), (dim, dim)).astype(dtype)
            return Tensor(w, requires_grad=True)

        return cls(
            w_mu=layer(),
            b_mu=Tensor(np.zeros(dim, dtype=dtype), requires_grad=True),
            w_logvar=layer(),
            b_logvar=Tensor(np.full(dim, -4.0, dtype=dtype), requires_grad=True),
        )


@dataclass
class VisualParams:
    """Composite transform g, residue distribution, and primitive head MLPs.

    The residue is a single learned Gaussian shared across images by default;
    ``condition`` switches to per-image statistics computed from x'.
    """

    g: Mlp
    head_attr: Mlp
    head_obj: Mlp
    residue_mu: Tensor
    residue_logvar: Tensor
    condition: Optional[ResidueCondition] = None

    @classmethod
    def init(cls, d_in, dim, rng, dtype=np.float32, conditioned=False):
        return cls(
            g=Mlp.init(d_in, dim, dim, rng, dtype),
            head_attr=Mlp.init(dim, dim, dim, rng, dtype),
            head_obj=Mlp.init(dim, dim, dim, rng, dtype),
            residue_mu=Tensor(np.zeros(dim, dtype=dtype), requires_grad=True),
            # sigma ~ 0.135 at start: early training behaves like a plain MLP
            residue_logvar=Tensor(np.full(dim, -4.0, dtype=dtype), requires_grad=True),
            condition=ResidueCondition.init(dim, rng, dtype) if conditioned else None,
        )


def encode_composite(features, params, mode, noise=None, use_residue=True):
    """Composite visual feature: x = g(feature) - residue.

    In train mode the residue is reparameterized with the caller's fixed
    ``noise`` draw; at inference the distribution mean is subtracted, so the
    output is deterministic. ``use_residue=False`` disables subtraction
    entirely (ablation).
    """
    if features.data.ndim != 2 or features.data.shape[1] != params.g.w1.data.shape[0]:
        raise ShapeError(
            f"encode-composite: feature shape {features.data.shape} does not match "
            f"encoder input dimension {params.g.w1.data.shape[0]}"
        )
    transformed = params.g(features)
    if not use_residue:
        return transformed
    if params.condition is not None:
        mu = matmul(transformed, params.condition.w_mu) + params.condition.b_mu
        logvar = matmul(transformed, params.condition.w_logvar) + params.condition.b_logvar
    else:
        mu = params.residue_mu
        logvar = params.residue_logvar
    if mode == TRAIN:
        if noise is None:
            raise ValueError("train-mode encoding needs an explicit noise draw")
        residue = gaussian_reparameterize(mu, logvar, noise)
        return sub(transformed, residue)
    if mode == INFER:
        return sub(transformed, mu)
    raise ValueError(f"unknown encode mode {mode!r}")


def extract_primitives(composite, params):
    """Attribute and object visual features from one composite feature."""
    return params.head_attr(composite), params.head_obj(composite)
