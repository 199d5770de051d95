"""Differentiable inner/outer losses for the supported bilevel tasks.

Each constructor returns a :class:`LossPair`.  Losses take the
hyperparameter tensors ``lam``, the parameter tensors ``theta`` (both lists
of Vars or plain arrays) and a :class:`Batch`, and return a scalar.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation


@dataclass(frozen=True)
class Batch:
    """Mini-batch view: features, labels and indices into the source set."""

    x: np.ndarray
    y: np.ndarray
    idx: np.ndarray

    @classmethod
    def from_dataset(cls, dataset, idx=None):
        if idx is None:
            idx = np.arange(len(dataset))
        idx = np.asarray(idx, dtype=np.int64)
        return cls(dataset.x[idx], dataset.y[idx], idx)

    def __len__(self):
        return self.y.shape[0]


@dataclass(frozen=True)
class LossPair:
    inner_loss: Callable
    outer_loss: Callable
    lam_shapes: tuple
    theta_shapes: tuple
    init_lam: Callable
    init_theta: Callable
    # per-example outer losses, shape (batch,); used by the Lipschitz probe
    outer_per_example: Optional[Callable] = None


@dataclass(frozen=True)
class FeatureLearningSpec:
    input_dim: int
    feature_dim: int
    hidden_dim: int
    num_classes: int

    def __post_init__(self):
        if min(self.input_dim, self.feature_dim, self.hidden_dim, self.num_classes) < 1:
            raise ContractViolation(f"all dimensions must be >= 1: {self}")


@dataclass(frozen=True)
class ReweightingSpec:
    input_dim: int
    hidden_dim: int
    num_classes: int
    n_train: int

    def __post_init__(self):
        if min(self.input_dim, self.hidden_dim, self.num_classes, self.n_train) < 1:
            raise ContractViolation(f"all dimensions must be >= 1: {self}")


def uniform_affine(rng, fan_in, fan_out):
    """Weight and bias drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    b = rng.uniform(-bound, bound, size=(fan_out,))
    return [w, b]


def one_hot(y, num_classes):
    y = np.asarray(y)
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ContractViolation(f"label out of range [0, {num_classes})")
    out = np.zeros((y.shape[0], num_classes))
    out[np.arange(y.shape[0]), y] = 1.0
    return out


def cross_entropy(logits, y, num_classes):
    """Per-example cross-entropy from logits, via log-softmax."""
    lsm = ad.log_softmax(logits)
    return ad.scale(ad.sum(ad.mul(lsm, one_hot(y, num_classes)), axis=1), -1.0)


def mlp_logits(theta, h):
    """affine -> tanh -> affine."""
    w1, b1, w2, b2 = theta
    hidden = ad.tanh(ad.add(ad.matmul(h, w1), b1))
    return ad.add(ad.matmul(hidden, w2), b2)


def feature_learning_losses(spec):
    """Cross-entropy of an MLP head on top of an affine feature extractor.

    ``lam = [W_feat, b_feat]`` is the extractor, ``theta`` the head.  Inner
    and outer losses are the same mean cross-entropy, evaluated on the
    training and validation batches respectively.
    """
    c = spec.num_classes

    def per_example(lam, theta, batch):
        w, b = lam
        feats = ad.add(ad.matmul(batch.x, w), b)
        return cross_entropy(mlp_logits(theta, feats), batch.y, c)

    def loss(lam, theta, batch):
        return ad.mean(per_example(lam, theta, batch))

    def init_lam(rng):
        return uniform_affine(rng, spec.input_dim, spec.feature_dim)

    def init_theta(rng):
        return uniform_affine(rng, spec.feature_dim, spec.hidden_dim) + uniform_affine(
            rng, spec.hidden_dim, c
        )

    return LossPair(
        inner_loss=loss,
        outer_loss=loss,
        lam_shapes=((spec.input_dim, spec.feature_dim), (spec.feature_dim,)),
        theta_shapes=(
            (spec.feature_dim, spec.hidden_dim),
            (spec.hidden_dim,),
            (spec.hidden_dim, c),
            (c,),
        ),
        init_lam=init_lam,
        init_theta=init_theta,
        outer_per_example=per_example,
    )


def reweighting_losses(spec):
    """Per-example reweighted training loss sigma(lam_i) * CE_i.

    ``lam`` holds one logit per training example.  The outer loss is the
    plain mean cross-entropy and never reads ``lam``.
    """
    c, n = spec.num_classes, spec.n_train

    def per_example(lam, theta, batch):
        return cross_entropy(mlp_logits(theta, batch.x), batch.y, c)

    def inner_loss(lam, theta, batch):
        idx = np.asarray(batch.idx)
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise ContractViolation(f"training index out of range [0, {n})")
        weights = ad.sigmoid(ad.take(lam[0], idx))
        return ad.mean(ad.mul(weights, per_example(lam, theta, batch)))

    def outer_loss(lam, theta, batch):
        return ad.mean(per_example(lam, theta, batch))

    def init_lam(rng):
        return [np.zeros(n)]

    def init_theta(rng):
        return uniform_affine(rng, spec.input_dim, spec.hidden_dim) + uniform_affine(
            rng, spec.hidden_dim, c
        )

    return LossPair(
        inner_loss=inner_loss,
        outer_loss=outer_loss,
        lam_shapes=((n,),),
        theta_shapes=((spec.input_dim, spec.hidden_dim), (spec.hidden_dim,), (spec.hidden_dim, c), (c,)),
        init_lam=init_lam,
        init_theta=init_theta,
        outer_per_example=per_example,
    )


def quadratic_losses(curvature, coupling, target, theta0=None, lam0=None):
    """Quadratic bilevel family with a closed-form unrolled solution.

    inner: 0.5 (theta - B lam)^T A (theta - B lam)
    outer: 0.5 ||theta - target||^2

    With ``A = B = 1`` and ``target = 0`` this is the scalar problem
    ``(theta - lam)^2 / 2`` / ``theta^2 / 2``.  Batches are ignored.
    """
    a = np.atleast_2d(np.asarray(curvature, dtype=np.float64))
    b = np.atleast_2d(np.asarray(coupling, dtype=np.float64))
    target = np.atleast_1d(np.asarray(target, dtype=np.float64))
    p, q = b.shape
    if a.shape != (p, p) or target.shape != (p,):
        raise ContractViolation(f"inconsistent quadratic shapes A{a.shape} B{b.shape} target{target.shape}")
    theta0 = np.zeros(p) if theta0 is None else np.atleast_1d(np.asarray(theta0, dtype=np.float64))
    lam0 = np.zeros(q) if lam0 is None else np.atleast_1d(np.asarray(lam0, dtype=np.float64))

    def inner_loss(lam, theta, batch):
        r = ad.sub(ad.reshape(theta[0], (p, 1)), ad.matmul(b, ad.reshape(lam[0], (q, 1))))
        return ad.scale(ad.sum(ad.mul(r, ad.matmul(a, r))), 0.5)

    def per_example(lam, theta, batch):
        d = ad.sub(theta[0], target)
        loss = ad.scale(ad.sum(ad.mul(d, d)), 0.5)
        return ad.broadcast_to(ad.reshape(loss, (1,)), (len(batch),))

    def outer_loss(lam, theta, batch):
        d = ad.sub(theta[0], target)
        return ad.scale(ad.sum(ad.mul(d, d)), 0.5)

    return LossPair(
        inner_loss=inner_loss,
        outer_loss=outer_loss,
        lam_shapes=((q,),),
        theta_shapes=((p,),),
        init_lam=lambda rng: [lam0.copy()],
        init_theta=lambda rng: [theta0.copy()],
        outer_per_example=per_example,
    )


def scalar_quadratic_losses(theta0=0.0, lam0=0.0):
    return quadratic_losses([[1.0]], [[1.0]], [0.0], theta0=[theta0], lam0=[lam0])
