#!/usr/bin/env python3
"""
Joint Objective
===============

Cosine, triplet and cosine-BCE losses over a batch of transformed
embeddings, each returning its batch-mean value and the gradient w.r.t. the
model output x_hat. Targets and seeds are data; no gradient flows into them.

    cosine:  mean(1 - cos(x_hat, x_t))
    triplet: mean(max(0, alpha + cos(x_hat, x_s) - cos(x_hat, x_t)))
    cosBCE:  mean(softplus(z) - t * z),  z = gamma * cos(x_hat, x_t),
             t = t_match for identity pairs, t_mismatch otherwise
"""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import ConfigError, LossInputError

logger = logging.getLogger(__name__)

LOSS_KEYS = ("lambda_cosine", "lambda_triplet", "lambda_cosbce", "alpha", "gamma", "t_match", "t_mismatch")


@dataclass(frozen=True)
class LossConfig:
    """Weights and hyperparameters of the joint objective."""
    lambda_cosine: float = 1.0
    lambda_triplet: float = 1.0
    lambda_cosbce: float = 1.0
    alpha: float = 0.3
    gamma: float = 3.0
    t_match: float = 1.0
    t_mismatch: float = 0.5

    def __post_init__(self):
        self.validate()

    def validate(self):
        weights = (self.lambda_cosine, self.lambda_triplet, self.lambda_cosbce)
        if any(w < 0 for w in weights):
            raise ConfigError("Loss weights must be non-negative", field="loss.lambda_*")
        if not any(w > 0 for w in weights):
            raise ConfigError("At least one loss weight must be positive", field="loss.lambda_*")
        if self.alpha < 0:
            raise ConfigError(f"Margin must be >= 0, got {self.alpha}", field="loss.alpha")
        if self.gamma <= 0:
            raise ConfigError(f"Sigmoid scale must be > 0, got {self.gamma}", field="loss.gamma")

    @property
    def weights(self) -> Tuple[float, float, float]:
        return (self.lambda_cosine, self.lambda_triplet, self.lambda_cosbce)

    def with_weights(self, lambda_cosine: float, lambda_triplet: float, lambda_cosbce: float) -> "LossConfig":
        values = self.to_dict()
        values.update(lambda_cosine=lambda_cosine, lambda_triplet=lambda_triplet, lambda_cosbce=lambda_cosbce)
        return LossConfig(**values)

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Optional[Dict]) -> "LossConfig":
        values = dict(values or {})
        unknown = set(values) - set(LOSS_KEYS)
        if unknown:
            raise ConfigError("Unknown loss setting", field=f"loss.{sorted(unknown)[0]}")
        try:
            return cls(**{k: float(v) for k, v in values.items()})
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Invalid loss setting: {e}", field="loss")


@dataclass(frozen=True)
class LossBreakdown:
    """Component values of one batch; ``total`` is their weighted sum."""
    total: float
    cosine: float
    triplet: float
    cosbce: float
    batch_size: int

    def to_dict(self) -> Dict:
        return asdict(self)


def _cosine_rows(a: np.ndarray, b: np.ndarray, name_a: str, name_b: str) -> Tuple[np.ndarray, np.ndarray]:
    """
    Row-wise cosine and its gradient w.r.t. ``a``:
    d cos / d a = (b_hat - cos * a_hat) / |a|.
    """
    norm_a = np.linalg.norm(a, axis=1)
    norm_b = np.linalg.norm(b, axis=1)
    for norms, name in ((norm_a, name_a), (norm_b, name_b)):
        zero = np.flatnonzero(norms == 0)
        if zero.size:
            raise LossInputError(f"Zero-norm row {int(zero[0])} in {name}")
    a_hat = a / norm_a[:, None]
    b_hat = b / norm_b[:, None]
    cos = np.einsum("ij,ij->i", a_hat, b_hat)
    grad = (b_hat - cos[:, None] * a_hat) / norm_a[:, None]
    return cos, grad


def _as_batch(*arrays: np.ndarray) -> Tuple[np.ndarray, ...]:
    batch = tuple(np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in arrays)
    shape = batch[0].shape
    for array in batch[1:]:
        if array.shape != shape:
            raise LossInputError(f"Batch shape mismatch: {array.shape} vs {shape}")
    return batch


def loss_cosine(x_hat: np.ndarray, x_t: np.ndarray) -> Tuple[float, np.ndarray]:
    x_hat, x_t = _as_batch(x_hat, x_t)
    cos, d_cos = _cosine_rows(x_hat, x_t, "x_hat", "x_t")
    batch = x_hat.shape[0]
    return float(np.mean(1.0 - cos)), -d_cos / batch


def loss_triplet(x_hat: np.ndarray, x_t: np.ndarray, x_s: np.ndarray, alpha: float = 0.3) -> Tuple[float, np.ndarray]:
    """Hinge with x_hat as anchor, x_t as positive and x_s as negative."""
    x_hat, x_t, x_s = _as_batch(x_hat, x_t, x_s)
    cos_neg, d_neg = _cosine_rows(x_hat, x_s, "x_hat", "x_s")
    cos_pos, d_pos = _cosine_rows(x_hat, x_t, "x_hat", "x_t")
    hinge = alpha + cos_neg - cos_pos
    active = hinge > 0
    batch = x_hat.shape[0]
    grad = np.where(active[:, None], d_neg - d_pos, 0.0) / batch
    return float(np.mean(np.where(active, hinge, 0.0))), grad


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -z))


def loss_cosbce(x_hat: np.ndarray, x_t: np.ndarray, mood_match: np.ndarray, gamma: float = 3.0,
                t_match: float = 1.0, t_mismatch: float = 0.5) -> Tuple[float, np.ndarray]:
    """
    BCE(sigmoid(gamma * cos), t) in the stable logit form softplus(z) - t * z.
    """
    if gamma <= 0:
        raise LossInputError(f"gamma must be > 0, got {gamma}")
    x_hat, x_t = _as_batch(x_hat, x_t)
    cos, d_cos = _cosine_rows(x_hat, x_t, "x_hat", "x_t")
    target = np.where(np.asarray(mood_match, dtype=bool), t_match, t_mismatch)
    z = gamma * cos
    values = np.logaddexp(0.0, z) - target * z
    batch = x_hat.shape[0]
    grad = ((_sigmoid(z) - target) * gamma)[:, None] * d_cos / batch
    return float(np.mean(values)), grad


def loss_total(x_hat: np.ndarray, x_t: np.ndarray, x_s: np.ndarray, mood_match: np.ndarray,
               config: LossConfig) -> Tuple[LossBreakdown, np.ndarray]:
    """Weighted sum of the three components and its gradient w.r.t. x_hat."""
    x_hat, x_t, x_s = _as_batch(x_hat, x_t, x_s)
    cosine, g_cosine = loss_cosine(x_hat, x_t)
    triplet, g_triplet = loss_triplet(x_hat, x_t, x_s, config.alpha)
    cosbce, g_cosbce = loss_cosbce(x_hat, x_t, mood_match, config.gamma, config.t_match, config.t_mismatch)
    total = config.lambda_cosine * cosine + config.lambda_triplet * triplet + config.lambda_cosbce * cosbce
    grad = config.lambda_cosine * g_cosine + config.lambda_triplet * g_triplet + config.lambda_cosbce * g_cosbce
    breakdown = LossBreakdown(total=total, cosine=cosine, triplet=triplet, cosbce=cosbce, batch_size=x_hat.shape[0])
    return breakdown, grad
