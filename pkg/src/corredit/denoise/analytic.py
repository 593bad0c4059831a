"""Closed-form noise predictor for isotropic Gaussian mixtures.

Under forward noising, component ``k`` of the data mixture becomes
``N(sqrt(abar) * mu_k, (abar * var_k + 1 - abar) I)``, so the exact score,
and hence the optimal noise prediction ``-sqrt(1 - abar) * grad log p_t``,
is available in closed form. Used as a verification oracle.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from ..errors import ConditionError, ParameterError
from ..schedule import NoiseSchedule

NULL = None  # the null condition selects every component


@dataclass
class AnalyticScoreModel:
    weights: np.ndarray
    means: np.ndarray  # (K, D)
    variances: np.ndarray  # (K,)
    class_map: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.asarray(self.variances, dtype=np.float64).ravel()
        k = len(self.weights)
        if k == 0 or self.means.shape[0] != k or self.variances.shape != (k,):
            raise ParameterError("mixture weights, means and variances disagree in length")
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ParameterError("mixture weights must be positive and sum to 1")
        if np.any(self.variances <= 0):
            raise ParameterError("mixture variances must be positive")
        for label, members in self.class_map.items():
            if not members or any(not 0 <= m < k for m in members):
                raise ConditionError(f"condition {label!r} selects an empty or bad component set")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @classmethod
    def gaussian(cls, mean, var: float) -> "AnalyticScoreModel":
        return cls([1.0], [mean], [var])

    @classmethod
    def from_dict(cls, spec: dict) -> "AnalyticScoreModel":
        comps = spec.get("components")
        if not comps:
            raise ParameterError("mixture spec needs a non-empty 'components' list")
        try:
            return cls(
                [c["weight"] for c in comps], [c["mean"] for c in comps],
                [c["var"] for c in comps],
                {str(k): list(v) for k, v in spec.get("classes", {}).items()},
            )
        except (KeyError, TypeError) as exc:
            raise ParameterError(f"bad mixture spec: {exc}") from exc

    def components_for(self, condition):
        if condition is NULL:
            return np.arange(len(self.weights)), self.weights
        key = str(condition)
        if key not in self.class_map:
            raise ConditionError(f"unknown condition {condition!r}")
        idx = np.asarray(self.class_map[key])
        if idx.size == 0:
            raise ConditionError(f"condition {condition!r} selects no components")
        w = self.weights[idx]
        return idx, w / w.sum()

    def _noised(self, t: int, condition, schedule: NoiseSchedule):
        idx, w = self.components_for(condition)
        a = schedule.abar(t)
        return w, np.sqrt(a) * self.means[idx], a * self.variances[idx] + (1.0 - a)

    def log_density(self, x: np.ndarray, t: int, condition, schedule: NoiseSchedule) -> np.ndarray:
        """``log p_t(x)`` for points of shape (..., D)."""
        w, m, v = self._noised(t, condition, schedule)
        x = np.asarray(x, dtype=np.float64)
        d2 = ((x[..., None, :] - m) ** 2).sum(-1)
        logc = np.log(w) - 0.5 * self.dim * np.log(2 * np.pi * v) - 0.5 * d2 / v
        return logsumexp(logc, axis=-1)


def analytic_eps(x_t: np.ndarray, t: int, condition, model: AnalyticScoreModel,
                 schedule: NoiseSchedule) -> np.ndarray:
    """Optimal noise prediction for points of shape (..., D).

    A latent grid of exactly ``D`` elements is also accepted and its shape
    is preserved.
    """
    x = np.asarray(x_t, dtype=np.float64)
    shape = x.shape
    if x.shape[-1] != model.dim:
        if x.size != model.dim:
            raise ParameterError(f"input shape {shape} incompatible with mixture dim {model.dim}")
        x = x.reshape(model.dim)
    w, m, v = model._noised(t, condition, schedule)
    diff = x[..., None, :] - m  # (..., K, D)
    logc = np.log(w) - 0.5 * model.dim * np.log(v) - 0.5 * (diff ** 2).sum(-1) / v
    resp = np.exp(logc - logsumexp(logc, axis=-1, keepdims=True))
    score = -(resp[..., None] * diff / v[:, None]).sum(-2)
    a = schedule.abar(t)
    return (-np.sqrt(1.0 - a) * score).reshape(shape)


def eps_fn_for(model: AnalyticScoreModel, schedule: NoiseSchedule, condition=NULL):
    return lambda x, t: analytic_eps(x, t, condition, model, schedule)
