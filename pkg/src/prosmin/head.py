"""Gaussian predictive head and reparametrized sampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .numeric import ContractError, RealTensor

SIGMA_FLOOR = 1e-4


@dataclass
class GaussianPrediction:
    """Predictive mean and standard deviation, each of shape (..., K)."""

    mu: RealTensor
    sigma: RealTensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise nm.DimensionError(f"mu {self.mu.shape} vs sigma {self.sigma.shape}")
        if np.any(self.sigma.data <= 0):
            raise nm.NumericError("sigma must be strictly positive")

    @property
    def sigma2(self) -> np.ndarray:
        """Variance view σ² (not tracked on the tape)."""
        return self.sigma.data**2


def head_forward(h: RealTensor, params: dict, sigma_floor: float = SIGMA_FLOOR) -> GaussianPrediction:
    """Map predictor output (B, H) to a Gaussian over K dimensions.

    ``params`` holds ``mean.w`` (H, K), ``mean.b`` (K,), ``var.w`` and
    ``var.b`` with matching shapes.  Values may be arrays or tensors.
    """
    if h.data.ndim == 1:
        h = nm.reshape(h, (1, h.shape[0]))
    w_mu, b_mu = params["mean.w"], params["mean.b"]
    w_s, b_s = params["var.w"], params["var.b"]
    for w in (w_mu, w_s):
        if np.shape(_raw(w))[0] != h.shape[1]:
            raise ContractError(
                f"head expects input width {np.shape(_raw(w))[0]}, got {h.shape[1]}")
    mu = nm.add(nm.matmul(h, _t(w_mu)), _t(b_mu))
    pre = nm.add(nm.matmul(h, _t(w_s)), _t(b_s))
    sigma = nm.add(nm.softplus(pre), sigma_floor)
    return GaussianPrediction(mu, sigma)


def reparam_sample(pred: GaussianPrediction, r: int, rng: np.random.Generator | None = None,
                   eps: np.ndarray | None = None):
    """Draw ``r`` samples per row as μ + σ ⊙ ε.

    Parameters
    ----------
    pred : GaussianPrediction with mu, sigma of shape (B, K)
    r : int
    rng : numpy Generator, used when ``eps`` is not given
    eps : optional array of shape (B, r, K) to replay a previous draw

    Returns
    -------
    samples : RealTensor of shape (B, r, K)
    eps : ndarray of shape (B, r, K)
    """
    if r < 1:
        raise ContractError(f"need r >= 1 samples, got {r}")
    mu, sigma = pred.mu, pred.sigma
    if mu.data.ndim == 1:
        mu, sigma = nm.reshape(mu, (1, -1)), nm.reshape(sigma, (1, -1))
    b, k = mu.shape
    if eps is None:
        eps = rng.standard_normal((b, r, k))
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != (b, r, k):
        raise nm.DimensionError(f"noise shape {eps.shape}, expected {(b, r, k)}")
    mu3 = nm.reshape(mu, (b, 1, k))
    sigma3 = nm.reshape(sigma, (b, 1, k))
    return nm.add(mu3, nm.mul(sigma3, eps)), eps


def _raw(x):
    return x.data if isinstance(x, RealTensor) else x


def _t(x) -> RealTensor:
    return x if isinstance(x, RealTensor) else nm.constant(x)
