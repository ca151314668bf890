"""Online and target networks, EMA distillation and target centering.

Parameters live in flat ``dict[str, ndarray]`` collections keyed by
``"<module>.<layer>.<w|b>"``.  A training step wraps them in leaf tensors,
so the gradient tape is rebuilt from scratch every step.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import numeric as nm
from .head import SIGMA_FLOOR, GaussianPrediction, head_forward
from .numeric import ContractError, RealTensor

SHARED_PREFIXES = ("encoder.", "projector.")
ONLINE_ONLY_PREFIXES = ("predictor.", "head.")
BN_EPS = 1e-5


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths ``[in, h1, ..., out]`` plus per-layer activation and
    batch-norm flags (one entry per affine layer)."""

    widths: tuple[int, ...]
    activations: tuple[str, ...]
    batch_norm: tuple[bool, ...]

    def __post_init__(self):
        n = len(self.widths) - 1
        if n < 1:
            raise ContractError("an MLP needs at least one layer")
        if any(w < 1 for w in self.widths):
            raise ContractError("layer widths must be positive")
        if len(self.activations) != n or len(self.batch_norm) != n:
            raise ContractError("one activation and one norm flag per layer")

    @classmethod
    def hidden_gelu(cls, widths, batch_norm: bool = False) -> MlpSpec:
        """GELU after every hidden layer, linear output."""
        n = len(widths) - 1
        acts = tuple("gelu" if i < n - 1 else "none" for i in range(n))
        bns = tuple(batch_norm and i < n - 1 for i in range(n))
        return cls(tuple(int(w) for w in widths), acts, bns)

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 2
    embed_dim: int = 64
    encoder_widths: tuple[int, ...] = (64, 64)
    projector_hidden: tuple[int, ...] = (128, 128)
    predictor_hidden: int = 256
    use_predictor: bool = True
    batch_norm: bool = False
    sigma_floor: float = SIGMA_FLOOR

    def specs(self) -> dict[str, MlpSpec]:
        enc = (self.input_dim, *self.encoder_widths)
        proj = (self.encoder_widths[-1], *self.projector_hidden, self.embed_dim)
        out = {
            "encoder": MlpSpec.hidden_gelu(enc, self.batch_norm),
            "projector": MlpSpec.hidden_gelu(proj, self.batch_norm),
        }
        if self.use_predictor:
            pred = (self.embed_dim, self.predictor_hidden, self.embed_dim)
            out["predictor"] = MlpSpec.hidden_gelu(pred, self.batch_norm)
        return out


def init_mlp(spec: MlpSpec, prefix: str, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Symmetric uniform fan-in initialisation, U(-1/√fan_in, 1/√fan_in)."""
    params = {}
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.widths[i], spec.widths[i + 1]
        bound = 1.0 / np.sqrt(fan_in)
        params[f"{prefix}.{i}.w"] = rng.uniform(-bound, bound, (fan_in, fan_out))
        params[f"{prefix}.{i}.b"] = rng.uniform(-bound, bound, fan_out)
    return params


def init_online(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    for name, spec in cfg.specs().items():
        params.update(init_mlp(spec, name, rng))
    k = cfg.embed_dim
    bound = 1.0 / np.sqrt(k)
    params["head.mean.w"] = rng.uniform(-bound, bound, (k, k))
    params["head.mean.b"] = rng.uniform(-bound, bound, k)
    params["head.var.w"] = rng.uniform(-bound, bound, (k, k))
    params["head.var.b"] = np.zeros(k)
    return params


def init_target(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    specs = cfg.specs()
    params = init_mlp(specs["encoder"], "encoder", rng)
    params.update(init_mlp(specs["projector"], "projector", rng))
    return params


@dataclass
class NetworkPair:
    """Online parameters θ, target parameters ξ and the centering vector."""

    config: ModelConfig
    theta: dict[str, np.ndarray]
    xi: dict[str, np.ndarray]
    center: np.ndarray
    alpha: float = 0.9
    center_momentum: float = 0.9
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.center_momentum <= 1.0:
            raise ContractError("center momentum must lie in [0, 1]")
        if any(key.startswith(ONLINE_ONLY_PREFIXES) for key in self.xi):
            raise ContractError("target network must not carry predictor or head parameters")
        _check_shared(self.theta, self.xi)
        if self.n_online_params() <= self.n_target_params():
            raise ContractError("online network must be strictly larger than the target")

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int = 0, alpha: float = 0.9,
               center_momentum: float = 0.9) -> NetworkPair:
        """Independently initialise θ and ξ from two child seeds."""
        online_ss, target_ss = np.random.SeedSequence(seed).spawn(2)
        theta = init_online(cfg, np.random.Generator(np.random.Philox(online_ss)))
        xi = init_target(cfg, np.random.Generator(np.random.Philox(target_ss)))
        return cls(cfg, theta, xi, np.zeros(cfg.embed_dim), alpha, center_momentum)

    def n_online_params(self) -> int:
        return int(sum(v.size for v in self.theta.values()))

    def n_target_params(self) -> int:
        return int(sum(v.size for v in self.xi.values()))


def _check_shared(theta: Mapping, xi: Mapping) -> None:
    shared = {k for k in theta if k.startswith(SHARED_PREFIXES)}
    if shared != set(xi):
        raise ContractError("target parameters must mirror online encoder+projector")
    for k in shared:
        if np.shape(theta[k]) != np.shape(xi[k]):
            raise ContractError(f"shape drift in {k}: {np.shape(theta[k])} vs {np.shape(xi[k])}")


def _as_t(x) -> RealTensor:
    return x if isinstance(x, RealTensor) else nm.constant(x)


def _batch_norm(h: RealTensor) -> RealTensor:
    """Normalise each column with batch statistics (no affine, no running stats)."""
    centered = nm.sub(h, nm.mean(h, axis=0))
    var = nm.mean(nm.mul(centered, centered), axis=0)
    return nm.mul(centered, nm.inv_sqrt(nm.add(var, BN_EPS)))


def mlp_forward(x: RealTensor, params: Mapping, prefix: str, spec: MlpSpec) -> RealTensor:
    h = x
    for i in range(spec.n_layers):
        w = params[f"{prefix}.{i}.w"]
        if h.shape[-1] != np.shape(getattr(w, "data", w))[0]:
            raise ContractError(
                f"{prefix} layer {i} expects width {np.shape(getattr(w, 'data', w))[0]}, "
                f"got {h.shape[-1]}")
        h = nm.add(nm.matmul(h, _as_t(w)), _as_t(params[f"{prefix}.{i}.b"]))
        if spec.batch_norm[i]:
            h = _batch_norm(h)
        if spec.activations[i] == "gelu":
            h = nm.gelu(h)
    return h


def _rows(x) -> RealTensor:
    x = _as_t(x)
    if x.data.ndim == 1:
        return nm.reshape(x, (1, x.shape[0]))
    return x


def encode(x, params: Mapping, cfg: ModelConfig) -> RealTensor:
    """Backbone features f(x); ``params`` may be θ or ξ."""
    x = _rows(x)
    if x.shape[1] != cfg.input_dim:
        raise ContractError(f"encoder expects width {cfg.input_dim}, got {x.shape[1]}")
    return mlp_forward(x, params, "encoder", cfg.specs()["encoder"])


def online_forward(x, pair: NetworkPair, params: Mapping | None = None) -> GaussianPrediction:
    """f_θ → g_θ → q_θ → Gaussian head.  ``params`` overrides ``pair.theta``
    (pass leaf tensors to record gradients)."""
    params = pair.theta if params is None else params
    cfg = pair.config
    specs = cfg.specs()
    h = encode(x, params, cfg)
    h = mlp_forward(h, params, "projector", specs["projector"])
    if cfg.use_predictor:
        h = mlp_forward(h, params, "predictor", specs["predictor"])
    head = {k[len("head."):]: v for k, v in params.items() if k.startswith("head.")}
    return head_forward(h, head, cfg.sigma_floor)


def target_forward(x, pair: NetworkPair) -> RealTensor:
    """Centered target projection t_ξ − c.  Never recorded on a tape."""
    cfg = pair.config
    h = encode(x, pair.xi, cfg)
    h = mlp_forward(h, pair.xi, "projector", cfg.specs()["projector"])
    return nm.constant(h.data - pair.center)


def ema_coefficient(alpha0: float, t: int, total: int | None, schedule: str = "constant") -> float:
    """α at step t: constant, or a cosine ramp from α₀ up to 1 at ``total``."""
    if schedule == "constant" or not total:
        return alpha0
    if schedule != "cosine":
        raise ContractError(f"unknown EMA schedule {schedule!r}")
    frac = min(max(t / total, 0.0), 1.0)
    return 1.0 - (1.0 - alpha0) * (np.cos(np.pi * frac) + 1.0) / 2.0


def ema_update(pair: NetworkPair, t: int = 0, total: int | None = None,
               schedule: str = "constant") -> dict[str, np.ndarray]:
    """ξ ← α θ + (1 − α) ξ on the shared encoder/projector parameters."""
    _check_shared(pair.theta, pair.xi)
    a = ema_coefficient(pair.alpha, t, total, schedule)
    new = {}
    for k, v in pair.xi.items():
        th = pair.theta[k]
        # clipping removes rounding excursions outside the segment [ξ, θ]
        new[k] = np.clip(a * th + (1.0 - a) * v, np.minimum(th, v), np.maximum(th, v))
    pair.xi = new
    return pair.xi


def center_update(pair: NetworkPair, batch_targets) -> np.ndarray:
    """c ← m c + (1 − m) · column mean of the uncentered target outputs."""
    t = np.asarray(getattr(batch_targets, "data", batch_targets), dtype=np.float64)
    if t.ndim != 2 or t.shape[0] == 0:
        raise ContractError("center update needs a nonempty (B, K) batch")
    m = pair.center_momentum
    pair.center = m * pair.center + (1.0 - m) * t.mean(axis=0)
    return pair.center
