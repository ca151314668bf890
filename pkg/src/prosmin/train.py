"""Self-distillation objective, training step and training loop."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numeric as nm
from .augment import AugmentConfig, make_batch_views
from .data import DatasetSpec, load_dataset
from .evaluation import effective_rank
from .model import ModelConfig, NetworkPair, center_update, ema_update, encode, online_forward, target_forward
from .head import reparam_sample
from .optim import AdamW, OptimizerState, clip_by_global_norm, cosine_schedule
from .scoring import ConfigError, Family, ScoreConfig, adjusted_score, median_heuristic

VARIANCE_HEAD = frozenset({"head.var.w", "head.var.b"})


class TrainingError(RuntimeError):
    """A numeric failure during training, tagged with the step index."""

    def __init__(self, step: int, cause: Exception):
        super().__init__(f"step {step}: {cause}")
        self.step = step
        self.cause = cause


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    steps: int = 2000
    base_lr: float | None = None  # None: 0.0005 * batch_size / 256
    final_lr: float = 1e-6
    warmup_steps: int | None = None  # None: 10% of steps
    wd_start: float = 0.04
    wd_end: float = 0.4
    samples_per_view: int = 1
    alpha: float = 0.9
    alpha_schedule: str = "constant"
    center_momentum: float = 0.9
    symmetric: bool = False
    decay_variance_head: bool = False
    clip_norm: float = 3.0
    seed: int = 0
    score: ScoreConfig = field(default_factory=ScoreConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 1:
            raise ConfigError("batch_size and steps must be >= 1")
        if self.samples_per_view < 1:
            raise ConfigError("samples_per_view must be >= 1")
        if self.pooled_r < 2:
            raise ConfigError(f"pooled sample count {self.pooled_r} < 2")
        if self.warmup_steps is not None and not 0 <= self.warmup_steps <= self.steps:
            raise ConfigError("warmup_steps must lie in [0, steps]")

    @property
    def n_views(self) -> int:
        return 2 + self.augment.n_local

    @property
    def pooled_r(self) -> int:
        return self.n_views * self.samples_per_view

    @property
    def lr(self) -> float:
        return 0.0005 * self.batch_size / 256 if self.base_lr is None else self.base_lr

    @property
    def warmup(self) -> int:
        return self.steps // 10 if self.warmup_steps is None else self.warmup_steps

    def resolved(self) -> TrainConfig:
        """All defaults materialised; the pooled r is written into the score config."""
        return replace(self, base_lr=self.lr, warmup_steps=self.warmup,
                       score=replace(self.score, r=self.pooled_r))


@dataclass
class StepInputs:
    """Random draws of one training step, kept so a step can be replayed."""

    views: np.ndarray  # (B, V, D)
    eps: np.ndarray    # (B * V, r_v, K)


def prepare_step(batch, cfg: TrainConfig, rng: np.random.Generator) -> StepInputs:
    views = make_batch_views(np.asarray(batch, dtype=np.float64), cfg.augment, rng)
    b, v, _ = views.shape
    eps = rng.standard_normal((b * v, cfg.samples_per_view, cfg.model.embed_dim))
    return StepInputs(views, eps)


@dataclass
class StepResult:
    loss: nm.RealTensor
    raw: np.ndarray          # per-item objective before the absolute value
    sigma_mean: float
    targets: np.ndarray      # uncentered target projections of both global views
    features: np.ndarray     # online backbone features of the first global view
    target_scale: float      # mean norm of the centered observations


def loss_from_inputs(inputs: StepInputs, pair: NetworkPair, cfg: TrainConfig,
                     params=None, score: ScoreConfig | None = None) -> StepResult:
    """Pooled adjusted score of one batch given fixed views and noise.

    Online predictions for every view contribute ``samples_per_view`` draws
    to one pooled sample set per item; the observation is the centered
    target output of the second global view (and, when ``cfg.symmetric``,
    the loss is averaged with the first global view as observation).
    """
    score = cfg.score if score is None else score
    params = pair.theta if params is None else params
    views = inputs.views
    b, v, d = views.shape
    k = pair.config.embed_dim
    r_v = cfg.samples_per_view

    flat = nm.constant(views.reshape(b * v, d))
    pred = online_forward(flat, pair, params)
    samples, _ = reparam_sample(pred, r_v, eps=inputs.eps)
    samples = nm.reshape(samples, (b, v * r_v, k))

    glob = views[:, :2, :].reshape(b * 2, d)
    z = target_forward(glob, pair).data.reshape(b, 2, k)
    loss, raw = adjusted_score(samples, nm.constant(z[:, 1]), score, return_raw=True)
    if cfg.symmetric:
        loss2, raw2 = adjusted_score(samples, nm.constant(z[:, 0]), score, return_raw=True)
        loss = nm.scale(nm.add(loss, loss2), 0.5)
        raw = np.concatenate([raw, raw2])
    feats = encode(nm.constant(views[:, 0, :]), pair.theta, pair.config).data
    scale = float(np.linalg.norm(z[:, 1], axis=1).mean())
    return StepResult(loss, raw, float(pred.sigma.data.mean()),
                      z.reshape(b * 2, k) + pair.center, feats, scale)


def loss_step(batch, pair: NetworkPair, cfg: TrainConfig, rng: np.random.Generator,
              params=None) -> nm.RealTensor:
    """Scalar training loss for a batch of raw inputs."""
    return loss_from_inputs(prepare_step(batch, cfg, rng), pair, cfg, params).loss


def resolve_gamma(cfg: TrainConfig, pair: NetworkPair, inputs: StepInputs) -> ScoreConfig:
    """Median-heuristic bandwidth over every point the kernel compares in
    the first batch: pooled online samples and centered observations."""
    if cfg.score.family is not Family.KERNEL or cfg.score.gamma is not None:
        return cfg.score
    b, v, d = inputs.views.shape
    pred = online_forward(inputs.views.reshape(b * v, d), pair)
    samples, _ = reparam_sample(pred, cfg.samples_per_view, eps=inputs.eps)
    z = target_forward(inputs.views[:, 1, :], pair).data
    points = np.concatenate([samples.data.reshape(-1, z.shape[1]), z])
    return cfg.score.with_gamma(median_heuristic(points))


@dataclass
class TrainState:
    pair: NetworkPair
    opt_state: OptimizerState
    rng: np.random.Generator
    step: int = 0
    score: ScoreConfig | None = None
    negative_flags: int = 0


def init_state(cfg: TrainConfig) -> TrainState:
    pair = NetworkPair.create(cfg.model, seed=cfg.seed, alpha=cfg.alpha,
                              center_momentum=cfg.center_momentum)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, 1])))
    return TrainState(pair, OptimizerState(), rng)


def train_step(state: TrainState, x_train: np.ndarray, cfg: TrainConfig,
               optimizer: AdamW | None = None) -> dict:
    """One optimisation step: loss → backward → AdamW on θ → EMA → centering."""
    optimizer = optimizer or AdamW()
    t, pair = state.step, state.pair
    n = len(x_train)
    idx = state.rng.choice(n, size=cfg.batch_size, replace=cfg.batch_size > n)
    inputs = prepare_step(x_train[idx], cfg, state.rng)
    if state.score is None:
        state.score = resolve_gamma(cfg, pair, inputs)

    lr = cosine_schedule(t, cfg.steps, cfg.warmup, cfg.lr, cfg.final_lr)
    wd = cosine_schedule(t, cfg.steps, 0, cfg.wd_start, cfg.wd_end)
    leaves = {key: nm.tensor(val, requires_grad=True) for key, val in pair.theta.items()}
    with nm.GradientTape() as tape:
        res = loss_from_inputs(inputs, pair, cfg, leaves, state.score)
    grads = tape.backward(res.loss, list(leaves.values()))
    grads = {key: grads[leaf.id].data for key, leaf in leaves.items()}
    grads, gnorm = clip_by_global_norm(grads, cfg.clip_norm)
    no_decay = frozenset() if cfg.decay_variance_head else VARIANCE_HEAD
    pair.theta = optimizer.step(pair.theta, grads, state.opt_state, lr, wd, no_decay)
    ema_update(pair, t + 1, cfg.steps, cfg.alpha_schedule)
    center_update(pair, res.targets)

    negatives = int(np.sum(res.raw < 0))
    state.negative_flags += negatives
    state.step += 1
    return {
        "step": state.step,
        "loss": res.loss.item(),
        "lr": lr,
        "wd": wd,
        "sigma_mean": res.sigma_mean,
        "target_scale": res.target_scale,
        "eff_rank": effective_rank(res.features),
        "grad_norm": gnorm,
        "negative_items": negatives,
    }


def train(cfg: TrainConfig, out_dir=None, *, resume: bool = False, x_train=None,
          quiet: bool = True, until: int | None = None) -> tuple[TrainState, list[dict]]:
    """Run ``cfg.steps`` optimisation steps.

    With ``out_dir`` the metrics log (``metrics.jsonl``), wall-clock
    timings (``timing.jsonl``, kept apart so the metrics log is
    reproducible byte for byte) and the final checkpoint
    (``checkpoint.npz``) are written there.  ``resume`` continues from an
    existing checkpoint in ``out_dir``.  ``until`` stops early after that
    many steps (schedules still span ``cfg.steps``), which together with
    ``resume`` splits one run into several processes.
    """
    from .checkpoint import load_checkpoint, save_checkpoint

    cfg = cfg.resolved()
    if x_train is None:
        x_train = load_dataset(cfg.dataset).x_train
    x_train = np.asarray(x_train, dtype=np.float64)
    if x_train.shape[1] != cfg.model.input_dim:
        raise ConfigError(f"dataset width {x_train.shape[1]} != model input_dim {cfg.model.input_dim}")

    out = Path(out_dir) if out_dir is not None else None
    ckpt_path = out / "checkpoint.npz" if out else None
    if resume:
        if ckpt_path is None or not ckpt_path.exists():
            raise FileNotFoundError("resume requested but no checkpoint found")
        state = load_checkpoint(ckpt_path).state
    else:
        state = init_state(cfg)
    if out:
        out.mkdir(parents=True, exist_ok=True)
        mode = "a" if resume else "w"
        mlog = open(out / "metrics.jsonl", mode)
        tlog = open(out / "timing.jsonl", mode)
    records = []
    optimizer = AdamW()
    try:
        stop = cfg.steps if until is None else min(until, cfg.steps)
        while state.step < stop:
            t0 = time.perf_counter()
            try:
                rec = train_step(state, x_train, cfg, optimizer)
            except (nm.NumericError, ArithmeticError) as exc:
                raise TrainingError(state.step, exc) from exc
            wall_ms = (time.perf_counter() - t0) * 1e3
            records.append(rec)
            if out:
                mlog.write(json.dumps(rec) + "\n")
                tlog.write(json.dumps({"step": rec["step"], "wall_ms": wall_ms}) + "\n")
            if not quiet and (rec["step"] % 100 == 0 or rec["step"] == cfg.steps):
                print(f"step {rec['step']:5d}  loss {rec['loss']:.4f}  "
                      f"sigma {rec['sigma_mean']:.3f}  eff_rank {rec['eff_rank']:.2f}")
    finally:
        if out:
            mlog.close()
            tlog.close()
    if ckpt_path:
        save_checkpoint(ckpt_path, state, cfg)
    return state, records
