"""Numerical self-checks of the scoring rules and the gradient engine.

Each check returns a list of :class:`CheckResult` rows so the same code
drives the ``verify`` command and the acceptance tests.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .augment import AugmentConfig
from .model import ModelConfig, NetworkPair
from .scoring import (
    Family,
    SampleSet,
    ScoreConfig,
    adjusted_score,
    energy_grad_closed_form,
    energy_score_estimate,
    expected_score_mc,
)

GRAD_RTOL = 1e-4
GRAD_ATOL = 1e-6


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag}  {self.name:<40s} value={self.value:.4g}  threshold={self.threshold:.4g}  {self.detail}"


def gaussian_sampler(mean, scale: float = 1.0):
    """Sampler for N(mean, scale² I) in the ``sampler(rng, m)`` convention."""
    mean = np.asarray(mean, dtype=np.float64)

    def draw(rng: np.random.Generator, m: int) -> np.ndarray:
        return mean + scale * rng.standard_normal((m, mean.size))

    return draw


def propriety_grid(dim: int = 4) -> list[tuple[str, np.ndarray, float]]:
    """Alternatives P ≠ Q = N(0, I): pure shifts, pure rescalings and both."""
    one = np.ones(dim)
    grid = [(f"shift={s}", s * one, 1.0) for s in (0.25, 0.5, 1.0, 2.0)]
    grid += [(f"scale={c}", 0.0 * one, c) for c in (0.5, 2.0)]
    grid += [(f"shift={s},scale={c}", s * one, c) for s in (0.25, 0.5, 1.0, 2.0) for c in (0.5, 2.0)]
    return grid


def check_propriety(n: int = 20_000, r: int = 4, dim: int = 4, seed: int = 0,
                    beta: float = 1.0) -> list[CheckResult]:
    """Ŝ(P, Q) − Ŝ(Q, Q) against three combined standard errors.

    P and Q runs use independent seeds so the standard errors combine as
    for independent estimates.
    """
    cfg = ScoreConfig(Family.ENERGY, beta=beta, r=r)
    q = gaussian_sampler(np.zeros(dim))
    seeds = np.random.SeedSequence(seed).generate_state(len(propriety_grid(dim)) + 1)
    s_qq, se_qq = expected_score_mc(q, q, cfg, n, int(seeds[0]))
    out = []
    for (label, mean, scale), s in zip(propriety_grid(dim), seeds[1:]):
        s_pq, se_pq = expected_score_mc(gaussian_sampler(mean, scale), q, cfg, n, int(s))
        gap = s_pq - s_qq
        se = float(np.hypot(se_pq, se_qq))
        out.append(CheckResult(f"propriety[{label}]", gap > 3 * se, gap / se, 3.0,
                               f"gap={gap:.4f} se={se:.4f}"))
    return out


def check_unbiasedness(n: int = 10_000, r: int = 4, r_ref: int = 2000, n_ref: int = 20,
                       instances: int = 5, dim: int = 3, seed: int = 0) -> list[CheckResult]:
    """Mean of the r-sample estimator against a large-r reference.

    The reference is the mean of ``n_ref`` independent ``r_ref``-sample
    estimates, and its own standard error enters the tolerance.
    """
    root = np.random.default_rng(seed)
    out = []
    for i in range(instances):
        mean = root.normal(0.0, 1.0, dim)
        scale = root.uniform(0.5, 2.0, dim)
        obs = root.normal(0.0, 1.5, dim)
        rng = np.random.default_rng(root.integers(2**63))
        small = np.array([
            energy_score_estimate(SampleSet(mean + scale * rng.standard_normal((r, dim)), obs))
            for _ in range(n)
        ])
        ref = np.array([
            energy_score_estimate(SampleSet(mean + scale * rng.standard_normal((r_ref, dim)), obs))
            for _ in range(n_ref)
        ])
        se = float(np.hypot(small.std(ddof=1) / np.sqrt(n), ref.std(ddof=1) / np.sqrt(n_ref)))
        z = abs(small.mean() - ref.mean()) / se
        out.append(CheckResult(f"unbiased[instance {i}]", z <= 3.0, z, 3.0,
                               f"r={r}: {small.mean():.4f}  r={r_ref}: {ref.mean():.4f}"))
    return out


def grad_error(g: np.ndarray, fd: np.ndarray, rtol: float = GRAD_RTOL,
               atol: float = GRAD_ATOL) -> tuple[bool, float]:
    """Elementwise check ``|g − fd| ≤ rtol·|fd|`` or ``≤ atol``; returns the
    pass flag and the worst relative error among entries with ``|fd| > atol``."""
    err = np.abs(g - fd)
    ok = (err <= atol) | (err <= rtol * np.abs(fd))
    big = np.abs(fd) > atol
    worst = float(np.max(err[big] / np.maximum(np.abs(fd[big]), 1e-300))) if big.any() else 0.0
    return bool(ok.all()), worst


def _energy_in_mu_sigma2(obs, beta, eps):
    def f(mu, sigma2):
        return energy_score_estimate(SampleSet(mu + eps * np.sqrt(sigma2), obs), beta)
    return f


def check_closed_form_gradients(instances: int = 100, r: int = 4, dim: int = 3,
                                seed: int = 0, h: float = 1e-5) -> list[CheckResult]:
    """Closed-form energy gradients against central differences (ε held
    fixed) and against the tape."""
    rng = np.random.default_rng(seed)
    fd_ok = tape_ok = True
    fd_worst = tape_worst = 0.0
    for _ in range(instances):
        beta = float(rng.uniform(0.5, 1.9))
        mu = rng.normal(0.0, 1.0, dim)
        sigma2 = rng.uniform(0.2, 2.0, dim)
        eps = rng.standard_normal((r, dim))
        obs = rng.normal(0.0, 1.5, dim)
        s = SampleSet(mu + eps * np.sqrt(sigma2), obs)
        d_mu, d_s2 = energy_grad_closed_form(s, beta, mu, sigma2, eps)

        f = _energy_in_mu_sigma2(obs, beta, eps)
        fd_mu = nm.finite_difference(lambda m: f(m, sigma2), mu, h)
        fd_s2 = nm.finite_difference(lambda v: f(mu, v), sigma2, h)
        for g, ref in ((d_mu, fd_mu), (d_s2, fd_s2)):
            ok, worst = grad_error(g, ref)
            fd_ok &= ok
            fd_worst = max(fd_worst, worst)

        mu_t = nm.tensor(mu, requires_grad=True)
        s2_t = nm.tensor(sigma2, requires_grad=True)
        cfg = ScoreConfig(Family.ENERGY, beta=beta, lam=0.5, r=r)
        with nm.GradientTape() as tape:
            z = nm.add(mu_t, nm.mul(nm.power(s2_t, 0.5), eps))
            # λ = 0.5 halves the plain estimator; the sign is fixed by the raw value
            loss, raw = adjusted_score(nm.reshape(z, (1, r, dim)), nm.constant(obs[None, :]),
                                       cfg, return_raw=True)
            loss = nm.scale(loss, 2.0 * np.sign(raw[0]))
        grads = tape.backward(loss, [mu_t, s2_t])
        for g, ref in ((d_mu, grads[mu_t.id].data), (d_s2, grads[s2_t.id].data)):
            ok, worst = grad_error(g, ref, rtol=1e-6, atol=1e-9)
            tape_ok &= ok
            tape_worst = max(tape_worst, worst)
    return [
        CheckResult("closed-form grad vs finite differences", fd_ok, fd_worst, GRAD_RTOL,
                    f"{instances} instances"),
        CheckResult("closed-form grad vs tape", tape_ok, tape_worst, 1e-6,
                    f"{instances} instances"),
    ]


def tiny_problem(seed: int = 0, family: Family = Family.ENERGY):
    """A frozen B=2, K=4, pooled r=4 training problem with small widths."""
    from .train import StepInputs, TrainConfig

    model = ModelConfig(input_dim=3, embed_dim=4, encoder_widths=(5, 5),
                        projector_hidden=(6,), predictor_hidden=6)
    score = ScoreConfig(family, r=4, gamma=1.0 if family is Family.KERNEL else None)
    cfg = TrainConfig(batch_size=2, steps=1, score=score, model=model,
                      augment=AugmentConfig(n_local=2), seed=seed)
    pair = NetworkPair.create(model, seed=seed)
    rng = np.random.default_rng(seed + 100)
    pair.center = rng.normal(0.0, 0.1, model.embed_dim)
    views = rng.normal(0.0, 1.0, (2, cfg.n_views, model.input_dim))
    eps = rng.standard_normal((2 * cfg.n_views, 1, model.embed_dim))
    return cfg, pair, StepInputs(views, eps)


def check_end_to_end_gradients(seed: int = 0, h: float = 1e-5,
                               family: Family = Family.ENERGY) -> list[CheckResult]:
    """Tape gradients of the full loss in every online parameter against
    central differences on the frozen tiny problem."""
    from .train import loss_from_inputs

    cfg, pair, inputs = tiny_problem(seed, family)
    leaves = {k: nm.tensor(v, requires_grad=True) for k, v in pair.theta.items()}
    with nm.GradientTape() as tape:
        loss = loss_from_inputs(inputs, pair, cfg, leaves).loss
    grads = tape.backward(loss, list(leaves.values()))

    ok_all, worst_all = True, 0.0
    for key in sorted(pair.theta):
        base = pair.theta[key]

        def f(v, key=key):
            params = dict(pair.theta)
            params[key] = v
            return loss_from_inputs(inputs, pair, cfg, params).loss.item()

        fd = nm.finite_difference(f, base, h)
        ok, worst = grad_error(grads[leaves[key].id].data, fd)
        ok_all &= ok
        worst_all = max(worst_all, worst)
    n = sum(v.size for v in pair.theta.values())
    return [CheckResult(f"end-to-end grad vs finite differences ({family.value})", ok_all,
                        worst_all, GRAD_RTOL, f"{n} parameters")]


def run_all(quick: bool = False, seed: int = 0) -> list[tuple[str, list[CheckResult], float]]:
    """Every check group with its wall time in seconds."""
    # propriety keeps full size in quick mode: the smallest shift needs it
    n_unb = 2_000 if quick else 10_000
    groups = [
        ("propriety", lambda: check_propriety(seed=seed)),
        ("unbiasedness", lambda: check_unbiasedness(n=n_unb, seed=seed)),
        ("closed-form gradients", lambda: check_closed_form_gradients(seed=seed)),
        ("end-to-end gradients", lambda: check_end_to_end_gradients(seed=seed)
         + check_end_to_end_gradients(seed=seed, family=Family.KERNEL)),
    ]
    out = []
    for name, fn in groups:
        t0 = time.perf_counter()
        rows = fn()
        out.append((name, rows, time.perf_counter() - t0))
    return out


__all__ = ["CheckResult", "gaussian_sampler", "propriety_grid", "check_propriety",
           "check_unbiasedness", "grad_error", "check_closed_form_gradients",
           "tiny_problem", "check_end_to_end_gradients", "run_all"]
