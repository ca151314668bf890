"""Frozen-representation evaluation: kNN, linear probe, calibration,
OOD scoring, collapse diagnostics and a noise-corruption harness."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import rankdata

from . import numeric as nm
from .model import NetworkPair, encode, online_forward
from .numeric import ContractError
from .optim import AdamW, OptimizerState
from .scoring import ConfigError

NLL_CLAMP = 1e-12


@dataclass
class EmbeddingSet:
    embeddings: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.embeddings = np.atleast_2d(np.asarray(self.embeddings, dtype=np.float64))
        if not np.all(np.isfinite(self.embeddings)):
            raise nm.NumericError("embeddings must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.embeddings),):
                raise ContractError("need exactly one label per embedding")

    def __len__(self) -> int:
        return len(self.embeddings)


@dataclass
class ProbeResult:
    accuracy: float
    nll: float
    ece: float
    reliability: list[dict] = field(default_factory=list)
    probe: LinearProbe | None = None

    def as_dict(self) -> dict:
        return {"accuracy": self.accuracy, "nll": self.nll, "ece": self.ece,
                "reliability": self.reliability}


def embed(pair: NetworkPair, x) -> np.ndarray:
    """Frozen online backbone features f_θ(x)."""
    return encode(np.asarray(x, dtype=np.float64), pair.theta, pair.config).data.copy()


# ---------------------------------------------------------------------------
# kNN


def _cosine_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    def unit(m):
        n = np.linalg.norm(m, axis=1, keepdims=True)
        return np.divide(m, n, out=np.zeros_like(m), where=n > 0)

    return 1.0 - unit(a) @ unit(b).T


def knn_predict(train: EmbeddingSet, queries, k: int = 5) -> np.ndarray:
    """Cosine-distance majority vote for every query row.

    Ties between labels go to the smallest summed distance, then the
    smallest label.
    """
    if train.labels is None:
        raise ContractError("kNN needs a labelled training set")
    if not 1 <= k <= len(train):
        raise ContractError(f"k={k} outside [1, {len(train)}]")
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    dist = _cosine_distances(q, train.embeddings)
    nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
    out = np.empty(len(q), dtype=np.int64)
    for i, idx in enumerate(nearest):
        labels, d = train.labels[idx], dist[i, idx]
        cands = np.unique(labels)
        votes = np.array([np.sum(labels == c) for c in cands])
        summed = np.array([d[labels == c].sum() for c in cands])
        # lexsort: last key is primary
        order = np.lexsort((cands, summed, -votes))
        out[i] = cands[order[0]]
    return out


def knn_classify(train: EmbeddingSet, query, k: int = 5) -> int:
    return int(knn_predict(train, np.asarray(query)[None, :], k)[0])


def knn_accuracy(train: EmbeddingSet, test: EmbeddingSet, k: int = 5) -> float:
    return float(np.mean(knn_predict(train, test.embeddings, k) == test.labels))


# ---------------------------------------------------------------------------
# calibration metrics


def ece(confidences, correct, bins: int = 15, *, return_table: bool = False):
    """Expected calibration error over equal-width bins on [0, 1]."""
    if bins < 1:
        raise ConfigError("need at least one bin")
    conf = np.asarray(confidences, dtype=np.float64)
    hit = np.asarray(correct, dtype=bool)
    if conf.size == 0:
        raise ContractError("no predictions")
    if np.any((conf < 0) | (conf > 1)):
        raise ContractError("confidences must lie in [0, 1]")
    idx = np.clip(np.ceil(conf * bins).astype(int) - 1, 0, bins - 1)
    total = 0.0
    table = []
    for b in range(bins):
        sel = idx == b
        n_b = int(sel.sum())
        row = {"lower": b / bins, "upper": (b + 1) / bins, "count": n_b,
               "accuracy": None, "confidence": None}
        if n_b:
            acc_b, conf_b = float(hit[sel].mean()), float(conf[sel].mean())
            total += n_b / conf.size * abs(acc_b - conf_b)
            row.update(accuracy=acc_b, confidence=conf_b)
        table.append(row)
    return (total, table) if return_table else total


def nll(p_true) -> float:
    """Mean negative log probability of the true class."""
    p = np.asarray(p_true, dtype=np.float64)
    if np.any(p < 0) or np.any(p > 1):
        raise ContractError("probabilities must lie in [0, 1]")
    if np.any(p < NLL_CLAMP):
        warnings.warn("probabilities below 1e-12 were clamped", RuntimeWarning, stacklevel=2)
        p = np.maximum(p, NLL_CLAMP)
    return float(-np.mean(np.log(p)))


def auroc(scores_pos, scores_neg) -> float:
    """Mann–Whitney estimate of P(pos > neg) + ½ P(pos = neg)."""
    pos = np.asarray(scores_pos, dtype=np.float64).ravel()
    neg = np.asarray(scores_neg, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ContractError("both score sets must be nonempty")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


# ---------------------------------------------------------------------------
# linear probe


@dataclass
class LinearProbe:
    """Softmax regression on standardised frozen features."""

    classes: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    weight: np.ndarray
    bias: np.ndarray

    @classmethod
    def fit(cls, train: EmbeddingSet, epochs: int = 300, lr: float = 0.05,
            seed: int = 0) -> LinearProbe:
        if train.labels is None:
            raise ContractError("linear probe needs labels")
        x = train.embeddings
        classes = np.unique(train.labels)
        y = np.searchsorted(classes, train.labels)
        mean = x.mean(axis=0)
        scale = x.std(axis=0)
        scale = np.where(scale > 1e-12, scale, 1.0)
        xs = nm.constant((x - mean) / scale)
        rng = np.random.default_rng(seed)
        k, c = x.shape[1], len(classes)
        params = {"w": 0.01 * rng.standard_normal((k, c)), "b": np.zeros(c)}
        opt, state = AdamW(), OptimizerState()
        for _ in range(epochs):
            w = nm.tensor(params["w"], requires_grad=True)
            b = nm.tensor(params["b"], requires_grad=True)
            with nm.GradientTape() as tape:
                logp = nm.log_softmax(nm.add(nm.matmul(xs, w), b))
                loss = nm.neg(nm.mean(nm.pick(logp, y)))
            g = tape.backward(loss, [w, b])
            params = opt.step(params, {"w": g[w.id].data, "b": g[b.id].data}, state, lr, 0.0)
        return cls(classes, mean, scale, params["w"], params["b"])

    def predict_proba(self, x) -> np.ndarray:
        z = ((np.atleast_2d(x) - self.mean) / self.scale) @ self.weight + self.bias
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, x) -> np.ndarray:
        return self.classes[np.argmax(self.predict_proba(x), axis=1)]

    def evaluate(self, test: EmbeddingSet, bins: int = 15) -> ProbeResult:
        if test.labels is None:
            raise ContractError("evaluation needs labels")
        missing = np.setdiff1d(test.labels, self.classes)
        if missing.size:
            raise ContractError(f"test classes {missing.tolist()} absent from training")
        proba = self.predict_proba(test.embeddings)
        y = np.searchsorted(self.classes, test.labels)
        pred = np.argmax(proba, axis=1)
        conf = proba.max(axis=1)
        correct = pred == y
        e, table = ece(conf, correct, bins, return_table=True)
        return ProbeResult(float(correct.mean()), nll(proba[np.arange(len(y)), y]),
                           float(e), table, self)


def linear_probe(train: EmbeddingSet, test: EmbeddingSet, epochs: int = 300,
                 lr: float = 0.05, bins: int = 15, seed: int = 0) -> ProbeResult:
    if test.labels is None or train.labels is None:
        raise ContractError("linear probe needs labelled train and test sets")
    if train.embeddings.shape[1] != test.embeddings.shape[1]:
        raise nm.DimensionError("train and test embeddings differ in width")
    missing = np.setdiff1d(test.labels, train.labels)
    if missing.size:
        raise ContractError(f"test classes {missing.tolist()} absent from training")
    probe = LinearProbe.fit(train, epochs, lr, seed)
    return probe.evaluate(test, bins)


# ---------------------------------------------------------------------------
# OOD and collapse diagnostics


def ood_scores(pair: NetworkPair, x, train: EmbeddingSet | None = None,
               method: str = "sigma", m: int = 5) -> np.ndarray:
    """Per-row OOD score, higher meaning more out-of-distribution.

    ``"sigma"``: mean predicted standard deviation of the online head.
    ``"distance"``: mean Euclidean distance from the backbone embedding to
    its ``m`` nearest training embeddings.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if method == "sigma":
        return online_forward(x, pair).sigma.data.mean(axis=1)
    if method == "distance":
        if train is None:
            raise ContractError("distance score needs training embeddings")
        d = cdist(embed(pair, x), train.embeddings)
        m = min(m, d.shape[1])
        return np.sort(d, axis=1)[:, :m].mean(axis=1)
    raise ConfigError(f"unknown OOD method {method!r}")


def ood_score(pair: NetworkPair, x, train: EmbeddingSet | None = None,
              method: str = "sigma", m: int = 5) -> float:
    return float(ood_scores(pair, np.asarray(x)[None, :], train, method, m)[0])


def effective_rank(embeddings, center: bool = True) -> float:
    """exp of the Shannon entropy of the normalised singular values."""
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] < 2:
        raise ContractError("effective rank needs at least two rows")
    if center:
        e = e - e.mean(axis=0)
    s = np.linalg.svd(e, compute_uv=False)
    total = s.sum()
    if total <= 1e-12 * max(1.0, np.abs(e).max()):
        return 1.0
    p = s / total
    p = p[p > 0]
    return float(np.exp(-np.sum(p * np.log(p))))


# ---------------------------------------------------------------------------
# corruption harness


def corruption_eval(pair: NetworkPair, probe: LinearProbe, x_test, y_test,
                    severities=(0.0, 0.25, 0.5, 1.0, 2.0), *, data_std: float | None = None,
                    baseline: dict | None = None, seed: int = 0) -> dict:
    """Probe accuracy under additive Gaussian noise of std ``severity * data_std``.

    One noise draw is shared across severities so the corruption is
    monotone in severity.  ``area`` is the mean accuracy over the severity
    grid (trapezoid rule); with a ``baseline`` report the ratio of areas
    is returned as ``relative_area``.
    """
    x = np.asarray(x_test, dtype=np.float64)
    y = np.asarray(y_test)
    std = float(x.std()) if data_std is None else float(data_std)
    noise = np.random.default_rng(seed).standard_normal(x.shape)
    sev = [float(s) for s in severities]
    acc = []
    for s in sev:
        feats = embed(pair, x + (s * std) * noise)
        acc.append(float(np.mean(probe.predict(feats) == y)))
    if len(sev) > 1 and sev[-1] > sev[0]:
        area = float(np.trapezoid(acc, sev) / (sev[-1] - sev[0]))
    else:
        area = acc[0]
    report = {"severities": sev, "accuracy": acc, "area": area}
    if baseline is not None and baseline.get("area"):
        report["relative_area"] = area / baseline["area"]
    return report
