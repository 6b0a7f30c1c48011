"""Diagnostics over extracted features and evaluation runs.

Feature matrices follow the dims x samples convention: one column per query
instance, one row per feature dimension.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


def _as_matrix(F) -> np.ndarray:
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2:
        raise ValueError(f"feature matrix must be 2-D, got shape {F.shape}")
    if not np.all(np.isfinite(F)):
        raise ValueError("feature matrix has non-finite entries")
    return F


def covariance(F) -> np.ndarray:
    """dims x dims sample covariance (denominator samples - 1) of a dims x samples matrix."""
    F = _as_matrix(F)
    if F.shape[1] < 2:
        raise ValueError("covariance needs at least 2 samples")
    X = F - F.mean(axis=1, keepdims=True)
    return X @ X.T / (F.shape[1] - 1)


def cov_score(F, offdiag_only: bool = False) -> float:
    """Mean absolute entry of the feature covariance matrix.

    Each dimension is centered by its mean over samples before the
    covariance is taken. The diagonal is included unless ``offdiag_only``.
    """
    F = _as_matrix(F)
    C = np.abs(covariance(F - F.mean(axis=1, keepdims=True)))
    if offdiag_only:
        d = C.shape[0]
        if d < 2:
            return 0.0
        return float((C.sum() - np.trace(C)) / (d * d - d))
    return float(C.mean())


@dataclass
class PCAResult:
    components: np.ndarray  # k x dims, orthonormal rows
    explained_variance: np.ndarray  # k
    scores: np.ndarray  # k x samples
    mean: np.ndarray  # dims


def pca_project(F, k: int = 2) -> PCAResult:
    """Project centered samples on the top-``k`` eigenvectors of the sample covariance.

    Components are sorted by non-increasing variance. Each component's sign
    is fixed so that its largest-magnitude entry is positive (the first one
    on ties).
    """
    F = _as_matrix(F)
    dims, n = F.shape
    if k < 1 or k > min(dims, n):
        raise ValueError(f"k={k} must lie in [1, {min(dims, n)}]")
    mean = F.mean(axis=1)
    X = F - mean[:, None]
    evals, evecs = np.linalg.eigh(covariance(F))
    order = np.argsort(-evals, kind="stable")[:k]
    comps = evecs[:, order].T
    for row in comps:
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            row *= -1
    return PCAResult(comps, np.clip(evals[order], 0.0, None), comps @ X, mean)


def classification_metrics(predictions, labels) -> dict:
    """Accuracy and macro-F1 over the two labels {0, 1}.

    A label with no true and no predicted instances scores F1 = 0.
    """
    p = np.asarray(predictions).astype(int).ravel()
    y = np.asarray(labels).astype(int).ravel()
    if p.size == 0 or p.size != y.size:
        raise ValueError("predictions and labels must be non-empty and of equal length")
    if not set(np.unique(y)) <= {0, 1} or not set(np.unique(p)) <= {0, 1}:
        raise ValueError("labels and predictions must be binary")
    f1s = []
    for c in (0, 1):
        tp = np.sum((p == c) & (y == c))
        fp = np.sum((p == c) & (y != c))
        fn = np.sum((p != c) & (y == c))
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 0.0)
    return {"accuracy": float(np.mean(p == y)), "macro_f1": float(np.mean(f1s))}


def step_curves(result) -> list[dict]:
    """Per-step mean query loss and accuracy over all test episodes.

    Accepts an ``EvalResult`` or its list of per-episode records.
    """
    records = result.episodes if hasattr(result, "episodes") else result
    by_step: dict[int, list] = {}
    for r in records:
        by_step.setdefault(r["step"], []).append(r)
    steps = sorted(by_step)
    if steps != list(range(len(steps))):
        raise ValueError(f"step records must cover 0..K contiguously, got {steps}")
    return [{"step": s,
             "loss": float(np.mean([r["loss"] for r in by_step[s]])),
             "accuracy": float(np.mean([r["accuracy"] for r in by_step[s]])),
             "episodes": len(by_step[s])} for s in steps]


@dataclass
class SweepResult:
    axis: str
    metric: str
    records: list = field(default_factory=list)  # {"axis values"..., "seed", "value"}

    def add(self, value: float, seed: int, **axes):
        self.records.append({**axes, "seed": seed, "value": float(value)})

    def summary(self, keys: Sequence[str] | None = None) -> list[dict]:
        """Mean and sample std of the metric for each axis cell."""
        keys = list(keys) if keys is not None else [k for k in self.records[0] if k not in ("seed", "value")]
        cells: dict[tuple, list] = {}
        for r in self.records:
            cells.setdefault(tuple(r[k] for k in keys), []).append(r["value"])
        out = []
        for cell, vals in cells.items():
            v = np.array(vals)
            out.append({**dict(zip(keys, cell)), "mean": float(v.mean()),
                        "std": float(v.std(ddof=1)) if len(v) > 1 else 0.0, "n": len(v)})
        return out

    def mean(self, **cell) -> float:
        vals = [r["value"] for r in self.records if all(r[k] == v for k, v in cell.items())]
        if not vals:
            raise KeyError(f"no records for {cell}")
        return float(np.mean(vals))

    def to_csv(self, path) -> None:
        if not self.records:
            raise ValueError("empty sweep")
        cols = list(self.records[0])
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            w.writerows(self.records)


def query_features(matcher, params, data, config, batches: int = 12, step: int | None = None):
    """Pre-output-layer features of every query instance in ``batches`` test batches.

    With the default 5 meta-tasks of 10 queries per batch, 12 batches give
    600 feature columns. Returns ``(F, EvalResult)`` where ``F`` is dims x
    samples taken after ``step`` adaptation steps (default: the last).
    """
    from .metalearn import adapt_and_evaluate

    res = adapt_and_evaluate(matcher, params, data.stream("test", config, batches=batches), config,
                             collect_features=True)
    s = config.adapt_steps if step is None else step
    return res.features[s].T, res


def head_layer_sweep(base_matcher, data, config, heads: Sequence[int], layers: Sequence[int],
                     seeds: Sequence[int], batches: int = 12, embeddings=None, step: int | None = None,
                     progress=None) -> SweepResult:
    """Cov_Score of MAML-trained mini-transformers over a (layers, heads) grid."""
    from dataclasses import replace

    from .metalearn import fit

    base = base_matcher.transformer
    for h in heads:
        if base.d_model % h:
            raise ValueError(f"heads={h} does not divide d_model={base.d_model}")
    out = SweepResult(axis="layers,heads", metric="cov_score")
    for n_layers in layers:
        for h in heads:
            m = replace(base_matcher, transformer=replace(base, layers=n_layers, heads=h))
            for seed in seeds:
                cfg = config.replace(seed=seed)
                trained = fit(m, data, cfg, embeddings)
                F, _ = query_features(m, trained.params, data, cfg, batches, step)
                out.add(cov_score(F), seed, layers=n_layers, heads=h)
                if progress:
                    progress(out.records[-1])
    return out


def support_sweep(matcher, data, config, sizes: Sequence[int], seeds: Sequence[int], params_by_seed=None,
                  embeddings=None, n_query: int = 10) -> SweepResult:
    """Query macro-F1 as a function of support-set size, query size fixed.

    ``params_by_seed`` maps a seed to already-trained parameters; missing
    seeds are trained with ``config``.
    """
    from .metalearn import adapt_and_evaluate, fit

    if any(s < 1 for s in sizes):
        raise ValueError("support sizes must be >= 1")
    out = SweepResult(axis="support", metric="macro_f1")
    params_by_seed = dict(params_by_seed or {})
    for seed in seeds:
        cfg = config.replace(seed=seed)
        if seed not in params_by_seed:
            params_by_seed[seed] = fit(matcher, data, cfg, embeddings).params
        for size in sizes:
            stream = data.stream("test", cfg, n_support=size, n_query=n_query)
            res = adapt_and_evaluate(matcher, params_by_seed[seed], stream, cfg)
            out.add(res.final["macro_f1"], seed, support=size)
    return out


def save_features(path_csv, F, meta: Sequence[dict] | None = None, logits=None) -> None:
    """Write samples as CSV rows (one column per dimension) plus a JSONL sidecar."""
    F = _as_matrix(F)
    with open(path_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(F.shape[0])])
        for col in F.T:
            w.writerow([repr(float(x)) for x in col])
    if meta is not None:
        side = Path(path_csv).with_suffix(".jsonl")
        with open(side, "w", encoding="utf-8") as fh:
            for i, rec in enumerate(meta):
                rec = dict(rec)
                if logits is not None:
                    rec["logits"] = [float(x) for x in logits[i]]
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_features(path_csv) -> np.ndarray:
    """Read a feature CSV back as a dims x samples matrix."""
    try:
        with open(path_csv, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ValueError(f"cannot read {path_csv}: {exc}") from None
    if len(rows) < 2:
        raise ValueError(f"{path_csv}: no feature rows")
    width = len(rows[0])
    try:
        data = np.array([[float(x) for x in r] for r in rows[1:]])
    except ValueError:
        raise ValueError(f"{path_csv}: non-numeric feature entry") from None
    if data.ndim != 2 or data.shape[1] != width:
        raise ValueError(f"{path_csv}: ragged rows")
    return _as_matrix(data.T)
