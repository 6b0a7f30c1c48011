"""Training regimes: naive episodic training, MAML, and test-time adaptation.

Parameters live in plain ``{name: tensor}`` dicts. Training updates the leaf
tensors in place through ``torch.optim``; adaptation works on detached
clones so the initialization is never touched.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

from .analysis import classification_metrics
from .corpus import ClassSplit, EncodedInstance
from .episode import Episode, EpisodeBatch, episode_stream
from .matchers import Matcher, Params, SeqBatch, episode_loss, episode_tensors, load_params, save_params
from .matchers.models import concat_batches

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class DivergenceError(RuntimeError):
    """A loss or gradient became non-finite."""

    def __init__(self, message, last_finite_loss=None):
        super().__init__(message)
        self.last_finite_loss = last_finite_loss


@dataclass
class TrainConfig:
    method: str = "maml"
    inner_rate: float = 0.1
    outer_rate: float = 1e-3
    inner_steps: int = 1
    second_order: bool = True
    batch_size: int = 5
    n: int = 10
    train_batches: int = 400
    val_batches: int = 300
    test_batches: int = 300
    patience: int = 3
    max_epochs: int = 30
    adapt_steps: int = 3
    adapt_optimizer: str = "sgd"
    adapt_rate: float = 0.1
    val_adapt_steps: int | None = None
    n_negative_classes: int | None = None
    reference_mode: str = "any"
    stratify: bool = True
    grad_clip: float | None = None
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("naive", "maml"):
            raise ValueError(f"method must be 'naive' or 'maml', got {self.method!r}")
        if self.inner_rate < 0 or self.outer_rate <= 0:
            raise ValueError("learning rates must be positive")
        if self.patience < 1 or self.adapt_steps < 0:
            raise ValueError("patience must be >= 1 and adapt_steps >= 0")
        if self.adapt_optimizer not in ("sgd", "adam"):
            raise ValueError("adapt_optimizer must be 'sgd' or 'adam'")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")

    @property
    def torch_dtype(self):
        return DTYPES[self.dtype]

    @property
    def validation_steps(self) -> int:
        if self.val_adapt_steps is not None:
            return self.val_adapt_steps
        return self.adapt_steps if self.method == "maml" else 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown TrainConfig field(s): {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})


def classical_config(method: str, **overrides) -> TrainConfig:
    """Settings used for the BiCA/CA/SN/OWP matchers."""
    base = dict(method=method, inner_rate=0.1, outer_rate=1e-3, adapt_optimizer="sgd", adapt_rate=0.1,
                adapt_steps=3)
    return TrainConfig(**{**base, **overrides})


def transformer_config(method: str, **overrides) -> TrainConfig:
    """Settings used for transformer matchers: plain training runs 5 epochs."""
    base = dict(method=method, inner_rate=2e-3, outer_rate=2e-5, adapt_optimizer="adam",
                adapt_rate=2e-5, adapt_steps=3)
    if method == "naive":
        base.update(max_epochs=5, patience=5)
    base.update(overrides)
    return TrainConfig(**base)


def derive_seed(seed: int, purpose: str) -> int:
    """Independent sub-seed for one purpose ("init", "train", "val", "test", ...)."""
    tag = [ord(c) for c in purpose]
    return int(np.random.SeedSequence([int(seed), *tag]).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def episode_generator(episode: Episode, salt: int = 0) -> torch.Generator:
    return torch.Generator().manual_seed((episode.seed + salt) % (2**63 - 1))


@dataclass
class TaskData:
    """Encoded instances grouped by class, plus the class split."""

    pool: Mapping[str, Sequence[EncodedInstance]]
    split: ClassSplit

    def stream(self, part: str, config: TrainConfig, epoch: int = 0, batches: int | None = None,
               n_support: int | None = None, n_query: int | None = None) -> Iterable[EpisodeBatch]:
        count = {"train": config.train_batches, "val": config.val_batches, "test": config.test_batches}[part]
        return episode_stream(
            self.pool, self.split.part(part), count if batches is None else batches,
            master_seed=derive_seed(config.seed, part), epoch=epoch,
            batch_size=config.batch_size, n=config.n, reference_mode=config.reference_mode,
            n_negative_classes=config.n_negative_classes, stratify=config.stratify,
            n_support=n_support, n_query=n_query,
        )


def clone_params(params: Params, requires_grad: bool = True) -> Params:
    return {k: v.detach().clone().requires_grad_(requires_grad) for k, v in params.items()}


def cast_params(params: Params, dtype) -> Params:
    return {k: v.detach().to(dtype).requires_grad_(True) for k, v in params.items()}


def _check_finite(value: torch.Tensor, what: str, last=None):
    if not torch.isfinite(value).all():
        raise DivergenceError(f"non-finite {what}", last)


def inner_adapt(loss_fn: Callable[[Params], torch.Tensor], params: Params, alpha: float, steps: int = 1,
                second_order: bool = True) -> Params:
    """Plain gradient descent ``theta' = theta - alpha * grad`` repeated ``steps`` times.

    With ``second_order`` the returned tensors keep their autograd history,
    so a loss at ``theta'`` differentiates through the update. Otherwise the
    gradients are detached, which is the first-order approximation.
    """
    names = list(params)
    current = dict(params)
    for _ in range(steps):
        loss = loss_fn(current)
        _check_finite(loss, "inner loss")
        grads = torch.autograd.grad(loss, [current[k] for k in names], create_graph=second_order,
                                    allow_unused=True)
        nxt = {}
        for k, g in zip(names, grads):
            if g is None:
                nxt[k] = current[k]
                continue
            _check_finite(g, f"inner gradient of {k}")
            nxt[k] = current[k] - alpha * (g if second_order else g.detach())
        current = nxt
    return current


def support_loss_fn(matcher: Matcher, et, generator=None, training=True):
    def loss(p):
        return episode_loss(matcher, p, et.reference, et.support, et.support_labels, training, generator)
    return loss


def query_positives(matcher: Matcher, et, use_support: bool):
    return et.support_positives if (use_support and matcher.kind == "owp") else None


def maml_batch_loss(matcher: Matcher, params: Params, batch: EpisodeBatch, config: TrainConfig,
                    training: bool = True) -> torch.Tensor:
    """Sum over the batch's episodes of the query loss at the adapted parameters."""
    total = 0.0
    for ep in batch:
        et = episode_tensors(ep)
        gen = episode_generator(ep) if training else None
        adapted = inner_adapt(support_loss_fn(matcher, et, gen, training), params, config.inner_rate,
                              config.inner_steps, config.second_order)
        total = total + episode_loss(matcher, adapted, et.reference, et.query, et.query_labels, training, gen,
                                     query_positives(matcher, et, True))
    return total


def naive_batch_loss(matcher: Matcher, params: Params, batch: EpisodeBatch, training: bool = True) -> torch.Tensor:
    """Sum over episodes of one cross-entropy over support and query together."""
    total = 0.0
    for ep in batch:
        et = episode_tensors(ep)
        both = concat_batches(et.support, et.query) if et.support is not None else et.query
        labels = torch.cat([et.support_labels, et.query_labels])
        gen = episode_generator(ep) if training else None
        total = total + episode_loss(matcher, params, et.reference, both, labels, training, gen)
    return total


@dataclass
class TrainState:
    params: Params
    epoch: int = 0
    best_score: float = -math.inf
    since_improvement: int = 0
    best_params: Params | None = None
    history: list = field(default_factory=list)


@dataclass
class TrainResult:
    params: Params
    best_score: float
    epochs: int
    history: list


def _write_jsonl(path, record):
    if path is None:
        return
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def train(matcher: Matcher, params0: Params, data: TaskData, config: TrainConfig, run_dir: str | Path | None = None,
          resume: bool = False, validate: Callable | None = None) -> TrainResult:
    """Episodic training with early stopping on validation macro-F1.

    One Adam step per batch on the summed batch loss: the joint support+query
    loss for ``naive``, the post-adaptation query loss for ``maml``. Training
    ends when validation macro-F1 has not improved for ``patience`` epochs or
    after ``max_epochs``; the best-scoring parameters are returned.

    With ``run_dir`` set, the best checkpoint, a resumable state and a JSONL
    metrics log are written there after every epoch.
    """
    torch.manual_seed(derive_seed(config.seed, "torch"))
    run_dir = Path(run_dir) if run_dir is not None else None
    metrics_path = None
    params = cast_params(params0, config.torch_dtype)
    opt = torch.optim.Adam(params.values(), lr=config.outer_rate, betas=(0.9, 0.999), eps=1e-8)
    state = TrainState(params)
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = run_dir / "metrics.jsonl"
        if resume and (run_dir / "state.json").exists():
            state = _load_state(run_dir, matcher, params, opt)
        elif metrics_path.exists():
            metrics_path.unlink()
    validate = validate or (lambda p: evaluate(matcher, p, data.stream("val", config), config,
                                               config.validation_steps))
    last_loss = None
    while state.epoch < config.max_epochs and state.since_improvement < config.patience:
        losses = []
        for batch in data.stream("train", config, epoch=state.epoch):
            opt.zero_grad()
            if config.method == "maml":
                loss = maml_batch_loss(matcher, params, batch, config)
            else:
                loss = naive_batch_loss(matcher, params, batch)
            _check_finite(loss, "training loss", last_loss)
            loss.backward()
            for k, v in params.items():
                if v.grad is not None and not torch.isfinite(v.grad).all():
                    raise DivergenceError(f"non-finite gradient of {k}", last_loss)
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(params.values(), config.grad_clip)
            opt.step()
            last_loss = loss.item()
            losses.append(last_loss)
        score = validate(params)
        val_f1 = score["macro_f1"] if isinstance(score, dict) else float(score)
        state.epoch += 1
        if val_f1 > state.best_score:
            state.best_score, state.since_improvement = val_f1, 0
            state.best_params = clone_params(params, requires_grad=False)
        else:
            state.since_improvement += 1
        rec = {"epoch": state.epoch, "train_loss": float(np.mean(losses)) if losses else None,
               "val_macro_f1": val_f1, "best_val_macro_f1": state.best_score,
               "method": config.method, "second_order": config.second_order}
        if isinstance(score, dict) and "accuracy" in score:
            rec["val_accuracy"] = score["accuracy"]
        state.history.append(rec)
        log.info("epoch %d loss %.4f val F1 %.4f", state.epoch, rec["train_loss"] or float("nan"), val_f1)
        _write_jsonl(metrics_path, rec)
        if run_dir is not None:
            _save_state(run_dir, matcher, state, opt, config)
    best = state.best_params if state.best_params is not None else clone_params(params, requires_grad=False)
    return TrainResult(best, state.best_score, state.epoch, state.history)


def naive_train(matcher, params0, data, config, **kw) -> TrainResult:
    if config.method != "naive":
        raise ValueError("naive_train needs method='naive'")
    return train(matcher, params0, data, config, **kw)


def maml_train(matcher, params0, data, config, **kw) -> TrainResult:
    if config.method != "maml":
        raise ValueError("maml_train needs method='maml'")
    return train(matcher, params0, data, config, **kw)


def _save_state(run_dir: Path, matcher, state: TrainState, opt, config):
    meta = {"epoch": state.epoch, "best_val_macro_f1": state.best_score, "method": config.method,
            "second_order": config.second_order}
    save_params(run_dir / "checkpoint.npz", state.best_params, matcher, meta)
    save_params(run_dir / "last.npz", state.params, matcher, meta)
    torch.save(opt.state_dict(), run_dir / "optimizer.pt")
    (run_dir / "state.json").write_text(json.dumps(
        {"epoch": state.epoch, "best_score": state.best_score, "since_improvement": state.since_improvement,
         "history": state.history, "config": config.to_dict()}, indent=2, sort_keys=True))


def _load_state(run_dir: Path, matcher, params, opt) -> TrainState:
    meta = json.loads((run_dir / "state.json").read_text())
    last, _, _ = load_params(run_dir / "last.npz", matcher)
    best, _, _ = load_params(run_dir / "checkpoint.npz", matcher)
    with torch.no_grad():
        for k in params:
            params[k].copy_(last[k])
    opt.load_state_dict(torch.load(run_dir / "optimizer.pt"))
    best = {k: v.to(params[k].dtype) for k, v in best.items()}
    return TrainState(params, meta["epoch"], meta["best_score"], meta["since_improvement"], best, meta["history"])


@dataclass
class EvalResult:
    """Per-step query metrics of test-time adaptation.

    ``steps[s]`` averages over all test episodes after ``s`` adaptation
    steps (step 0 is the unadapted initialization): mean query loss, and
    accuracy/macro-F1 computed per batch then averaged over batches.
    ``episodes`` holds one record per (batch, episode, step). Query
    features, logits and labels are kept for the first and last step when
    requested.
    """

    steps: list
    episodes: list
    features: dict = field(default_factory=dict)
    logits: dict = field(default_factory=dict)
    labels: np.ndarray | None = None
    meta: list = field(default_factory=list)

    @property
    def final(self) -> dict:
        return self.steps[-1]


def _make_optimizer(name, params, rate):
    if name == "sgd":
        return torch.optim.SGD(params, lr=rate)
    return torch.optim.Adam(params, lr=rate)


def adapt_episode(matcher: Matcher, params: Params, episode: Episode, steps: int, optimizer: str, rate: float,
                  collect: bool = False):
    """Adapt a private copy of ``params`` on the support set and score the query set after every step.

    Returns a list with one dict per step 0..steps holding ``loss``,
    ``predictions`` and, with ``collect``, ``logits`` and ``features``.
    """
    et = episode_tensors(episode)
    theta = clone_params(params)
    opt = _make_optimizer(optimizer, theta.values(), rate) if steps else None
    gen = episode_generator(episode, salt=1)
    use_support = steps > 0
    out = []

    def score():
        with torch.no_grad():
            o = matcher.forward(theta, et.reference, et.query, False, None, query_positives(matcher, et, use_support))
            loss = torch.nn.functional.cross_entropy(o.logits, et.query_labels)
        rec = {"loss": float(loss), "predictions": o.logits.argmax(-1).numpy()}
        if collect:
            rec["logits"] = o.logits.numpy()
            rec["features"] = o.features.numpy()
        return rec

    out.append(score())
    for _ in range(steps):
        if et.support is None:
            raise ValueError("cannot adapt on an empty support set")
        opt.zero_grad()
        loss = support_loss_fn(matcher, et, gen, training=True)(theta)
        _check_finite(loss, "adaptation loss")
        loss.backward()
        opt.step()
        out.append(score())
    return out


def adapt_and_evaluate(matcher: Matcher, params: Params, batches: Iterable[EpisodeBatch], config: TrainConfig,
                       steps: int | None = None, collect_features: bool = False) -> EvalResult:
    """Test-time protocol: each episode adapts its own copy of the initialization.

    Adaptation uses ``config.adapt_optimizer`` at ``config.adapt_rate`` for
    ``steps`` (default ``config.adapt_steps``) updates on the support loss;
    the query set is scored before the first update and after each one.
    """
    steps = config.adapt_steps if steps is None else steps
    params = cast_params(params, config.torch_dtype)
    batch_metrics = [[] for _ in range(steps + 1)]
    losses = [[] for _ in range(steps + 1)]
    episodes, feats, logits, labels, meta = [], {}, {}, [], []
    keep = (0, steps) if collect_features else ()
    for b, batch in enumerate(batches):
        preds = [[] for _ in range(steps + 1)]
        ys = []
        for e, ep in enumerate(batch):
            recs = adapt_episode(matcher, params, ep, steps, config.adapt_optimizer, config.adapt_rate,
                                 collect_features)
            y = np.array([lab for _, lab in ep.query])
            ys.append(y)
            for s, r in enumerate(recs):
                preds[s].append(r["predictions"])
                losses[s].append(r["loss"])
                acc = float(np.mean(r["predictions"] == y))
                episodes.append({"batch": b, "episode": e, "step": s, "loss": r["loss"], "accuracy": acc,
                                 "positive_class": ep.positive_class})
                if s in keep:
                    feats.setdefault(s, []).append(r["features"])
                    logits.setdefault(s, []).append(r["logits"])
            if collect_features:
                labels.append(y)
                meta.extend({"batch": b, "episode": e, "reference": ep.reference.uid, "instance": inst.uid,
                             "label": lab} for inst, lab in ep.query)
        y_all = np.concatenate(ys)
        for s in range(steps + 1):
            batch_metrics[s].append(classification_metrics(np.concatenate(preds[s]), y_all))
    summary = []
    for s in range(steps + 1):
        rows = batch_metrics[s]
        summary.append({
            "step": s,
            "loss": float(np.mean(losses[s])) if losses[s] else float("nan"),
            "accuracy": float(np.mean([r["accuracy"] for r in rows])) if rows else float("nan"),
            "macro_f1": float(np.mean([r["macro_f1"] for r in rows])) if rows else float("nan"),
        })
    result = EvalResult(summary, episodes, meta=meta)
    if collect_features:
        result.features = {s: np.concatenate(v) for s, v in feats.items()}
        result.logits = {s: np.concatenate(v) for s, v in logits.items()}
        result.labels = np.concatenate(labels) if labels else np.zeros(0, dtype=int)
    return result


def evaluate(matcher, params, batches, config, steps=None) -> dict:
    """Final-step accuracy and macro-F1 of :func:`adapt_and_evaluate`."""
    res = adapt_and_evaluate(matcher, params, batches, config, steps)
    return {"accuracy": res.final["accuracy"], "macro_f1": res.final["macro_f1"], "loss": res.final["loss"]}


def fit(matcher: Matcher, data: TaskData, config: TrainConfig, embeddings=None, run_dir=None) -> TrainResult:
    """Initialize from ``config.seed`` and train with the configured method."""
    params0 = matcher.init_params(derive_seed(config.seed, "init"), embeddings, dtype=config.torch_dtype)
    return train(matcher, params0, data, config, run_dir=run_dir)


def run_experiment(matcher: Matcher, data: TaskData, config: TrainConfig, n_runs: int = 5, embeddings=None,
                   steps: int | None = None, seeds: Sequence[int] | None = None) -> dict:
    """Train and test ``n_runs`` times with independent seeds; mean and sample std of the test metrics.

    Run ``i`` uses seed ``config.seed + i`` unless ``seeds`` is given.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    seeds = list(seeds) if seeds is not None else [config.seed + i for i in range(n_runs)]
    runs = []
    for s in seeds[:n_runs]:
        cfg = config.replace(seed=s)
        trained = fit(matcher, data, cfg, embeddings)
        res = adapt_and_evaluate(matcher, trained.params, data.stream("test", cfg), cfg, steps)
        runs.append({"seed": s, "accuracy": res.final["accuracy"], "macro_f1": res.final["macro_f1"],
                     "epochs": trained.epochs, "best_val_macro_f1": trained.best_score})
    out = {"runs": runs}
    for key in ("accuracy", "macro_f1"):
        vals = np.array([r[key] for r in runs])
        out[key] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0}
    return out
