"""Command-line entry point: prepare data bundles, train, evaluate, analyze and sweep.

Every command writes into one output directory holding the resolved
experiment spec (with the tool version), a machine-readable metrics JSON
and any artifacts; a plain-text table of the headline numbers goes to
stdout. Exit codes: 0 success, 2 configuration error, 3 data error,
4 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .analysis import (
    cov_score,
    head_layer_sweep,
    load_features,
    pca_project,
    save_features,
    step_curves,
    support_sweep,
)
from .corpus import (
    ClassSplit,
    CorpusError,
    EncodedInstance,
    TokenSequence,
    Vocabulary,
    build_vocab,
    encode_corpus,
    load_dataset,
    load_split_spec,
    split_classes,
)
from .episode import EpisodeError
from .matchers import MATCHER_KINDS, CheckpointError, Matcher, TransformerConfig, load_params
from .metalearn import (
    DivergenceError,
    TaskData,
    TrainConfig,
    adapt_and_evaluate,
    classical_config,
    derive_seed,
    train,
    transformer_config,
)

log = logging.getLogger("fewmatch")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
DATA_ENV = "FEWMATCH_DATA"
BUNDLE_FILES = ("manifest.json", "split.json", "instances.jsonl", "vocab.txt", "vectors.npy")


class ConfigError(ValueError):
    """Invalid command-line arguments or experiment spec."""


# ---------------------------------------------------------------- helpers

def data_root() -> Path | None:
    root = os.environ.get(DATA_ENV)
    return Path(root) if root else None


def resolve_input(path, what: str) -> Path:
    """An existing input path, looked up under ``$FEWMATCH_DATA`` when relative and absent locally."""
    if path is None:
        raise ConfigError(f"no {what} given (pass it or set {DATA_ENV})")
    p = Path(path)
    if not p.exists() and not p.is_absolute() and data_root() is not None:
        p = data_root() / p
    if not p.exists():
        raise ConfigError(f"{what} not found: {path}")
    return p


def dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def format_table(rows: list[dict], columns: list[str]) -> str:
    def cell(v):
        if not isinstance(v, float):
            return str(v)
        return f"{v:.4e}" if v and abs(v) < 1e-3 else f"{v:.4f}"

    body = [[cell(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(columns)]
    line = lambda vals: "  ".join(v.rjust(w) for v, w in zip(vals, widths))
    return "\n".join([line(columns), line(["-" * w for w in widths])] + [line(b) for b in body])


def parse_list(text: str, kind=int) -> list:
    try:
        return [kind(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse list {text!r}") from None


def parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        k, v = pair.split("=", 1)
        try:
            out[k.strip()] = json.loads(v)
        except json.JSONDecodeError:
            out[k.strip()] = v
    return out


def prepare_output(path, spec: dict) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(out / "spec.json", {**spec, "version": __version__})
    return out


# ----------------------------------------------------------------- bundle

def write_bundle(out: Path, instances, vocab: Vocabulary, split: ClassSplit, max_len: int, inputs: dict) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out)
    dump_json(out / "split.json", split.to_dict())
    pool = encode_corpus(instances, vocab, max_len)
    with open(out / "instances.jsonl", "w", encoding="utf-8") as fh:
        for inst in sorted((i for items in pool.values() for i in items), key=lambda i: i.uid):
            rec = {"uid": inst.uid, "label": inst.label, "length": inst.seq.length,
                   "indices": inst.seq.indices[: inst.seq.length].tolist()}
            if inst.num_aspects is not None:
                rec["num_aspects"] = inst.num_aspects
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    manifest = {
        "format": "fewmatch-bundle", "version": __version__, "max_len": max_len,
        "vocab_size": len(vocab), "embed_dim": vocab.dim, "inputs": inputs,
        "classes": {c: len(pool[c]) for c in sorted(pool)},
        "unk_rate": float(np.mean([np.mean(i.seq.indices[: i.seq.length] == 1)
                                   for items in pool.values() for i in items])),
    }
    dump_json(out / "manifest.json", manifest)
    return manifest


def load_bundle(path) -> tuple[TaskData, Vocabulary, dict]:
    path = Path(path)
    missing = [f for f in BUNDLE_FILES if not (path / f).is_file()]
    if missing:
        raise CorpusError(f"{path} is not a data bundle (missing {', '.join(missing)})")
    manifest = json.loads((path / "manifest.json").read_text())
    vocab = Vocabulary.load(path)
    split = ClassSplit(**{k: tuple(v) for k, v in json.loads((path / "split.json").read_text()).items()})
    width = manifest["max_len"]
    pool: dict[str, list] = {}
    with open(path / "instances.jsonl", encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            idx = np.zeros(width, dtype=np.int64)
            idx[: rec["length"]] = rec["indices"]
            inst = EncodedInstance(rec["uid"], rec["label"], TokenSequence(idx, rec["length"]), rec.get("num_aspects"))
            pool.setdefault(rec["label"], []).append(inst)
    return TaskData(pool, split), vocab, manifest


# ------------------------------------------------------------------- spec

def matcher_from_spec(spec: dict, vocab: Vocabulary) -> Matcher:
    m = dict(spec)
    kind = m.pop("kind", None)
    if kind not in MATCHER_KINDS:
        raise ConfigError(f"invalid matcher {kind!r}; valid kinds: {', '.join(MATCHER_KINDS)}")
    tcfg = m.pop("transformer", None)
    stored_vocab = m.pop("vocab_size", None)
    if stored_vocab is not None and stored_vocab != len(vocab):
        raise ConfigError(f"spec expects a vocabulary of {stored_vocab} tokens, the bundle has {len(vocab)}")
    if kind == "transformer":
        tcfg = TransformerConfig(**(tcfg or {}))
    m.setdefault("embed_dim", vocab.dim)
    m.setdefault("hidden_dim", vocab.dim)
    m.setdefault("channels", vocab.dim)
    if "kernel_sizes" in m:
        m["kernel_sizes"] = tuple(m["kernel_sizes"])
    try:
        return Matcher(kind, vocab_size=len(vocab), transformer=tcfg if kind == "transformer" else None, **m)
    except TypeError as exc:
        raise ConfigError(f"bad matcher spec: {exc}") from None


def config_from_spec(kind: str, method: str, train_spec: dict, seed: int) -> TrainConfig:
    make = transformer_config if kind == "transformer" else classical_config
    try:
        return make(method, **{**train_spec, "seed": seed})
    except TypeError as exc:
        raise ConfigError(f"bad training spec: {exc}") from None


def load_spec(path) -> dict:
    if path is None:
        return {}
    try:
        spec = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read spec {path}: {exc}") from None
    if not isinstance(spec, dict):
        raise ConfigError("experiment spec must be a JSON object")
    return spec


def resolve_spec(args) -> dict:
    """Merge the spec file with command-line flags (flags win)."""
    spec = load_spec(getattr(args, "spec", None))
    spec.setdefault("matcher", {})
    spec.setdefault("train", {})
    if getattr(args, "data", None):
        spec["data"] = args.data
    spec.setdefault("data", str(data_root()) if data_root() else None)
    if getattr(args, "matcher", None):
        spec["matcher"]["kind"] = args.matcher
    if getattr(args, "method", None):
        spec["train"]["method"] = args.method
    arch = {"hidden_dim": "hidden", "channels": "channels", "dropout": "dropout"}
    for key, flag in arch.items():
        if getattr(args, flag, None) is not None:
            spec["matcher"][key] = getattr(args, flag)
    tr = {k: getattr(args, k) for k in ("layers", "heads", "d_model", "d_ff") if getattr(args, k, None) is not None}
    if tr:
        spec["matcher"].setdefault("transformer", {}).update(tr)
    flags = {"max_epochs": "epochs", "batch_size": "batch_size", "n": "n", "train_batches": "train_batches",
             "val_batches": "val_batches", "test_batches": "test_batches", "patience": "patience",
             "dtype": "dtype", "adapt_steps": "adapt_steps", "reference_mode": "reference_mode"}
    for key, flag in flags.items():
        if getattr(args, flag, None) is not None:
            spec["train"][key] = getattr(args, flag)
    if getattr(args, "first_order", False):
        spec["train"]["second_order"] = False
    spec["train"].update(parse_overrides(getattr(args, "set", None)))
    if args.seed is not None:
        spec["seed"] = args.seed
    spec.setdefault("seed", spec["train"].pop("seed", 0))
    spec["train"].pop("seed", None)
    if getattr(args, "out", None):
        spec["output"] = args.out
    return spec


def build_experiment(spec: dict):
    """Load the data bundle and build matcher and config; the data path must exist."""
    data, vocab, manifest = load_bundle(resolve_input(spec.get("data"), "data bundle"))
    matcher = matcher_from_spec(spec.get("matcher", {}), vocab)
    method = spec["train"].get("method", "maml")
    cfg = config_from_spec(matcher.kind, method, {k: v for k, v in spec["train"].items() if k != "method"},
                           int(spec["seed"]))
    return data, vocab, matcher, cfg


# --------------------------------------------------------------- commands

def cmd_prepare(args) -> int:
    corpus = resolve_input(args.corpus, "corpus")
    emb = resolve_input(args.embeddings, "embeddings file")
    split_arg = args.split
    if Path(split_arg).exists() or (data_root() and (data_root() / split_arg).exists()):
        split_spec = load_split_spec(resolve_input(split_arg, "split spec"))
    else:
        try:
            split_spec = json.loads(split_arg)
        except json.JSONDecodeError:
            raise ConfigError(f"--split is neither a file nor inline JSON: {split_arg!r}") from None
    if args.seed is not None and "ratio" in split_spec:
        split_spec = {**split_spec, "seed": args.seed}
    instances = load_dataset(corpus)
    split = split_classes(instances, split_spec)
    vocab = build_vocab(instances, emb, args.max_len, seed=args.seed or 0)
    inputs = {"corpus": {"name": corpus.name, "sha256": sha256(corpus)},
              "embeddings": {"name": emb.name, "sha256": sha256(emb)}, "split": split_spec}
    manifest = write_bundle(Path(args.out), instances, vocab, split, args.max_len, inputs)
    rows = [{"part": p, "classes": len(split.part(p)),
             "instances": sum(manifest["classes"][c] for c in split.part(p))} for p in ("train", "val", "test")]
    print(format_table(rows, ["part", "classes", "instances"]))
    print(f"vocabulary {manifest['vocab_size']} tokens, unk rate {manifest['unk_rate']:.4f}")
    return EXIT_OK


def cmd_train(args) -> int:
    spec = resolve_spec(args)
    if not spec.get("output"):
        raise ConfigError("no output directory (--out)")
    data, vocab, matcher, cfg = build_experiment(spec)
    spec["matcher"] = matcher.to_dict()
    spec["train"] = {k: v for k, v in cfg.to_dict().items() if k != "seed"}
    out = prepare_output(spec["output"], spec)
    params0 = matcher.init_params(derive_seed(cfg.seed, "init"), vocab.vectors, dtype=cfg.torch_dtype)
    result = train(matcher, params0, data, cfg, run_dir=out, resume=args.resume)
    metrics = {"best_val_macro_f1": result.best_score, "epochs": result.epochs, "history": result.history,
               "method": cfg.method, "matcher": matcher.kind}
    dump_json(out / "metrics.json", metrics)
    print(format_table(result.history, ["epoch", "train_loss", "val_macro_f1", "best_val_macro_f1"]))
    print(f"best validation macro-F1 {result.best_score:.4f} after {result.epochs} epochs; checkpoint {out / 'checkpoint.npz'}")
    return EXIT_OK


ADAPT_MODES = {"none": None, "finetune": "naive", "maml-init": "maml"}


def cmd_eval(args) -> int:
    ckpt = resolve_input(args.checkpoint, "checkpoint")
    if args.spec is None and (ckpt.parent / "spec.json").is_file():
        args.spec = str(ckpt.parent / "spec.json")
    spec = resolve_spec(args)
    if not args.out:
        raise ConfigError("no output directory (--out)")
    spec["output"] = args.out
    spec.pop("eval", None)
    params, stored, meta = load_params(ckpt)
    if spec.get("matcher", {}).get("kind") not in (None, stored.kind):
        raise CheckpointError(f"checkpoint holds a {stored.kind} matcher, spec asks for {spec['matcher']['kind']}")
    spec["matcher"] = stored.to_dict()
    data, vocab, matcher, cfg = build_experiment(spec)
    if matcher != stored:
        raise CheckpointError("checkpoint architecture does not match the data bundle")
    trained_by = meta.get("method")
    if args.adapt is None:
        args.adapt = "finetune" if trained_by == "naive" else "maml-init"
    wanted = ADAPT_MODES[args.adapt]
    steps = 0 if args.adapt == "none" else (args.steps if args.steps is not None else cfg.adapt_steps)
    if args.adapt == "none" and args.steps not in (None, 0):
        raise ConfigError("--adapt none scores without the support set; it cannot take --steps > 0")
    if wanted is not None and trained_by is not None and trained_by != wanted:
        raise ConfigError(f"--adapt {args.adapt} needs a {wanted}-trained checkpoint, got {trained_by}")
    if args.batches is not None:
        cfg = cfg.replace(test_batches=args.batches)
    spec["train"] = {k: v for k, v in cfg.to_dict().items() if k != "seed"}
    spec["eval"] = {"checkpoint": str(ckpt), "checkpoint_sha256": sha256(ckpt), "adapt": args.adapt,
                    "steps": steps, "runs": args.runs, "dump_features": args.dump_features,
                    "checkpoint_method": trained_by}
    out = prepare_output(spec["output"], spec)

    runs = []
    first = None
    for r in range(args.runs):
        run_cfg = cfg.replace(seed=cfg.seed + r)
        res = adapt_and_evaluate(matcher, params, data.stream("test", run_cfg), run_cfg, steps,
                                 collect_features=args.dump_features and r == 0)
        if first is None:
            first = res
        runs.append({"run": r, "seed": run_cfg.seed, **{k: res.final[k] for k in ("accuracy", "macro_f1", "loss")}})
    metrics = {"adapt": args.adapt, "steps": steps, "runs": runs, "curves": step_curves(first),
               "per_step": first.steps, "checkpoint_method": trained_by}
    for key in ("accuracy", "macro_f1"):
        vals = np.array([r[key] for r in runs])
        metrics[key] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0}
    if args.dump_features:
        save_features(out / "features.csv", first.features[steps].T, first.meta, first.logits[steps])
        metrics["features"] = {"path": "features.csv", "rows": int(first.features[steps].shape[0]),
                               "dims": int(first.features[steps].shape[1]), "step": steps}
    dump_json(out / "metrics.json", metrics)
    print(format_table(first.steps, ["step", "loss", "accuracy", "macro_f1"]))
    print(f"macro-F1 {metrics['macro_f1']['mean']:.4f} ± {metrics['macro_f1']['std']:.4f}, "
          f"accuracy {metrics['accuracy']['mean']:.4f} ± {metrics['accuracy']['std']:.4f} over {args.runs} run(s)")
    return EXIT_OK


def _metrics_file(path) -> dict:
    p = resolve_input(path, "metrics")
    if p.is_dir():
        p = p / "metrics.json"
    try:
        return json.loads(p.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorpusError(f"cannot read metrics {p}: {exc}") from None


def _features(path) -> np.ndarray:
    try:
        return load_features(resolve_input(path, "feature file"))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise CorpusError(str(exc)) from None


def cmd_analyze(args) -> int:
    out = Path(args.out) if args.out else None
    if out:
        prepare_output(out, {"command": f"analyze {args.mode}", "input": str(args.input),
                             "seed": args.seed if args.seed is not None else 0})
    if args.mode == "cov":
        F = _features(args.input)
        score = cov_score(F, offdiag_only=args.offdiag)
        report = {"cov_score": score, "dims": F.shape[0], "samples": F.shape[1], "offdiag_only": args.offdiag}
        print(format_table([report], ["cov_score", "dims", "samples", "offdiag_only"]))
    elif args.mode == "pca":
        F = _features(args.input)
        res = pca_project(F, args.k)
        report = {"k": args.k, "explained_variance": res.explained_variance.tolist(),
                  "total_variance": float(np.trace(np.cov(F))) if F.shape[1] > 1 else 0.0}
        if out:
            with open(out / "pca_scores.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow([f"s{i}" for i in range(res.scores.shape[1])])
                w.writerows([[repr(float(x)) for x in row] for row in res.scores])
            with open(out / "pca_basis.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow([f"f{i}" for i in range(res.components.shape[1])])
                w.writerows([[repr(float(x)) for x in row] for row in res.components])
        print(format_table([{"component": i, "variance": float(v)} for i, v in enumerate(res.explained_variance)],
                           ["component", "variance"]))
    elif args.mode == "curves":
        metrics = _metrics_file(args.input)
        if "curves" not in metrics:
            raise CorpusError(f"{args.input}: no per-step curves (is it an eval output?)")
        report = {"curves": metrics["curves"]}
        if out:
            with open(out / "curves.csv", "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=["step", "loss", "accuracy", "episodes"])
                w.writeheader()
                w.writerows(metrics["curves"])
        print(format_table(metrics["curves"], ["step", "loss", "accuracy", "episodes"]))
    else:
        metrics = _metrics_file(args.input)
        keys = [k for k in ("accuracy", "macro_f1") if isinstance(metrics.get(k), dict)]
        if not keys:
            raise CorpusError(f"{args.input}: no summary metrics")
        report = {k: metrics[k] for k in keys}
        print(format_table([{"metric": k, **metrics[k]} for k in keys], ["metric", "mean", "std"]))
    if out:
        dump_json(out / "metrics.json", report)
    return EXIT_OK


def cmd_sweep(args) -> int:
    spec = resolve_spec(args)
    if not spec.get("output"):
        raise ConfigError("no output directory (--out)")
    seeds = parse_list(args.seeds)
    if args.axis in ("heads", "layers"):
        spec["matcher"]["kind"] = "transformer"
        spec["train"].setdefault("method", "maml")
    data, vocab, matcher, cfg = build_experiment(spec)
    spec["matcher"] = matcher.to_dict()
    spec["train"] = {k: v for k, v in cfg.to_dict().items() if k != "seed"}
    spec["sweep"] = {"axis": args.axis, "seeds": seeds}
    if args.axis in ("heads", "layers"):
        heads = parse_list(args.heads_list) if args.heads_list else [matcher.transformer.heads]
        layers = parse_list(args.layers_list) if args.layers_list else [matcher.transformer.layers]
        spec["sweep"].update(heads=heads, layers=layers, batches=args.batches)
        out = prepare_output(spec["output"], spec)
        result = head_layer_sweep(matcher, data, cfg, heads, layers, seeds, batches=args.batches,
                                  embeddings=vocab.vectors,
                                  progress=lambda r: log.info("layers=%s heads=%s seed=%s cov=%.5f", r["layers"],
                                                              r["heads"], r["seed"], r["value"]))
        keys = ["layers", "heads"]
    else:
        sizes = parse_list(args.sizes)
        spec["sweep"].update(sizes=sizes)
        out = prepare_output(spec["output"], spec)
        result = support_sweep(matcher, data, cfg, sizes, seeds, embeddings=vocab.vectors, n_query=cfg.n)
        keys = ["support"]
    result.to_csv(out / "sweep.csv")
    summary = result.summary(keys)
    dump_json(out / "metrics.json", {"axis": args.axis, "metric": result.metric, "records": result.records,
                                     "summary": summary})
    print(format_table(summary, keys + ["mean", "std", "n"]))
    return EXIT_OK


# ----------------------------------------------------------------- parser

def _add_experiment_flags(p, grid=False):
    p.add_argument("--spec", help="experiment spec JSON; command-line flags override its fields")
    p.add_argument("--data", help=f"prepared data bundle directory (default: ${DATA_ENV})")
    p.add_argument("--out", help="output directory")
    p.add_argument("--matcher", choices=MATCHER_KINDS, help="matcher kind")
    p.add_argument("--method", choices=("naive", "maml"), help="training regime")
    g = p.add_argument_group("architecture")
    g.add_argument("--hidden", type=int, help="gate hidden size (default: embedding size)")
    g.add_argument("--channels", type=int, help="CNN channels per kernel width")
    g.add_argument("--dropout", type=float)
    if grid:
        g.add_argument("--layers", dest="layers_list", help="comma-separated transformer layer counts")
        g.add_argument("--heads", dest="heads_list", help="comma-separated transformer head counts")
    else:
        g.add_argument("--layers", type=int, help="transformer layers")
        g.add_argument("--heads", type=int, help="transformer attention heads")
    g.add_argument("--d-model", dest="d_model", type=int)
    g.add_argument("--d-ff", dest="d_ff", type=int)
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, help="maximum epochs")
    g.add_argument("--batch-size", dest="batch_size", type=int, help="meta-tasks per batch (|C_p|)")
    g.add_argument("--n", type=int, help="support and query size N")
    g.add_argument("--train-batches", dest="train_batches", type=int)
    g.add_argument("--val-batches", dest="val_batches", type=int)
    g.add_argument("--test-batches", dest="test_batches", type=int)
    g.add_argument("--patience", type=int)
    g.add_argument("--adapt-steps", dest="adapt_steps", type=int)
    g.add_argument("--reference-mode", dest="reference_mode", choices=("any", "single_aspect", "multi_aspect"))
    g.add_argument("--dtype", choices=("float32", "float64"))
    g.add_argument("--first-order", dest="first_order", action="store_true", help="first-order MAML")
    g.add_argument("--set", action="append", metavar="KEY=VALUE", help="any training-config field (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fewmatch", description=__doc__.split("\n\n")[0],
                                     formatter_class=argparse.RawDescriptionHelpFormatter,
                                     epilog=f"Relative input paths are also looked up under ${DATA_ENV}.\n"
                                            "Exit codes: 0 ok, 2 config error, 3 data error, 4 divergence.")
    parser.add_argument("--seed", type=int, default=None, help="master seed for every random choice (default 0)")
    parser.add_argument("--version", action="version", version=f"fewmatch {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="encode a corpus into a data bundle")
    p.add_argument("--corpus", required=True, help="JSONL corpus with text and label fields")
    p.add_argument("--embeddings", required=True, help="GloVe-format text vectors")
    p.add_argument("--split", required=True, help='split spec file or inline JSON, e.g. \'{"ratio": [64,16,20]}\'')
    p.add_argument("--max-len", dest="max_len", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a matcher (naive or MAML)")
    _add_experiment_flags(p)
    p.add_argument("--resume", action="store_true", help="continue from the state in --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="test-time adaptation and scoring of a checkpoint")
    _add_experiment_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--adapt", choices=tuple(ADAPT_MODES),
                   help="none: no support set; finetune / maml-init: adapt a naive / MAML checkpoint "
                        "(default: whichever matches the checkpoint)")
    p.add_argument("--steps", type=int, help="adaptation steps (default: config adapt_steps)")
    p.add_argument("--runs", type=int, default=1, help="independent test streams, reported as mean ± std")
    p.add_argument("--batches", type=int, help="test batches per run")
    p.add_argument("--dump-features", dest="dump_features", action="store_true",
                   help="write query features of the first run to features.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="Cov_Score, PCA, step curves or metric tables")
    p.add_argument("mode", choices=("cov", "pca", "curves", "metrics"))
    p.add_argument("input", help="feature CSV (cov, pca) or eval output directory / metrics.json")
    p.add_argument("--k", type=int, default=2, help="PCA components")
    p.add_argument("--offdiag", action="store_true", help="Cov_Score over off-diagonal entries only")
    p.add_argument("--out", help="directory for the report and tables")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep", help="Cov_Score over heads/layers or F1 over support sizes")
    p.add_argument("axis", choices=("heads", "layers", "support"))
    _add_experiment_flags(p, grid=True)
    p.add_argument("--sizes", default="1,5,10", help="support sizes")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--batches", type=int, default=12, help="test batches for feature extraction")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.use_deterministic_algorithms(True)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"fewmatch: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CorpusError, EpisodeError) as exc:
        print(f"fewmatch: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"fewmatch: numerical divergence: {exc}; last finite loss {exc.last_finite_loss}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        print(f"fewmatch: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
