"""Optimiser, metrics, the training loop and checkpoints."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .attention import DropContext, Encoder
from .config import ExperimentConfig
from .data import (
    LabelMap,
    SyntheticSplits,
    Vocab,
    corpus_tokens,
    iterate_batches,
    label_names,
    load_dataset,
    synth_shortcut_dataset,
)
from .errors import ConfigError
from .heads import Classifier, EntailmentModel, Tagger
from .tensor import NonFiniteError, Tape, Tensor

log = logging.getLogger(__name__)

CHECKPOINT_MANIFEST = "checkpoint.json"
CHECKPOINT_BLOB = "checkpoint.bin"
CHECKPOINT_FORMAT = "dropattention-checkpoint/1"


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, config_text: str = ""):
        super().__init__(message + ("\nconfig:\n" + config_text if config_text else ""))
        self.config_text = config_text


# ---------------------------------------------------------------- optimiser


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: OptimState):
    """Bias-corrected adaptive-moment update, applied to ``params`` in place.

    ``params`` maps names to tensors, ``grads`` maps the same names to arrays
    or tensors.  All gradients are checked before any parameter moves.
    """
    garr = {}
    for name, p in params.items():
        g = grads[name]
        g = g.data if isinstance(g, Tensor) else np.asarray(g)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
        garr[name] = g
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = garr[name].astype(p.dtype, copy=False)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)
    return params, state


# ------------------------------------------------------------------ metrics


def accuracy(pred, gold, mask=None) -> float:
    pred, gold = np.asarray(pred), np.asarray(gold)
    if pred.shape != gold.shape:
        raise ValueError(f"prediction shape {pred.shape} != gold shape {gold.shape}")
    hit = pred == gold
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        return float(hit[mask].mean()) if mask.any() else 0.0
    return float(hit.mean()) if hit.size else 0.0


def _check_tag(tag: str) -> None:
    if tag != "O" and not (len(tag) > 2 and tag[:2] in ("B-", "I-")):
        raise ValueError(f"not a BIO tag: {tag!r}")


def bio_spans(tags) -> set:
    """Set of ``(type, start, end)`` spans, end inclusive.

    An ``I-X`` that does not continue an ``X`` span opens a new one.
    """
    spans = set()
    start, kind = None, None
    for i, tag in enumerate(list(tags) + ["O"]):
        if i < len(tags):
            _check_tag(tag)
        if tag == "O" or tag.startswith("B-") or (tag.startswith("I-") and tag[2:] != kind):
            if kind is not None:
                spans.add((kind, start, i - 1))
            start, kind = (i, tag[2:]) if tag != "O" else (None, None)
    return spans


def span_f1(pred, gold) -> tuple[float, float, float]:
    """Exact-match span precision, recall and F1 for BIO sequences.

    Accepts one tag sequence or a list of sentences.  With nothing to find
    and nothing predicted the score is a perfect 1.0; otherwise an empty
    denominator yields 0.
    """
    if pred and isinstance(pred[0], str):
        pred, gold = [pred], [gold]
    if len(pred) != len(gold):
        raise ValueError(f"{len(pred)} predicted sentences vs {len(gold)} gold")
    tp = n_pred = n_gold = 0
    for p, g in zip(pred, gold):
        if len(p) != len(g):
            raise ValueError(f"sentence length mismatch: {len(p)} predicted vs {len(g)} gold tags")
        ps, gs = bio_spans(p), bio_spans(g)
        tp += len(ps & gs)
        n_pred += len(ps)
        n_gold += len(gs)
    if n_pred == 0 and n_gold == 0:
        return 1.0, 1.0, 1.0
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def is_bio(names) -> bool:
    names = list(names)
    return any(n.startswith("B-") for n in names) and all(n == "O" or n[:2] in ("B-", "I-") for n in names)


# --------------------------------------------------------------- experiment


@dataclass
class Splits:
    train: list
    dev: list
    test: list


def prepare_data(cfg: ExperimentConfig) -> Splits:
    d = cfg.data
    if d.synthetic:
        s: SyntheticSplits = synth_shortcut_dataset(d.n_train, d.length, d.vocab_size, d.reliability, cfg.seed,
                                                    n_dev=d.n_dev, n_test=d.n_test, k=d.k)
        return Splits(s.train, s.dev, s.test)
    train = load_dataset(cfg.task, d.train)
    test = load_dataset(cfg.task, d.test) if d.test else []
    if d.dev:
        dev = load_dataset(cfg.task, d.dev)
    else:
        # hold out a seeded tenth of train
        order = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(3,))).permutation(len(train))
        cut = max(1, len(train) // 10) if len(train) > 1 else 0
        dev = [train[i] for i in sorted(order[:cut])]
        train = [train[i] for i in sorted(order[cut:])]
    if not train:
        raise ConfigError("training set is empty", "data.train")
    return Splits(train, dev, test)


def build_model(cfg: ExperimentConfig, vocab_size: int, n_labels: int, dtype=np.float32):
    m = cfg.model
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0,)))
    enc = Encoder(vocab_size, m.d, m.d_ff, m.heads, m.layers, m.max_len, rng, dtype)
    if cfg.task == "cls":
        return Classifier(enc, n_labels, rng, m.pooling, dtype)
    if cfg.task == "tag":
        return Tagger(enc, n_labels, rng, dtype)
    return EntailmentModel(enc, n_labels, rng, m.hidden or None, m.pooling, dtype)


def uses_cls_token(cfg: ExperimentConfig) -> bool:
    return cfg.task in ("cls", "nli") and cfg.model.pooling == "first"


@dataclass
class Experiment:
    """Everything needed to run the model on new examples."""

    cfg: ExperimentConfig
    model: object
    vocab: Vocab
    labels: LabelMap

    def batches(self, examples, shuffle_rng=None):
        return iterate_batches(self.cfg.task, examples, self.vocab, self.labels, self.cfg.optim.batch_size,
                               shuffle_rng, self.cfg.model.max_len, uses_cls_token(self.cfg))

    def evaluate(self, examples) -> float:
        """Accuracy (cls, nli, non-BIO tagging) or span F1 (BIO tagging), inference mode."""
        if not examples:
            return float("nan")
        ctx = DropContext(training=False)
        if self.cfg.task != "tag":
            hits = 0
            for b in self.batches(examples):
                hits += int((self.model.predict(b, ctx) == b.labels).sum())
            return hits / len(examples)
        use_f1 = is_bio(self.labels.names)
        preds, golds, hits, total = [], [], 0, 0
        for b in self.batches(examples):
            p = self.model.predict(b, ctx)
            hits += int(((p == b.labels) & b.mask).sum())
            total += int(b.mask.sum())
            for i in range(len(b)):
                n = int(b.mask[i].sum())
                preds.append([self.labels.names[j] for j in p[i, :n]])
                golds.append([self.labels.names[j] for j in b.labels[i, :n]])
        return span_f1(preds, golds)[2] if use_f1 else hits / max(total, 1)

    def metric_name(self) -> str:
        return "f1" if self.cfg.task == "tag" and is_bio(self.labels.names) else "accuracy"


def new_experiment(cfg: ExperimentConfig, splits: Splits, dtype=np.float32) -> Experiment:
    vocab = Vocab.build(corpus_tokens(cfg.task, splits.train), cfg.data.max_vocab, cfg.data.min_freq)
    labels = LabelMap(label_names(cfg.task, splits.train + splits.dev + splits.test))
    if len(labels) < 2 and cfg.task != "tag":
        raise ConfigError("need at least two distinct labels", "data.train")
    return Experiment(cfg, build_model(cfg, len(vocab), len(labels), dtype), vocab, labels)


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    wall_times: list = field(default_factory=list)
    best_epoch: int = 0
    config_text: str = ""
    seed: int = 0

    @property
    def best(self) -> dict:
        return self.records[self.best_epoch - 1]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


def _round(x: float) -> float:
    return float(f"{x:.6g}") if np.isfinite(x) else x


def train(cfg: ExperimentConfig, splits: Optional[Splits] = None, experiment: Optional[Experiment] = None):
    """Train with early stopping on the dev metric.

    Returns ``(report, experiment)``: the experiment holds the best-dev
    parameters.  Metrics are always measured in inference mode.
    """
    cfg.validate()
    splits = splits or prepare_data(cfg)
    exp = experiment or new_experiment(cfg, splits)
    params = exp.model.named()
    o = cfg.optim
    state = OptimState(o.lr, o.beta1, o.beta2, o.eps)
    drop_spec = cfg.drop.spec() if cfg.drop.p > 0 else None
    drop_layers = cfg.drop.layer_set()
    report = TrainReport(config_text=cfg.to_text(), seed=cfg.seed)
    best_metric, best_params, stale = -np.inf, None, 0

    for epoch in range(1, o.epochs + 1):
        t0 = time.perf_counter()
        shuffle = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1, epoch)))
        loss_sum, seen = 0.0, 0
        for step, batch in enumerate(exp.batches(splits.train, shuffle)):
            ctx = DropContext(training=True, drop=drop_spec, dropout=cfg.drop.dropout,
                              seed=np.random.SeedSequence(cfg.seed, spawn_key=(2, epoch, step)),
                              drop_layers=drop_layers)
            try:
                with Tape() as tape:
                    loss = exp.model.loss(batch, ctx)
                if not np.isfinite(loss.item()):
                    raise NonFiniteError("loss is not finite")
                grads = tape.backward(loss, wrt=params.values())
                adam_step(params, {k: grads[p.node_id] for k, p in params.items()}, state)
            except (NonFiniteError, NonFiniteGradient) as exc:
                raise TrainingDiverged(f"epoch {epoch} step {step}: {exc}", report.config_text) from exc
            loss_sum += loss.item() * len(batch)
            seen += len(batch)
        train_metric = exp.evaluate(splits.train)
        dev_metric = exp.evaluate(splits.dev) if splits.dev else train_metric
        record = {
            "epoch": epoch,
            "seed": cfg.seed,
            "metric": exp.metric_name(),
            "train_loss": _round(loss_sum / max(seen, 1)),
            "train_metric": _round(train_metric),
            "dev_metric": _round(dev_metric),
            "overfit_gap": _round(train_metric - dev_metric),
        }
        if splits.test:
            test_metric = exp.evaluate(splits.test)
            record["test_metric"] = _round(test_metric)
            record["test_gap"] = _round(train_metric - test_metric)
        report.records.append(record)
        report.wall_times.append(time.perf_counter() - t0)
        log.info("epoch %d %s", epoch, record)
        if dev_metric > best_metric:
            best_metric, stale = dev_metric, 0
            report.best_epoch = epoch
            best_params = {k: p.data.copy() for k, p in params.items()}
        else:
            stale += 1
            if stale >= o.patience:
                break
    for k, p in params.items():
        p.data = best_params[k]
    return report, exp


# -------------------------------------------------------------- checkpoints


def save_checkpoint(out_dir, exp: Experiment) -> Path:
    """Write ``checkpoint.json`` (manifest) and ``checkpoint.bin`` (little-endian float32)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, t in exp.model.named().items():
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "dtype": "float32", "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    (out / CHECKPOINT_BLOB).write_bytes(b"".join(chunks))
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": exp.cfg.to_text(),
        "vocab": exp.vocab.to_list(),
        "labels": exp.labels.names,
        "tensors": entries,
    }
    path = out / CHECKPOINT_MANIFEST
    path.write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path, overrides: Optional[dict] = None) -> Experiment:
    """Rebuild an :class:`Experiment` from a checkpoint directory or manifest path."""
    path = Path(path)
    manifest_path = path / CHECKPOINT_MANIFEST if path.is_dir() else path
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        blob = (manifest_path.parent / CHECKPOINT_BLOB).read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read checkpoint: {exc}", "checkpoint") from None
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"unsupported checkpoint format {manifest.get('format')!r}", "checkpoint")
    cfg = ExperimentConfig.from_text(manifest["config"], overrides)
    vocab = Vocab(manifest["vocab"])
    labels = LabelMap(manifest["labels"])
    model = build_model(cfg, len(vocab), len(labels))
    params = model.named()
    stored = {e["name"]: e for e in manifest["tensors"]}
    if set(stored) != set(params):
        raise ConfigError("checkpoint parameters do not match the configured model", "checkpoint")
    for name, t in params.items():
        e = stored[name]
        if tuple(e["shape"]) != t.shape:
            raise ConfigError(f"parameter {name} has shape {tuple(e['shape'])} in the checkpoint, "
                              f"model expects {t.shape}", "checkpoint")
        arr = np.frombuffer(blob, dtype="<f4", count=int(np.prod(e["shape"])), offset=e["offset"])
        t.data = arr.reshape(e["shape"]).astype(np.float32)
    return Experiment(cfg, model, vocab, labels)
