"""Vocabulary, file loaders, batching and the synthetic shortcut task."""

from __future__ import annotations

import collections
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError

PAD, UNK, CLS = 0, 1, 2
RESERVED = ("<pad>", "<unk>", "<cls>")
MAX_LEN = 128


class DataFormatError(ValueError):
    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = str(path)
        self.lineno = lineno


def tokenize(text: str) -> list[str]:
    return text.lower().split()


@dataclass(frozen=True)
class ClassificationExample:
    tokens: tuple
    label: str


@dataclass(frozen=True)
class TaggingExample:
    tokens: tuple
    tags: tuple

    def __post_init__(self):
        if len(self.tokens) != len(self.tags):
            raise ValueError("tagging example needs one tag per token")


@dataclass(frozen=True)
class PairExample:
    premise: tuple
    hypothesis: tuple
    label: str


class Vocab:
    """Token/id map with ``<pad>``=0, ``<unk>``=1 and ``<cls>``=2 reserved.

    Ids are assigned by descending frequency, ties broken lexicographically,
    so the same corpus and settings always give the same map.
    """

    def __init__(self, tokens: Sequence[str]):
        self.itos = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    @classmethod
    def build(cls, corpus: Iterable[Sequence[str]], max_size: Optional[int] = None, min_freq: int = 1) -> "Vocab":
        counts = collections.Counter(tok for sent in corpus for tok in sent)
        ranked = sorted((t for t, c in counts.items() if c >= min_freq and t not in RESERVED),
                        key=lambda t: (-counts[t], t))
        if max_size is not None:
            ranked = ranked[: max(0, max_size - len(RESERVED))]
        return cls(ranked)

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def to_list(self) -> list[str]:
        return list(self.itos[len(RESERVED):])


class LabelMap:
    """Sorted label strings to contiguous ids."""

    def __init__(self, labels: Iterable[str]):
        self.names = sorted(set(labels))
        self.index = {n: i for i, n in enumerate(self.names)}

    def __len__(self) -> int:
        return len(self.names)

    def encode(self, label: str) -> int:
        try:
            return self.index[label]
        except KeyError:
            raise ValueError(f"unknown label {label!r}") from None


# ------------------------------------------------------------------ loaders


def _lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            yield lineno, line.rstrip("\n").rstrip("\r")


def load_tsv_classification(path) -> list[ClassificationExample]:
    """``text<TAB>label`` per line; blank lines are skipped."""
    out = []
    for lineno, line in _lines(path):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 2 or not fields[1].strip():
            raise DataFormatError(path, lineno, f"expected 'text<TAB>label', found {len(fields)} field(s)")
        out.append(ClassificationExample(tuple(tokenize(fields[0])), fields[1].strip()))
    return out


def load_pair_tsv(path) -> list[PairExample]:
    """``premise<TAB>hypothesis<TAB>label`` per line."""
    out = []
    for lineno, line in _lines(path):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3 or not fields[2].strip():
            raise DataFormatError(path, lineno, f"expected 'premise<TAB>hypothesis<TAB>label', found {len(fields)} field(s)")
        out.append(PairExample(tuple(tokenize(fields[0])), tuple(tokenize(fields[1])), fields[2].strip()))
    return out


def load_conll(path) -> list[TaggingExample]:
    """Whitespace-separated ``token ... tag`` lines, blank line between sentences.

    The first column is the token and the last column the tag, so four-column
    CoNLL-2003 files load with their NER tags.  ``-DOCSTART-`` lines are ignored.
    """
    out, toks, tags = [], [], []

    def flush():
        if toks:
            out.append(TaggingExample(tuple(toks), tuple(tags)))
            toks.clear()
            tags.clear()

    for lineno, line in _lines(path):
        fields = line.split()
        if not fields:
            flush()
            continue
        if fields[0] == "-DOCSTART-":
            continue
        if len(fields) < 2:
            raise DataFormatError(path, lineno, f"tag missing for token {fields[0]!r}")
        toks.append(fields[0].lower())
        tags.append(fields[-1])
    flush()
    return out


def write_tsv_classification(path, examples: Iterable[ClassificationExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(" ".join(ex.tokens) + "\t" + ex.label + "\n")


def write_pair_tsv(path, examples: Iterable[PairExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(" ".join(ex.premise) + "\t" + " ".join(ex.hypothesis) + "\t" + ex.label + "\n")


def write_conll(path, examples: Iterable[TaggingExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            for tok, tag in zip(ex.tokens, ex.tags):
                fh.write(f"{tok} {tag}\n")
            fh.write("\n")


def load_dataset(task: str, path) -> list:
    loaders = {"cls": load_tsv_classification, "tag": load_conll, "nli": load_pair_tsv}
    try:
        return loaders[task](Path(path))
    except KeyError:
        raise ConfigError(f"unknown task {task!r}", "task") from None


# ------------------------------------------------------------------ batching


@dataclass
class Batch:
    ids: np.ndarray            # (B, l) int64
    mask: np.ndarray           # (B, l) bool, True on real tokens
    labels: np.ndarray         # (B,) or (B, l) int64
    ids2: Optional[np.ndarray] = None
    mask2: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.ids.shape[0]


def _pad(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(1, max(len(s) for s in seqs))
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def _ids(vocab: Vocab, tokens, max_len: int, cls_token: bool) -> list[int]:
    ids = vocab.encode(tokens)
    if cls_token:
        ids = [CLS] + ids
    if not ids:
        ids = [UNK]
    return ids[:max_len]


def make_batch(task: str, examples: Sequence, vocab: Vocab, labels: LabelMap, max_len: int = MAX_LEN,
               cls_token: bool = False) -> Batch:
    if task == "cls":
        ids, mask = _pad([_ids(vocab, ex.tokens, max_len, cls_token) for ex in examples])
        y = np.array([labels.encode(ex.label) for ex in examples], dtype=np.int64)
        return Batch(ids, mask, y)
    if task == "tag":
        ids, mask = _pad([_ids(vocab, ex.tokens, max_len, False) for ex in examples])
        y = np.zeros(ids.shape, dtype=np.int64)
        for i, ex in enumerate(examples):
            tags = [labels.encode(t) for t in ex.tags[:max_len]]
            y[i, : len(tags)] = tags
        return Batch(ids, mask, y)
    if task == "nli":
        ids, mask = _pad([_ids(vocab, ex.premise, max_len, cls_token) for ex in examples])
        ids2, mask2 = _pad([_ids(vocab, ex.hypothesis, max_len, cls_token) for ex in examples])
        y = np.array([labels.encode(ex.label) for ex in examples], dtype=np.int64)
        return Batch(ids, mask, y, ids2, mask2)
    raise ConfigError(f"unknown task {task!r}", "task")


def iterate_batches(task: str, examples: Sequence, vocab: Vocab, labels: LabelMap, batch_size: int,
                    rng: Optional[np.random.Generator] = None, max_len: int = MAX_LEN, cls_token: bool = False):
    """Yield batches in order, or in a permutation drawn from ``rng``."""
    order = np.arange(len(examples)) if rng is None else rng.permutation(len(examples))
    for start in range(0, len(examples), batch_size):
        chunk = [examples[i] for i in order[start:start + batch_size]]
        yield make_batch(task, chunk, vocab, labels, max_len, cls_token)


def corpus_tokens(task: str, examples: Sequence) -> Iterable[Sequence[str]]:
    for ex in examples:
        if task == "nli":
            yield ex.premise
            yield ex.hypothesis
        else:
            yield ex.tokens


def label_names(task: str, examples: Sequence) -> Iterable[str]:
    for ex in examples:
        if task == "tag":
            yield from ex.tags
        else:
            yield ex.label


# ------------------------------------------------------------- synthetic task


@dataclass(frozen=True)
class SyntheticSplits:
    train: list
    dev: list
    test: list


def synth_vocab(vocab_size: int) -> tuple[list[str], list[str], list[str], list[str]]:
    """Split ``vocab_size`` token names into shortcut pair, two signal pools and filler."""
    if vocab_size < 12:
        raise ConfigError(f"synthetic vocabulary needs at least 12 tokens, got {vocab_size}", "data.vocab_size")
    pool = max(4, (vocab_size - 2) // 4)
    shortcut = ["sc_neg", "sc_pos"]
    neg = [f"neg{i}" for i in range(pool)]
    pos = [f"pos{i}" for i in range(pool)]
    filler = [f"w{i}" for i in range(vocab_size - 2 - 2 * pool)]
    return shortcut, neg, pos, filler


def _synth_one(rng, y: int, l: int, k: int, reliability: float, parts) -> ClassificationExample:
    shortcut, neg, pos, filler = parts
    pools = (neg, pos)
    majority = k // 2 + 1
    n_major = int(rng.integers(majority, k + 1)) if rng.random() < 0.25 else majority
    signal = [pools[y][rng.integers(len(pools[y]))] for _ in range(n_major)]
    signal += [pools[1 - y][rng.integers(len(pools[1 - y]))] for _ in range(k - n_major)]
    agrees = rng.random() < reliability
    cue = shortcut[y if agrees else 1 - y]
    n_fill = l - k - 1
    body = signal + [cue] + [filler[i] for i in rng.integers(len(filler), size=n_fill)] if filler else signal + [cue]
    order = rng.permutation(len(body))
    return ClassificationExample(tuple(body[i] for i in order), "pos" if y else "neg")


def synth_shortcut_dataset(n: int, l: int = 12, vocab_size: int = 64, shortcut_reliability: float = 0.95,
                           seed: int = 0, n_dev: Optional[int] = None, n_test: Optional[int] = None,
                           k: int = 1) -> SyntheticSplits:
    """Binary task with a planted shortcut.

    Each sentence holds ``k`` signal tokens, the majority of which come from
    the pool of the true class, so a bag-of-words count predicts the label
    exactly.  One extra cue token (``sc_pos`` / ``sc_neg``) agrees with the
    label with probability ``shortcut_reliability`` in train and dev, and with
    probability 0.5 in test.  The rest is filler.
    """
    if n <= 0:
        raise ConfigError(f"dataset size must be positive, got {n}", "data.n_train")
    if not (0.5 <= shortcut_reliability <= 1.0):
        raise ConfigError(f"shortcut reliability must lie in [0.5, 1], got {shortcut_reliability}", "data.reliability")
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"signal count must be odd and positive, got {k}", "data.k")
    if l < k + 1:
        raise ConfigError(f"length {l} cannot hold {k} signal tokens and a cue", "data.length")
    parts = synth_vocab(vocab_size)
    n_dev = n // 4 if n_dev is None else n_dev
    n_test = n // 2 if n_test is None else n_test
    ss = np.random.SeedSequence(seed)
    rngs = [np.random.default_rng(s) for s in ss.spawn(3)]

    def split(rng, size, rel):
        ys = rng.integers(0, 2, size=size)
        return [_synth_one(rng, int(y), l, k, rel, parts) for y in ys]

    return SyntheticSplits(
        train=split(rngs[0], n, shortcut_reliability),
        dev=split(rngs[1], n_dev, shortcut_reliability),
        test=split(rngs[2], n_test, 0.5),
    )


def bag_of_words_oracle(example: ClassificationExample) -> str:
    """Label from the signal-token majority alone (ignores the cue)."""
    score = sum(1 if t.startswith("pos") else -1 if t.startswith("neg") else 0 for t in example.tokens)
    return "pos" if score > 0 else "neg"
