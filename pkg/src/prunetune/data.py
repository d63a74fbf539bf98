"""Synthetic parallel corpora, vocabulary files and corpus I/O.

Each synthetic domain maps a random source sentence over ``vocab_size``
symbols to a target with a fixed rule (copy, reverse, keyed substitution,
modular shift, sort). Symbols are written as ``w<i>`` tokens; the model
vocabulary prepends the special tokens, so symbol ``i`` has model id
``i + 3``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError
from .model import BOS, EOS, PAD

KINDS = ("copy", "reverse", "cipher", "shift", "sort")
SPECIALS = ("<pad>", "<s>", "</s>")
SPLITS = ("train", "dev", "test")


@dataclass(frozen=True)
class SyntheticDomainSpec:
    """Recipe for one synthetic domain.

    ``shift`` is the offset for ``kind="shift"``; ``key`` seeds the
    substitution table for ``kind="cipher"``, and ``cipher_fraction`` is the
    share of symbols the table actually changes (the rest map to
    themselves).
    """

    name: str
    kind: str = "copy"
    vocab_size: int = 40
    min_len: int = 4
    max_len: int = 10
    sizes: tuple = (2000, 200, 200)
    seed: int = 0
    shift: int = 1
    key: int = 0
    cipher_fraction: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown domain kind {self.kind!r}")
        if self.vocab_size < 1 or not 1 <= self.min_len <= self.max_len:
            raise ContractError("need vocab_size >= 1 and 1 <= min_len <= max_len")
        if self.kind == "cipher" and self.vocab_size < 2:
            raise ContractError("a substitution cipher needs at least 2 symbols")
        if len(self.sizes) != 3 or min(self.sizes) < 0:
            raise ContractError("sizes must be (train, dev, test) counts")

    def to_dict(self):
        d = asdict(self)
        d["sizes"] = list(self.sizes)
        return d


def cipher_table(vocab_size: int, key: int, fraction: float = 1.0) -> np.ndarray:
    """Symbol substitution table with no fixed points among the changed symbols."""
    if vocab_size < 2:
        raise ContractError("a substitution cipher needs at least 2 symbols")
    rng = np.random.default_rng(key)
    n = max(2, int(round(fraction * vocab_size)))
    chosen = np.sort(rng.choice(vocab_size, size=min(n, vocab_size), replace=False))
    # a cyclic rotation of a shuffled list is a derangement of the chosen symbols
    order = rng.permutation(chosen)
    table = np.arange(vocab_size)
    table[order] = np.roll(order, -1)
    return table


def transform(spec: SyntheticDomainSpec, src) -> list[int]:
    src = list(src)
    if spec.kind == "copy":
        return src
    if spec.kind == "reverse":
        return src[::-1]
    if spec.kind == "shift":
        return [(s + spec.shift) % spec.vocab_size for s in src]
    if spec.kind == "sort":
        return sorted(src)
    table = cipher_table(spec.vocab_size, spec.key, spec.cipher_fraction)
    return [int(table[s]) for s in src]


@dataclass
class ParallelCorpus:
    """Train/dev/test splits of ``(source symbols, target symbols)`` pairs."""

    name: str
    splits: dict = field(default_factory=dict)

    def __getitem__(self, split):
        return self.splits[split]

    def subsample(self, fraction, seed=0, split="train") -> "ParallelCorpus":
        if not 0.0 < fraction <= 1.0:
            raise ContractError("fraction must be in (0, 1]")
        data = self.splits[split]
        n = int(round(fraction * len(data)))
        if n == 0:
            raise ContractError(f"fraction {fraction} leaves no {split} sentences")
        if n == len(data):
            return ParallelCorpus(self.name, dict(self.splits))
        idx = np.sort(np.random.default_rng(seed).choice(len(data), size=n, replace=False))
        splits = dict(self.splits)
        splits[split] = [data[i] for i in idx]
        return ParallelCorpus(self.name, splits)


def gen_synthetic_domain(spec: SyntheticDomainSpec, seed=None) -> ParallelCorpus:
    """Deterministic corpus with pairwise-disjoint splits (as source sets)."""
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    if spec.kind == "cipher":
        cipher_table(spec.vocab_size, spec.key, spec.cipher_fraction)
    need = sum(spec.sizes)
    capacity = sum(spec.vocab_size**n for n in range(spec.min_len, spec.max_len + 1))
    if need > capacity:
        raise ContractError(f"only {capacity} distinct sentences exist, {need} requested")
    seen, sentences = set(), []
    attempts = 0
    while len(sentences) < need:
        attempts += 1
        if attempts > 50 * need + 1000:
            raise ContractError("could not draw enough distinct sentences")
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        src = tuple(int(x) for x in rng.integers(0, spec.vocab_size, size=length))
        if src in seen:
            continue
        seen.add(src)
        sentences.append(src)
    splits, pos = {}, 0
    for split, n in zip(SPLITS, spec.sizes):
        splits[split] = [(list(s), transform(spec, s)) for s in sentences[pos : pos + n]]
        pos += n
    return ParallelCorpus(spec.name, splits)


# -- vocabulary -------------------------------------------------------------


class Vocab:
    """Token <-> id mapping; id is the line number in the vocab file."""

    def __init__(self, tokens):
        self.tokens = list(tokens)
        if tuple(self.tokens[: len(SPECIALS)]) != SPECIALS:
            raise DataError(f"vocabulary must start with {SPECIALS}")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise DataError("duplicate tokens in vocabulary")

    @classmethod
    def for_symbols(cls, n):
        return cls(list(SPECIALS) + [f"w{i}" for i in range(n)])

    def __len__(self):
        return len(self.tokens)

    def encode(self, tokens) -> list[int]:
        try:
            return [self.index[t] for t in tokens]
        except KeyError as exc:
            raise DataError(f"token {exc.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids if i not in (PAD, BOS, EOS)]

    def save(self, path):
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def symbols_to_ids(seq) -> list[int]:
    return [s + len(SPECIALS) for s in seq]


def ids_to_symbols(seq) -> list[int]:
    return [i - len(SPECIALS) for i in seq if i >= len(SPECIALS)]


def encode_pairs(pairs) -> list[tuple[list[int], list[int]]]:
    """Symbol pairs -> model-id pairs."""
    return [(symbols_to_ids(s), symbols_to_ids(t)) for s, t in pairs]


# -- corpus files -------------------------------------------------------------


def _line(seq):
    return " ".join(f"w{s}" for s in seq)


def write_corpus(corpus: ParallelCorpus, directory) -> dict:
    """Write ``<name>.<split>.src/.tgt`` files; returns the written paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, pairs in corpus.splits.items():
        src = directory / f"{corpus.name}.{split}.src"
        tgt = directory / f"{corpus.name}.{split}.tgt"
        src.write_text("".join(_line(s) + "\n" for s, _ in pairs), encoding="utf-8")
        tgt.write_text("".join(_line(t) + "\n" for _, t in pairs), encoding="utf-8")
        paths[split] = (src, tgt)
    return paths


def _parse(path, line_no, token):
    if not (token.startswith("w") and token[1:].isdigit()):
        raise DataError(f"{path}:{line_no}: bad token {token!r}")
    return int(token[1:])


def read_corpus(name, directory, splits=SPLITS) -> ParallelCorpus:
    directory = Path(directory)
    out = {}
    for split in splits:
        src_path = directory / f"{name}.{split}.src"
        tgt_path = directory / f"{name}.{split}.tgt"
        if not src_path.exists() or not tgt_path.exists():
            raise DataError(f"missing corpus files for {name}.{split} in {directory}")
        src_lines = src_path.read_text(encoding="utf-8").splitlines()
        tgt_lines = tgt_path.read_text(encoding="utf-8").splitlines()
        if len(src_lines) != len(tgt_lines):
            raise DataError(f"{name}.{split}: {len(src_lines)} source vs {len(tgt_lines)} target lines")
        out[split] = [
            (
                [_parse(src_path, i + 1, t) for t in s.split()],
                [_parse(tgt_path, i + 1, t) for t in t_line.split()],
            )
            for i, (s, t_line) in enumerate(zip(src_lines, tgt_lines))
        ]
    return ParallelCorpus(name, out)
