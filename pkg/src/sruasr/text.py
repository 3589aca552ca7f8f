"""Text normalization, vocabularies, BPE, tokenizers and an add-k n-gram LM."""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import DataError, UsageError

BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"
SPECIALS = (BOS, EOS, UNK)
END_OF_WORD = "</w>"
# character-level token standing for a space between words
SPACE = "_"

_OUTSIDE_CLASS = re.compile(r"[^A-Z0-9' ]")
_WHITESPACE = re.compile(r"\s+")


def normalize_text(raw: str) -> str:
    """Uppercase, keep ``A-Z``, digits and apostrophes, collapse spaces.

    >>> normalize_text("Hello,  world!")
    'HELLO WORLD'
    """
    text = _WHITESPACE.sub(" ", raw).upper()
    text = _OUTSIDE_CLASS.sub(" ", text)
    return _WHITESPACE.sub(" ", text).strip()


class Vocabulary:
    """Dense token <-> id mapping.  ``<s>``, ``</s>``, ``<unk>`` take ids 0-2."""

    def __init__(self, tokens: Iterable[str]):
        tokens = list(tokens)
        if tuple(tokens[:3]) != SPECIALS:
            tokens = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        if len(set(tokens)) != len(tokens):
            raise DataError("vocabulary tokens must be distinct")
        self.tokens = tokens
        self.ids = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.ids

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    @property
    def bos(self) -> int:
        return self.ids[BOS]

    @property
    def eos(self) -> int:
        return self.ids[EOS]

    @property
    def unk(self) -> int:
        return self.ids[UNK]

    def id(self, token: str) -> int:
        return self.ids.get(token, self.ids[UNK])

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


@dataclass
class BpeModel:
    base_symbols: list[str]
    merges: list[tuple[str, str]] = field(default_factory=list)

    def symbols(self) -> list[str]:
        """Base symbols followed by merge results, first occurrence only."""
        seen = dict.fromkeys(self.base_symbols)
        for left, right in self.merges:
            seen.setdefault(left + right)
        return list(seen)

    def vocabulary(self) -> Vocabulary:
        return Vocabulary(list(SPECIALS) + self.symbols())

    def to_json(self) -> str:
        payload = {"base_symbols": self.base_symbols, "merges": [list(m) for m in self.merges]}
        return json.dumps(payload, indent=1, ensure_ascii=False) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "BpeModel":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(list(payload["base_symbols"]), [tuple(m) for m in payload["merges"]])


def _base_symbols(words: Iterable[str]) -> list[str]:
    chars = sorted({ch for w in words for ch in w})
    return chars + [END_OF_WORD]


def _merge_word(symbols: tuple[str, ...], pair: tuple[str, str]) -> tuple[str, ...]:
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == pair[0] and symbols[i + 1] == pair[1]:
            out.append(symbols[i] + symbols[i + 1])
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def train_bpe(corpus: Sequence[str], target_vocab: int) -> BpeModel:
    """Learn merges until ``target_vocab`` symbol types exist.

    Symbol types are the corpus characters, the end-of-word marker, and merge
    results.  Pairs are counted inside words only and never involve the
    marker.  The most frequent pair wins; equal counts go to the
    lexicographically smallest pair.  Training stops early once no pair
    occurs at least twice.
    """
    word_counts = Counter(w for line in corpus for w in line.split())
    if not word_counts:
        raise DataError("cannot train BPE on an empty corpus")
    base = _base_symbols(word_counts)
    if target_vocab < len(base):
        raise UsageError(
            f"target vocabulary {target_vocab} is smaller than the {len(base)} base symbols"
        )
    words = {tuple(w): n for w, n in sorted(word_counts.items())}
    symbols = set(base)
    merges: list[tuple[str, str]] = []
    while len(symbols) < target_vocab:
        pairs: Counter = Counter()
        for syms, n in words.items():
            for pair in zip(syms, syms[1:]):
                pairs[pair] += n
        if not pairs:
            break
        best = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))
        if best[1] < 2:
            break
        pair = best[0]
        merges.append(pair)
        symbols.add(pair[0] + pair[1])
        words = {_merge_word(syms, pair): n for syms, n in words.items()}
    return BpeModel(base, merges)


def bpe_segment(model: BpeModel, word: str) -> list[str]:
    """Split one word into symbols by replaying merges in training order.

    Characters outside the base set come back as ``<unk>``.
    """
    known = set(model.base_symbols)
    symbols = tuple(ch if ch in known else UNK for ch in word)
    for pair in model.merges:
        if len(symbols) < 2:
            break
        symbols = _merge_word(symbols, pair)
    return list(symbols)


def bpe_encode(model: BpeModel, vocab: Vocabulary, sentence: str) -> list[int]:
    """Symbols of every word followed by the end-of-word marker."""
    ids = []
    for word in sentence.split():
        ids.extend(vocab.id(s) for s in bpe_segment(model, word))
        ids.append(vocab.id(END_OF_WORD))
    return ids


def bpe_decode(vocab: Vocabulary, ids: Sequence[int]) -> str:
    pieces = []
    for i in ids:
        tok = vocab.tokens[i]
        if tok in (BOS, EOS):
            continue
        pieces.append(" " if tok == END_OF_WORD else tok)
    return "".join(pieces).strip()


class Tokenizer:
    """Maps normalized sentences to token ids of a ``Vocabulary``."""

    kind = ""

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab

    def pieces(self, sentence: str) -> list[str]:
        raise NotImplementedError

    def encode(self, sentence: str) -> list[int]:
        return [self.vocab.id(p) for p in self.pieces(sentence)]

    def count_unknown(self, sentence: str) -> int:
        return sum(1 for p in self.pieces(sentence) if p not in self.vocab)


class CharTokenizer(Tokenizer):
    kind = "char"

    def pieces(self, sentence):
        return [SPACE if ch == " " else ch for ch in sentence]

    @classmethod
    def build(cls, corpus: Iterable[str]) -> "CharTokenizer":
        chars = sorted({ch for line in corpus for ch in line} - {" "})
        return cls(Vocabulary(list(SPECIALS) + [SPACE] + chars))


class WordTokenizer(Tokenizer):
    kind = "word"

    def pieces(self, sentence):
        return sentence.split()

    @classmethod
    def build(cls, corpus: Iterable[str], max_size: int | None = None) -> "WordTokenizer":
        counts = Counter(w for line in corpus for w in line.split())
        ranked = sorted(counts, key=lambda w: (-counts[w], w))
        if max_size is not None:
            ranked = ranked[: max(0, max_size - len(SPECIALS))]
        return cls(Vocabulary(list(SPECIALS) + ranked))


class BpeTokenizer(Tokenizer):
    kind = "bpe"

    def __init__(self, model: BpeModel, vocab: Vocabulary | None = None):
        super().__init__(vocab if vocab is not None else model.vocabulary())
        self.model = model
        self._cache: dict[str, list[str]] = {}

    def segment(self, word: str) -> list[str]:
        if word not in self._cache:
            self._cache[word] = bpe_segment(self.model, word)
        return self._cache[word]

    def pieces(self, sentence):
        out = []
        for word in sentence.split():
            out.extend(self.segment(word))
            out.append(END_OF_WORD)
        return out

    def count_unknown(self, sentence):
        return sum(1 for p in self.pieces(sentence) if p == UNK)


def read_corpus(path) -> list[str]:
    """Normalized, non-empty lines of a text file."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [s for s in (normalize_text(line) for line in lines) if s]


class NgramModel:
    """Add-k smoothed n-gram model with back-off to shorter contexts.

    For a history ``h`` seen in training, ``P(w | h) = (c(h, w) + k) /
    (c(h) + k V)``.  Unseen histories drop their oldest token until a seen
    one remains; the empty history is always seen.  ``V`` counts every
    vocabulary token except ``<s>``, which is never predicted.
    """

    def __init__(self, order: int, vocab: Vocabulary, add_k: float = 1.0):
        if order < 1:
            raise UsageError(f"n-gram order must be >= 1, got {order}")
        if not add_k > 0:
            raise UsageError(f"add-k constant must be positive, got {add_k}")
        self.order = order
        self.vocab = vocab
        self.add_k = add_k
        self.counts: dict[tuple[int, ...], Counter] = {}
        self.totals: dict[tuple[int, ...], int] = {}

    @property
    def predictable(self) -> int:
        return len(self.vocab) - 1

    def _wrap(self, ids: Sequence[int]) -> list[int]:
        return [self.vocab.bos] * max(1, self.order - 1) + list(ids) + [self.vocab.eos]

    def fit(self, sentences: Iterable[Sequence[int]]) -> "NgramModel":
        pad = max(1, self.order - 1)
        for ids in sentences:
            seq = self._wrap(ids)
            for t in range(pad, len(seq)):
                for n in range(self.order):
                    hist = tuple(seq[t - n : t])
                    self.counts.setdefault(hist, Counter())[seq[t]] += 1
                    self.totals[hist] = self.totals.get(hist, 0) + 1
        if not self.totals:
            raise DataError("cannot fit an n-gram model on an empty corpus")
        return self

    def prob(self, history: Sequence[int], token: int) -> float:
        hist = tuple(history)[-(self.order - 1) :] if self.order > 1 else ()
        while hist and hist not in self.totals:
            hist = hist[1:]
        count = self.counts.get(hist, {}).get(token, 0)
        total = self.totals.get(hist, 0)
        return (count + self.add_k) / (total + self.add_k * self.predictable)

    def logprob(self, ids: Sequence[int]) -> float:
        """Natural-log probability of ``ids`` wrapped in ``<s> ... </s>``."""
        seq = self._wrap(ids)
        pad = max(1, self.order - 1)
        return sum(math.log(self.prob(seq[:t], seq[t])) for t in range(pad, len(seq)))

    def perplexity(self, corpus: Sequence[Sequence[int]]) -> float:
        if not corpus:
            raise DataError("perplexity needs a non-empty corpus")
        total = sum(self.logprob(ids) for ids in corpus)
        count = sum(len(ids) + 1 for ids in corpus)
        return math.exp(-total / count)


def ngram_logprob(model: NgramModel, ids: Sequence[int]) -> float:
    return model.logprob(ids)
