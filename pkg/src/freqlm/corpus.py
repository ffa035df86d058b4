"""Corpus handling: tokenization, vocabulary, and frequency statistics.

Text normalization rule used throughout: runs of whitespace collapse to a
single space and leading/trailing whitespace is dropped, i.e.
``normalize(t) == " ".join(t.split())``. Detokenization recovers exactly
the normalized text.

File formats:
  * corpus: UTF-8 plain text, one document per blank-line-separated block
  * vocabulary: one token per line, line number = id
  * frequency table: one integer count per line, line number = id
  * merge list: one merge per line, two space-separated symbols
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ConfigError, DataError

UNK_TOKEN = "<unk>"
EOS_TOKEN = "<eos>"

# Marks the final symbol of a word so BPE output can be detokenized.
WORD_END = "</w>"


def normalize(text: str) -> str:
    """Collapse whitespace runs to single spaces and strip the ends."""
    return " ".join(text.split())


# ---------------------------------------------------------------------------
# Tokenizers
# ---------------------------------------------------------------------------


class WhitespaceTokenizer:
    """Splits on whitespace; the default for unit tests and small corpora."""

    mode = "whitespace"

    def tokenize(self, text: str) -> list[str]:
        return text.split()

    def detokenize(self, tokens: list[str]) -> str:
        return " ".join(tokens)


class WordBpe:
    """Byte-pair tokenizer over whitespace-separated words.

    Merges are applied within words in learned order; each merge replaces
    every (left-to-right, non-overlapping) occurrence of its pair. With
    ``mark_word_end`` the last character of every word carries a ``</w>``
    suffix, making word boundaries recoverable from the token sequence;
    without it the toy merge semantics are easier to trace but
    detokenization is undefined.
    """

    mode = "bpe"

    def __init__(self, merges: list[tuple[str, str]], mark_word_end: bool = True):
        self.merges = list(merges)
        self.mark_word_end = mark_word_end
        self._cache: dict[str, tuple[str, ...]] = {}

    def _word_symbols(self, word: str) -> tuple[str, ...]:
        symbols = list(word)
        if self.mark_word_end:
            symbols[-1] = symbols[-1] + WORD_END
        return tuple(symbols)

    def _apply(self, word: str) -> tuple[str, ...]:
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        symbols = self._word_symbols(word)
        for pair in self.merges:
            symbols = merge_pair(symbols, pair)
            if len(symbols) == 1:
                break
        self._cache[word] = symbols
        return symbols

    def tokenize(self, text: str) -> list[str]:
        out: list[str] = []
        for word in text.split():
            out.extend(self._apply(word))
        return out

    def detokenize(self, tokens: list[str]) -> str:
        if not self.mark_word_end:
            raise ValueError(
                "word boundaries are unrecoverable without end-of-word markers"
            )
        words: list[str] = []
        current: list[str] = []
        for tok in tokens:
            if tok.endswith(WORD_END):
                current.append(tok[: -len(WORD_END)])
                words.append("".join(current))
                current = []
            else:
                current.append(tok)
        if current:  # trailing unterminated word, e.g. truncated stream
            words.append("".join(current))
        return " ".join(words)

    def save_merges(self, path: str | Path) -> None:
        lines = [f"{a} {b}" for a, b in self.merges]
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")

    @classmethod
    def load_merges(cls, path: str | Path, mark_word_end: bool = True) -> "WordBpe":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"merge list not found: {p}")
        merges = []
        for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split(" ")
            if len(parts) != 2:
                raise DataError(f"{p}:{lineno}: expected two space-separated symbols")
            merges.append((parts[0], parts[1]))
        return cls(merges, mark_word_end=mark_word_end)


def merge_pair(symbols: tuple[str, ...], pair: tuple[str, str]) -> tuple[str, ...]:
    """Replace every non-overlapping occurrence of ``pair``, left to right."""
    if len(symbols) < 2:
        return symbols
    out = []
    i = 0
    n = len(symbols)
    joined = pair[0] + pair[1]
    while i < n:
        if i < n - 1 and symbols[i] == pair[0] and symbols[i + 1] == pair[1]:
            out.append(joined)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def train_bpe(
    corpus_text: str, num_merges: int, mark_word_end: bool = True
) -> list[tuple[str, str]]:
    """Learn a merge list from raw text.

    Standard byte-pair encoding over whitespace-separated words: at each
    step the most frequent adjacent symbol pair is merged everywhere it
    occurs. Ties are broken by the lexicographically smallest pair, and
    learning stops early when no pair occurs at least twice.
    """
    if num_merges < 0:
        raise ValueError("num_merges must be >= 0")
    words = Counter(corpus_text.split())
    if num_merges > 0 and not words:
        raise DataError("cannot train BPE on an empty corpus")

    def word_symbols(word: str) -> tuple[str, ...]:
        symbols = list(word)
        if mark_word_end:
            symbols[-1] = symbols[-1] + WORD_END
        return tuple(symbols)

    vocab: dict[tuple[str, ...], int] = {word_symbols(w): c for w, c in words.items()}
    merges: list[tuple[str, str]] = []
    for _ in range(num_merges):
        pairs: Counter[tuple[str, str]] = Counter()
        for symbols, count in vocab.items():
            for a, b in zip(symbols, symbols[1:]):
                pairs[(a, b)] += count
        if not pairs:
            break
        best_count = max(pairs.values())
        if best_count < 2:
            break
        best = min(p for p, c in pairs.items() if c == best_count)
        merges.append(best)
        vocab = {merge_pair(symbols, best): c for symbols, c in vocab.items()}
    return merges


def make_tokenizer(
    mode: str,
    merges_path: str | Path | None = None,
    merges: list[tuple[str, str]] | None = None,
    mark_word_end: bool = True,
):
    if mode == "whitespace":
        return WhitespaceTokenizer()
    if mode == "bpe":
        if merges is not None:
            return WordBpe(merges, mark_word_end=mark_word_end)
        if merges_path is None:
            raise ConfigError("bpe mode requires a trained merge list")
        return WordBpe.load_merges(merges_path, mark_word_end=mark_word_end)
    raise ConfigError(f"unknown tokenizer mode: {mode!r}")


# ---------------------------------------------------------------------------
# Vocabulary / frequency table / token streams
# ---------------------------------------------------------------------------


@dataclass
class Vocabulary:
    """Dense token-id mapping with reserved unknown and end-of-text ids."""

    tokens: list[str]
    id_of: dict[str, int] = field(repr=False)

    def __init__(self, tokens: list[str]):
        self.tokens = list(tokens)
        self.id_of = {t: i for i, t in enumerate(self.tokens)}
        if len(self.id_of) != len(self.tokens):
            raise DataError("vocabulary contains duplicate tokens")
        for reserved in (UNK_TOKEN, EOS_TOKEN):
            if reserved not in self.id_of:
                raise DataError(f"vocabulary is missing reserved token {reserved!r}")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def unk_id(self) -> int:
        return self.id_of[UNK_TOKEN]

    @property
    def eos_id(self) -> int:
        return self.id_of[EOS_TOKEN]

    def lookup(self, token: str) -> int:
        return self.id_of.get(token, self.unk_id)

    @classmethod
    def build(cls, token_iterables, max_size: int | None = None) -> "Vocabulary":
        """Build from tokenized documents.

        Reserved tokens get ids 0 and 1; the rest are ordered by
        decreasing training count, ties by token string, which keeps the
        vocabulary file stable across runs. With max_size, the least
        frequent tokens are dropped (they map to <unk> later).
        """
        counts: Counter[str] = Counter()
        for toks in token_iterables:
            counts.update(toks)
        counts.pop(UNK_TOKEN, None)
        counts.pop(EOS_TOKEN, None)
        ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if max_size is not None:
            if max_size < 3:
                raise ValueError("max_size must leave room beyond the reserved tokens")
            ordered = ordered[: max_size - 2]
        return cls([UNK_TOKEN, EOS_TOKEN] + [t for t, _ in ordered])

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        p = Path(path)
        if not p.exists():
            raise DataError(f"vocabulary file not found: {p}")
        return cls(p.read_text(encoding="utf-8").splitlines())


@dataclass(frozen=True)
class TokenStream:
    """A flat id sequence for one split."""

    ids: np.ndarray
    split_tag: str

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        object.__setattr__(self, "ids", ids)
        if self.split_tag not in ("train", "valid", "test"):
            raise ValueError(f"unknown split tag: {self.split_tag!r}")

    def __len__(self) -> int:
        return int(self.ids.shape[0])


@dataclass(frozen=True)
class FrequencyTable:
    """Per-token-id counts measured on the training split."""

    counts: np.ndarray
    total: int

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        object.__setattr__(self, "counts", counts)
        if counts.ndim != 1:
            raise ValueError("counts must be one-dimensional")
        if np.any(counts < 0):
            raise ValueError("counts must be non-negative")
        if int(counts.sum()) != self.total:
            raise ValueError("total must equal the sum of counts")
        if self.total <= 0:
            raise DataError("frequency table must have positive total")

    def __len__(self) -> int:
        return int(self.counts.shape[0])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            "\n".join(str(int(c)) for c in self.counts) + "\n", encoding="utf-8"
        )

    @classmethod
    def load(cls, path: str | Path) -> "FrequencyTable":
        p = Path(path)
        if not p.exists():
            raise DataError(f"frequency table file not found: {p}")
        counts = np.array(
            [int(line) for line in p.read_text(encoding="utf-8").split()],
            dtype=np.int64,
        )
        return cls(counts, int(counts.sum()))


def build_frequency_table(stream: TokenStream, vocab: Vocabulary) -> FrequencyTable:
    """Count token occurrences over the training split.

    The result is invariant to stream order; counting may be sharded and
    merged as long as the merged counts equal the sequential ones.
    """
    if len(stream) == 0:
        raise DataError("cannot build a frequency table from an empty stream")
    if int(stream.ids.max()) >= len(vocab):
        raise DataError("stream contains ids outside the vocabulary")
    counts = np.bincount(stream.ids, minlength=len(vocab)).astype(np.int64)
    return FrequencyTable(counts, int(counts.sum()))


# ---------------------------------------------------------------------------
# Corpus files
# ---------------------------------------------------------------------------


def read_documents(path: str | Path) -> list[str]:
    """Read a corpus file into documents (blank-line-separated blocks)."""
    p = Path(path)
    if not p.exists():
        raise DataError(f"corpus file not found: {p}")
    docs: list[str] = []
    block: list[str] = []
    for line in p.read_text(encoding="utf-8").splitlines():
        if line.strip():
            block.append(line)
        elif block:
            docs.append("\n".join(block))
            block = []
    if block:
        docs.append("\n".join(block))
    return docs


def encode_documents(docs: list[str], tokenizer, vocab: Vocabulary, split_tag: str) -> TokenStream:
    """Tokenize documents and join them into one stream, eos after each."""
    ids: list[int] = []
    eos = vocab.eos_id
    for doc in docs:
        ids.extend(vocab.lookup(t) for t in tokenizer.tokenize(doc))
        ids.append(eos)
    return TokenStream(np.array(ids, dtype=np.int64), split_tag)


def load_split(path: str | Path, tokenizer, vocab: Vocabulary, split_tag: str) -> TokenStream:
    return encode_documents(read_documents(path), tokenizer, vocab, split_tag)
