"""Deterministic synthetic corpus with a Zipfian vocabulary.

Documents interleave a small set of high-frequency "function" tokens
with topic-specific "content" tokens. Each document commits to a couple
of topics, and token type alternates via a two-state Markov chain, so
both the class of the next token (frequent vs rare) and the identity of
rare tokens are genuinely predictable from context — the property that
makes frequency-balanced training measurable at desk scale. The
marginal unigram distribution stays Zipf-like.

Every document is produced by its own counter-based stream keyed by
(seed, split, doc index), so any split regenerates identically and
independently of generation order.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ConfigError
from .rng import SYNTH, stream

SPLIT_IDS = {"train": 0, "valid": 1, "test": 2}


@dataclass
class SynthConfig:
    num_function: int = 40
    num_content: int = 960
    num_topics: int = 30
    zipf_function: float = 1.2
    zipf_content: float = 1.0
    zipf_topic: float = 0.8
    topics_per_doc: int = 2
    # two-state Markov chain over {function, content}; these settle at a
    # 50/50 marginal while keeping type strongly predictable from type
    p_function_to_function: float = 0.35
    p_content_to_function: float = 0.65
    doc_len_min: int = 60
    doc_len_max: int = 160
    seed: int = 0

    def validate(self) -> None:
        if self.num_content % self.num_topics != 0:
            raise ConfigError("num_content must divide evenly into num_topics")
        if self.topics_per_doc < 1 or self.topics_per_doc > self.num_topics:
            raise ConfigError("topics_per_doc out of range")
        if self.doc_len_min < 2 or self.doc_len_max < self.doc_len_min:
            raise ConfigError("bad document length range")
        for p in (self.p_function_to_function, self.p_content_to_function):
            if not 0.0 < p < 1.0:
                raise ConfigError("transition probabilities must lie in (0, 1)")

    @property
    def vocab_words(self) -> list:
        words = [f"f{i}" for i in range(self.num_function)]
        per_topic = self.num_content // self.num_topics
        words += [f"w{t}_{j}" for t in range(self.num_topics) for j in range(per_topic)]
        return words

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _zipf_weights(n: int, s: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1, dtype=np.float64) ** s
    return w / w.sum()


def generate_document(cfg: SynthConfig, split: str, doc_index: int) -> list:
    rng = stream(cfg.seed, SYNTH, SPLIT_IDS[split], doc_index)
    per_topic = cfg.num_content // cfg.num_topics
    topic_probs = _zipf_weights(cfg.num_topics, cfg.zipf_topic)
    func_probs = _zipf_weights(cfg.num_function, cfg.zipf_function)
    within_probs = _zipf_weights(per_topic, cfg.zipf_content)

    topics = rng.choice(cfg.num_topics, size=cfg.topics_per_doc, replace=False, p=topic_probs)
    length = int(rng.integers(cfg.doc_len_min, cfg.doc_len_max + 1))
    words = []
    is_function = bool(rng.random() < 0.5)
    for _ in range(length):
        if is_function:
            words.append(f"f{rng.choice(cfg.num_function, p=func_probs)}")
            is_function = rng.random() < cfg.p_function_to_function
        else:
            topic = int(topics[rng.integers(0, cfg.topics_per_doc)])
            j = int(rng.choice(per_topic, p=within_probs))
            words.append(f"w{topic}_{j}")
            is_function = rng.random() < cfg.p_content_to_function
    return words


def generate_split(cfg: SynthConfig, split: str, num_tokens: int) -> str:
    """Blank-line-separated documents totalling at least num_tokens words."""
    cfg.validate()
    if split not in SPLIT_IDS:
        raise ConfigError(f"split must be one of {sorted(SPLIT_IDS)}, got {split!r}")
    docs = []
    produced = 0
    doc_index = 0
    while produced < num_tokens:
        words = generate_document(cfg, split, doc_index)
        docs.append(" ".join(words))
        produced += len(words)
        doc_index += 1
    return "\n\n".join(docs) + "\n"


def write_corpus(out_dir: str | Path, cfg: SynthConfig, train_tokens: int,
                 valid_tokens: int, test_tokens: int) -> dict:
    """Write train/valid/test text files; returns path map."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sizes = {"train": train_tokens, "valid": valid_tokens, "test": test_tokens}
    paths = {}
    for split, n in sizes.items():
        p = out / f"{split}.txt"
        p.write_text(generate_split(cfg, split, n), encoding="utf-8")
        paths[split] = str(p)
    return paths
