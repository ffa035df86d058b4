"""Greedy and top-k decoding, decoupled or from the combined posterior.

Decoupled mode commits to a frequency class first (greedy or top-k over
p1), then picks a token the same way from p2 restricted to that class;
every token outside the chosen class has probability exactly zero by
construction. Coupled mode applies the strategy directly to the
combined length-V posterior.

Randomness: each (sequence, step) pair owns one counter-based stream;
within a step the class draw comes first, then the token draw. Batch
generation therefore reproduces sequential generation token for token.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ConfigError
from .heads import FactorizedDistribution
from .model import Model
from .rng import DECODE, stream

STRATEGIES = ("greedy", "topk")
MODES = ("decoupled", "coupled")


@dataclass
class DecodeConfig:
    strategy: str = "topk"
    k: int = 10
    mode: str = "decoupled"
    max_new_tokens: int = 100
    seed: int = 0

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.max_new_tokens < 1:
            raise ConfigError("max_new_tokens must be >= 1")

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "k": self.k, "mode": self.mode,
                "max_new_tokens": self.max_new_tokens, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "DecodeConfig":
        return cls(**d)


@dataclass
class GenerationRecord:
    """One continuation: emitted ids, their classes, and model logprobs.

    ``classes[i]`` is the frequency class of ``tokens[i]`` — in decoupled
    mode that is the class the first stage chose. ``logprobs[i]`` is the
    model's combined log-probability of the emitted token (not the
    renormalized top-k sampling probability).
    """

    prefix: list = field(default_factory=list)
    tokens: list = field(default_factory=list)
    classes: list = field(default_factory=list)
    logprobs: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "prefix": self.prefix, "tokens": self.tokens,
            "classes": self.classes,
            "logprobs": [round(float(lp), 9) for lp in self.logprobs],
        }, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "GenerationRecord":
        d = json.loads(line)
        return cls(d["prefix"], d["tokens"], d["classes"], d["logprobs"])


def top_k_renormalize(probs: np.ndarray, k: int):
    """Indices and renormalized probabilities of the k most probable
    entries (k clipped to the support size; ties broken by lowest index)."""
    probs = np.asarray(probs, dtype=np.float64).ravel()
    k = min(k, probs.shape[0])
    order = np.lexsort((np.arange(probs.shape[0]), -probs))
    picked = order[:k]
    mass = probs[picked]
    return picked, mass / mass.sum()


def _choose(probs: np.ndarray, strategy: str, k: int, rng: np.random.Generator | None) -> int:
    """Pick one index: argmax (ties -> lowest index) or top-k sample."""
    if strategy == "greedy":
        return int(np.argmax(probs))
    picked, renorm = top_k_renormalize(probs, k)
    u = rng.random()
    j = int(np.searchsorted(np.cumsum(renorm), u, side="right"))
    return int(picked[min(j, picked.shape[0] - 1)])


def decode_step_decoupled(dist: FactorizedDistribution, cfg: DecodeConfig,
                          rng: np.random.Generator | None = None):
    """(class, token): class from p1, then token from p2 within it."""
    c = _choose(dist.class_probs, cfg.strategy, cfg.k, rng)
    local = _choose(dist.token_probs_within(c), cfg.strategy, cfg.k, rng)
    return c, int(dist.token_ids(c)[local])


def decode_step_coupled(dist: FactorizedDistribution, cfg: DecodeConfig,
                        rng: np.random.Generator | None = None) -> int:
    """Token chosen directly from the combined posterior."""
    # burn the class-stage draw so coupled/decoupled runs stay stream-aligned
    if rng is not None and cfg.strategy == "topk":
        rng.random()
    return _choose(dist.combined, cfg.strategy, cfg.k, rng)


def masked_token_distribution(dist: FactorizedDistribution, c: int) -> np.ndarray:
    """Length-V token distribution after committing to class ``c``:
    p2 inside the class, exactly 0 everywhere else."""
    out = np.zeros(dist.partition.vocab_size, dtype=np.float64)
    out[dist.token_ids(c)] = dist.token_probs_within(c)
    return out


def generate(model: Model, prefix, cfg: DecodeConfig, *, eos_id: int | None = None,
             seq_index: int = 0) -> GenerationRecord:
    """Autoregressively extend ``prefix`` by up to max_new_tokens.

    The context window slides once the sequence outgrows the model's
    sequence length. Generation stops early if eos_id is produced; the
    eos itself is not emitted into the record.
    """
    cfg.validate()
    prefix = [int(t) for t in np.asarray(prefix, dtype=np.int64).ravel()]
    if len(prefix) < 1:
        raise ValueError("prefix must hold at least one token")
    if len(prefix) > model.config.sequence_length:
        raise ValueError(
            f"prefix length {len(prefix)} exceeds sequence length {model.config.sequence_length}")
    rec = GenerationRecord(prefix=prefix)
    ids = list(prefix)
    T = model.config.sequence_length
    for step in range(cfg.max_new_tokens):
        dist = model.next_token_distribution(ids[-T:])
        rng = stream(cfg.seed, DECODE, seq_index, step) if cfg.strategy == "topk" else None
        if cfg.mode == "decoupled":
            c, token = decode_step_decoupled(dist, cfg, rng)
        else:
            token = decode_step_coupled(dist, cfg, rng)
            c = int(dist.partition.class_of[token])
        if eos_id is not None and token == eos_id:
            break
        rec.tokens.append(token)
        rec.classes.append(c)
        rec.logprobs.append(float(dist.combined_logprobs[token]))
        ids.append(token)
    return rec


def generate_batch(model: Model, prefixes, cfg: DecodeConfig, *, eos_id: int | None = None,
                   start_index: int = 0) -> list[GenerationRecord]:
    """Generate one record per prefix; prefix i uses seq_index
    start_index + i, so results match one-at-a-time calls exactly."""
    return [generate(model, p, cfg, eos_id=eos_id, seq_index=start_index + i)
            for i, p in enumerate(prefixes)]


def save_generations(path: str | Path, records, meta: dict | None = None) -> None:
    """JSON-lines: an optional meta object first, then one record per line."""
    lines = []
    if meta is not None:
        lines.append(json.dumps({"meta": meta}, sort_keys=True))
    lines.extend(r.to_json() for r in records)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_generations(path: str | Path):
    """Returns (records, meta); meta is {} when the file has none."""
    from . import DataError

    p = Path(path)
    if not p.exists():
        raise DataError(f"generations file not found: {p}")
    records, meta = [], {}
    for line in p.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        if "meta" in obj and "tokens" not in obj:
            meta = obj["meta"]
        else:
            records.append(GenerationRecord(obj["prefix"], obj["tokens"],
                                            obj["classes"], obj["logprobs"]))
    return records, meta
