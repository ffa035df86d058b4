"""Shared fixtures for the test suite.

The expensive pieces (a desk-scale synthetic corpus, trained models for the
directional experiment, a memorized overfit model) are session-scoped so the
acceptance tests and the unit tests that need a real trained model all share
one build.
"""

import time

import numpy as np
import pytest

from freqlm.corpus import (
    Vocabulary,
    WhitespaceTokenizer,
    build_frequency_table,
    load_split,
    read_documents,
)
from freqlm.decoding import DecodeConfig, generate_batch
from freqlm.model import Model, ModelConfig
from freqlm.partition import mefmax
from freqlm.synth import SynthConfig, write_corpus
from freqlm.training import TrainConfig, train

EXPERIMENT_SEEDS = (0, 1, 2, 3, 4)
PREFIX_TOKENS = 50
CONTINUATION_TOKENS = 100
NUM_PREFIXES = 32
TRAIN_STEPS = 600


def experiment_model_config(vocab_size, head_type, seed):
    return ModelConfig(
        layers=2,
        hidden_dim=64,
        heads=2,
        head_dim=32,
        ffn_dim=256,
        dropout=0.1,
        sequence_length=128,
        vocab_size=vocab_size,
        head_type=head_type,
        seed=seed,
    )


def experiment_train_config():
    # eval_interval past total_steps: skip validation passes during the sweep
    return TrainConfig(batch_size=16, learning_rate=3e-4, total_steps=TRAIN_STEPS,
                       eval_interval=10**9)


def generate_continuations(model, prefixes, *, seed, mode="decoupled"):
    cfg = DecodeConfig(strategy="topk", k=10, mode=mode,
                       max_new_tokens=CONTINUATION_TOKENS, seed=seed)
    records = generate_batch(model, prefixes, cfg)
    return [tuple(r.tokens) for r in records]


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """Synthetic Zipfian corpus at experiment scale, plus vocab / freq / partition."""
    t0 = time.monotonic()
    root = tmp_path_factory.mktemp("desk")
    cfg = SynthConfig(seed=0)
    paths = write_corpus(root, cfg, 200_000, 20_000, 30_000)
    tok = WhitespaceTokenizer()
    vocab = Vocabulary.build(
        (tok.tokenize(d) for d in read_documents(paths["train"])), max_size=2000)
    streams = {s: load_split(paths[s], tok, vocab, s) for s in ("train", "valid", "test")}
    freq = build_frequency_table(streams["train"], vocab)
    part = mefmax(freq)
    return {
        "paths": paths,
        "vocab": vocab,
        "streams": streams,
        "freq": freq,
        "partition": part,
        "build_seconds": time.monotonic() - t0,
    }


@pytest.fixture(scope="session")
def desk_windows(desk):
    """Shared prefix/reference windows sliced from the held-out test split."""
    from freqlm.cli import slice_eval_windows

    prefixes, refs = slice_eval_windows(
        desk["streams"]["test"].ids, PREFIX_TOKENS, CONTINUATION_TOKENS, NUM_PREFIXES)
    return prefixes, [tuple(r) for r in refs]


@pytest.fixture(scope="session")
def desk_models(desk):
    """Matched MLE / factorized models per experiment seed, trained once."""
    t0 = time.monotonic()
    ids = desk["streams"]["train"].ids
    vocab_size = len(desk["vocab"])
    cache = {}
    for seed in EXPERIMENT_SEEDS:
        for head in ("mle", "f2"):
            part = desk["partition"] if head == "f2" else None
            model = Model(experiment_model_config(vocab_size, head, seed), part)
            train(model, ids, None, experiment_train_config())
            cache[head, seed] = model
    cache["train_seconds"] = time.monotonic() - t0
    return cache


@pytest.fixture(scope="session")
def overfit_setup():
    """A 500-token cyclic corpus memorized by both head types.

    Used for loss / perplexity sanity bounds and for greedy-reconstruction
    decoding checks.
    """
    rng = np.random.default_rng(42)
    vocab_size = 40
    base = rng.integers(2, vocab_size, size=100).astype(np.int64)
    ids = np.tile(base, 5)
    counts = np.bincount(ids, minlength=vocab_size)
    part = mefmax(counts)
    tcfg = TrainConfig(batch_size=8, learning_rate=3e-3, total_steps=200,
                       eval_interval=10**9)
    models = {}
    for head in ("mle", "f2"):
        cfg = ModelConfig(layers=2, hidden_dim=64, heads=2, head_dim=32, ffn_dim=256,
                          dropout=0.0, sequence_length=128, vocab_size=vocab_size,
                          head_type=head, seed=0)
        model = Model(cfg, part if head == "f2" else None)
        result = train(model, ids, None, tcfg)
        models[head] = (model, result)
    return {"ids": ids, "counts": counts, "partition": part, "models": models}
