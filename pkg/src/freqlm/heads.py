"""Factorized output head over frequency classes.

The next-token posterior is split into a class softmax times a
within-class token softmax:

    p(x | h) = p1(c(x) | h) * p2(x | c(x), h)

with p1 computed from class embeddings u and p2 from the token output
embeddings o of the target's class only. Training minimizes
-[log p1 + log p2], which equals -log of the combined posterior, so the
factorized loss and the combined distribution are two views of the same
quantity. With a single class the whole thing collapses to a plain
softmax over the vocabulary, which doubles as the MLE baseline head.

Token output embeddings are stored in frequency-rank order (row r
belongs to the token ``partition.sorted_order[r]``), so each class
occupies a contiguous block of rows and the training path never touches
logits outside the target's class.

All functions preserve the dtype of their inputs; gradients are exact
analytic softmax-cross-entropy gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import log_softmax
from .partition import ClassPartition


@dataclass
class HeadParameters:
    """Class and token output embeddings, with optional logit biases.

    Biases default to None (absent); when provided they are added to the
    corresponding logits and receive gradients like any other parameter.
    """

    class_embeddings: np.ndarray  # (num_classes, d)
    token_embeddings: np.ndarray  # (V, d), rows in frequency-rank order
    class_bias: np.ndarray | None = None
    token_bias: np.ndarray | None = None

    @property
    def num_classes(self) -> int:
        return int(self.class_embeddings.shape[0])

    @property
    def vocab_size(self) -> int:
        return int(self.token_embeddings.shape[0])

    @property
    def dim(self) -> int:
        return int(self.token_embeddings.shape[1])

    def validate_against(self, partition: ClassPartition) -> None:
        if self.num_classes != partition.num_classes:
            raise ValueError(
                f"head has {self.num_classes} class rows but partition has "
                f"{partition.num_classes} classes"
            )
        if self.vocab_size != partition.vocab_size:
            raise ValueError(
                f"head has {self.vocab_size} token rows but partition covers "
                f"{partition.vocab_size} tokens"
            )
        if self.class_embeddings.shape[1] != self.dim:
            raise ValueError("class and token embeddings disagree on width")


@dataclass
class FactorizedDistribution:
    """Both stages of the posterior for a single hidden state.

    ``class_logprobs`` has one entry per class; ``within_logprobs_rank``
    holds log p2 for every token, indexed by frequency rank so a class's
    entries are contiguous. Probabilities in token-id order are exposed
    through ``combined`` / ``combined_logprobs``.
    """

    partition: ClassPartition
    class_logprobs: np.ndarray
    within_logprobs_rank: np.ndarray

    @property
    def class_probs(self) -> np.ndarray:
        return np.exp(self.class_logprobs)

    def token_ids(self, c: int) -> np.ndarray:
        return self.partition.class_token_ids(c)

    def token_logprobs_within(self, c: int) -> np.ndarray:
        return self.within_logprobs_rank[self.partition.class_slice(c)]

    def token_probs_within(self, c: int) -> np.ndarray:
        return np.exp(self.token_logprobs_within(c))

    @property
    def combined_logprobs(self) -> np.ndarray:
        class_by_rank = self.partition.class_of[self.partition.sorted_order]
        by_rank = self.class_logprobs[class_by_rank] + self.within_logprobs_rank
        out = np.empty_like(by_rank)
        out[self.partition.sorted_order] = by_rank
        return out

    @property
    def combined(self) -> np.ndarray:
        return np.exp(self.combined_logprobs)


def forward(h: np.ndarray, params: HeadParameters, partition: ClassPartition) -> FactorizedDistribution:
    """Evaluate both softmax stages for one hidden state.

    Used on the evaluation/decoding path, so it computes in float64 and
    materializes p2 for every class. Training uses the nll_* functions,
    which only touch the target class.
    """
    h = np.asarray(h, dtype=np.float64).ravel()
    params.validate_against(partition)
    if h.shape[0] != params.dim:
        raise ValueError(f"hidden state has width {h.shape[0]}, head expects {params.dim}")

    class_logits = params.class_embeddings.astype(np.float64) @ h
    if params.class_bias is not None:
        class_logits = class_logits + params.class_bias
    class_logprobs = log_softmax(class_logits)

    token_logits = params.token_embeddings.astype(np.float64) @ h
    if params.token_bias is not None:
        token_logits = token_logits + params.token_bias
    within = np.empty_like(token_logits)
    for c in range(partition.num_classes):
        s = partition.class_slice(c)
        within[s] = log_softmax(token_logits[s])
    return FactorizedDistribution(partition, class_logprobs, within)


# ---------------------------------------------------------------------------
# Losses and analytic gradients
# ---------------------------------------------------------------------------


def _softmax_ce(logits: np.ndarray, target: int):
    """Loss and dloss/dlogits for -log softmax(logits)[target]."""
    lsm = log_softmax(logits)
    loss = -lsm[target]
    dlogits = np.exp(lsm)
    dlogits[target] -= 1.0
    return loss, dlogits


def nll_f2(h: np.ndarray, target_token: int, params: HeadParameters, partition: ClassPartition):
    """Factorized negative log-likelihood of one target and its gradients.

    Returns ``(loss, grads)`` where grads holds full-shape arrays for
    "h", "class_embeddings" and "token_embeddings" (plus the biases when
    present). Only the target class's token rows are nonzero in the
    token-embedding gradient.
    """
    h = np.asarray(h).ravel()
    params.validate_against(partition)
    if not 0 <= target_token < partition.vocab_size:
        raise ValueError(f"target token {target_token} outside vocabulary")
    c = int(partition.class_of[target_token])
    local = int(partition.local_index[target_token])
    s = partition.class_slice(c)

    class_logits = params.class_embeddings @ h
    if params.class_bias is not None:
        class_logits = class_logits + params.class_bias
    loss1, d1 = _softmax_ce(class_logits, c)

    block = params.token_embeddings[s]
    token_logits = block @ h
    if params.token_bias is not None:
        token_logits = token_logits + params.token_bias[s]
    loss2, d2 = _softmax_ce(token_logits, local)

    grads = {
        "h": params.class_embeddings.T @ d1 + block.T @ d2,
        "class_embeddings": np.outer(d1, h),
        "token_embeddings": np.zeros_like(params.token_embeddings),
    }
    grads["token_embeddings"][s] = np.outer(d2, h)
    if params.class_bias is not None:
        grads["class_bias"] = d1
    if params.token_bias is not None:
        grads["token_bias"] = np.zeros_like(params.token_bias)
        grads["token_bias"][s] = d2
    return loss1 + loss2, grads


def nll_mle(h: np.ndarray, target_token: int, output_embeddings: np.ndarray, bias: np.ndarray | None = None):
    """Plain softmax cross-entropy over the full vocabulary."""
    h = np.asarray(h).ravel()
    if not 0 <= target_token < output_embeddings.shape[0]:
        raise ValueError(f"target token {target_token} outside vocabulary")
    logits = output_embeddings @ h
    if bias is not None:
        logits = logits + bias
    loss, d = _softmax_ce(logits, int(target_token))
    grads = {"h": output_embeddings.T @ d, "output_embeddings": np.outer(d, h)}
    if bias is not None:
        grads["bias"] = d
    return loss, grads


def nll_f2_batch(H: np.ndarray, targets: np.ndarray, params: HeadParameters, partition: ClassPartition):
    """Summed factorized loss over a batch of hidden states.

    ``H`` is (N, d), ``targets`` (N,). Returns
    ``(loss_sum, dH, grads)``; the token stage is computed one class
    bucket at a time so each position only pays for its own class.
    """
    params.validate_against(partition)
    H = np.asarray(H)
    targets = np.asarray(targets, dtype=np.int64)
    n = H.shape[0]
    classes = partition.class_of[targets]
    locals_ = partition.local_index[targets]

    # class stage, fully vectorized
    logits1 = H @ params.class_embeddings.T
    if params.class_bias is not None:
        logits1 = logits1 + params.class_bias
    lsm1 = log_softmax(logits1, axis=-1)
    rows = np.arange(n)
    loss = -float(np.sum(lsm1[rows, classes], dtype=np.float64))
    P1 = np.exp(lsm1)
    P1[rows, classes] -= 1.0
    dH = P1 @ params.class_embeddings
    grads = {
        "class_embeddings": P1.T @ H,
        "token_embeddings": np.zeros_like(params.token_embeddings),
    }
    if params.class_bias is not None:
        grads["class_bias"] = P1.sum(axis=0)
    if params.token_bias is not None:
        grads["token_bias"] = np.zeros_like(params.token_bias)

    # token stage, bucketed by target class
    for c in np.unique(classes):
        idx = np.nonzero(classes == c)[0]
        s = partition.class_slice(int(c))
        block = params.token_embeddings[s]
        logits2 = H[idx] @ block.T
        if params.token_bias is not None:
            logits2 = logits2 + params.token_bias[s]
        lsm2 = log_softmax(logits2, axis=-1)
        sub = np.arange(idx.shape[0])
        loss -= float(np.sum(lsm2[sub, locals_[idx]], dtype=np.float64))
        P2 = np.exp(lsm2)
        P2[sub, locals_[idx]] -= 1.0
        dH[idx] += P2 @ block
        grads["token_embeddings"][s] += P2.T @ H[idx]
        if params.token_bias is not None:
            grads["token_bias"][s] += P2.sum(axis=0)
    return loss, dH, grads


def nll_mle_batch(H: np.ndarray, targets: np.ndarray, output_embeddings: np.ndarray, bias: np.ndarray | None = None):
    """Summed full-vocabulary cross-entropy over a batch."""
    H = np.asarray(H)
    targets = np.asarray(targets, dtype=np.int64)
    n = H.shape[0]
    logits = H @ output_embeddings.T
    if bias is not None:
        logits = logits + bias
    lsm = log_softmax(logits, axis=-1)
    rows = np.arange(n)
    loss = -float(np.sum(lsm[rows, targets], dtype=np.float64))
    P = np.exp(lsm)
    P[rows, targets] -= 1.0
    dH = P @ output_embeddings
    grads = {"output_embeddings": P.T @ H}
    if bias is not None:
        grads["bias"] = P.sum(axis=0)
    return loss, dH, grads
