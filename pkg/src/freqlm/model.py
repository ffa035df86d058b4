"""Small autoregressive transformer with a hand-written backward pass.

Decoder-only, pre-norm, learned absolute positions, GELU feed-forward —
a desk-scale shrink of the usual GPT-2 recipe. Parameters live in a flat
name -> array dict so the optimizer and checkpointing can treat them
uniformly. The output head is pluggable: a plain softmax baseline, or
the class-factorized head; both route through the same loss interface.

Everything is plain numpy. The forward pass records the intermediates
needed for the exact analytic backward pass, so a model can be
instantiated in float64 and verified against finite differences
end-to-end.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ConfigError
from .heads import HeadParameters, FactorizedDistribution, forward as head_forward
from .heads import nll_f2_batch, nll_mle_batch
from .nn import gelu_backward, gelu_forward, layer_norm, layer_norm_backward
from .partition import ClassPartition, single_class_partition
from .rng import DROPOUT, INIT, stream

HEAD_TYPES = ("mle", "f2")


@dataclass
class ModelConfig:
    layers: int = 2
    hidden_dim: int = 64
    heads: int = 2
    head_dim: int = 32
    ffn_dim: int = 256
    dropout: float = 0.1
    sequence_length: int = 128
    vocab_size: int = 2000
    head_type: str = "mle"
    head_bias: bool = False
    tie_embeddings: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.head_type not in HEAD_TYPES:
            raise ConfigError(f"head_type must be one of {HEAD_TYPES}, got {self.head_type!r}")
        if self.hidden_dim != self.heads * self.head_dim:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} != heads {self.heads} x head_dim {self.head_dim}"
            )
        if self.sequence_length < 2:
            raise ConfigError("sequence_length must be at least 2")
        if self.layers < 1 or self.vocab_size < 2 or self.ffn_dim < 1:
            raise ConfigError("layers, ffn_dim must be >= 1 and vocab_size >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {
            "layers": self.layers,
            "hidden_dim": self.hidden_dim,
            "heads": self.heads,
            "head_dim": self.head_dim,
            "ffn_dim": self.ffn_dim,
            "dropout": self.dropout,
            "sequence_length": self.sequence_length,
            "vocab_size": self.vocab_size,
            "head_type": self.head_type,
            "head_bias": self.head_bias,
            "tie_embeddings": self.tie_embeddings,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


INIT_STD = 0.02


def _init_kind(name: str) -> str:
    """weight tensors get N(0, 0.02), norm gains 1, everything else 0"""
    leaf = name.rsplit(".", 1)[-1]
    if name in ("tok_emb", "pos_emb") or name in ("head.u", "head.o") or leaf.startswith("w"):
        return "normal"
    if leaf == "g":
        return "ones"
    return "zeros"


def parameter_shapes(cfg: ModelConfig, num_classes: int) -> dict[str, tuple]:
    d, f, v = cfg.hidden_dim, cfg.ffn_dim, cfg.vocab_size
    shapes: dict[str, tuple] = {"tok_emb": (v, d), "pos_emb": (cfg.sequence_length, d)}
    for i in range(cfg.layers):
        shapes[f"h{i}.ln1.g"] = (d,)
        shapes[f"h{i}.ln1.b"] = (d,)
        shapes[f"h{i}.attn.w_qkv"] = (d, 3 * d)
        shapes[f"h{i}.attn.b_qkv"] = (3 * d,)
        shapes[f"h{i}.attn.w_out"] = (d, d)
        shapes[f"h{i}.attn.b_out"] = (d,)
        shapes[f"h{i}.ln2.g"] = (d,)
        shapes[f"h{i}.ln2.b"] = (d,)
        shapes[f"h{i}.mlp.w_in"] = (d, f)
        shapes[f"h{i}.mlp.b_in"] = (f,)
        shapes[f"h{i}.mlp.w_out"] = (f, d)
        shapes[f"h{i}.mlp.b_out"] = (d,)
    shapes["ln_f.g"] = (d,)
    shapes["ln_f.b"] = (d,)
    if cfg.head_type == "f2":
        shapes["head.u"] = (num_classes, d)
        if cfg.head_bias:
            shapes["head.bu"] = (num_classes,)
    if not cfg.tie_embeddings:
        shapes["head.o"] = (v, d)
    if cfg.head_bias:
        shapes["head.bo"] = (v,)
    return shapes


def init_params(cfg: ModelConfig, num_classes: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """Draws happen in sorted name order from one dedicated stream, so the
    initialization is a pure function of the config."""
    rng = stream(cfg.seed, INIT)
    params = {}
    for name, shape in sorted(parameter_shapes(cfg, num_classes).items()):
        kind = _init_kind(name)
        if kind == "normal":
            params[name] = rng.normal(0.0, INIT_STD, size=shape).astype(dtype)
        elif kind == "ones":
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return params


class Model:
    """Bundles config, class partition, and the parameter dict.

    ``partition`` is required for the factorized head; the baseline head
    gets an implicit single-class partition so decoding can treat both
    head types uniformly.
    """

    def __init__(self, config: ModelConfig, partition: ClassPartition | None = None,
                 params: dict | None = None, dtype=np.float32):
        config.validate()
        if config.head_type == "f2":
            if partition is None:
                raise ConfigError("factorized head requires a class partition")
            if partition.vocab_size != config.vocab_size:
                raise ConfigError(
                    f"partition covers {partition.vocab_size} tokens, model vocabulary is "
                    f"{config.vocab_size}"
                )
        else:
            partition = single_class_partition(config.vocab_size)
        self.config = config
        self.partition = partition
        self.dtype = np.dtype(dtype)
        self.params = params if params is not None else init_params(
            config, partition.num_classes, self.dtype)

    # -- head plumbing ------------------------------------------------------

    def _output_embeddings(self) -> np.ndarray:
        """Token output matrix in frequency-rank order."""
        if self.config.tie_embeddings:
            return self.params["tok_emb"][self.partition.sorted_order]
        return self.params["head.o"]

    def head_params(self) -> HeadParameters:
        if self.config.head_type == "f2":
            u = self.params["head.u"]
            bu = self.params.get("head.bu")
        else:
            u = np.zeros((1, self.config.hidden_dim), dtype=self.dtype)
            bu = None
        return HeadParameters(u, self._output_embeddings(), bu, self.params.get("head.bo"))

    def next_token_distribution(self, context) -> FactorizedDistribution:
        """Posterior over the token following ``context`` (eval mode)."""
        h = self.encode(context)[-1]
        return head_forward(h, self.head_params(), self.partition)

    # -- forward ------------------------------------------------------------

    def encode(self, context) -> np.ndarray:
        """Hidden states for a single context, deterministic (no dropout)."""
        ids = np.asarray(context, dtype=np.int64).ravel()
        if ids.size == 0:
            raise ValueError("context must be non-empty")
        h, _ = self._forward(ids[None, :], train=False, step=0)
        return h[0]

    def _dropout_mask(self, site: int, shape, step: int):
        p = self.config.dropout
        r = stream(self.config.seed, DROPOUT, step, site)
        return (r.random(shape) >= p).astype(self.dtype) / self.dtype.type(1.0 - p)

    def _forward(self, x: np.ndarray, *, train: bool, step: int):
        cfg = self.config
        p = self.params
        B, T = x.shape
        if T > cfg.sequence_length:
            raise ValueError(f"context length {T} exceeds sequence_length {cfg.sequence_length}")
        if np.any(x < 0) or np.any(x >= cfg.vocab_size):
            raise ValueError("token id outside vocabulary")
        nh, hd = cfg.heads, cfg.head_dim
        scale = self.dtype.type(1.0 / np.sqrt(hd))
        drop = train and cfg.dropout > 0.0
        neg_inf = -np.inf
        causal = np.tril(np.ones((T, T), dtype=bool))

        X = p["tok_emb"][x] + p["pos_emb"][:T]
        m_emb = self._dropout_mask(0, X.shape, step) if drop else None
        if m_emb is not None:
            X = X * m_emb

        layer_caches = []
        for i in range(cfg.layers):
            a1, ln1_cache = layer_norm(X, p[f"h{i}.ln1.g"], p[f"h{i}.ln1.b"])
            qkv = a1 @ p[f"h{i}.attn.w_qkv"] + p[f"h{i}.attn.b_qkv"]
            q, k, v = np.split(qkv, 3, axis=-1)
            q = q.reshape(B, T, nh, hd).transpose(0, 2, 1, 3)
            k = k.reshape(B, T, nh, hd).transpose(0, 2, 1, 3)
            v = v.reshape(B, T, nh, hd).transpose(0, 2, 1, 3)
            att = np.matmul(q, k.transpose(0, 1, 3, 2)) * scale
            att = np.where(causal, att, neg_inf)
            att = att - att.max(axis=-1, keepdims=True)
            A = np.exp(att)
            A /= A.sum(axis=-1, keepdims=True)
            m_att = self._dropout_mask(3 * i + 1, A.shape, step) if drop else None
            Ad = A * m_att if m_att is not None else A
            o_heads = np.matmul(Ad, v)
            merged = o_heads.transpose(0, 2, 1, 3).reshape(B, T, nh * hd)
            proj = merged @ p[f"h{i}.attn.w_out"] + p[f"h{i}.attn.b_out"]
            m_resid = self._dropout_mask(3 * i + 2, proj.shape, step) if drop else None
            if m_resid is not None:
                proj = proj * m_resid
            X1 = X + proj

            m2, ln2_cache = layer_norm(X1, p[f"h{i}.ln2.g"], p[f"h{i}.ln2.b"])
            mi = m2 @ p[f"h{i}.mlp.w_in"] + p[f"h{i}.mlp.b_in"]
            g_act, g_tanh = gelu_forward(mi)
            mo = g_act @ p[f"h{i}.mlp.w_out"] + p[f"h{i}.mlp.b_out"]
            m_mlp = self._dropout_mask(3 * i + 3, mo.shape, step) if drop else None
            if m_mlp is not None:
                mo = mo * m_mlp
            X = X1 + mo
            layer_caches.append({
                "a1": a1, "ln1": ln1_cache, "q": q, "k": k, "v": v, "A": A, "Ad": Ad,
                "merged": merged, "m_att": m_att, "m_resid": m_resid,
                "m2": m2, "ln2": ln2_cache, "mi": mi, "g_act": g_act,
                "g_tanh": g_tanh, "m_mlp": m_mlp,
            })

        H, lnf_cache = layer_norm(X, p["ln_f.g"], p["ln_f.b"])
        cache = {"x": x, "m_emb": m_emb, "layers": layer_caches, "lnf": lnf_cache,
                 "scale": scale}
        return H, cache

    # -- backward -----------------------------------------------------------

    def _backward(self, dH: np.ndarray, cache: dict) -> dict[str, np.ndarray]:
        cfg = self.config
        p = self.params
        x = cache["x"]
        B, T = x.shape
        nh, hd = cfg.heads, cfg.head_dim
        scale = cache["scale"]
        grads: dict[str, np.ndarray] = {}

        dX, grads["ln_f.g"], grads["ln_f.b"] = layer_norm_backward(dH, cache["lnf"])

        for i in reversed(range(cfg.layers)):
            c = cache["layers"][i]
            # feed-forward block
            dmo = dX * c["m_mlp"] if c["m_mlp"] is not None else dX
            grads[f"h{i}.mlp.w_out"] = c["g_act"].reshape(-1, cfg.ffn_dim).T @ dmo.reshape(-1, cfg.hidden_dim)
            grads[f"h{i}.mlp.b_out"] = dmo.sum(axis=(0, 1))
            dg = dmo @ p[f"h{i}.mlp.w_out"].T
            dmi = gelu_backward(c["mi"], dg, c["g_tanh"])
            grads[f"h{i}.mlp.w_in"] = c["m2"].reshape(-1, cfg.hidden_dim).T @ dmi.reshape(-1, cfg.ffn_dim)
            grads[f"h{i}.mlp.b_in"] = dmi.sum(axis=(0, 1))
            dm2 = dmi @ p[f"h{i}.mlp.w_in"].T
            dX1_ln, grads[f"h{i}.ln2.g"], grads[f"h{i}.ln2.b"] = layer_norm_backward(dm2, c["ln2"])
            dX1 = dX + dX1_ln

            # attention block
            dproj = dX1 * c["m_resid"] if c["m_resid"] is not None else dX1
            grads[f"h{i}.attn.w_out"] = c["merged"].reshape(-1, cfg.hidden_dim).T @ dproj.reshape(-1, cfg.hidden_dim)
            grads[f"h{i}.attn.b_out"] = dproj.sum(axis=(0, 1))
            dmerged = dproj @ p[f"h{i}.attn.w_out"].T
            do_heads = dmerged.reshape(B, T, nh, hd).transpose(0, 2, 1, 3)
            dAd = np.matmul(do_heads, c["v"].transpose(0, 1, 3, 2))
            dv = np.matmul(c["Ad"].transpose(0, 1, 3, 2), do_heads)
            dA = dAd * c["m_att"] if c["m_att"] is not None else dAd
            # softmax backward; masked entries have A == 0 so they stay 0
            datt = c["A"] * (dA - np.sum(dA * c["A"], axis=-1, keepdims=True))
            dq = np.matmul(datt, c["k"]) * scale
            dk = np.matmul(datt.transpose(0, 1, 3, 2), c["q"]) * scale
            dqkv = np.concatenate([
                t.transpose(0, 2, 1, 3).reshape(B, T, nh * hd) for t in (dq, dk, dv)
            ], axis=-1)
            grads[f"h{i}.attn.w_qkv"] = c["a1"].reshape(-1, cfg.hidden_dim).T @ dqkv.reshape(-1, 3 * cfg.hidden_dim)
            grads[f"h{i}.attn.b_qkv"] = dqkv.sum(axis=(0, 1))
            da1 = dqkv @ p[f"h{i}.attn.w_qkv"].T
            dX_ln, grads[f"h{i}.ln1.g"], grads[f"h{i}.ln1.b"] = layer_norm_backward(da1, c["ln1"])
            dX = dX1 + dX_ln

        if cache["m_emb"] is not None:
            dX = dX * cache["m_emb"]
        grads["pos_emb"] = np.zeros_like(p["pos_emb"])
        grads["pos_emb"][:T] = dX.sum(axis=0)
        grads["tok_emb"] = np.zeros_like(p["tok_emb"])
        np.add.at(grads["tok_emb"], x, dX)
        return grads

    # -- losses -------------------------------------------------------------

    def _head_loss(self, H_flat: np.ndarray, targets_flat: np.ndarray):
        """(summed nll, dH_flat, head grads keyed by parameter name)"""
        hp = self.head_params()
        if self.config.head_type == "f2":
            loss, dH, hg = nll_f2_batch(H_flat, targets_flat, hp, self.partition)
            named = {"head.u": hg["class_embeddings"]}
            token_grad = hg["token_embeddings"]
            if "class_bias" in hg:
                named["head.bu"] = hg["class_bias"]
            if "token_bias" in hg:
                named["head.bo"] = hg["token_bias"]
        else:
            loss, dH, hg = nll_mle_batch(H_flat, targets_flat, hp.token_embeddings,
                                         self.params.get("head.bo"))
            named = {}
            token_grad = hg["output_embeddings"]
            if "bias" in hg:
                named["head.bo"] = hg["bias"]
        if self.config.tie_embeddings:
            emb = np.zeros_like(self.params["tok_emb"])
            emb[self.partition.sorted_order] = token_grad
            named["tok_emb"] = emb
        else:
            named["head.o"] = token_grad
        return loss, dH, named

    def loss_and_grads(self, batch: np.ndarray, *, step: int = 0):
        """Mean per-token nll and its gradient for one training batch.

        ``batch`` is (B, L) token ids; positions 0..L-2 are the context
        and 1..L-1 the targets. Dropout masks are a pure function of
        (seed, step), so a step is reproducible in isolation.
        """
        batch = np.asarray(batch, dtype=np.int64)
        x, y = batch[:, :-1], batch[:, 1:]
        H, cache = self._forward(x, train=True, step=step)
        n = y.size
        H_flat = H.reshape(n, self.config.hidden_dim)
        loss_sum, dH_flat, head_grads = self._head_loss(H_flat, y.ravel())
        dH = (dH_flat / n).reshape(H.shape).astype(self.dtype, copy=False)
        grads = self._backward(dH, cache)
        for name, g in head_grads.items():
            scaled = g / n
            if name in grads:
                grads[name] += scaled
            else:
                grads[name] = scaled.astype(self.dtype, copy=False)
        return loss_sum / n, grads

    def nll_sum(self, contexts: np.ndarray, targets: np.ndarray) -> float:
        """Summed eval-mode nll of ``targets`` given aligned ``contexts``."""
        H, _ = self._forward(np.asarray(contexts, dtype=np.int64), train=False, step=0)
        hp = self.head_params()
        flat_t = np.asarray(targets, dtype=np.int64).ravel()
        H_flat = H.reshape(flat_t.size, self.config.hidden_dim)
        if self.config.head_type == "f2":
            loss, _, _ = nll_f2_batch(H_flat, flat_t, hp, self.partition)
        else:
            loss, _, _ = nll_mle_batch(H_flat, flat_t, hp.token_embeddings,
                                       self.params.get("head.bo"))
        return loss

    def num_parameters(self) -> int:
        return int(sum(a.size for a in self.params.values()))
