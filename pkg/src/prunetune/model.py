"""Tiny Transformer encoder-decoder built on :mod:`prunetune.tensor`.

Pre-layer-norm blocks, sinusoidal positions, one embedding table shared by
source, target and the (tied) output projection. Every parameter tensor
carries a :class:`~prunetune.params.ParamTag`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ContractError
from .params import ParamStore, ParamTag
from .tensor import Graph

PAD, BOS, EOS = 0, 1, 2
NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    model_dim: int = 64
    ffn_dim: int = 128
    heads: int = 2
    vocab_size: int = 64
    max_len: int = 32
    ln_eps: float = 1e-5

    def __post_init__(self):
        for field in ("num_layers", "model_dim", "ffn_dim", "heads", "vocab_size", "max_len"):
            if getattr(self, field) < 1:
                raise ContractError(f"{field} must be a positive integer")
        if self.model_dim % self.heads:
            raise ContractError("model_dim must be divisible by heads")
        if self.vocab_size <= EOS:
            raise ContractError("vocab_size must leave room for special tokens")


@dataclass(frozen=True)
class AdapterConfig:
    bottleneck_dim: int = 8

    def check(self, config: ModelConfig):
        if not 0 < self.bottleneck_dim < config.model_dim:
            raise ContractError("adapter bottleneck must be in (0, model_dim)")


def _glorot(rng, shape):
    bound = math.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: ModelConfig, seed: int = 0) -> ParamStore:
    """Glorot-uniform weights, unit layer-norm gains, zero biases."""
    rng = np.random.default_rng(seed)
    d, f, L = config.model_dim, config.ffn_dim, config.num_layers
    params = ParamStore()

    params.add("embed", _glorot(rng, (config.vocab_size, d)), ParamTag("embedding"))

    def attention(prefix, layer, side):
        for p in "qkvo":
            params.add(f"{prefix}.{p}.w", _glorot(rng, (d, d)), ParamTag("attention", layer, side))
            params.add(f"{prefix}.{p}.b", np.zeros(d), ParamTag("attention", layer, side))

    def norm(prefix, layer, side):
        params.add(f"{prefix}.g", np.ones(d), ParamTag("layer_norm", layer, side))
        params.add(f"{prefix}.b", np.zeros(d), ParamTag("layer_norm", layer, side))

    def ffn(prefix, layer, side):
        tag = ParamTag("ffn", layer, side)
        params.add(f"{prefix}.w1", _glorot(rng, (d, f)), tag)
        params.add(f"{prefix}.b1", np.zeros(f), tag)
        params.add(f"{prefix}.w2", _glorot(rng, (f, d)), tag)
        params.add(f"{prefix}.b2", np.zeros(d), tag)

    for i in range(L):
        norm(f"enc.{i}.ln1", i, "encoder")
        attention(f"enc.{i}.self", i, "encoder")
        norm(f"enc.{i}.ln2", i, "encoder")
        ffn(f"enc.{i}.ffn", i, "encoder")
    norm("enc.ln", L, "encoder")
    for i in range(L):
        norm(f"dec.{i}.ln1", i, "decoder")
        attention(f"dec.{i}.self", i, "decoder")
        norm(f"dec.{i}.ln2", i, "decoder")
        attention(f"dec.{i}.cross", i, "decoder")
        norm(f"dec.{i}.ln3", i, "decoder")
        ffn(f"dec.{i}.ffn", i, "decoder")
    norm("dec.ln", L, "decoder")
    params.add("out.b", np.zeros(config.vocab_size), ParamTag("output_projection"))
    params.check_tags()
    return params


def param_count(config: ModelConfig) -> int:
    """Closed-form size of :func:`init_params` (no adapters)."""
    d, f, L, V = config.model_dim, config.ffn_dim, config.num_layers, config.vocab_size
    attn = 4 * (d * d + d)
    ffn = d * f + f + f * d + d
    enc_block = 2 * (2 * d) + attn + ffn
    dec_block = 3 * (2 * d) + 2 * attn + ffn
    return V * d + L * (enc_block + dec_block) + 2 * (2 * d) + V


def has_adapters(params) -> bool:
    return any(t.group == "adapter" for t in getattr(params, "tags", {}).values())


def attach_adapters(params: ParamStore, config: ModelConfig, adapter: AdapterConfig,
                    seed: int = 0) -> ParamStore:
    """Return a copy of ``params`` with a residual bottleneck after every block.

    The up-projection starts at zero, so the adapted model computes exactly
    the same function until the adapters are trained.
    """
    adapter.check(config)
    if has_adapters(params):
        raise ContractError("adapters are already attached")
    rng = np.random.default_rng(seed)
    d, b = config.model_dim, adapter.bottleneck_dim
    out = params.copy()
    for side, prefix in (("encoder", "enc"), ("decoder", "dec")):
        for i in range(config.num_layers):
            tag = ParamTag("adapter", i, side)
            out.add(f"{prefix}.{i}.adapter.down.w", _glorot(rng, (d, b)), tag)
            out.add(f"{prefix}.{i}.adapter.down.b", np.zeros(b), tag)
            out.add(f"{prefix}.{i}.adapter.up.w", np.zeros((b, d)), tag)
            out.add(f"{prefix}.{i}.adapter.up.b", np.zeros(d), tag)
    out.check_tags()
    return out


@lru_cache(maxsize=8)
def positional_encoding(max_len: int, dim: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    rate = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2) / dim))
    table = np.zeros((max_len, dim))
    table[:, 0::2] = np.sin(pos * rate)
    table[:, 1::2] = np.cos(pos * rate[: table[:, 1::2].shape[1]])
    table.flags.writeable = False
    return table


# -- graph construction -----------------------------------------------------


def _linear(g: Graph, x, prefix, w="w", b="b"):
    return g.add(g.matmul(x, g.param(f"{prefix}.{w}")), g.param(f"{prefix}.{b}"))


def _norm(g, x, prefix, eps):
    return g.layer_norm(x, g.param(f"{prefix}.g"), g.param(f"{prefix}.b"), eps,
                        name=f"{prefix}#{len(g.nodes)}")


def _attention(g, config, x, memory, prefix, bias):
    """Multi-head attention; ``bias`` is an additive mask broadcast to scores."""
    B, T, d = x.shape
    S = memory.shape[1]
    H = config.heads
    dh = d // H

    def heads(node, length):
        return g.transpose(g.reshape(node, (B, length, H, dh)), (0, 2, 1, 3))

    q = heads(_linear(g, x, f"{prefix}.q"), T)
    k = heads(_linear(g, memory, f"{prefix}.k"), S)
    v = heads(_linear(g, memory, f"{prefix}.v"), S)
    scores = g.scale(g.matmul(q, g.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if bias is not None:
        scores = g.add(scores, bias)
    weights = g.softmax(scores, name=f"{prefix}.softmax#{len(g.nodes)}")
    ctx = g.reshape(g.transpose(g.matmul(weights, v), (0, 2, 1, 3)), (B, T, d))
    return _linear(g, ctx, f"{prefix}.o")


def _ffn(g, x, prefix):
    h = g.relu(_linear(g, x, prefix, "w1", "b1"))
    return _linear(g, h, prefix, "w2", "b2")


def _adapter(g, x, prefix):
    if f"{prefix}.adapter.down.w" not in g.params:
        return x
    h = g.relu(_linear(g, x, f"{prefix}.adapter.down"))
    return g.add(x, _linear(g, h, f"{prefix}.adapter.up"))


def _embed(g, config, ids):
    length = ids.shape[1]
    if length > config.max_len:
        raise ContractError(f"sequence length {length} exceeds max_len {config.max_len}")
    x = g.scale(g.embedding(g.param("embed"), ids), math.sqrt(config.model_dim))
    pe = positional_encoding(config.max_len, config.model_dim)[:length]
    return g.add(x, g.constant(pe, name=f"positions#{len(g.nodes)}"))


def _check_ids(config, ids, what):
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ContractError(f"{what} token ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise ContractError(f"{what} contains ids outside [0, {config.vocab_size})")
    return ids


def encode(g: Graph, config: ModelConfig, src):
    """Return ``(memory, source key bias)`` for a batch of source ids."""
    src = _check_ids(config, src, "source")
    x = _embed(g, config, src)
    src_bias = g.constant(np.where(src == PAD, NEG_INF, 0.0)[:, None, None, :])
    for i in range(config.num_layers):
        p = f"enc.{i}"
        h = _norm(g, x, f"{p}.ln1", config.ln_eps)
        x = g.add(x, _attention(g, config, h, h, f"{p}.self", src_bias))
        x = g.add(x, _ffn(g, _norm(g, x, f"{p}.ln2", config.ln_eps), f"{p}.ffn"))
        x = _adapter(g, x, p)
    return _norm(g, x, "enc.ln", config.ln_eps), src_bias


def decode(g: Graph, config: ModelConfig, memory, src_bias, tgt_in):
    """Logits of shape ``(B, T, V)`` for decoder inputs ``tgt_in``."""
    tgt_in = _check_ids(config, tgt_in, "target")
    T = tgt_in.shape[1]
    causal = np.triu(np.full((T, T), NEG_INF), k=1)[None, None]
    causal_bias = g.constant(causal)
    y = _embed(g, config, tgt_in)
    for i in range(config.num_layers):
        p = f"dec.{i}"
        h = _norm(g, y, f"{p}.ln1", config.ln_eps)
        y = g.add(y, _attention(g, config, h, h, f"{p}.self", causal_bias))
        h = _norm(g, y, f"{p}.ln2", config.ln_eps)
        y = g.add(y, _attention(g, config, h, memory, f"{p}.cross", src_bias))
        y = g.add(y, _ffn(g, _norm(g, y, f"{p}.ln3", config.ln_eps), f"{p}.ffn"))
        y = _adapter(g, y, p)
    y = _norm(g, y, "dec.ln", config.ln_eps)
    logits = g.matmul(y, g.transpose(g.param("embed"), (1, 0)))
    return g.add(logits, g.param("out.b"), name=f"logits#{len(g.nodes)}")


def logits_graph(g: Graph, config: ModelConfig, src, tgt_in):
    memory, src_bias = encode(g, config, src)
    return decode(g, config, memory, src_bias, tgt_in)


def loss_builder(config: ModelConfig, label_smoothing: float = 0.0):
    """Build function: inputs ``src``, ``tgt_in``, ``tgt_out`` -> ``loss``, ``logits``."""

    def build(g, inputs):
        logits = logits_graph(g, config, inputs["src"], inputs["tgt_in"])
        B, T, V = logits.shape
        flat = g.reshape(logits, (B * T, V))
        targets = np.asarray(inputs["tgt_out"]).reshape(-1)
        weights = (targets != PAD).astype(np.float64)
        loss = g.cross_entropy(flat, targets, weights, label_smoothing, name="loss")
        return {"loss": loss, "logits": flat}

    return build


def transformer_forward(config: ModelConfig, params, src, tgt_prefix, apply_mask=None):
    """Logits for one sentence (1-D ids) or a padded batch (2-D ids).

    With ``apply_mask`` the computation is exactly that of
    ``apply_mask.apply(params)`` with no mask.
    """
    src = np.asarray(src)
    tgt_prefix = np.asarray(tgt_prefix)
    single = src.ndim == 1
    if single:
        src, tgt_prefix = src[None], tgt_prefix[None]
    g = Graph(params, apply_mask)
    out = logits_graph(g, config, src, tgt_prefix).value
    return out[0] if single else out


def nll_loss(logits, targets, pad=None) -> float:
    """Mean token negative log-likelihood of ``targets`` under ``logits``.

    ``logits`` is ``(T, V)`` or ``(B, T, V)``; positions whose target equals
    ``pad`` (if given) are ignored.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ContractError(f"logits {logits.shape} do not match targets {targets.shape}")
    flat_t = targets.reshape(-1)
    weights = None if pad is None else (flat_t != pad).astype(np.float64)
    g = Graph()
    node = g.cross_entropy(g.constant(logits.reshape(-1, logits.shape[-1])), flat_t, weights)
    return float(node.value)
