"""Greedy and beam-search decoding under an optional parameter mask."""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .model import BOS, EOS, PAD, ModelConfig, decode, encode
from .tensor import Graph


def _log_softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def length_normalizer(length: int, alpha: float) -> float:
    return ((5.0 + length) / 6.0) ** alpha


def pad_batch(seqs, append_eos=True) -> np.ndarray:
    rows = [list(s) + ([EOS] if append_eos else []) for s in seqs]
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def _max_steps(config, max_len):
    limit = config.max_len - 1
    return limit if max_len is None else min(int(max_len), limit)


def _encode(config, params, mask, srcs):
    g = Graph(params, mask)
    memory, src_bias = encode(g, config, pad_batch(srcs))
    return memory.value, src_bias.value


def translate(config: ModelConfig, params, registry_mask, src, beam_width=4,
              length_penalty=0.6, max_len=None) -> list[int]:
    """Decode one source sentence (ids without EOS).

    Hypotheses are ranked by ``log p / ((5 + len) / 6) ** length_penalty``
    where ``len`` counts generated tokens including EOS. ``beam_width=1`` is
    greedy search. ``registry_mask`` (or None) zeroes parameters at decode
    time. Returns the generated ids without BOS/EOS.
    """
    if beam_width < 1:
        raise ContractError("beam_width must be >= 1")
    steps = _max_steps(config, max_len)
    memory, src_bias = _encode(config, params, registry_mask, [src])

    alive = [([BOS], 0.0)]
    finished = []
    for _ in range(steps):
        n = len(alive)
        prefixes = np.array([toks for toks, _ in alive], dtype=np.int64)
        step = Graph(params, registry_mask)
        mem = step.constant(np.repeat(memory, n, axis=0))
        bias = step.constant(np.repeat(src_bias, n, axis=0))
        logp = _log_softmax(decode(step, config, mem, bias, prefixes).value[:, -1])
        vocab = logp.shape[1]
        scores = (np.array([s for _, s in alive])[:, None] + logp).reshape(-1)
        survivors = []
        for flat in np.argsort(-scores, kind="stable"):
            beam, tok = divmod(int(flat), vocab)
            hyp = (alive[beam][0] + [tok], float(scores[flat]))
            if tok == EOS:
                finished.append(hyp)
            else:
                survivors.append(hyp)
            if len(survivors) == beam_width:
                break
        alive = survivors
        if len(finished) >= beam_width:
            break
    else:
        finished.extend(alive)
    best = max(
        finished,
        key=lambda h: h[1] / length_normalizer(len(h[0]) - 1, length_penalty),
    )
    toks = best[0][1:]
    return toks[:-1] if toks and toks[-1] == EOS else toks


def greedy_decode(config: ModelConfig, params, srcs, mask=None, max_len=None) -> list[list[int]]:
    """Batched greedy decoding of several source sentences."""
    if not len(srcs):
        return []
    steps = _max_steps(config, max_len)
    memory, src_bias = _encode(config, params, mask, srcs)
    B = len(srcs)
    out = np.full((B, 1), BOS, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    for _ in range(steps):
        # a fresh graph per step keeps memory flat over long outputs
        g = Graph(params, mask)
        logits = decode(g, config, g.constant(memory), g.constant(src_bias), out).value[:, -1]
        nxt = np.argmax(logits, axis=-1)
        nxt = np.where(done, PAD, nxt)
        out = np.concatenate([out, nxt[:, None]], axis=1)
        done |= nxt == EOS
        if done.all():
            break
    result = []
    for row in out[:, 1:]:
        toks = []
        for tok in row:
            if tok in (EOS, PAD):
                break
            toks.append(int(tok))
        result.append(toks)
    return result
