"""Toy autoregressive decoder standing in for the LLM.

The decoder sees ``[query vectors; prompt embeddings; target embeddings]`` as
one causal sequence. Query vectors arrive already projected to ``d_model`` and
are used as-is (they get positional embeddings like any other position).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .qformer import _init_linear, _init_norm, init_attention, lin, multi_head_attention, norm
from .tensor import AttentionMask, Tensor

ADAPTED = ("attn.q", "attn.k", "attn.v", "ffn.fc1", "ffn.fc2")


@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int = 57
    d_model: int = 64
    heads: int = 4
    blocks: int = 2
    ffn_mult: int = 4
    max_context: int = 128
    ln_eps: float = 1e-5

    def to_dict(self) -> dict:
        return asdict(self)


class ToyDecoder:
    def __init__(self, config: DecoderConfig, seed: int = 0):
        self.config = config
        c = config
        rng = np.random.default_rng([seed, 202])
        p: dict[str, Tensor] = {}
        p["tok_emb"] = T.parameter(rng.standard_normal((c.vocab_size, c.d_model)))
        p["pos_emb"] = T.parameter(rng.standard_normal((c.max_context, c.d_model)) * 0.1)
        for i in range(c.blocks):
            _init_norm(p, f"block{i}.norm1", c.d_model)
            init_attention(p, rng, f"block{i}.attn", c.d_model)
            _init_norm(p, f"block{i}.norm2", c.d_model)
            _init_linear(p, rng, f"block{i}.ffn.fc1", c.d_model, c.ffn_mult * c.d_model)
            _init_linear(p, rng, f"block{i}.ffn.fc2", c.ffn_mult * c.d_model, c.d_model)
        _init_norm(p, "norm_f", c.d_model)
        _init_linear(p, rng, "head", c.d_model, c.vocab_size)
        self.params = p
        self.adapters: dict[str, Tensor] = {}
        self.lora_rank = 0
        self._masks: dict[int, AttentionMask] = {}

    def parameters(self) -> dict[str, Tensor]:
        return {**self.params, **self.adapters}

    def _causal_mask(self, n: int) -> AttentionMask:
        if n not in self._masks:
            self._masks[n] = AttentionMask(np.tril(np.ones((n, n), dtype=bool)))
        return self._masks[n]

    def _check_ids(self, ids: np.ndarray) -> None:
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ValueError("unknown token id")

    def hidden(self, x: Tensor) -> Tensor:
        """Run the decoder stack over embedded positions (B, S, d)."""
        c, p = self.config, self.params
        a = self.adapters or None
        s = x.shape[1]
        if s > c.max_context:
            raise ValueError(f"sequence of {s} positions exceeds max_context={c.max_context}")
        h = x + T.embedding(p["pos_emb"], np.arange(s))
        mask = self._causal_mask(s)
        for i in range(c.blocks):
            z = norm(p, f"block{i}.norm1", h, c.ln_eps)
            h = h + multi_head_attention(p, f"block{i}.attn", z, z, c.heads, mask, a)
            z = norm(p, f"block{i}.norm2", h, c.ln_eps)
            h = h + lin(p, f"block{i}.ffn.fc2", T.gelu(lin(p, f"block{i}.ffn.fc1", z, a)), a)
        return norm(p, "norm_f", h, c.ln_eps)

    def _inputs(self, prefix: Tensor, prompt: np.ndarray, tokens: np.ndarray) -> Tensor:
        if prefix.ndim == 2:
            prefix = prefix.reshape(1, *prefix.shape)
        if prefix.shape[1] == 0:
            raise ValueError("the query prefix must not be empty")
        if prefix.shape[2] != self.config.d_model:
            raise ValueError("prefix width does not match the decoder")
        ids = np.concatenate([prompt, tokens], axis=1)
        self._check_ids(ids)
        emb = T.embedding(self.params["tok_emb"], ids)
        return T.concat([prefix, emb], axis=1)

    def forward(self, prefix: Tensor, prompt, target) -> Tensor:
        """Teacher-forced logits (B, L, vocab) predicting each of the L target tokens."""
        prompt = np.atleast_2d(np.asarray(prompt, dtype=np.int64))
        target = np.atleast_2d(np.asarray(target, dtype=np.int64))
        if prompt.shape[1] == 0:
            raise ValueError("the prompt must not be empty")
        if target.shape[1] == 0:
            raise ValueError("empty target")
        self._check_ids(target)
        x = self._inputs(prefix, prompt, target[:, :-1])
        h = self.hidden(x)
        start = x.shape[1] - target.shape[1]
        return lin(self.params, "head", h[:, start:])

    def generate(self, prefix: Tensor, prompt, max_len: int, end_id: int) -> list[list[int]]:
        """Greedy decoding; each row stops at ``end_id`` (excluded) or ``max_len`` tokens."""
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        prompt = np.atleast_2d(np.asarray(prompt, dtype=np.int64))
        b = prompt.shape[0]
        out = np.zeros((b, 0), dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        with T.no_grad():
            for _ in range(max_len):
                h = self.hidden(self._inputs(prefix, prompt, out))
                logits = lin(self.params, "head", h[:, -1]).data
                nxt = logits.argmax(axis=-1)
                nxt[done] = end_id
                out = np.concatenate([out, nxt[:, None]], axis=1)
                done |= nxt == end_id
                if done.all():
                    break
        results = []
        for row in out:
            ids = list(row)
            results.append([int(t) for t in ids[: ids.index(end_id)]] if end_id in ids else [int(t) for t in ids])
        return results


def apply_adapters(decoder: ToyDecoder, rank: int, seed: int = 0) -> ToyDecoder:
    """Freeze a copy of ``decoder`` and add zero-initialised low-rank paths.

    Each adapted projection computes ``x W + b + (x D) U`` with ``U`` starting
    at zero, so the wrapped model initially reproduces the base exactly.
    """
    c = decoder.config
    if not 1 <= rank < c.d_model:
        raise ValueError(f"adapter rank must be in [1, {c.d_model}), got {rank}")
    wrapped = ToyDecoder.__new__(ToyDecoder)
    wrapped.config = c
    wrapped.params = {k: Tensor(v.data) for k, v in decoder.params.items()}
    wrapped._masks = {}
    wrapped.lora_rank = rank
    rng = np.random.default_rng([seed, 303])
    adapters: dict[str, Tensor] = {}
    for i in range(c.blocks):
        for target in ADAPTED:
            w = wrapped.params[f"block{i}.{target}.weight"]
            d_in, d_out = w.shape
            adapters[f"block{i}.{target}.lora_down"] = T.parameter(rng.standard_normal((d_in, rank)) / np.sqrt(d_in))
            adapters[f"block{i}.{target}.lora_up"] = T.parameter(np.zeros((rank, d_out)))
    wrapped.adapters = adapters
    return wrapped


def count_parameters(params: dict[str, Tensor]) -> int:
    return int(sum(p.data.size for p in params.values()))
