"""Causal Q-Former: block-causal self-attention over AV frames, then query blocks.

A window of ``T_w`` slots, each holding ``V`` combined audio-visual rows, is
projected to ``d_model``, given a per-slot positional embedding and passed
through one masked self-attention layer in which a row may only look at rows
of its own slot or earlier slots. ``blocks`` Q-Former blocks then let the
``N`` shared query tokens attend to each other and to those contextualised
rows. Windows never see each other.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .sync import SyncedSequence, WindowingConfig, window_partition
from .tensor import AttentionMask, Tensor


@dataclass(frozen=True)
class QFormerConfig:
    d_audio: int = 32
    d_visual: int = 32
    d_model: int = 64
    heads: int = 4
    blocks: int = 2
    n_queries: int = 8
    d_llm: int = 64
    ffn_mult: int = 4
    max_slots: int = 64
    use_causal_attention: bool = True
    use_sliding_window: bool = True
    use_synchronization: bool = True
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.blocks < 1:
            raise ValueError("need at least one Q-Former block")
        if self.d_model % self.heads:
            raise ValueError("heads must divide d_model")

    @property
    def d_input(self) -> int:
        return self.d_audio + self.d_visual

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class WindowOutputs:
    """Per-window query outputs, window-major.

    ``states`` are the final Q-Former query states (``W x N x d_model``) that
    the diversity loss reads; ``queries`` are their projections to the decoder
    width (``W x N x d_llm``).
    """

    states: Tensor
    queries: Tensor

    @property
    def num_windows(self) -> int:
        return self.queries.shape[0]

    @property
    def n_queries(self) -> int:
        return self.queries.shape[1]

    def flat(self) -> Tensor:
        w, n, d = self.queries.shape
        return self.queries.reshape(w * n, d)


def block_causal_mask(frame_count: int, vectors_per_frame: int) -> AttentionMask:
    """Row i may attend column j iff j's frame is not later than i's frame."""
    if frame_count < 1 or vectors_per_frame < 1:
        raise ValueError("frame_count and vectors_per_frame must be >= 1")
    frame = np.arange(frame_count * vectors_per_frame) // vectors_per_frame
    return AttentionMask(frame[None, :] <= frame[:, None])


def _init_linear(params, rng, name, d_in, d_out, scale=1.0, bias=True):
    params[f"{name}.weight"] = T.parameter(rng.standard_normal((d_in, d_out)) * scale / np.sqrt(d_in))
    if bias:
        params[f"{name}.bias"] = T.parameter(np.zeros(d_out))


def _init_norm(params, name, d):
    params[f"{name}.gain"] = T.parameter(np.ones(d))
    params[f"{name}.bias"] = T.parameter(np.zeros(d))


def init_attention(params, rng, name, d):
    # a key bias only shifts every score in a row equally, which softmax ignores
    for proj in ("q", "k", "v", "o"):
        _init_linear(params, rng, f"{name}.{proj}", d, d, bias=proj != "k")


def lin(params, name, x, adapters=None):
    """Affine map ``params[name]``; ``adapters`` may add a low-rank path."""
    y = T.linear(x, params[f"{name}.weight"], params.get(f"{name}.bias"))
    if adapters is not None and f"{name}.lora_down" in adapters:
        down = adapters[f"{name}.lora_down"]
        up = adapters[f"{name}.lora_up"]
        y = y + T.matmul(T.matmul(x, down), up)
    return y


def norm(params, name, x, eps=1e-5):
    return T.layer_norm(x, params[f"{name}.gain"], params[f"{name}.bias"], eps)


def multi_head_attention(params, name, x_q, x_kv, heads, mask=None, adapters=None):
    """Scaled dot-product attention; ``x_q`` (B, Lq, d), ``x_kv`` (B, Lk, d)."""
    b, lq, d = x_q.shape
    lk = x_kv.shape[1]
    dh = d // heads
    q = lin(params, f"{name}.q", x_q, adapters).reshape(b, lq, heads, dh).transpose(0, 2, 1, 3)
    k = lin(params, f"{name}.k", x_kv, adapters).reshape(b, lk, heads, dh).transpose(0, 2, 3, 1)
    v = lin(params, f"{name}.v", x_kv, adapters).reshape(b, lk, heads, dh).transpose(0, 2, 1, 3)
    scores = T.matmul(q, k) * (1.0 / np.sqrt(dh))
    attn = T.masked_softmax(scores, mask)
    ctx = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, lq, d)
    return lin(params, f"{name}.o", ctx, adapters)


class CausalQFormer:
    """Trainable fusion module; all parameters live in ``self.params``."""

    def __init__(self, config: QFormerConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng([seed, 101])
        c = config
        p: dict[str, Tensor] = {}
        p["queries"] = T.parameter(rng.standard_normal((c.n_queries, c.d_model)))
        _init_linear(p, rng, "input_proj", c.d_input, c.d_model)
        p["pos_emb"] = T.parameter(rng.standard_normal((c.max_slots, c.d_model)) * 0.1)
        init_attention(p, rng, "causal.attn", c.d_model)
        _init_norm(p, "causal.norm", c.d_model)
        hidden = c.ffn_mult * c.d_model
        for i in range(c.blocks):
            init_attention(p, rng, f"block{i}.self_attn", c.d_model)
            _init_norm(p, f"block{i}.norm1", c.d_model)
            init_attention(p, rng, f"block{i}.cross_attn", c.d_model)
            _init_norm(p, f"block{i}.norm2", c.d_model)
            _init_linear(p, rng, f"block{i}.ffn.fc1", c.d_model, hidden)
            _init_linear(p, rng, f"block{i}.ffn.fc2", hidden, c.d_model)
            _init_norm(p, f"block{i}.norm3", c.d_model)
        _init_linear(p, rng, "output_proj", c.d_model, c.d_llm)
        self.params = p
        self._masks: dict[tuple[int, int], AttentionMask] = {}

    @property
    def queries(self) -> Tensor:
        return self.params["queries"]

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def _mask(self, frames: int, vpf: int) -> AttentionMask:
        key = (frames, vpf)
        if key not in self._masks:
            self._masks[key] = block_causal_mask(frames, vpf)
        return self._masks[key]

    def causal_attend(self, windows) -> Tensor:
        """Contextualise a batch of equally sized windows.

        ``windows`` is (B, T_w, V, d_audio + d_visual); the result is
        (B, T_w, V, d_model). With ``use_causal_attention`` off the module is
        skipped and only the input projection is applied, so slot order is
        invisible inside a window.
        """
        x = windows if isinstance(windows, Tensor) else Tensor(windows)
        if x.ndim == 3:
            x = x.reshape(1, *x.shape)
        b, tw, v, d_in = x.shape
        if tw < 1:
            raise ValueError("empty window")
        if tw > self.config.max_slots:
            raise ValueError(f"window of {tw} slots exceeds max_slots={self.config.max_slots}")
        p, c = self.params, self.config
        h = lin(p, "input_proj", x.reshape(b, tw * v, d_in))
        if c.use_causal_attention:
            h = h + T.embedding(p["pos_emb"], np.repeat(np.arange(tw), v))
            mask = self._mask(tw, v)
            h = norm(p, "causal.norm", h + multi_head_attention(p, "causal.attn", h, h, c.heads, mask), c.ln_eps)
        return h.reshape(b, tw, v, c.d_model)

    def window_states(self, windows, queries: Tensor | None = None, lengths=None) -> Tensor:
        """Final query states (B, N, d_model) for a batch of equally sized windows.

        ``lengths`` gives each window's real slot count when shorter windows
        were zero-padded at the end; queries then ignore the padded rows.
        Causal attention already keeps real rows from seeing later padding.
        """
        p, c = self.params, self.config
        queries = self.queries if queries is None else queries
        ctx = self.causal_attend(windows)
        b, tw, v, d = ctx.shape
        ctx = ctx.reshape(b, tw * v, d)
        key_mask = None
        if lengths is not None and min(lengths) < tw:
            real = np.arange(tw * v)[None, :] < (np.asarray(lengths) * v)[:, None]
            key_mask = np.broadcast_to(real[:, None, None, :], (b, 1, c.n_queries, tw * v))
        q = T.broadcast_to(queries, (b, *queries.shape))
        for i in range(c.blocks):
            q = norm(p, f"block{i}.norm1", q + multi_head_attention(p, f"block{i}.self_attn", q, q, c.heads), c.ln_eps)
            cross = multi_head_attention(p, f"block{i}.cross_attn", q, ctx, c.heads, key_mask)
            q = norm(p, f"block{i}.norm2", q + cross, c.ln_eps)
            hidden = T.gelu(lin(p, f"block{i}.ffn.fc1", q))
            q = norm(p, f"block{i}.norm3", q + lin(p, f"block{i}.ffn.fc2", hidden), c.ln_eps)
        return q

    def encode_windows(self, windows: list[np.ndarray]) -> Tensor:
        """States for an arbitrary list of windows, returned in input order (W, N, d_model).

        Windows sharing a row layout are batched together, shorter ones padded
        at the end. Padding is masked out, so windows never interact.
        """
        if not windows:
            raise ValueError("no windows to encode")
        groups: dict[tuple, list[int]] = {}
        for i, w in enumerate(windows):
            groups.setdefault(w.shape[1:], []).append(i)
        outs, order = [], []
        for idx in groups.values():
            lengths = [windows[i].shape[0] for i in idx]
            tw = max(lengths)
            batch = np.zeros((len(idx), tw, *windows[idx[0]].shape[1:]))
            for j, i in enumerate(idx):
                batch[j, : lengths[j]] = windows[i]
            outs.append(self.window_states(batch, lengths=lengths))
            order.extend(idx)
        if len(outs) == 1 and order == sorted(order):
            return outs[0]
        stacked = T.concat(outs, axis=0)
        return stacked[np.argsort(order)]

    def project(self, states: Tensor) -> Tensor:
        return lin(self.params, "output_proj", states)

    def split_windows(self, synced: SyncedSequence, windowing: WindowingConfig) -> list[np.ndarray]:
        if self.config.use_sliding_window:
            return window_partition(synced, windowing)
        return [synced.slots]

    def encode_sequence(self, synced: SyncedSequence, windowing: WindowingConfig) -> WindowOutputs:
        """Window, encode and project one synced sequence into W x N decoder inputs."""
        if windowing.n_queries != self.config.n_queries:
            raise ValueError("windowing n_queries disagrees with the model's query count")
        states = self.encode_windows(self.split_windows(synced, windowing))
        return WindowOutputs(states=states, queries=self.project(states))


def qformer_window(window_features, queries: Tensor, model: CausalQFormer) -> Tensor:
    """Run one window through the causal Q-Former; returns N x d_model states."""
    return model.window_states(window_features, queries)[0]


def encode_sequence(synced: SyncedSequence, cfg: WindowingConfig, model: CausalQFormer) -> WindowOutputs:
    return model.encode_sequence(synced, cfg)
