"""Causal-convolution caption decoder with hierarchical attention gates.

Each of the L layers runs a causal conv (+ELU) over the token stream, attends
over the current layer's modulated feature map, and feeds the attended
context plus the conv output through one GRU step. The GRU state is carried
upward from layer to layer at the same time position (never along time), so
all positions are computed in one pass during teacher forcing.
"""
from __future__ import annotations

from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from .nn import Module, param
from .tensor import (
    DimensionError,
    GruParams,
    Tensor,
    add,
    concat,
    conv1d_causal,
    dropout,
    elu,
    embedding_lookup,
    getitem,
    gru_cell,
    linear,
    matmul,
    mul,
    no_grad,
    reshape,
    sigmoid,
    softmax,
    transpose,
)

PAD, START, END, UNK = 0, 1, 2, 3


class VocabError(ValueError):
    """Raised for token ids outside the decoder vocabulary."""


class DecodeOverflow(RuntimeError):
    """Raised when incremental decoding runs past the configured max length."""


@dataclass
class DecoderConfig:
    vocab_size: int = 32
    layers: int = 6
    kernel: int = 3
    embed_dim: int = 32
    visual_channels: int = 64
    grid_cells: int = 16
    heads: int = 2
    attn_dim: int = 32
    gate_hidden: int = 128
    max_len: int = 16
    dropout: float = 0.1
    gate_bias_init: float = 2.0

    def __post_init__(self):
        if self.layers < 1 or self.kernel < 2:
            raise ValueError(f"need layers >= 1 and kernel >= 2, got {self.layers}, {self.kernel}")

    @property
    def gate_input(self) -> int:
        return self.visual_channels + self.embed_dim

    @property
    def receptive_field(self) -> int:
        return 1 + self.layers * (self.kernel - 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DecoderConfig":
        return cls(**d)


def parameter_shapes(cfg: DecoderConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every decoder parameter, in checkpoint order."""
    e, v, hd, hg = cfg.embed_dim, cfg.visual_channels, cfg.heads * cfg.attn_dim, cfg.gate_hidden
    shapes: dict[str, tuple[int, ...]] = {"embed": (cfg.vocab_size, e)}
    for i in range(cfg.layers):
        p = f"layer{i}."
        shapes[p + "conv.w"] = (e, e, cfg.kernel)
        shapes[p + "conv.b"] = (e,)
        shapes[p + "attn.q"] = (e, hd)
        shapes[p + "attn.k"] = (v, hd)
        shapes[p + "attn.o"] = (cfg.heads * v, v)
        shapes[p + "gru.w_in"] = (3, hg, cfg.gate_input)
        shapes[p + "gru.w_state"] = (3, hg, hg)
        shapes[p + "gru.bias"] = (3, hg)
        if i < cfg.layers - 1:  # the top layer's map has no consumer
            shapes[p + "gate.w"] = (hg, v)
            shapes[p + "gate.b"] = (v,)
        shapes[p + "concept.w"] = (hg, e)
        shapes[p + "concept.b"] = (e,)
    shapes["pred1.w"] = (e, e)
    shapes["pred1.b"] = (e,)
    shapes["pred2.w"] = (e, cfg.vocab_size)
    shapes["pred2.b"] = (cfg.vocab_size,)
    return shapes


def count_parameters(cfg: DecoderConfig) -> int:
    return int(sum(np.prod(s) for s in parameter_shapes(cfg).values()))


class _Layer:
    __slots__ = ("conv_w", "conv_b", "q", "k", "o", "gru", "gate_w", "gate_b", "concept_w", "concept_b")


@dataclass
class DecodeCache:
    """Incremental decoding state: per-layer ring buffers of past conv inputs."""

    fm0: np.ndarray  # (B, 1, V, S)
    buffers: list[deque]
    position: int = 0
    states: list[np.ndarray] = field(default_factory=list)
    maps: list[np.ndarray] = field(default_factory=list)

    @property
    def batch(self) -> int:
        return self.fm0.shape[0]


class HierAttDecoder(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        self._cfg = cfg
        self._params: dict[str, Tensor] = {}
        for name, shape in parameter_shapes(cfg).items():
            self._params[name] = param(self._init(name, shape, rng))
        self._layers = []
        for i in range(cfg.layers):
            p = f"layer{i}."
            lay = _Layer()
            lay.conv_w, lay.conv_b = self._params[p + "conv.w"], self._params[p + "conv.b"]
            lay.q, lay.k, lay.o = self._params[p + "attn.q"], self._params[p + "attn.k"], self._params[p + "attn.o"]
            lay.gru = GruParams(self._params[p + "gru.w_in"], self._params[p + "gru.w_state"], self._params[p + "gru.bias"])
            lay.gate_w, lay.gate_b = self._params.get(p + "gate.w"), self._params.get(p + "gate.b")
            lay.concept_w, lay.concept_b = self._params[p + "concept.w"], self._params[p + "concept.b"]
            self._layers.append(lay)

    def _init(self, name: str, shape, rng) -> np.ndarray:
        cfg = self._cfg
        if name.endswith(".b") or name.endswith("bias"):
            if name.endswith("gate.b"):
                return np.full(shape, cfg.gate_bias_init)
            return np.zeros(shape)
        if name == "embed":
            return rng.normal(0.0, 0.3, shape)
        if name.endswith("conv.w"):
            fan = shape[1] * shape[2]
            return rng.normal(0.0, np.sqrt(1.0 / fan), shape)
        if name.endswith("gru.w_in") or name.endswith("gru.w_state"):
            s = 1.0 / np.sqrt(shape[2])
            return rng.uniform(-s, s, shape)
        fan_in, fan_out = shape[0], shape[-1]
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, shape)

    @property
    def cfg(self) -> DecoderConfig:
        return self._cfg

    def named_parameters(self, prefix: str = ""):
        for name, t in self._params.items():
            yield prefix + name, t

    # ------------------------------------------------------------ blocks ----

    def prepare_map(self, fm0) -> Tensor:
        """(B, V, g, g) feature map -> (B, 1, V, S) with a broadcastable time axis."""
        fm0 = fm0 if isinstance(fm0, Tensor) else Tensor(fm0)
        if fm0.ndim == 3:
            fm0 = reshape(fm0, (1,) + fm0.shape)
        b, v = fm0.shape[:2]
        s = int(np.prod(fm0.shape[2:]))
        if v != self._cfg.visual_channels or s != self._cfg.grid_cells:
            raise DimensionError(
                f"feature map {fm0.shape} does not match V={self._cfg.visual_channels}, cells={self._cfg.grid_cells}"
            )
        return reshape(fm0, (b, 1, v, s))

    def attention_layer(self, layer: int, fm: Tensor, concept: Tensor):
        """Multi-head scaled dot-product attention of concept vectors over map cells.

        ``fm`` is (B, T', V, S) with T' in {1, T}; ``concept`` is (B, T, E).
        Returns the (B, T, V) context and the (B, T, H, S) attention weights.
        """
        cfg = self._cfg
        lay = self._layers[layer]
        b, t = concept.shape[:2]
        h, da = cfg.heads, cfg.attn_dim
        if fm.ndim != 4 or fm.shape[2] != cfg.visual_channels:
            raise DimensionError(f"attention_layer: feature map {fm.shape} vs V={cfg.visual_channels}")
        tf, s = fm.shape[1], fm.shape[3]
        q = reshape(matmul(concept, lay.q), (b, t, h, da, 1))
        keys = matmul(transpose(fm, (0, 1, 3, 2)), lay.k)  # (B, T', S, H*da)
        keys = transpose(reshape(keys, (b, tf, s, h, da)), (0, 1, 3, 2, 4))  # (B, T', H, S, da)
        scores = mul(matmul(keys, q), 1.0 / np.sqrt(da))  # (B, T, H, S, 1)
        weights = softmax(reshape(scores, (b, t, h, s)), axis=-1)
        ctx = matmul(reshape(fm, (b, tf, 1, cfg.visual_channels, s)), reshape(weights, (b, t, h, s, 1)))
        ctx = linear(reshape(ctx, (b, t, h * cfg.visual_channels)), lay.o)
        return ctx, weights

    def hier_gate(self, layer: int, prev_fm: Tensor, context: Tensor, concept: Tensor, state: Tensor):
        """One GRU step on [context, concept]; returns (next_fm, next_state, concept_out).

        The top layer has no gate and hands its map on unchanged.
        """
        lay = self._layers[layer]
        inp = concat([context, concept], axis=-1)
        next_state = gru_cell(inp, state, lay.gru)
        if lay.gate_w is None:
            next_fm = prev_fm
        else:
            g = sigmoid(linear(next_state, lay.gate_w, lay.gate_b))
            next_fm = mul(prev_fm, reshape(g, g.shape + (1,)))
        concept_out = linear(next_state, lay.concept_w, lay.concept_b)
        return next_fm, next_state, concept_out

    def _conv_out(self, layer: int, x_seq: Tensor) -> Tensor:
        lay = self._layers[layer]
        y = conv1d_causal(transpose(x_seq, (0, 2, 1)), lay.conv_w, lay.conv_b)
        return elu(transpose(y, (0, 2, 1)))

    def _stack(self, x: Tensor, conv_outs, fm: Tensor, b: int, t: int, trace=None):
        """Run the attention/gate part of every layer given a way to get conv outputs."""
        state = Tensor(np.zeros((b, t, self._cfg.gate_hidden)))
        for i in range(self._cfg.layers):
            c = conv_outs(i, x)
            ctx, weights = self.attention_layer(i, fm, c)
            fm, state, concept_out = self.hier_gate(i, fm, ctx, c, state)
            x = add(x, add(c, concept_out))
            if trace is not None:
                trace.append({"weights": weights.data, "state": state.data, "fm": fm.data})
        return x

    def predict(self, x: Tensor, train: bool = False, rng=None) -> Tensor:
        rate = self._cfg.dropout
        h = dropout(x, rate, train, rng)
        h = elu(linear(h, self._params["pred1.w"], self._params["pred1.b"]))
        h = dropout(h, rate, train, rng)
        return linear(h, self._params["pred2.w"], self._params["pred2.b"])

    def _embed(self, tokens: np.ndarray) -> Tensor:
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self._cfg.vocab_size):
            bad = tokens[(tokens < 0) | (tokens >= self._cfg.vocab_size)][0]
            raise VocabError(f"token id {int(bad)} outside vocabulary of size {self._cfg.vocab_size}")
        return embedding_lookup(self._params["embed"], tokens)

    # ---------------------------------------------------------- decoding ----

    def decode_teacher_forced(self, fm0, tokens, train: bool = False, rng=None, trace=None) -> Tensor:
        """Logits for every position of ``tokens`` in one full-sequence pass.

        ``tokens`` is (T,) or (B, T) and should begin with <start>; the result
        is (T, |V|) or (B, T, |V|) accordingly.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        single = tokens.ndim == 1
        if single:
            tokens = tokens[None]
        b, t = tokens.shape
        if t > self._cfg.max_len:
            raise DecodeOverflow(f"sequence length {t} exceeds max_len {self._cfg.max_len}")
        fm = self.prepare_map(fm0)
        if fm.shape[0] != b:
            raise DimensionError(f"batch mismatch: map batch {fm.shape[0]} vs tokens batch {b}")
        x = self._embed(tokens)
        x = self._stack(x, self._conv_out, fm, b, t, trace)
        logits = self.predict(x, train, rng)
        return reshape(logits, logits.shape[1:]) if single else logits

    def init_cache(self, fm0) -> DecodeCache:
        fm = self.prepare_map(fm0).data
        k = self._cfg.kernel
        zeros = np.zeros((fm.shape[0], self._cfg.embed_dim))
        buffers = [deque([zeros] * (k - 1), maxlen=k - 1) for _ in range(self._cfg.layers)]
        return DecodeCache(fm0=fm, buffers=buffers)

    def decode_step(self, cache: DecodeCache, token) -> tuple[np.ndarray, DecodeCache]:
        """Next-position logits (B, |V|) using only the buffered activations."""
        if cache.position >= self._cfg.max_len:
            raise DecodeOverflow(f"decode_step past max_len {self._cfg.max_len}")
        tok = np.asarray(token, dtype=np.int64).reshape(-1, 1)
        b = tok.shape[0]
        if b != cache.batch:
            raise DimensionError(f"token batch {b} vs cache batch {cache.batch}")
        with no_grad():
            logits = self._step(cache, tok, b)
        cache.position += 1
        return logits, cache

    def _step(self, cache: DecodeCache, tok: np.ndarray, b: int) -> np.ndarray:
        x = self._embed(tok)  # (B, 1, E)

        def conv_outs(i, x_cur):
            buf = cache.buffers[i]
            window = np.stack(list(buf) + [x_cur.data[:, 0]], axis=1)  # (B, K, E)
            buf.append(x_cur.data[:, 0])
            y = self._conv_out(i, Tensor(window))
            return getitem(y, (slice(None), slice(-1, None)))

        trace: list = []
        x = self._stack(x, conv_outs, Tensor(cache.fm0), b, 1, trace)
        logits = self.predict(x)
        cache.states = [tr["state"] for tr in trace]
        cache.maps = [tr["fm"] for tr in trace]
        return logits.data[:, 0]

    def greedy_decode(self, fm0, max_len: int | None = None) -> list[list[int]]:
        """Argmax decoding from <start>; each sequence stops at <end> (kept) or max_len.

        Ties resolve to the lowest token id.
        """
        max_len = min(max_len or self._cfg.max_len, self._cfg.max_len)
        cache = self.init_cache(fm0)
        b = cache.batch
        tok = np.full(b, START)
        out: list[list[int]] = [[] for _ in range(b)]
        done = np.zeros(b, dtype=bool)
        for _ in range(max_len):
            logits, cache = self.decode_step(cache, tok)
            tok = np.argmax(logits, axis=-1)
            for i in range(b):
                if not done[i]:
                    out[i].append(int(tok[i]))
                    done[i] = tok[i] == END
            if done.all():
                break
        return out


def strip_special(ids) -> list[int]:
    """Drop <start>/<pad> and cut at the first <end>."""
    out = []
    for i in ids:
        if i == END:
            break
        if i in (PAD, START):
            continue
        out.append(int(i))
    return out
