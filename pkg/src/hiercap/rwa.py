"""Region-word attention: relevance of each caption word to each image region."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .encoder import EncoderConfig, VisualEncoder
from .nn import Module, glorot, param
from .tensor import (
    DimensionError,
    GruParams,
    Tensor,
    add,
    as_tensor,
    concat,
    embedding_lookup,
    getitem,
    gru_cell,
    matmul,
    reshape,
    softmax,
    tanh,
    transpose,
)


@dataclass
class RwaConfig:
    vocab_size: int = 32
    embed_dim: int = 32
    hidden: int = 32  # per direction
    region_dim: int = 64
    attn_dim: int = 32
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    @property
    def word_dim(self) -> int:
        return 2 * self.hidden

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = self.encoder.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RwaConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig.from_dict(d["encoder"])
        return cls(**d)


@dataclass
class RelevanceMatrix:
    """n regions x k words; row i is P(word_j | region_i)."""

    probs: np.ndarray
    boxes: list = field(default_factory=list)
    words: list[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.probs.shape[0]

    @property
    def k(self) -> int:
        return self.probs.shape[1]


def relevance_scores(regions, words, u, w, v) -> Tensor:
    """score[..., i, j] = v . tanh(u r_i + w w_j).

    ``regions`` is (..., n, d_r) and ``words`` is (..., k, d_w) with matching
    leading axes; ``u`` is (d_a, d_r), ``w`` is (d_a, d_w), ``v`` is (d_a,).
    """
    regions, words = as_tensor(regions), as_tensor(words)
    u, w, v = as_tensor(u), as_tensor(w), as_tensor(v)
    if regions.shape[-1] != u.shape[1] or words.shape[-1] != w.shape[1] or len({u.shape[0], w.shape[0], v.shape[0]}) != 1:
        raise DimensionError(
            f"relevance: regions {regions.shape}, words {words.shape} vs u {u.shape}, w {w.shape}, v {v.shape}"
        )
    ru = matmul(regions, transpose(u))  # (..., n, d_a)
    ww = matmul(words, transpose(w))  # (..., k, d_a)
    lead = regions.shape[:-2]
    n, k, da = regions.shape[-2], words.shape[-2], u.shape[0]
    hidden = tanh(add(reshape(ru, lead + (n, 1, da)), reshape(ww, lead + (1, k, da))))
    return reshape(matmul(hidden, reshape(v, (da, 1))), lead + (n, k))


def relevance_rows(regions, words, u, w, v) -> Tensor:
    """Row-softmaxed relevance: every region's distribution over words."""
    return softmax(relevance_scores(regions, words, u, w, v), axis=-1)


class RegionWordAttention(Module):
    def __init__(self, cfg: RwaConfig, rng: np.random.Generator):
        self._cfg = cfg
        self.encoder = VisualEncoder(cfg.encoder, rng)
        self.embed = param(rng.normal(0.0, 0.3, (cfg.vocab_size, cfg.embed_dim)))
        self.fwd = GruParams.init(cfg.embed_dim, cfg.hidden, rng)
        self.bwd = GruParams.init(cfg.embed_dim, cfg.hidden, rng)
        self.u = glorot(rng, cfg.region_dim, cfg.attn_dim, (cfg.attn_dim, cfg.region_dim))
        self.w = glorot(rng, cfg.word_dim, cfg.attn_dim, (cfg.attn_dim, cfg.word_dim))
        self.v = param(rng.normal(0.0, 1.0, cfg.attn_dim))

    @property
    def cfg(self) -> RwaConfig:
        return self._cfg

    def word_inputs(self, token_ids) -> Tensor:
        ids = np.asarray(token_ids, dtype=np.int64)
        return embedding_lookup(self.embed, ids)

    def encode_words_bidir(self, words) -> Tensor:
        """(k,) / (B, k) token ids, or (B, k, d_e) word inputs -> (B?, k, 2*hidden).

        Word j is the concatenation of the forward state after reading
        words 0..j and the backward state after reading words k-1..j.
        """
        single = False
        if isinstance(words, Tensor):
            x = words
        else:
            ids = np.asarray(words, dtype=np.int64)
            if ids.size == 0:
                raise ValueError("encode_words_bidir: empty sentence")
            single = ids.ndim == 1
            x = self.word_inputs(ids[None] if single else ids)
        if x.ndim == 2:
            x, single = reshape(x, (1,) + x.shape), True
        b, k = x.shape[:2]
        if k == 0:
            raise ValueError("encode_words_bidir: empty sentence")
        h0 = Tensor(np.zeros((b, self._cfg.hidden)))
        fw, bw = [], [None] * k
        h = h0
        for j in range(k):
            h = gru_cell(getitem(x, (slice(None), j)), h, self.fwd)
            fw.append(h)
        h = h0
        for j in reversed(range(k)):
            h = gru_cell(getitem(x, (slice(None), j)), h, self.bwd)
            bw[j] = h
        steps = [reshape(concat([f, g], axis=-1), (b, 1, self._cfg.word_dim)) for f, g in zip(fw, bw)]
        out = concat(steps, axis=1) if k > 1 else steps[0]
        return reshape(out, (k, self._cfg.word_dim)) if single else out

    def region_vectors(self, images, boxes) -> Tensor:
        return self.encoder.encode_regions(images, boxes)

    def rows(self, regions, words) -> Tensor:
        return relevance_rows(regions, words, self.u, self.w, self.v)

    def relevance_matrix(self, image, boxes, token_ids, word_strings=None) -> RelevanceMatrix:
        """Score every box of ``image`` against every word of one caption."""
        if len(boxes) == 0 or len(token_ids) == 0:
            raise ValueError("relevance_matrix needs at least one region and one word")
        regions = self.region_vectors([image] * len(boxes), boxes)
        words = self.encode_words_bidir(np.asarray(token_ids))
        probs = self.rows(regions, words).data
        return RelevanceMatrix(probs, list(boxes), list(word_strings or []))
