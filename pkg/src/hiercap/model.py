"""The caption generator (encoder + decoder + vocabulary) and checkpoint glue."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .dataset import Vocabulary, pad_batch, tokenize_caption
from .decoder import PAD, DecoderConfig, HierAttDecoder, strip_special
from .encoder import EncoderConfig, VisualEncoder
from .nn import Module
from .rwa import RegionWordAttention, RwaConfig
from .tensor import Tensor, cross_entropy


class ConfigMismatchError(ValueError):
    """A checkpoint was loaded against an incompatible configuration or vocabulary."""


@dataclass
class CaptionerConfig:
    encoder: EncoderConfig
    decoder: DecoderConfig

    def to_dict(self) -> dict:
        return {"encoder": self.encoder.to_dict(), "decoder": self.decoder.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "CaptionerConfig":
        return cls(EncoderConfig.from_dict(d["encoder"]), DecoderConfig.from_dict(d["decoder"]))


def default_config(vocab_size: int, **decoder_overrides) -> CaptionerConfig:
    enc = EncoderConfig()
    dec = DecoderConfig(
        vocab_size=vocab_size, visual_channels=enc.visual_channels, grid_cells=enc.grid ** 2, **decoder_overrides
    )
    return CaptionerConfig(enc, dec)


def paper_scale_config(vocab_size: int = 9489) -> CaptionerConfig:
    enc = EncoderConfig(channels=(64, 128, 256), visual_channels=2048, region_dim=2048)
    dec = DecoderConfig(
        vocab_size=vocab_size, embed_dim=300, visual_channels=2048, grid_cells=enc.grid ** 2,
        heads=2, attn_dim=64, gate_hidden=512,
    )
    return CaptionerConfig(enc, dec)


class Captioner(Module):
    def __init__(self, cfg: CaptionerConfig, vocab: Vocabulary, seed: int = 0):
        if cfg.decoder.vocab_size != len(vocab):
            raise ConfigMismatchError(f"decoder vocab {cfg.decoder.vocab_size} != vocabulary size {len(vocab)}")
        rng = np.random.default_rng(seed)
        self._cfg = cfg
        self._vocab = vocab
        self.encoder = VisualEncoder(cfg.encoder, rng, project=False)
        self.decoder = HierAttDecoder(cfg.decoder, rng)

    @property
    def cfg(self) -> CaptionerConfig:
        return self._cfg

    @property
    def vocab(self) -> Vocabulary:
        return self._vocab

    def encode(self, images) -> Tensor:
        return self.encoder.encode_image(np.asarray(images))

    def token_batch(self, captions) -> np.ndarray:
        return pad_batch([tokenize_caption(c, self._vocab) for c in captions], PAD)

    def ce_loss(self, fm0: Tensor, tokens: np.ndarray, train: bool = False, rng=None) -> Tensor:
        """Teacher-forced cross-entropy of tokens[:, 1:] given tokens[:, :-1]."""
        logits = self.decoder.decode_teacher_forced(fm0, tokens[:, :-1], train=train, rng=rng)
        return cross_entropy(logits, tokens[:, 1:], pad_id=PAD)

    def caption_ids(self, images, batch: int = 64) -> list[list[int]]:
        out = []
        images = np.asarray(images)
        for i in range(0, len(images), batch):
            fm = self.encode(images[i:i + batch])
            out.extend(strip_special(s) for s in self.decoder.greedy_decode(fm.data))
        return out

    def caption(self, images, batch: int = 64) -> list[str]:
        return [self._vocab.detokenize(ids) for ids in self.caption_ids(images, batch)]

    def checkpoint_config(self) -> dict:
        return {"kind": "captioner", "model": self._cfg.to_dict(), "vocab": self._vocab.to_list()}

    def save(self, path, extra: dict | None = None) -> None:
        cfg = self.checkpoint_config()
        if extra:
            cfg["train"] = extra
        checkpoint.save(path, self.state_dict(), cfg)

    @classmethod
    def load(cls, path, expect_vocab: Vocabulary | None = None) -> "Captioner":
        tensors, cfg = checkpoint.load(path)
        if cfg.get("kind") != "captioner":
            raise ConfigMismatchError(f"{path}: not a captioner checkpoint (kind={cfg.get('kind')!r})")
        vocab = Vocabulary(cfg["vocab"])
        if expect_vocab is not None and vocab.tokens != expect_vocab.tokens:
            raise ConfigMismatchError(f"{path}: vocabulary differs from the expected one")
        model = cls(CaptionerConfig.from_dict(cfg["model"]), vocab)
        model.load_state_dict(tensors)
        return model


def save_rwa(model: RegionWordAttention, vocab: Vocabulary, path, extra: dict | None = None) -> None:
    cfg = {"kind": "rwa", "model": model.cfg.to_dict(), "vocab": vocab.to_list()}
    if extra:
        cfg["train"] = extra
    checkpoint.save(path, model.state_dict(), cfg)


def load_rwa(path) -> tuple[RegionWordAttention, Vocabulary]:
    tensors, cfg = checkpoint.load(path)
    if cfg.get("kind") != "rwa":
        raise ConfigMismatchError(f"{path}: not a region-word attention checkpoint (kind={cfg.get('kind')!r})")
    model = RegionWordAttention(RwaConfig.from_dict(cfg["model"]), np.random.default_rng(0))
    model.load_state_dict(tensors)
    return model, Vocabulary(cfg["vocab"])

