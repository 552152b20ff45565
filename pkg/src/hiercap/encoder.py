"""Compact convolutional image encoder and region embedder."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .nn import Module, glorot, param
from .tensor import DimensionError, Tensor, conv2d, elu, linear, pool_mean, reshape


class RegionError(ValueError):
    """Raised for degenerate or out-of-canvas region boxes."""


@dataclass
class EncoderConfig:
    canvas: int = 64
    channels: tuple[int, ...] = (16, 32, 64)
    visual_channels: int = 64
    region_dim: int = 64
    min_crop: int = 4

    @property
    def grid(self) -> int:
        return self.canvas // 2 ** (len(self.channels) + 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        d["channels"] = tuple(d.get("channels", cls.channels))
        return cls(**d)


def parameter_shapes(cfg: EncoderConfig, project: bool = True) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every encoder parameter, without allocating."""
    chans = (3,) + tuple(cfg.channels) + (cfg.visual_channels,)
    shapes: dict[str, tuple[int, ...]] = {}
    for i in range(len(chans) - 1):
        shapes[f"conv{i}.w"] = (chans[i + 1], chans[i], 3, 3)
        shapes[f"conv{i}.b"] = (chans[i + 1],)
    if project:
        shapes["proj.w"] = (cfg.visual_channels, cfg.region_dim)
        shapes["proj.b"] = (cfg.region_dim,)
    return shapes


class VisualEncoder(Module):
    """Four stride-2 3x3 conv blocks with ELU: 64 -> 32 -> 16 -> 8 -> 4."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, project: bool = True):
        self._cfg = cfg
        chans = (3,) + tuple(cfg.channels) + (cfg.visual_channels,)
        self.conv_w = []
        self.conv_b = []
        for i in range(len(chans) - 1):
            c_in, c_out = chans[i], chans[i + 1]
            self.conv_w.append(glorot(rng, c_in * 9, c_out * 9, (c_out, c_in, 3, 3)))
            self.conv_b.append(param(np.zeros(c_out)))
        # the captioner only needs the grid; region vectors need the projection
        self.proj_w = self.proj_b = None
        if project:
            self.proj_w = glorot(rng, cfg.visual_channels, cfg.region_dim, (cfg.visual_channels, cfg.region_dim))
            self.proj_b = param(np.zeros(cfg.region_dim))

    @property
    def cfg(self) -> EncoderConfig:
        return self._cfg

    def named_parameters(self, prefix: str = ""):
        for i, (w, b) in enumerate(zip(self.conv_w, self.conv_b)):
            yield f"{prefix}conv{i}.w", w
            yield f"{prefix}conv{i}.b", b
        if self.proj_w is not None:
            yield f"{prefix}proj.w", self.proj_w
            yield f"{prefix}proj.b", self.proj_b

    def encode_image(self, img) -> Tensor:
        """Map (3, S, S) or (B, 3, S, S) images in [0, 1] to a (B, V, g, g) feature map."""
        x = img.data if isinstance(img, Tensor) else np.asarray(img, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        s = self._cfg.canvas
        if x.ndim != 4 or x.shape[1:] != (3, s, s):
            raise DimensionError(f"encode_image: expected (B, 3, {s}, {s}), got {x.shape}")
        h = Tensor(np.clip(x, 0.0, 1.0))
        for w, b in zip(self.conv_w, self.conv_b):
            h = elu(conv2d(h, w, b, stride=2, pad=1))
        return h

    def pool_project(self, fm: Tensor) -> Tensor:
        """Mean-pool a (B, V, g, g) map and project to (B, d_r) region vectors."""
        if self.proj_w is None:
            raise RegionError("this encoder was built without a region projection")
        pooled = pool_mean(fm, axis=(2, 3))
        return linear(pooled, self.proj_w, self.proj_b)

    def crop(self, img: np.ndarray, box) -> np.ndarray:
        check_box(box, self._cfg.canvas, self._cfg.min_crop)
        x, y, w, h = (int(v) for v in box)
        patch = np.asarray(img, dtype=np.float64)[:, y:y + h, x:x + w]
        s = self._cfg.canvas
        return kernels.bilinear_resize(patch, s, s)

    def encode_regions(self, images, boxes) -> Tensor:
        """Embed one region per (image, box) pair; returns (N, d_r)."""
        crops = np.stack([self.crop(im, bx) for im, bx in zip(images, boxes)])
        return self.pool_project(self.encode_image(crops))

    def encode_region(self, img, box) -> Tensor:
        return self.encode_regions([img], [box])[0]


def check_box(box, canvas: int, min_crop: int = 4) -> None:
    x, y, w, h = box
    if w < min_crop or h < min_crop:
        raise RegionError(f"region {tuple(box)} is smaller than the {min_crop}px minimum crop")
    if x < 0 or y < 0 or x + w > canvas or y + h > canvas:
        raise RegionError(f"region {tuple(box)} lies outside the {canvas}x{canvas} canvas")


def flatten_cells(fm: Tensor) -> Tensor:
    """(B, V, g, g) -> (B, V, g*g)."""
    b, v, gh, gw = fm.shape
    return reshape(fm, (b, v, gh * gw))

