"""Synthetic shape scenes, vocabulary, tokenisation and COCO-style ingestion.

Scenes are drawn from a SplitMix64 stream so a seed reproduces the raster,
caption and boxes byte-for-byte on any platform:

    state += 0x9E3779B97F4A7C15
    z = (state ^ (state >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    out = z ^ (z >> 31)                      (all arithmetic mod 2**64)

Bounded integers use the multiply-shift map ``(out * n) >> 64``.

Captions follow a small template grammar; the relation word is decided by
the geometry (horizontal gap only -> "left of", vertical gap only ->
"above", both -> "and"), so the caption is a function of the image.
"""
from __future__ import annotations

import base64
import io
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

CANVAS = 64
SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}
SPECIALS = ("<pad>", "<start>", "<end>", "<unk>")
MIN_SIZE, MAX_SIZE, GAP = 10, 20, 2

_MASK64 = (1 << 64) - 1


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        return (self.next() * n) >> 64


@dataclass
class Region:
    box: tuple[int, int, int, int]  # x, y, w, h in pixels
    word: str
    color: str

    def to_dict(self) -> dict:
        return {"box": list(self.box), "word": self.word, "color": self.color}

    @classmethod
    def from_dict(cls, d: dict) -> "Region":
        return cls(tuple(int(v) for v in d["box"]), d["word"], d["color"])


@dataclass
class SceneSample:
    image: np.ndarray  # (3, 64, 64) float64 in [0, 1]
    caption: str
    regions: list[Region]
    seed: int = 0

    @property
    def boxes(self) -> list[tuple[int, int, int, int]]:
        return [r.box for r in self.regions]


def _shape_mask(shape: str, x0: int, y0: int, d: int) -> np.ndarray:
    ys, xs = np.mgrid[0:CANVAS, 0:CANVAS]
    px, py = xs + 0.5, ys + 0.5
    if shape == "square":
        return (px >= x0) & (px < x0 + d) & (py >= y0) & (py < y0 + d)
    if shape == "circle":
        r = d / 2.0
        return (px - (x0 + r)) ** 2 + (py - (y0 + r)) ** 2 <= r * r
    # triangle: apex at top centre, base along the bottom edge
    rel = (py - y0) / d
    return (rel >= 0) & (rel <= 1) & (np.abs(px - (x0 + d / 2.0)) <= rel * d / 2.0)


def _tight_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1)


def _overlaps(a, b) -> bool:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    return not (ax + aw + GAP <= bx or bx + bw + GAP <= ax or ay + ah + GAP <= by or by + bh + GAP <= ay)


def _relation(a, b) -> tuple[str, bool]:
    """Relation word for boxes a, b and whether a is mentioned first."""
    h_gap = a[0] + a[2] <= b[0] or b[0] + b[2] <= a[0]
    v_gap = a[1] + a[3] <= b[1] or b[1] + b[3] <= a[1]
    a_left = a[0] + a[2] / 2 <= b[0] + b[2] / 2
    if h_gap and not v_gap:
        return "left of", a[0] < b[0]
    if v_gap and not h_gap:
        return "above", a[1] < b[1]
    return "and", a_left


def generate_scene(seed: int) -> SceneSample:
    """Deterministically draw a 1-3 object scene with caption and tight boxes."""
    rng = SplitMix64(seed)
    roll = rng.below(10)
    n_obj = 1 if roll < 3 else (2 if roll < 8 else 3)
    shapes = list(SHAPES)
    chosen = []
    for _ in range(n_obj):
        chosen.append(shapes.pop(rng.below(len(shapes))))
    color_names = list(COLORS)
    placed: list[tuple[str, str, int, int, int]] = []
    boxes: list[tuple[int, int, int, int]] = []
    for shape in chosen:
        color = color_names[rng.below(len(color_names))]
        for _attempt in range(1000):
            d = MIN_SIZE + rng.below(MAX_SIZE - MIN_SIZE + 1)
            x0 = rng.below(CANVAS - d + 1)
            y0 = rng.below(CANVAS - d + 1)
            cand = (x0, y0, d, d)
            if not any(_overlaps(cand, b) for b in boxes):
                break
        else:  # pragma: no cover - a 3-object scene always fits on the canvas
            raise RuntimeError(f"could not place objects for seed {seed}")
        boxes.append(cand)
        placed.append((shape, color, x0, y0, d))

    image = np.zeros((3, CANVAS, CANVAS))
    regions = []
    for shape, color, x0, y0, d in placed:
        mask = _shape_mask(shape, x0, y0, d)
        image[:, mask] = np.asarray(COLORS[color])[:, None]
        regions.append(Region(_tight_box(mask), shape, color))

    def phrase(r: Region) -> str:
        return f"a {r.color} {r.word}"

    if n_obj == 1:
        caption = phrase(regions[0])
    elif n_obj == 2:
        rel, first_a = _relation(regions[0].box, regions[1].box)
        a, b = (regions[0], regions[1]) if first_a else (regions[1], regions[0])
        caption = f"{phrase(a)} {rel} {phrase(b)}"
    else:
        order = sorted(regions, key=lambda r: (2 * r.box[0] + r.box[2], 2 * r.box[1] + r.box[3]))
        caption = " and ".join(phrase(r) for r in order)
    return SceneSample(image=image, caption=caption, regions=regions, seed=seed)


def generate_dataset(start_seed: int, count: int) -> list[SceneSample]:
    return [generate_scene(start_seed + i) for i in range(count)]


_PHRASE = r"a (red|green|blue|yellow) (circle|square|triangle)"
_GRAMMAR = re.compile(
    rf"^{_PHRASE}$|^{_PHRASE} (and|left of|above) {_PHRASE}$|^{_PHRASE} and {_PHRASE} and {_PHRASE}$"
)


def parse_caption(caption: str) -> list[str] | None:
    """Object words of a template caption, or None if it is off-grammar."""
    if not _GRAMMAR.match(caption):
        return None
    return re.findall(r"(circle|square|triangle)", caption)


# ------------------------------------------------------------ vocabulary ----

@dataclass
class Vocabulary:
    tokens: list[str]
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != SPECIALS:
            raise ValueError(f"vocabulary must start with {SPECIALS}")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.index.get(token, 3)

    def token(self, i: int) -> str:
        return self.tokens[i]

    def detokenize(self, ids) -> str:
        words = []
        for i in ids:
            if i == 2:
                break
            if i in (0, 1):
                continue
            words.append(self.tokens[i])
        return " ".join(words)

    def to_list(self) -> list[str]:
        return list(self.tokens)


def normalize(text: str) -> list[str]:
    return re.sub(r"[^\w\s<>]", " ", text.lower()).split()


def build_vocab(captions) -> Vocabulary:
    """Specials first, then words by descending frequency, ties alphabetical."""
    counts = Counter(w for c in captions for w in normalize(c))
    words = sorted((w for w in counts if w not in SPECIALS), key=lambda w: (-counts[w], w))
    return Vocabulary(list(SPECIALS) + words)


def tokenize_caption(text: str, vocab: Vocabulary) -> list[int]:
    return [1] + [vocab.id(w) for w in normalize(text)] + [2]


def pad_batch(seqs, pad_id: int = 0) -> np.ndarray:
    t = max(len(s) for s in seqs)
    out = np.full((len(seqs), t), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


# ------------------------------------------------------ COCO ingestion ----

class IntegrityError(ValueError):
    """Raised when an annotation references an image id that does not exist."""


@dataclass
class CocoRecord:
    image_id: int
    file_name: str
    width: int | None
    height: int | None
    captions: list[str] = field(default_factory=list)
    boxes: list[tuple[float, float, float, float]] = field(default_factory=list)  # x1, y1, x2, y2
    categories: list = field(default_factory=list)


def load_coco_annotations(path) -> list[CocoRecord]:
    """Join COCO captions/instances annotations onto their images.

    Raises ``json.JSONDecodeError`` on malformed input and
    :class:`IntegrityError` when an annotation names an unknown image id.
    """
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or "images" not in doc or "annotations" not in doc:
        raise ValueError(f"{path}: expected an object with 'images' and 'annotations' arrays")
    names = {c["id"]: c.get("name", c["id"]) for c in doc.get("categories", [])}
    records: dict[int, CocoRecord] = {}
    for im in doc["images"]:
        records[im["id"]] = CocoRecord(im["id"], im.get("file_name", ""), im.get("width"), im.get("height"))
    for ann in doc["annotations"]:
        rec = records.get(ann["image_id"])
        if rec is None:
            raise IntegrityError(f"annotation {ann.get('id')} references missing image_id {ann['image_id']}")
        if "caption" in ann:
            rec.captions.append(ann["caption"])
        if "bbox" in ann:
            x, y, w, h = ann["bbox"]
            rec.boxes.append((x, y, x + w, y + h))
            cat = ann.get("category_id")
            rec.categories.append(names.get(cat, cat))
    return list(records.values())


# ------------------------------------------------------------- manifest ----

def _to_png_bytes(image: np.ndarray) -> bytes:
    arr = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    buf = io.BytesIO()
    Image.fromarray(arr, "RGB").save(buf, format="PNG")
    return buf.getvalue()


def load_png(source) -> np.ndarray:
    """Decode an 8-bit RGB PNG (path or bytes) to a (3, H, W) array in [0, 1]."""
    fh = io.BytesIO(source) if isinstance(source, (bytes, bytearray)) else source
    with Image.open(fh) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def write_manifest(samples, path, image_dir: str | None = "images") -> None:
    """Write one JSON record per line; images as PNG files or inline base64."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if image_dir is not None:
        (path.parent / image_dir).mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            rec = {"seed": s.seed, "caption": s.caption, "regions": [r.to_dict() for r in s.regions]}
            png = _to_png_bytes(s.image)
            if image_dir is None:
                rec["image_b64"] = base64.b64encode(png).decode("ascii")
            else:
                rel = f"{image_dir}/{path.stem}_{s.seed}.png"
                (path.parent / rel).write_bytes(png)
                rec["image"] = rel
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path) -> list[SceneSample]:
    path = Path(path)
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if "image_b64" in rec:
                img = load_png(base64.b64decode(rec["image_b64"]))
            else:
                img = load_png(path.parent / rec["image"])
            out.append(
                SceneSample(img, rec["caption"], [Region.from_dict(r) for r in rec["regions"]], int(rec.get("seed", 0)))
            )
    return out
