"""Training recipes: region-word attention, caption phase 1 (CE), phase 2 (CE + IE)."""
from __future__ import annotations

import csv
import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .dataset import SceneSample, Vocabulary, pad_batch, tokenize_caption
from .decoder import PAD, START, HierAttDecoder, strip_special
from .interpretability import posterior, region_prior
from .metrics import MetricReport, corpus_report
from .model import Captioner, ConfigMismatchError, default_config
from .optim import Adam, clip_global_norm
from .rwa import RegionWordAttention, RwaConfig, relevance_scores
from .tensor import Tape, Tensor, add, backward, concat, getitem, log_softmax, matmul, mul, reshape, softmax, sub, sum_

log = logging.getLogger(__name__)

CURVE_HEADER = ("epoch", "ce_loss", "ie_loss", "total")


@dataclass
class TrainConfig:
    epochs: int = 12
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 5.0
    seed: int = 0
    lambda_ie: float = 1.0
    threshold_factor: float = 2.0
    ie_mode: str = "verbatim"
    ie_reduce: str = "mean"
    ie_pairs: str = "selected"
    prior: str = "uniform"
    rwa_epochs: int = 15
    rwa_lr: float = 1e-3
    rwa_count: int = 400
    ie_epochs: int = 3
    train_count: int = 2000
    heldout_count: int = 200

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ValueError("epochs must be >= 0 and batch_size, lr positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


def _streams(seed: int):
    """Independent shuffle and dropout generators derived from one seed."""
    return np.random.default_rng([seed, 1]), np.random.default_rng([seed, 2])


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, size):
        yield order[i:i + size]


def write_curve(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_HEADER)
        for r in rows:
            w.writerow([r["epoch"], repr(r["ce_loss"]), repr(r["ie_loss"]), repr(r["total"])])


def _optimizer(params, cfg: TrainConfig, lr: float | None = None) -> Adam:
    return Adam(params, lr=lr or cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)


def _step(opt: Adam, cfg: TrainConfig) -> None:
    clip_global_norm(opt.params, cfg.clip)
    opt.step()
    opt.zero_grad()


# ------------------------------------------------------ region-word model ----

def _caption_words(caption: str, vocab: Vocabulary) -> list[int]:
    return tokenize_caption(caption, vocab)[1:-1]


def background_box(sample: SceneSample, rng: np.random.Generator, canvas: int = 64):
    """An object-free square box, or None when the scene leaves no room."""
    for _ in range(50):
        s = int(rng.integers(10, 17))
        x, y = int(rng.integers(0, canvas - s + 1)), int(rng.integers(0, canvas - s + 1))
        if all(x + s <= bx or bx + bw <= x or y + s <= by or by + bh <= y for bx, by, bw, bh in sample.boxes):
            return (x, y, s, s)
    return None


def rwa_targets(sample: SceneSample, vocab: Vocabulary, rng=None):
    """(boxes, target rows) for one scene: one-hot on each object's word, uniform for background."""
    words = _caption_words(sample.caption, vocab)
    k = len(words)
    boxes, targets = [], []
    for r in sample.regions:
        hits = [j for j, w in enumerate(words) if w == vocab.id(r.word)]
        if len(hits) != 1:
            raise ValueError(f"seed {sample.seed}: object word {r.word!r} must appear exactly once in the caption")
        t = np.zeros(k)
        t[hits[0]] = 1.0
        boxes.append(r.box)
        targets.append(t)
    if rng is not None:
        bg = background_box(sample, rng)
        if bg is not None:
            boxes.append(bg)
            targets.append(np.full(k, 1.0 / k))
    return boxes, targets


def _rwa_batch_loss(rwa: RegionWordAttention, samples, vocab, rng):
    images, boxes, owners, targets = [], [], [], []
    for b, s in enumerate(samples):
        bx, tg = rwa_targets(s, vocab, rng)
        images.extend([s.image] * len(bx))
        boxes.extend(bx)
        owners.extend([b] * len(bx))
        targets.extend(tg)
    regions = rwa.region_vectors(images, boxes)
    owners = np.asarray(owners)
    word_ids = [_caption_words(s.caption, vocab) for s in samples]
    total = None
    for k in sorted({len(w) for w in word_ids}):
        members = [b for b, w in enumerate(word_ids) if len(w) == k]
        words = rwa.encode_words_bidir(np.array([word_ids[b] for b in members]))
        pos = {b: i for i, b in enumerate(members)}
        ridx = np.nonzero(np.isin(owners, members))[0]
        reg = reshape(getitem(regions, ridx), (len(ridx), 1, regions.shape[1]))
        wr = getitem(words, np.array([pos[o] for o in owners[ridx]]))
        scores = reshape(relevance_scores(reg, wr, rwa.u, rwa.w, rwa.v), (len(ridx), k))
        tgt = np.stack([targets[i] for i in ridx])
        part = sum_(mul(log_softmax(scores, axis=-1), -tgt))
        total = part if total is None else add(total, part)
    return mul(total, 1.0 / len(boxes))


def train_rwa(samples, vocab: Vocabulary, cfg: TrainConfig, rwa_cfg: RwaConfig | None = None):
    """Fit the region-word scorer on ground-truth region/word alignments."""
    if not samples:
        raise ValueError("train_rwa: empty dataset")
    rwa_cfg = rwa_cfg or RwaConfig(vocab_size=len(vocab))
    rwa = RegionWordAttention(rwa_cfg, np.random.default_rng([cfg.seed, 3]))
    opt = _optimizer(rwa.parameters(), cfg, cfg.rwa_lr)
    shuffle, bg_rng = _streams(cfg.seed)
    rows = []
    for epoch in range(1, cfg.rwa_epochs + 1):
        losses = []
        for idx in _batches(len(samples), cfg.batch_size, shuffle):
            with Tape():
                loss = _rwa_batch_loss(rwa, [samples[i] for i in idx], vocab, bg_rng)
                backward(loss)
            _step(opt, cfg)
            losses.append(float(loss.data))
        ce = float(np.mean(losses))
        rows.append({"epoch": epoch, "ce_loss": ce, "ie_loss": 0.0, "total": ce})
        log.info("rwa epoch %d loss %.4f", epoch, ce)
    return rwa, rows


def rwa_accuracy(rwa: RegionWordAttention, samples, vocab: Vocabulary) -> float:
    """Fraction of object regions whose row argmax is their ground-truth word."""
    hit = tot = 0
    for s in samples:
        boxes, targets = rwa_targets(s, vocab)
        m = rwa.relevance_matrix(s.image, boxes, _caption_words(s.caption, vocab))
        for row, t in zip(m.probs, targets):
            hit += int(np.argmax(row) == np.argmax(t))
            tot += 1
    return hit / tot


# -------------------------------------------------------- caption model ----

def _images(samples) -> np.ndarray:
    return np.stack([s.image for s in samples])


def _check_vocab(model: Captioner, vocab: Vocabulary | None) -> None:
    if vocab is not None and model.vocab.tokens != vocab.tokens:
        raise ConfigMismatchError("training vocabulary does not match the model's vocabulary")


def train_caption_phase1(samples, vocab: Vocabulary, cfg: TrainConfig, model: Captioner | None = None, model_cfg=None):
    """Teacher-forced cross-entropy training; one curve row per epoch."""
    if not samples:
        raise ValueError("train_caption_phase1: empty dataset")
    if model is None:
        model = Captioner(model_cfg or default_config(len(vocab)), vocab, seed=cfg.seed)
    _check_vocab(model, vocab)
    return _train_captioner(model, samples, cfg, rwa=None, lam=0.0, epochs=cfg.epochs)


def train_caption_phase2(model: Captioner, rwa: RegionWordAttention, samples, cfg: TrainConfig, rwa_vocab=None,
                         epochs: int | None = None):
    """Continue training with CE + lambda * IE; the region-word model stays frozen."""
    if rwa_vocab is not None and rwa_vocab.tokens != model.vocab.tokens:
        raise ConfigMismatchError("captioner and region-word checkpoints use different vocabularies")
    if rwa.cfg.vocab_size != len(model.vocab):
        raise ConfigMismatchError(f"region-word vocab {rwa.cfg.vocab_size} != captioner vocab {len(model.vocab)}")
    return _train_captioner(model, samples, cfg, rwa=rwa, lam=cfg.lambda_ie,
                            epochs=cfg.ie_epochs if epochs is None else epochs)


class _IeContext:
    """Frozen region vectors and priors for the IE term."""

    def __init__(self, rwa: RegionWordAttention, samples, cfg: TrainConfig):
        self.rwa = rwa
        self.cfg = cfg
        for p in rwa.parameters():
            p.requires_grad = False
        self.embed = Tensor(rwa.embed.data)
        images = [s.image for s in samples for _ in s.regions]
        boxes = [r.box for s in samples for r in s.regions]
        vecs = []
        for i in range(0, len(boxes), 64):
            vecs.append(rwa.region_vectors(images[i:i + 64], boxes[i:i + 64]).data)
        flat = np.concatenate(vecs)
        self.regions, self.priors = [], []
        start = 0
        for s in samples:
            n = len(s.regions)
            self.regions.append(flat[start:start + n])
            self.priors.append(region_prior(n, cfg.prior, s.boxes))
            start += n

    def terms(self, decoder: HierAttDecoder, fm0: Tensor, sample_idx, generated):
        """Per-pair (1 - posterior) terms for one batch, as a Tensor (or None if empty)."""
        cfg = self.cfg
        keep = [b for b, g in enumerate(generated) if len(g) > 0]
        if not keep:
            return None
        seqs = pad_batch([[START] + generated[b] for b in keep], PAD)
        fm = getitem(fm0, np.asarray(keep)) if len(keep) != fm0.shape[0] else fm0
        logits = decoder.decode_teacher_forced(fm, seqs, train=False)
        soft = matmul(softmax(logits, axis=-1), self.embed)  # expected RWA embedding per position
        parts = []
        lengths = np.array([len(generated[b]) for b in keep])
        for k in sorted(set(lengths.tolist())):
            members = np.nonzero(lengths == k)[0]
            x = getitem(soft, (members[:, None], np.arange(k)[None, :]))
            words = self.rwa.encode_words_bidir(x)
            owners, regs, pri = [], [], []
            for gi, m in enumerate(members):
                s = sample_idx[keep[m]]
                owners.extend([gi] * len(self.regions[s]))
                regs.append(self.regions[s])
                pri.append(self.priors[s])
            owners = np.asarray(owners)
            reg = Tensor(np.concatenate(regs)[:, None, :])
            rows = reshape(self.rwa.rows(reg, getitem(words, owners)), (len(owners), k))
            pri = np.concatenate(pri)
            if cfg.ie_pairs == "all":
                ri, ci = np.nonzero(np.ones(rows.shape, dtype=bool))
            else:
                ri, ci = np.nonzero(rows.data >= cfg.threshold_factor / k)
            if ri.size == 0:
                continue
            if cfg.ie_mode == "verbatim":
                post = mul(getitem(rows, (ri, ci)), pri[ri])
            else:
                groups = (owners[:, None] == owners[None, :]).astype(np.float64)
                post = getitem(posterior(rows, Tensor(pri), "normalized", groups), (ri, ci))
            parts.append(sub(1.0, post))
        if not parts:
            return None
        return concat(parts, axis=0) if len(parts) > 1 else parts[0]


def _reduce_ie(terms: Tensor, cfg: TrainConfig) -> Tensor:
    total = sum_(terms)
    return mul(total, 1.0 / terms.shape[0]) if cfg.ie_reduce == "mean" else total


def _train_captioner(model: Captioner, samples, cfg: TrainConfig, rwa, lam: float, epochs: int):
    shuffle, drop_rng = _streams(cfg.seed)
    opt = _optimizer(model.parameters(), cfg)
    images = _images(samples)
    tokens = [tokenize_caption(s.caption, model.vocab) for s in samples]
    ie_ctx = _IeContext(rwa, samples, cfg) if rwa is not None else None
    rows = []
    for epoch in range(1, epochs + 1):
        ce_vals, ie_sum, ie_count, tot_vals = [], 0.0, 0, []
        for idx in _batches(len(samples), cfg.batch_size, shuffle):
            with Tape():
                fm0 = model.encode(images[idx])
                ce = model.ce_loss(fm0, pad_batch([tokens[i] for i in idx], PAD), train=True, rng=drop_rng)
                loss = ce
                if ie_ctx is not None:
                    generated = [strip_special(g) for g in model.decoder.greedy_decode(fm0.data)]
                    terms = ie_ctx.terms(model.decoder, fm0, idx, generated)
                    if terms is not None:
                        ie = _reduce_ie(terms, cfg)
                        loss = add(ce, mul(ie, lam))
                        ie_sum += float(terms.data.sum())
                        ie_count += terms.shape[0]
                backward(loss)
            _step(opt, cfg)
            ce_vals.append(float(ce.data))
            tot_vals.append(float(loss.data))
        ce_mean = float(np.mean(ce_vals))
        ie_mean = ie_sum / ie_count if ie_count else 0.0
        rows.append({"epoch": epoch, "ce_loss": ce_mean, "ie_loss": ie_mean, "total": float(np.mean(tot_vals))})
        log.info("epoch %d ce %.4f ie %.4f", epoch, ce_mean, ie_mean)
    return model, rows


def measure_ie(model: Captioner, rwa: RegionWordAttention, samples, cfg: TrainConfig, batch: int = 64) -> float:
    """Dataset-mean IE term over all selected pairs of the model's greedy captions."""
    ctx = _IeContext(rwa, samples, cfg)
    images = _images(samples)
    total, count = 0.0, 0
    for i in range(0, len(samples), batch):
        idx = np.arange(i, min(i + batch, len(samples)))
        fm0 = model.encode(images[idx])
        generated = [strip_special(g) for g in model.decoder.greedy_decode(fm0.data)]
        terms = ctx.terms(model.decoder, fm0, idx, generated)
        if terms is not None:
            total += float(terms.data.sum())
            count += terms.shape[0]
    return total / count if count else 0.0


def exact_match(model: Captioner, samples) -> float:
    caps = model.caption(_images(samples))
    return float(np.mean([c == s.caption for c, s in zip(caps, samples)]))


def evaluate(model: Captioner, samples) -> tuple[MetricReport, list[str]]:
    """Greedy-decode every image and score against its reference caption."""
    if not samples:
        raise ValueError("evaluate: empty split")
    caps = model.caption(_images(samples))
    return corpus_report(caps, [[s.caption] for s in samples]), caps


# ------------------------------------------------------------ benchmark ----

class ParityError(RuntimeError):
    pass


def _long_decoder(decoder: HierAttDecoder, t: int) -> HierAttDecoder:
    if decoder.cfg.max_len >= t:
        return decoder
    clone = HierAttDecoder.__new__(HierAttDecoder)
    clone.__dict__.update(decoder.__dict__)
    clone._cfg = replace(decoder.cfg, max_len=t)
    return clone


def benchmark_decoder(decoder: HierAttDecoder, fm0, T: int = 32, reps: int = 5, seed: int = 0) -> dict:
    """Median wall time of one full-sequence forward vs T single-step forwards."""
    dec = _long_decoder(decoder, T)
    rng = np.random.default_rng(seed)
    fm0 = fm0.data if isinstance(fm0, Tensor) else np.asarray(fm0)
    if fm0.ndim == 3:
        fm0 = fm0[None]
    tokens = rng.integers(4, dec.cfg.vocab_size, size=(fm0.shape[0], T))
    tokens[:, 0] = START

    def parallel():
        return dec.decode_teacher_forced(fm0, tokens).data

    def sequential():
        cache = dec.init_cache(fm0)
        return np.stack([dec.decode_step(cache, tokens[:, t])[0] for t in range(T)], axis=1)

    diff = float(np.max(np.abs(parallel() - sequential())))
    if not diff <= 1e-6:
        raise ParityError(f"incremental and full-sequence logits differ by {diff:.3e}")
    tp, ts = [], []
    for _ in range(reps):
        t0 = time.perf_counter()
        parallel()
        tp.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        sequential()
        ts.append(time.perf_counter() - t0)
    t_par, t_seq = statistics.median(tp) * 1e3, statistics.median(ts) * 1e3
    return {
        "T": T,
        "reps": reps,
        "t_parallel_ms": t_par,
        "t_sequential_ms": t_seq,
        "speedup": t_seq / t_par,
        "parity_max_abs_diff": diff,
    }


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)

