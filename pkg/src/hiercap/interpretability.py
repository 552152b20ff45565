"""Interpretability-enhancement loss over high-relevance region-word pairs.

For a selected pair the posterior is P(r|w) = P(w|r) * P(r) ("verbatim"), or
that product divided by its sum over regions for the same word
("normalized"). The loss is the sum (or mean) of 1 - P(r|w) over the pairs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rwa import RelevanceMatrix
from .tensor import Tensor, add, as_tensor, div, getitem, matmul, mul, reshape, sub, sum_

MODES = ("verbatim", "normalized")


@dataclass
class PairSelection:
    pairs: list[tuple[int, int, float]]
    c: float
    k: int
    matrix: np.ndarray | None = field(default=None, repr=False)

    @property
    def threshold(self) -> float:
        return self.c / self.k

    def indices(self) -> set[tuple[int, int]]:
        return {(i, j) for i, j, _ in self.pairs}

    def __len__(self) -> int:
        return len(self.pairs)


def _probs(m) -> np.ndarray:
    if isinstance(m, RelevanceMatrix):
        return np.asarray(m.probs, dtype=np.float64)
    if isinstance(m, Tensor):
        return m.data
    return np.asarray(m, dtype=np.float64)


def select_pairs(m, c: float = 2.0) -> PairSelection:
    """Keep (i, j) iff P(w_j | r_i) >= c / k, k being the number of words."""
    if c <= 0:
        raise ValueError(f"selection factor must be positive, got {c}")
    p = _probs(m)
    k = p.shape[1]
    ii, jj = np.nonzero(p >= c / k)
    return PairSelection([(int(i), int(j), float(p[i, j])) for i, j in zip(ii, jj)], c, k, p)


def select_all_pairs(m) -> PairSelection:
    p = _probs(m)
    n, k = p.shape
    return PairSelection([(i, j, float(p[i, j])) for i in range(n) for j in range(k)], 0.0, k, p)


def region_prior(n: int, mode: str = "uniform", boxes=None) -> np.ndarray:
    """P(r_i): uniform 1/n, or proportional to box area."""
    if mode == "uniform":
        return np.full(n, 1.0 / n)
    if mode == "area":
        if boxes is None or len(boxes) != n:
            raise ValueError("area prior needs one box per region")
        area = np.array([float(b[2]) * float(b[3]) for b in boxes])
        return area / area.sum()
    raise ValueError(f"unknown prior mode {mode!r}")


def posterior(pwr, prior, mode: str = "verbatim", groups=None):
    """P(r_i | w_j) from P(w_j | r_i) and P(r_i).

    In normalized mode ``pwr`` is an (n, k) matrix and ``prior`` an (n,)
    vector; each column is divided by its prior-weighted sum over regions.
    ``groups`` (an (n, n) 0/1 matrix) restricts that sum to regions of the
    same image when several images are stacked. Tensors in, Tensor out;
    plain numbers in, float / ndarray out.
    """
    plain = not isinstance(pwr, Tensor) and not isinstance(prior, Tensor)
    p, pr = as_tensor(pwr), as_tensor(prior)
    if p.ndim == 2 and pr.ndim == 1:
        pr = reshape(pr, (-1, 1))  # one prior per region row
    if mode == "verbatim":
        out = mul(p, pr)
    elif mode == "normalized":
        if p.ndim != 2:
            raise ValueError("normalized posterior needs the full (n, k) relevance matrix")
        joint = mul(p, pr)
        g = np.ones((p.shape[0], p.shape[0])) if groups is None else np.asarray(groups, dtype=np.float64)
        denom = matmul(g, joint)
        if np.any(denom.data == 0):
            raise ZeroDivisionError("normalized posterior: P(w_j) is zero for some word")
        out = div(joint, denom)
    else:
        raise ValueError(f"unknown posterior mode {mode!r}")
    if plain:
        return float(out.data) if out.data.ndim == 0 else out.data
    return out


def ie_loss(
    sel: PairSelection,
    prior,
    mode: str = "verbatim",
    reduce: str = "mean",
    matrix=None,
    groups=None,
) -> Tensor:
    """Sum or mean of (1 - P(r_i | w_j)) over the selected pairs.

    Pass ``matrix`` (the relevance Tensor the selection came from) to make the
    loss differentiable; otherwise the stored probabilities are used.
    An empty selection gives 0.
    """
    if reduce not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduce!r}")
    if not sel.pairs:
        return Tensor(0.0)
    if matrix is None:
        matrix = Tensor(sel.matrix) if sel.matrix is not None else None
    ii = np.array([i for i, _, _ in sel.pairs])
    jj = np.array([j for _, j, _ in sel.pairs])
    pri = np.asarray(prior, dtype=np.float64) if not isinstance(prior, Tensor) else prior.data
    if matrix is None:
        if mode != "verbatim":
            raise ValueError("normalized mode needs the full relevance matrix")
        vals = np.array([p for _, _, p in sel.pairs])
        post = Tensor(vals * pri[ii])
    elif mode == "verbatim":
        post = mul(getitem(matrix, (ii, jj)), pri[ii])
    else:
        post = getitem(posterior(as_tensor(matrix), Tensor(pri.reshape(-1, 1)), "normalized", groups), (ii, jj))
    total = sum_(sub(1.0, post))
    return mul(total, 1.0 / len(sel.pairs)) if reduce == "mean" else total


def total_loss(ce, ie, lam: float = 1.0) -> Tensor:
    if lam < 0:
        raise ValueError(f"IE weight must be non-negative, got {lam}")
    return add(ce, mul(ie, lam))
