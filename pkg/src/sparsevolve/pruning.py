"""Post-training pruning: build the initial mask at a target sparsity.

Scores are either plain weight magnitude or the activation-aware product
|W[i,j]| * norm(x_j), where norm(x_j) is the L2 norm of input feature j over
a calibration set. Masks are unstructured (per-output-row budgets) or N:M
structured (at most N of every M consecutive input-dim weights survive).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import ParamTree

UNSTRUCTURED = "unstructured"
NM = "nm"


@dataclass
class Mask:
    """Binary indicator of active base weights for one tensor."""

    name: str
    bits: np.ndarray  # bool, same shape as the weight matrix
    pattern: str = UNSTRUCTURED
    n: int = 0
    m: int = 0

    def popcount(self) -> int:
        return int(self.bits.sum())

    def sparsity(self) -> float:
        return 1.0 - self.popcount() / self.bits.size

    def nm_violations(self, n: int | None = None, m: int | None = None) -> list[tuple[int, int]]:
        """(row, group) offsets of aligned groups with more than n set bits."""
        n = self.n if n is None else n
        m = self.m if m is None else m
        if m <= 0:
            raise ValueError("nm_violations: m must be positive")
        rows, cols = self.bits.shape
        if cols % m != 0:
            raise ValueError(f"nm_violations: input dim {cols} not divisible by {m}")
        counts = self.bits.reshape(rows, cols // m, m).sum(axis=2)
        bad = np.argwhere(counts > n)
        return [(int(r), int(g)) for r, g in bad]


@dataclass
class ActivationNorms:
    """Per-input-feature L2 norms of calibration activations."""

    norms: np.ndarray
    tokens: int


def collect_activation_norms(forward, tree: ParamTree, batches) -> dict[str, ActivationNorms]:
    """Run calibration batches and collect per-feature activation norms.

    ``norms[j]`` is the L2 norm over all calibration tokens of the input
    feature j feeding each prunable matrix.
    """
    names = tree.prunable_names()
    sumsq: dict[str, np.ndarray] = {}
    tokens: dict[str, int] = {n: 0 for n in names}
    n_batches = 0
    for batch in batches:
        n_batches += 1
        taps: dict[str, list[np.ndarray]] = {n: [] for n in names}
        forward(tree, batch, taps=taps)
        for name in names:
            for arr in taps[name]:
                a64 = arr.astype(np.float64)
                if name not in sumsq:
                    sumsq[name] = np.zeros(arr.shape[1], dtype=np.float64)
                sumsq[name] += (a64 * a64).sum(axis=0)
                tokens[name] += arr.shape[0]
    if n_batches == 0:
        raise ValueError("collect_activation_norms: empty calibration set")
    return {n: ActivationNorms(np.sqrt(sumsq[n]), tokens[n]) for n in names}


def score_wanda(w: np.ndarray, norms: np.ndarray) -> np.ndarray:
    """score[i, j] = |W[i, j]| * norms[j]."""
    w = np.asarray(w)
    norms = np.asarray(norms)
    if norms.ndim != 1 or norms.shape[0] != w.shape[-1]:
        raise ValueError(f"score_wanda: norms length {norms.shape} does not match input dim of {w.shape}")
    return np.abs(w) * norms


def build_mask(
    scores: np.ndarray,
    sparsity: float,
    pattern: str = UNSTRUCTURED,
    grouping: str = "row",
    n: int = 0,
    m: int = 0,
    name: str = "",
) -> Mask:
    """Keep the highest-scoring coordinates subject to the sparsity budget.

    Unstructured with row grouping clears the lowest floor(sparsity*row_len)
    scores within each output row; matrix grouping applies one global budget.
    N:M keeps the n best of every aligned group of m consecutive input-dim
    weights. Ties always break toward the lower coordinate index.
    """
    scores = np.asarray(scores)
    if scores.ndim != 2:
        raise ValueError(f"build_mask: scores must be 2-D, got shape {scores.shape}")
    if not 0.0 <= sparsity < 1.0:
        raise ValueError(f"build_mask: sparsity must be in [0, 1), got {sparsity}")
    rows, cols = scores.shape
    bits = np.zeros_like(scores, dtype=bool)

    if pattern == UNSTRUCTURED:
        if grouping == "row":
            drop = int(np.floor(sparsity * cols))
            keep = cols - drop
            order = np.argsort(-scores, axis=1, kind="stable")
            np.put_along_axis(bits, order[:, :keep], True, axis=1)
        elif grouping == "matrix":
            numel = scores.size
            keep = numel - int(np.floor(sparsity * numel))
            order = np.argsort(-scores.reshape(-1), kind="stable")
            flat = bits.reshape(-1)
            flat[order[:keep]] = True
        else:
            raise ValueError(f"build_mask: unknown grouping {grouping!r}")
    elif pattern == NM:
        if m < 1 or n < 0:
            raise ValueError(f"build_mask: invalid N:M parameters {n}:{m}")
        if n > m:
            raise ValueError(f"build_mask: N={n} exceeds M={m}")
        if cols % m != 0:
            raise ValueError(f"build_mask: input dim {cols} not divisible by M={m}")
        grouped = scores.reshape(rows, cols // m, m)
        order = np.argsort(-grouped, axis=2, kind="stable")
        gbits = np.zeros_like(grouped, dtype=bool)
        np.put_along_axis(gbits, order[:, :, :n], True, axis=2)
        bits = gbits.reshape(rows, cols)
    else:
        raise ValueError(f"build_mask: unknown pattern {pattern!r}")

    return Mask(name=name, bits=bits, pattern=pattern, n=n, m=m)


def apply_mask(tree: ParamTree, masks: dict[str, Mask]) -> dict[str, np.ndarray]:
    """Zero masked coordinates of the live weights; return retained dense copies.

    The returned dict holds the original dense values, which later mask
    rebuilds multiply back against.
    """
    retained: dict[str, np.ndarray] = {}
    for name, tensor in tree.named_prunable():
        if name not in masks:
            raise KeyError(f"apply_mask: missing mask for prunable tensor {name}")
        mask = masks[name]
        if mask.bits.shape != tensor.data.shape:
            raise ValueError(f"apply_mask: mask shape {mask.bits.shape} != weight shape {tensor.data.shape} for {name}")
        retained[name] = tensor.data.copy()
        tensor.data = np.where(mask.bits, tensor.data, np.zeros((), dtype=tensor.data.dtype))
    return retained


def prune_model(
    tree: ParamTree,
    forward,
    calib_batches,
    sparsity: float,
    scorer: str = "wanda",
    pattern: str = UNSTRUCTURED,
    grouping: str = "row",
    n: int = 0,
    m: int = 0,
) -> tuple[dict[str, Mask], dict[str, np.ndarray]]:
    """Score, mask, and apply in one pass; returns (masks, retained dense weights)."""
    if scorer == "wanda":
        acts = collect_activation_norms(forward, tree, calib_batches)
    elif scorer == "magnitude":
        acts = None
    else:
        raise ValueError(f"prune_model: unknown scorer {scorer!r}")
    masks: dict[str, Mask] = {}
    for name, tensor in tree.named_prunable():
        w = tensor.data
        scores = score_wanda(w, acts[name].norms) if acts is not None else np.abs(w)
        masks[name] = build_mask(scores, sparsity, pattern=pattern, grouping=grouping, n=n, m=m, name=name)
    retained = apply_mask(tree, masks)
    return masks, retained


def global_sparsity(masks: dict[str, Mask]) -> float:
    total = sum(m.bits.size for m in masks.values())
    active = sum(m.popcount() for m in masks.values())
    return 1.0 - active / total
