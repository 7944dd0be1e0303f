"""Challenge metrics: per-case Dice, component-wise false positive and false
negative volumes in mL, k-fold splitting and report assembly.

FPV sums the volume of predicted components that overlap no ground truth at
all; FNV symmetrically sums ground-truth components the prediction missed
entirely.  Components are defined by 6/18/26-connectivity (26 by default) and
labeled deterministically in first-seen row-major order by a two-pass
union-find sweep.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .volume import Case, Volume

__all__ = ["CaseMetrics", "MetricsReport", "FoldSplit", "dice_score",
           "connected_components", "false_positive_volume",
           "false_negative_volume", "kfold_split", "evaluate"]

CONNECTIVITIES = (6, 18, 26)


def _as_mask(m) -> np.ndarray:
    data = m.data if isinstance(m, Volume) else np.asarray(m)
    return data > 0


def dice_score(pred, gt) -> float:
    """2|P n G| / (|P| + |G|); 1.0 when both empty, 0.0 when exactly one is."""
    p, g = _as_mask(pred), _as_mask(gt)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    np_, ng = int(p.sum()), int(g.sum())
    if np_ == 0 and ng == 0:
        return 1.0
    if np_ == 0 or ng == 0:
        return 0.0
    return 2.0 * int((p & g).sum()) / (np_ + ng)


def _half_offsets(connectivity: int) -> list[tuple[int, int, int]]:
    """Lexicographically-negative neighbor offsets for a two-pass sweep."""
    if connectivity not in CONNECTIVITIES:
        raise ValueError(f"connectivity must be one of {CONNECTIVITIES}, got {connectivity}")
    max_l1 = {6: 1, 18: 2, 26: 3}[connectivity]
    offs = []
    for dz in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                off = (dz, dy, dx)
                if off < (0, 0, 0) and abs(dz) + abs(dy) + abs(dx) <= max_l1:
                    offs.append(off)
    return offs


def _resolve(parent: np.ndarray) -> np.ndarray:
    while True:
        grand = parent[parent]
        if np.array_equal(grand, parent):
            return parent
        parent = grand


def connected_components(mask, connectivity: int = 26) -> tuple[np.ndarray, int]:
    """Label foreground components 1..C, first seen in row-major order.

    Returns (labels, C) where ``labels`` is int32 of the mask's shape.
    """
    fg = _as_mask(mask)
    if fg.ndim != 3:
        raise ValueError(f"expected a 3D mask, got shape {fg.shape}")
    offsets = _half_offsets(connectivity)
    n_fg = int(fg.sum())
    if n_fg == 0:
        return np.zeros(fg.shape, dtype=np.int32), 0

    # provisional ids 1..F in row-major order of the foreground voxels
    prov = np.where(fg, np.cumsum(fg.ravel()).reshape(fg.shape), 0).astype(np.int64)
    parent = np.arange(n_fg + 1, dtype=np.int64)

    shape = fg.shape
    for off in offsets:
        src = tuple(slice(max(-o, 0), n - max(o, 0)) for o, n in zip(off, shape))
        dst = tuple(slice(max(o, 0), n - max(-o, 0)) for o, n in zip(off, shape))
        both = fg[dst] & fg[src]
        a = prov[dst][both]
        b = prov[src][both]
        for i in range(a.size):  # short merge lists; union-find stays exact
            ra, rb = a[i], b[i]
            while parent[ra] != ra:
                parent[ra] = parent[parent[ra]]
                ra = parent[ra]
            while parent[rb] != rb:
                parent[rb] = parent[parent[rb]]
                rb = parent[rb]
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)

    roots = _resolve(parent)
    # rename roots to 1..C by first appearance (ids are already row-major)
    first = np.full(n_fg + 1, n_fg + 2, dtype=np.int64)
    np.minimum.at(first, roots[1:], np.arange(1, n_fg + 1))
    present = np.flatnonzero(first <= n_fg + 1)
    present = present[np.argsort(first[present])]
    rename = np.zeros(n_fg + 1, dtype=np.int32)
    rename[present] = np.arange(1, present.size + 1, dtype=np.int32)
    labels = rename[roots[prov]]
    return labels.astype(np.int32), int(present.size)


def _component_miss_volume(base, other, spacing, connectivity) -> float:
    """Total mL of `base` components with zero overlap against `other`."""
    b, o = _as_mask(base), _as_mask(other)
    if b.shape != o.shape:
        raise ValueError(f"mask shapes differ: {b.shape} vs {o.shape}")
    labels, count = connected_components(b, connectivity)
    if count == 0:
        return 0.0
    sizes = np.bincount(labels.ravel(), minlength=count + 1)
    overlapped = np.bincount(labels[o].ravel(), minlength=count + 1)
    missed_voxels = int(sizes[1:][overlapped[1:] == 0].sum())
    voxel_mm3 = float(spacing[0]) * float(spacing[1]) * float(spacing[2])
    return missed_voxels * voxel_mm3 / 1000.0


def false_positive_volume(pred, gt, spacing, connectivity: int = 26) -> float:
    """mL of predicted components that touch no ground-truth voxel."""
    return _component_miss_volume(pred, gt, spacing, connectivity)


def false_negative_volume(pred, gt, spacing, connectivity: int = 26) -> float:
    """mL of ground-truth components the prediction misses entirely."""
    return _component_miss_volume(gt, pred, spacing, connectivity)


@dataclass(frozen=True)
class FoldSplit:
    """Disjoint case-id folds whose sizes differ by at most one."""

    folds: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        seen: set[str] = set()
        for fold in self.folds:
            for cid in fold:
                if cid in seen:
                    raise ValueError(f"case {cid!r} appears in more than one fold")
                seen.add(cid)
        sizes = [len(f) for f in self.folds]
        if sizes and max(sizes) - min(sizes) > 1:
            raise ValueError(f"fold sizes {sizes} differ by more than one")

    def __len__(self) -> int:
        return len(self.folds)

    def train_ids(self, k: int) -> list[str]:
        return [cid for j, fold in enumerate(self.folds) if j != k for cid in fold]

    def test_ids(self, k: int) -> list[str]:
        return list(self.folds[k])


def kfold_split(ids, k: int, seed: int) -> FoldSplit:
    """Shuffle by seed and deal round-robin into ``k`` folds."""
    ids = list(ids)
    if not 1 <= k <= len(ids):
        raise ValueError(f"k must be in [1, {len(ids)}], got {k}")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return FoldSplit(tuple(tuple(shuffled[j::k]) for j in range(k)))


@dataclass(frozen=True)
class CaseMetrics:
    id: str
    dice: float
    fpv_ml: float
    fnv_ml: float


@dataclass(frozen=True)
class MetricsReport:
    """Per-case rows plus their arithmetic means and the producing config."""

    per_case: tuple[CaseMetrics, ...]
    mdice: float
    mean_fpv_ml: float
    mean_fnv_ml: float
    connectivity: int
    fusion: dict | None = None

    def to_tsv(self) -> str:
        lines = [f"# connectivity\t{self.connectivity}"]
        if self.fusion is not None:
            echo = "\t".join(f"{k}={v}" for k, v in sorted(self.fusion.items()))
            lines.append(f"# fusion\t{echo}")
        lines.append("id\tdice\tfpv_ml\tfnv_ml")
        for row in self.per_case:
            lines.append(f"{row.id}\t{row.dice:.6f}\t{row.fpv_ml:.6f}\t{row.fnv_ml:.6f}")
        lines.append(f"mean\t{self.mdice:.6f}\t{self.mean_fpv_ml:.6f}\t{self.mean_fnv_ml:.6f}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_tsv())


def evaluate(cases, masks, connectivity: int = 26,
             fusion: dict | None = None) -> MetricsReport:
    """Score one mask per labeled case.

    ``masks`` maps case id to a MASK volume (a list aligned with ``cases``
    also works).  Aggregates are unweighted means over all evaluated cases.
    """
    if not isinstance(masks, dict):
        masks = {case.id: mask for case, mask in zip(cases, masks)}
    rows = []
    for case in cases:
        if case.label is None:
            continue
        if case.id not in masks:
            raise ValueError(f"no predicted mask supplied for case {case.id!r}")
        pred = masks[case.id]
        rows.append(CaseMetrics(
            id=case.id,
            dice=dice_score(pred, case.label),
            fpv_ml=false_positive_volume(pred, case.label, case.spacing, connectivity),
            fnv_ml=false_negative_volume(pred, case.label, case.spacing, connectivity),
        ))
    if not rows:
        raise ValueError("no labeled cases to evaluate")
    return MetricsReport(
        per_case=tuple(rows),
        mdice=float(np.mean([r.dice for r in rows])),
        mean_fpv_ml=float(np.mean([r.fpv_ml for r in rows])),
        mean_fnv_ml=float(np.mean([r.fnv_ml for r in rows])),
        connectivity=connectivity,
        fusion=fusion,
    )
