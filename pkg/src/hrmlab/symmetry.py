"""The Sudoku equivalence-transformation group.

A transform is a relabeling of the digits combined with band/stack swaps,
row/column swaps within a band/stack, and an optional transpose. Applying
any of these to a uniquely-solvable puzzle yields another uniquely-solvable
puzzle whose solution transports through the same transform. Rotations and
reflections decompose into transpose plus permutations, so one datatype
covers the whole group.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .sudoku import BLANK, PuzzleGrid, RngLike, as_rng

Perm = tuple[int, ...]


class TransformError(ValueError):
    """Dimension mismatch or malformed permutation."""


def _check_perm(p: Perm, size: int, what: str) -> None:
    if sorted(p) != list(range(size)):
        raise TransformError(f"{what} is not a permutation of 0..{size - 1}: {p}")


def _invert_perm(p: Perm) -> Perm:
    inv = [0] * len(p)
    for i, v in enumerate(p):
        inv[v] = i
    return tuple(inv)


@dataclass(frozen=True)
class GridTransform:
    """One element of the Sudoku equivalence group for a given box size.

    Application order: transpose first, then band/row and stack/column
    permutations, then relabel. relabel maps value v to relabel[v - 1];
    blanks are never relabeled.
    """

    box_size: int
    relabel: Perm
    band_perm: Perm
    row_perms: tuple[Perm, ...]
    stack_perm: Perm
    col_perms: tuple[Perm, ...]
    transpose: bool = False

    def __post_init__(self):
        n = self.box_size
        side = n * n
        _check_perm(tuple(v - 1 for v in self.relabel), side, "relabel (1-based)")
        _check_perm(self.band_perm, n, "band_perm")
        _check_perm(self.stack_perm, n, "stack_perm")
        if len(self.row_perms) != n or len(self.col_perms) != n:
            raise TransformError(f"need {n} row_perms and col_perms")
        for p in self.row_perms:
            _check_perm(p, n, "row_perm")
        for p in self.col_perms:
            _check_perm(p, n, "col_perm")

    def is_identity(self) -> bool:
        return self == identity_transform(self.box_size)

    def _row_order(self) -> np.ndarray:
        return _axis_order(self.band_perm, self.row_perms, self.box_size)

    def _col_order(self) -> np.ndarray:
        return _axis_order(self.stack_perm, self.col_perms, self.box_size)

    def to_json(self) -> dict:
        return {
            "box_size": self.box_size,
            "relabel": list(self.relabel),
            "band_perm": list(self.band_perm),
            "row_perms": [list(p) for p in self.row_perms],
            "stack_perm": list(self.stack_perm),
            "col_perms": [list(p) for p in self.col_perms],
            "transpose": self.transpose,
        }

    @staticmethod
    def from_json(obj: Union[str, dict]) -> "GridTransform":
        if isinstance(obj, str):
            obj = json.loads(obj)
        return GridTransform(
            box_size=int(obj["box_size"]),
            relabel=tuple(obj["relabel"]),
            band_perm=tuple(obj["band_perm"]),
            row_perms=tuple(tuple(p) for p in obj["row_perms"]),
            stack_perm=tuple(obj["stack_perm"]),
            col_perms=tuple(tuple(p) for p in obj["col_perms"]),
            transpose=bool(obj["transpose"]),
        )


def _axis_order(group_perm: Perm, within_perms: tuple[Perm, ...], n: int) -> np.ndarray:
    """Destination index (b, i) reads source index group[b]*n + within[b][i]."""
    return np.array(
        [group_perm[b] * n + within_perms[b][i] for b in range(n) for i in range(n)],
        dtype=np.int64,
    )


def _decompose_axis(order: np.ndarray, n: int) -> tuple[Perm, tuple[Perm, ...]]:
    """Recover (group_perm, within_perms) from a band-structured index array."""
    group = tuple(int(order[b * n]) // n for b in range(n))
    within = tuple(
        tuple(int(order[b * n + i]) % n for i in range(n)) for b in range(n)
    )
    if not np.array_equal(_axis_order(group, within, n), order):
        raise TransformError("index array is not band-structured")
    return group, within


def identity_transform(box_size: int) -> GridTransform:
    n = box_size
    ident = tuple(range(n))
    return GridTransform(
        box_size=n,
        relabel=tuple(range(1, n * n + 1)),
        band_perm=ident,
        row_perms=(ident,) * n,
        stack_perm=ident,
        col_perms=(ident,) * n,
        transpose=False,
    )


def relabel_transform(box_size: int, relabel: Perm) -> GridTransform:
    """A pure digit relabeling (all spatial parts identity)."""
    t = identity_transform(box_size)
    return GridTransform(
        box_size=box_size,
        relabel=tuple(relabel),
        band_perm=t.band_perm,
        row_perms=t.row_perms,
        stack_perm=t.stack_perm,
        col_perms=t.col_perms,
        transpose=False,
    )


def apply_transform(t: GridTransform, g: PuzzleGrid) -> PuzzleGrid:
    """Transpose, then permute rows/columns, then relabel. Blanks unaffected
    by the relabel; unique solvability is preserved."""
    if t.box_size != g.box_size:
        raise TransformError(
            f"transform box_size {t.box_size} != grid box_size {g.box_size}"
        )
    m = g.matrix()
    if t.transpose:
        m = m.T
    m = m[t._row_order()][:, t._col_order()]
    lut = np.zeros(g.side + 1, dtype=np.int16)
    lut[1:] = np.array(t.relabel, dtype=np.int16)
    lut[BLANK] = BLANK
    return PuzzleGrid(g.box_size, lut[m].ravel())


def invert_transform(t: GridTransform) -> GridTransform:
    """The group inverse: apply(invert(t), apply(t, g)) == g for every g."""
    n = t.box_size
    inv_relabel = tuple(v + 1 for v in _invert_perm(tuple(v - 1 for v in t.relabel)))
    rows = t._row_order()
    cols = t._col_order()
    if t.transpose:
        # Conjugation by transpose swaps the row and column actions.
        rows, cols = cols, rows
    band, row_ps = _decompose_axis(np.argsort(rows), n)
    stack, col_ps = _decompose_axis(np.argsort(cols), n)
    return GridTransform(
        box_size=n,
        relabel=inv_relabel,
        band_perm=band,
        row_perms=row_ps,
        stack_perm=stack,
        col_perms=col_ps,
        transpose=t.transpose,
    )


def compose_transform(a: GridTransform, b: GridTransform) -> GridTransform:
    """The transform acting as: apply(compose(a, b), g) == apply(a, apply(b, g))."""
    if a.box_size != b.box_size:
        raise TransformError("cannot compose transforms of different box sizes")
    n = a.box_size
    side = n * n
    b_rows, b_cols = b._row_order(), b._col_order()
    if a.transpose:
        b_rows, b_cols = b_cols, b_rows
    rows = b_rows[a._row_order()]
    cols = b_cols[a._col_order()]
    relabel = tuple(a.relabel[b.relabel[v] - 1] for v in range(side))
    band, row_ps = _decompose_axis(rows, n)
    stack, col_ps = _decompose_axis(cols, n)
    return GridTransform(
        box_size=n,
        relabel=relabel,
        band_perm=band,
        row_perms=row_ps,
        stack_perm=stack,
        col_perms=col_ps,
        transpose=a.transpose != b.transpose,
    )


def sample_relabel_set(k: int, box_size: int, rng_seed: RngLike) -> list[GridTransform]:
    """k pure relabelings: the identity first, then k-1 distinct non-identity
    digit permutations sampled uniformly."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    side = box_size ** 2
    available = math.factorial(side) - 1
    if k - 1 > available:
        raise ValueError(
            f"requested {k - 1} non-identity relabelings, only {available} exist"
        )
    rng = as_rng(rng_seed)
    ident = tuple(range(1, side + 1))
    seen = {ident}
    out = [identity_transform(box_size)]
    while len(out) < k:
        perm = tuple(int(v) + 1 for v in rng.permutation(side))
        if perm in seen:
            continue
        seen.add(perm)
        out.append(relabel_transform(box_size, perm))
    return out


def random_transform(
    box_size: int,
    rng: RngLike,
    relabel: bool = True,
    spatial: bool = True,
    transpose: bool = True,
) -> GridTransform:
    """A uniform random group element, with optional parts frozen to identity."""
    rng = as_rng(rng)
    n = box_size
    side = n * n

    def perm(size: int, active: bool) -> Perm:
        if not active:
            return tuple(range(size))
        return tuple(int(v) for v in rng.permutation(size))

    return GridTransform(
        box_size=n,
        relabel=tuple(v + 1 for v in perm(side, relabel)),
        band_perm=perm(n, spatial),
        row_perms=tuple(perm(n, spatial) for _ in range(n)),
        stack_perm=perm(n, spatial),
        col_perms=tuple(perm(n, spatial) for _ in range(n)),
        transpose=bool(transpose and rng.integers(0, 2)),
    )
