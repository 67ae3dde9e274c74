"""Sudoku engine: grid representation, validity, exact solution counting,
puzzle generation, simplification augmentation, and the conflict-energy metric.

Grids generalize over the box size n (n=2 gives 4x4, n=3 the classic 9x9).
Token 0 is the blank; values run 1..n^2. The text format is row-major with
'.' for blanks, '1'..'9' for values 1-9 and 'A'.. beyond.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np

BLANK = 0

_VALUE_CHARS = "123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ"

RngLike = Union[int, np.random.Generator]


class GridError(ValueError):
    """Malformed grid text or inconsistent grid contents."""


class GenerationError(RuntimeError):
    """Puzzle generation exhausted its retry budget; raise target_clues."""


def as_rng(seed: RngLike) -> np.random.Generator:
    """Accept either a seed or an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass
class PuzzleGrid:
    """An n^2 x n^2 token grid stored as a flat row-major cell array."""

    box_size: int
    cells: np.ndarray

    def __post_init__(self):
        if self.box_size < 2:
            raise GridError(f"box_size must be >= 2, got {self.box_size}")
        cells = np.asarray(self.cells, dtype=np.int16)
        n4 = self.box_size ** 4
        if cells.shape != (n4,):
            raise GridError(f"expected {n4} cells, got shape {cells.shape}")
        if cells.min(initial=0) < 0 or cells.max(initial=0) > self.side:
            raise GridError(f"cell values must lie in [0, {self.side}]")
        self.cells = cells

    @property
    def side(self) -> int:
        return self.box_size ** 2

    @property
    def n_cells(self) -> int:
        return self.box_size ** 4

    def matrix(self) -> np.ndarray:
        return self.cells.reshape(self.side, self.side)

    def clue_count(self) -> int:
        return int(np.count_nonzero(self.cells))

    def blank_count(self) -> int:
        return self.n_cells - self.clue_count()

    def is_complete(self) -> bool:
        return bool((self.cells != BLANK).all())

    def copy(self) -> "PuzzleGrid":
        return PuzzleGrid(self.box_size, self.cells.copy())

    def key(self) -> bytes:
        """Hashable identity used for vote pooling."""
        return self.cells.tobytes()

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, PuzzleGrid)
            and self.box_size == other.box_size
            and np.array_equal(self.cells, other.cells)
        )

    def __repr__(self) -> str:
        return f"PuzzleGrid(box_size={self.box_size}, {serialize_grid(self)!r})"


@dataclass
class SolveReport:
    """Outcome of exact solution counting (count capped by the caller)."""

    solution_count: int
    first_solution: Optional[PuzzleGrid]


def parse_grid(text: str, box_size: int) -> PuzzleGrid:
    """Parse a row-major grid string; '.' and '0' both denote a blank cell."""
    side = box_size ** 2
    if side > len(_VALUE_CHARS):
        raise GridError(f"box_size {box_size} exceeds the text alphabet")
    symbols = [c for c in text if not c.isspace()]
    n4 = box_size ** 4
    if len(symbols) != n4:
        raise GridError(f"expected {n4} symbols, got {len(symbols)}")
    alphabet = _VALUE_CHARS[:side]
    cells = np.zeros(n4, dtype=np.int16)
    for i, c in enumerate(symbols):
        if c in (".", "0"):
            continue
        idx = alphabet.find(c.upper())
        if idx < 0:
            raise GridError(f"symbol {c!r} at cell {i} is outside the alphabet")
        cells[i] = idx + 1
    return PuzzleGrid(box_size, cells)


def serialize_grid(g: PuzzleGrid) -> str:
    """Inverse of parse_grid; blanks normalize to '.'."""
    return "".join("." if v == BLANK else _VALUE_CHARS[v - 1] for v in g.cells)


def _unit_views(matrix: np.ndarray, box_size: int) -> Iterable[np.ndarray]:
    """All 3*n^2 units (rows, columns, boxes) of a side x side matrix."""
    side = box_size ** 2
    for r in range(side):
        yield matrix[r, :]
    for c in range(side):
        yield matrix[:, c]
    for br in range(0, side, box_size):
        for bc in range(0, side, box_size):
            yield matrix[br : br + box_size, bc : bc + box_size].ravel()


def is_valid_complete(g: PuzzleGrid) -> bool:
    """True iff g has no blanks and every unit holds each digit exactly once."""
    if not g.is_complete():
        return False
    side = g.side
    want = frozenset(range(1, side + 1))
    m = g.matrix()
    for unit in _unit_views(m, g.box_size):
        if set(int(v) for v in unit) != want:
            return False
    return True


def energy(g: PuzzleGrid) -> int:
    """Conflict energy: sum over units of relu(count(d, unit) - 1).

    Zero iff the grid is a legal complete Sudoku. Blanks join no count, so
    the metric extends to incomplete grids (where it only sees conflicts
    among filled cells).
    """
    side = g.side
    total = 0
    m = g.matrix()
    for unit in _unit_views(m, g.box_size):
        counts = np.bincount(unit[unit != BLANK], minlength=side + 1)
        total += int(np.maximum(counts - 1, 0).sum())
    return total


def _box_index(r: int, c: int, n: int) -> int:
    return (r // n) * n + (c // n)


def _solve(
    grid: np.ndarray,
    box_size: int,
    cap: int,
    rng: Optional[np.random.Generator] = None,
) -> SolveReport:
    """Backtracking counter with naked-single propagation.

    Deterministic ordering: most-constrained cell first (lowest index on
    ties), candidate values ascending. When rng is given, candidate values
    are shuffled instead; that path only backs random grid generation.
    """
    n = box_size
    side = n * n
    full = (1 << side) - 1
    rows = [0] * side
    cols = [0] * side
    boxes = [0] * side
    cells = [int(v) for v in grid]

    for i, v in enumerate(cells):
        if v == BLANK:
            continue
        r, c = divmod(i, side)
        bit = 1 << (v - 1)
        b = _box_index(r, c, n)
        if rows[r] & bit or cols[c] & bit or boxes[b] & bit:
            return SolveReport(0, None)
        rows[r] |= bit
        cols[c] |= bit
        boxes[b] |= bit

    count = 0
    first: Optional[np.ndarray] = None

    def place(i: int, v: int) -> None:
        r, c = divmod(i, side)
        bit = 1 << (v - 1)
        cells[i] = v
        rows[r] |= bit
        cols[c] |= bit
        boxes[_box_index(r, c, n)] |= bit

    def unplace(i: int, v: int) -> None:
        r, c = divmod(i, side)
        bit = 1 << (v - 1)
        cells[i] = BLANK
        rows[r] &= ~bit
        cols[c] &= ~bit
        boxes[_box_index(r, c, n)] &= ~bit

    def candidates(i: int) -> int:
        r, c = divmod(i, side)
        return full & ~(rows[r] | cols[c] | boxes[_box_index(r, c, n)])

    def search() -> None:
        nonlocal count, first
        trail: list[tuple[int, int]] = []
        # Propagate naked singles until fixpoint or contradiction.
        while True:
            forced = None
            for i in range(side * side):
                if cells[i] != BLANK:
                    continue
                cand = candidates(i)
                if cand == 0:
                    for j, v in reversed(trail):
                        unplace(j, v)
                    return
                if cand & (cand - 1) == 0:
                    forced = (i, cand.bit_length())
                    break
            if forced is None:
                break
            place(*forced)
            trail.append(forced)

        best = -1
        best_cand = 0
        best_size = side + 1
        for i in range(side * side):
            if cells[i] != BLANK:
                continue
            cand = candidates(i)
            size = bin(cand).count("1")
            if size < best_size:
                best, best_cand, best_size = i, cand, size
                if size == 2:
                    break

        if best < 0:
            count += 1
            if first is None:
                first = np.array(cells, dtype=np.int16)
        else:
            values = [v for v in range(1, side + 1) if best_cand & (1 << (v - 1))]
            if rng is not None:
                rng.shuffle(values)
            for v in values:
                place(best, v)
                search()
                unplace(best, v)
                if count >= cap:
                    break
        for j, v in reversed(trail):
            unplace(j, v)

    search()
    first_grid = PuzzleGrid(box_size, first) if first is not None else None
    return SolveReport(min(count, cap), first_grid)


def solve_count(g: PuzzleGrid, cap: int = 2) -> SolveReport:
    """Count solutions up to cap; deterministic search order."""
    if cap < 1:
        raise ValueError(f"cap must be >= 1, got {cap}")
    return _solve(g.cells, g.box_size, cap)


def random_complete_grid(box_size: int, rng: RngLike) -> PuzzleGrid:
    """A uniformly-seeded random valid complete grid."""
    rng = as_rng(rng)
    blank = PuzzleGrid(box_size, np.zeros(box_size ** 4, dtype=np.int16))
    report = _solve(blank.cells, box_size, cap=1, rng=rng)
    assert report.first_solution is not None
    return report.first_solution


def generate_puzzle(
    rng_seed: RngLike,
    box_size: int,
    target_clues: int,
    max_retries: int = 32,
) -> PuzzleGrid:
    """Greedy-blank a random complete grid down to at most target_clues clues.

    Uniqueness is re-certified by solve_count after every removal. Raises
    GenerationError when no unique puzzle at the target is reached within
    the retry budget; the caller should raise target_clues.
    """
    n4 = box_size ** 4
    if not 0 <= target_clues <= n4:
        raise ValueError(f"target_clues must lie in [0, {n4}]")
    rng = as_rng(rng_seed)
    for _ in range(max_retries):
        full = random_complete_grid(box_size, rng)
        cells = full.cells.copy()
        clues = n4
        for idx in rng.permutation(n4):
            if clues <= target_clues:
                break
            saved = cells[idx]
            cells[idx] = BLANK
            if _solve(cells, box_size, cap=2).solution_count == 1:
                clues -= 1
            else:
                cells[idx] = saved
        if clues <= target_clues:
            return PuzzleGrid(box_size, cells)
    raise GenerationError(
        f"no unique puzzle with {target_clues} clues found in "
        f"{max_retries} attempts; raise target_clues"
    )


def completes(puzzle: PuzzleGrid, solution: PuzzleGrid) -> bool:
    """True iff solution is a valid complete grid agreeing with puzzle's clues."""
    if puzzle.box_size != solution.box_size:
        return False
    if not is_valid_complete(solution):
        return False
    mask = puzzle.cells != BLANK
    return bool((puzzle.cells[mask] == solution.cells[mask]).all())


def simplify_puzzle(
    puzzle: PuzzleGrid,
    solution: PuzzleGrid,
    reveal_count: int,
    rng_seed: RngLike,
) -> PuzzleGrid:
    """Reveal reveal_count uniformly-chosen hidden cells from the solution."""
    if not completes(puzzle, solution):
        raise GridError("solution does not complete the puzzle")
    blanks = np.flatnonzero(puzzle.cells == BLANK)
    if reveal_count < 0 or reveal_count > len(blanks):
        raise ValueError(
            f"reveal_count {reveal_count} outside [0, {len(blanks)} blanks]"
        )
    rng = as_rng(rng_seed)
    chosen = rng.choice(blanks, size=reveal_count, replace=False)
    cells = puzzle.cells.copy()
    cells[chosen] = solution.cells[chosen]
    return PuzzleGrid(puzzle.box_size, cells)


@dataclass
class DatasetSample:
    puzzle: PuzzleGrid
    solution: PuzzleGrid


def write_dataset(path: Union[str, Path], samples: Iterable[DatasetSample]) -> int:
    """Write samples as JSON-lines {puzzle, solution, box_size}; returns count."""
    path = Path(path)
    count = 0
    with path.open("w", encoding="utf-8") as fh:
        for s in samples:
            rec = {
                "puzzle": serialize_grid(s.puzzle),
                "solution": serialize_grid(s.solution),
                "box_size": s.puzzle.box_size,
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            count += 1
    return count


def read_dataset(path: Union[str, Path]) -> list[DatasetSample]:
    """Read a JSON-lines dataset written by write_dataset."""
    path = Path(path)
    samples = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                n = int(rec["box_size"])
                samples.append(
                    DatasetSample(
                        puzzle=parse_grid(rec["puzzle"], n),
                        solution=parse_grid(rec["solution"], n),
                    )
                )
            except (KeyError, ValueError, json.JSONDecodeError) as exc:
                raise GridError(f"{path}:{line_no}: bad dataset record: {exc}") from exc
    return samples
