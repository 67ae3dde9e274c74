"""Sudoku engine tests, backed by independent brute-force oracles."""

from __future__ import annotations

from collections import Counter

import numpy as np
import pytest

from hrmlab.sudoku import (
    BLANK,
    DatasetSample,
    GenerationError,
    GridError,
    PuzzleGrid,
    energy,
    generate_puzzle,
    is_valid_complete,
    parse_grid,
    random_complete_grid,
    read_dataset,
    serialize_grid,
    simplify_puzzle,
    solve_count,
    write_dataset,
)

# A published 17-clue puzzle (Royle collection); uniqueness re-certified below.
SEVENTEEN_CLUES = (
    "000000010400000000020000000000050407"
    "008000300001090000300400200050100000"
    "000806000"
)

SOLVED_4X4 = "1234341221434321"


# ---------------------------------------------------------------------------
# Oracles (independent of the implementations they check)


def oracle_duplicate_count(g: PuzzleGrid) -> int:
    """Brute-force conflict count: per unit, sum of (multiplicity - 1)."""
    side = g.side
    n = g.box_size
    m = [[int(v) for v in row] for row in g.matrix()]
    units = []
    units += [list(row) for row in m]
    units += [[m[r][c] for r in range(side)] for c in range(side)]
    for br in range(0, side, n):
        for bc in range(0, side, n):
            units.append([m[br + i][bc + j] for i in range(n) for j in range(n)])
    total = 0
    for unit in units:
        for value, mult in Counter(v for v in unit if v != BLANK).items():
            assert 1 <= value <= side
            total += mult - 1
    return total


def oracle_enumerate_completions(g: PuzzleGrid, limit: int = 10**6) -> int:
    """Plain ordered backtracking without propagation or cell reordering."""
    side = g.side
    n = g.box_size
    m = g.matrix().copy()

    def ok(r: int, c: int, v: int) -> bool:
        if v in m[r, :] or v in m[:, c]:
            return False
        br, bc = n * (r // n), n * (c // n)
        return v not in m[br : br + n, bc : bc + n]

    count = 0

    def fill(pos: int) -> None:
        nonlocal count
        if count >= limit:
            return
        if pos == side * side:
            count += 1
            return
        r, c = divmod(pos, side)
        if m[r, c] != BLANK:
            fill(pos + 1)
            return
        for v in range(1, side + 1):
            if ok(r, c, v):
                m[r, c] = v
                fill(pos + 1)
                m[r, c] = BLANK

    fill(0)
    return count


# ---------------------------------------------------------------------------
# parse / serialize


def test_parse_all_blank():
    g = parse_grid("." * 81, box_size=3)
    assert g.blank_count() == 81
    assert g.clue_count() == 0


def test_parse_17_clue_fixture():
    expected = sum(1 for ch in SEVENTEEN_CLUES if ch not in ".0")
    assert expected == 17
    g = parse_grid(SEVENTEEN_CLUES, box_size=3)
    assert g.clue_count() == 17


def test_parse_wrong_length():
    with pytest.raises(GridError):
        parse_grid("0" * 80, box_size=3)


def test_parse_bad_symbol():
    with pytest.raises(GridError):
        parse_grid("5" + "." * 15, box_size=2)


def test_parse_accepts_whitespace_and_zero():
    g = parse_grid("12 34\n0000 3412 .00.", box_size=2)
    assert g.clue_count() == 8


def test_roundtrip_identity():
    rng = np.random.default_rng(7)
    for _ in range(50):
        n = int(rng.integers(2, 4))
        cells = rng.integers(0, n * n + 1, size=n ** 4)
        g = PuzzleGrid(n, cells)
        assert parse_grid(serialize_grid(g), n) == g


def test_grid_value_range_validated():
    with pytest.raises(GridError):
        PuzzleGrid(2, np.full(16, 5, dtype=np.int16))


# ---------------------------------------------------------------------------
# validity and energy


def test_incomplete_grid_is_not_valid():
    g = parse_grid("." + SOLVED_4X4[1:], box_size=2)
    assert not is_valid_complete(g)


def test_canonical_solved_4x4_is_valid():
    assert is_valid_complete(parse_grid(SOLVED_4X4, box_size=2))


def test_swapped_cells_break_validity():
    g = parse_grid(SOLVED_4X4, box_size=2)
    cells = g.cells.copy()
    cells[0], cells[1] = cells[1], cells[0]
    assert not is_valid_complete(PuzzleGrid(2, cells))


def test_energy_zero_on_valid_grid():
    assert energy(parse_grid(SOLVED_4X4, box_size=2)) == 0


def test_energy_neighbor_overwrite_matches_oracle():
    rng = np.random.default_rng(11)
    g = random_complete_grid(3, rng)
    cells = g.cells.copy()
    cells[0] = cells[1]
    corrupted = PuzzleGrid(3, cells)
    e = energy(corrupted)
    assert e == oracle_duplicate_count(corrupted)
    assert e >= 2  # duplicate shows up in the row and at least the box or column


def test_energy_all_ones_4x4():
    g = PuzzleGrid(2, np.ones(16, dtype=np.int16))
    assert energy(g) == 36  # 12 units, each with four 1s contributing 3


def test_energy_matches_oracle_on_random_grids_and_corruptions():
    rng = np.random.default_rng(123)
    checked = 0
    for i in range(1000):
        n = 2 if i % 4 else 3
        g = random_complete_grid(n, rng)
        assert energy(g) == 0
        assert is_valid_complete(g)
        cells = g.cells.copy()
        k = int(rng.integers(1, 5))
        idx = rng.choice(len(cells), size=k, replace=False)
        cells[idx] = rng.integers(1, g.side + 1, size=k)
        corrupted = PuzzleGrid(n, cells)
        e = energy(corrupted)
        assert e == oracle_duplicate_count(corrupted)
        assert (e == 0) == is_valid_complete(corrupted)
        checked += 1
    assert checked == 1000


def test_energy_ignores_blanks():
    # The duplicated 1 sits in the same row and the same box: two violations.
    g = parse_grid("11.." + "." * 12, box_size=2)
    assert energy(g) == 2
    assert energy(g) == oracle_duplicate_count(g)


# ---------------------------------------------------------------------------
# solve_count


def test_complete_grid_counts_one():
    g = parse_grid(SOLVED_4X4, box_size=2)
    report = solve_count(g, cap=5)
    assert report.solution_count == 1
    assert report.first_solution == g


def test_all_blank_4x4_has_288_solutions():
    blank = PuzzleGrid(2, np.zeros(16, dtype=np.int16))
    assert oracle_enumerate_completions(blank) == 288
    report = solve_count(blank, cap=1000)
    assert report.solution_count == 288
    assert report.first_solution is not None
    assert is_valid_complete(report.first_solution)


def test_solve_count_cap():
    blank = PuzzleGrid(2, np.zeros(16, dtype=np.int16))
    assert solve_count(blank, cap=10).solution_count == 10


def test_17_clue_fixture_unique():
    g = parse_grid(SEVENTEEN_CLUES, box_size=3)
    report = solve_count(g, cap=2)
    assert report.solution_count == 1
    assert is_valid_complete(report.first_solution)


def test_contradictory_grid_counts_zero():
    g = parse_grid("11" + "." * 14, box_size=2)
    report = solve_count(g, cap=2)
    assert report.solution_count == 0
    assert report.first_solution is None


def test_solver_agrees_with_enumeration_oracle_on_random_4x4():
    rng = np.random.default_rng(5)
    for _ in range(40):
        full = random_complete_grid(2, rng)
        cells = full.cells.copy()
        holes = rng.choice(16, size=int(rng.integers(4, 13)), replace=False)
        cells[holes] = BLANK
        g = PuzzleGrid(2, cells)
        assert solve_count(g, cap=10**6).solution_count == oracle_enumerate_completions(g)


# ---------------------------------------------------------------------------
# generation and simplification


def test_generate_full_target_returns_complete_grid():
    g = generate_puzzle(3, box_size=2, target_clues=16)
    assert g.is_complete()
    assert is_valid_complete(g)
    assert solve_count(g).solution_count == 1


def test_generate_unique_six_clue_4x4():
    g = generate_puzzle(42, box_size=2, target_clues=6)
    assert g.clue_count() <= 6
    assert solve_count(g, cap=2).solution_count == 1


def test_generate_deterministic_under_seed():
    a = generate_puzzle(9, box_size=2, target_clues=7)
    b = generate_puzzle(9, box_size=2, target_clues=7)
    assert a == b


def test_generate_impossible_target_errors():
    with pytest.raises(GenerationError):
        generate_puzzle(0, box_size=3, target_clues=0, max_retries=2)


def test_generated_9x9_certified_unique():
    g = generate_puzzle(1, box_size=3, target_clues=30)
    assert g.clue_count() <= 30
    assert solve_count(g, cap=2).solution_count == 1


def test_simplify_zero_reveals_nothing():
    puzzle = generate_puzzle(2, box_size=2, target_clues=6)
    solution = solve_count(puzzle).first_solution
    assert simplify_puzzle(puzzle, solution, 0, 99) == puzzle


def test_simplify_all_reveals_solution():
    puzzle = generate_puzzle(2, box_size=2, target_clues=6)
    solution = solve_count(puzzle).first_solution
    assert simplify_puzzle(puzzle, solution, puzzle.blank_count(), 99) == solution


def test_simplify_to_single_blank():
    puzzle = generate_puzzle(2, box_size=2, target_clues=6)
    solution = solve_count(puzzle).first_solution
    probe = simplify_puzzle(puzzle, solution, puzzle.blank_count() - 1, 99)
    assert probe.blank_count() == 1
    assert solve_count(probe, cap=2).solution_count == 1


def test_simplify_replicates_stay_unique():
    rng = np.random.default_rng(17)
    puzzle = generate_puzzle(4, box_size=2, target_clues=6)
    solution = solve_count(puzzle).first_solution
    for reveal in range(puzzle.blank_count() + 1):
        rep = simplify_puzzle(puzzle, solution, reveal, rng)
        report = solve_count(rep, cap=2)
        assert report.solution_count == 1
        assert report.first_solution == solution


def test_simplify_rejects_excess_reveal():
    puzzle = generate_puzzle(2, box_size=2, target_clues=6)
    solution = solve_count(puzzle).first_solution
    with pytest.raises(ValueError):
        simplify_puzzle(puzzle, solution, puzzle.blank_count() + 1, 0)


def test_simplify_rejects_wrong_solution():
    puzzle = generate_puzzle(2, box_size=2, target_clues=6)
    with pytest.raises(GridError):
        simplify_puzzle(puzzle, puzzle, 1, 0)


# ---------------------------------------------------------------------------
# dataset files


def test_dataset_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    samples = []
    for seed in range(5):
        p = generate_puzzle(seed, box_size=2, target_clues=7)
        samples.append(DatasetSample(p, solve_count(p).first_solution))
    path = tmp_path / "data.jsonl"
    assert write_dataset(path, samples) == 5
    loaded = read_dataset(path)
    assert len(loaded) == 5
    for a, b in zip(samples, loaded):
        assert a.puzzle == b.puzzle
        assert a.solution == b.solution


def test_dataset_bad_record(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"puzzle": "....", "box_size": 2}\n')
    with pytest.raises(GridError):
        read_dataset(path)
