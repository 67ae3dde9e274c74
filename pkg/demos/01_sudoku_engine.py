"""Tour of the Sudoku engine: parsing, validity, exact counting, puzzle
generation, simplification, and the conflict-energy metric.

Run: python demos/01_sudoku_engine.py
"""

import numpy as np

from hrmlab.sudoku import (
    PuzzleGrid,
    energy,
    generate_puzzle,
    is_valid_complete,
    parse_grid,
    serialize_grid,
    simplify_puzzle,
    solve_count,
)

print("== parsing ==")
text = ".2.113.2.......4"
grid = parse_grid(text, box_size=2)
print(f"text {text!r} -> {grid.clue_count()} clues, {grid.blank_count()} blanks")
print(grid.matrix())

print("\n== exact solving and counting ==")
report = solve_count(grid, cap=10)
print(f"solutions: {report.solution_count}")
print(report.first_solution.matrix())

blank = PuzzleGrid(2, np.zeros(16, dtype=np.int16))
print(f"an empty 4x4 grid has {solve_count(blank, cap=1000).solution_count} completions")

print("\n== generation (uniqueness re-certified after every removal) ==")
puzzle = generate_puzzle(rng_seed=4, box_size=2, target_clues=6)
solution = solve_count(puzzle).first_solution
print(f"generated {puzzle.clue_count()}-clue puzzle: {serialize_grid(puzzle)}")
print(f"unique: {solve_count(puzzle, cap=2).solution_count == 1}")

print("\n== simplification (data-mixing substrate) ==")
for reveal in (0, 4, puzzle.blank_count() - 1, puzzle.blank_count()):
    replica = simplify_puzzle(puzzle, solution, reveal, rng_seed=0)
    print(
        f"reveal {reveal:2d} hidden cells -> {replica.blank_count():2d} blanks left, "
        f"still unique: {solve_count(replica, cap=2).solution_count == 1}"
    )

print("\n== conflict energy ==")
print(f"energy of the solution: {energy(solution)} (legal iff 0)")
corrupted = solution.copy()
corrupted.cells[0] = corrupted.cells[1]
print(f"overwrite one cell with its neighbour: energy {energy(corrupted)}")
print(f"is_valid_complete agrees: {is_valid_complete(corrupted)}")
all_ones = PuzzleGrid(2, np.ones(16, dtype=np.int16))
print(f"all-ones grid: energy {energy(all_ones)} (12 units, each with four 1s)")

print("\n== 9x9 works the same way ==")
nine = generate_puzzle(rng_seed=1, box_size=3, target_clues=30)
print(serialize_grid(nine))
print(f"unique: {solve_count(nine, cap=2).solution_count == 1}")
