"""The Sudoku equivalence group: applying, inverting, and composing
transforms, and transporting solutions through them.

Run: python demos/02_symmetry_group.py
"""

import json

from hrmlab.sudoku import generate_puzzle, serialize_grid, solve_count
from hrmlab.symmetry import (
    apply_transform,
    compose_transform,
    invert_transform,
    random_transform,
    sample_relabel_set,
)

puzzle = generate_puzzle(rng_seed=6, box_size=2, target_clues=6)
solution = solve_count(puzzle).first_solution
print("puzzle   :", serialize_grid(puzzle))
print("solution :", serialize_grid(solution))

print("\n== a random group element ==")
t = random_transform(2, rng=3)
print(json.dumps(t.to_json(), indent=2))
moved = apply_transform(t, puzzle)
print("transformed puzzle:", serialize_grid(moved))
print("still unique:", solve_count(moved, cap=2).solution_count == 1)

print("\n== solution transport ==")
moved_solution = solve_count(moved).first_solution
print("solve(t(p))      :", serialize_grid(moved_solution))
print("t(solve(p))      :", serialize_grid(apply_transform(t, solution)))
print("inverse recovers :", serialize_grid(apply_transform(invert_transform(t), moved_solution)))

print("\n== group laws by action ==")
a, b = random_transform(2, rng=4), random_transform(2, rng=5)
lhs = apply_transform(compose_transform(a, b), puzzle)
rhs = apply_transform(a, apply_transform(b, puzzle))
print("compose(a,b) acts like a-after-b:", lhs == rhs)
round_trip = apply_transform(invert_transform(a), apply_transform(a, puzzle))
print("invert(a) undoes a:", round_trip == puzzle)

print("\n== relabel sets (inference-time perturbation) ==")
for k, t in enumerate(sample_relabel_set(5, box_size=2, rng_seed=0)):
    tag = "identity" if t.is_identity() else f"relabel {t.relabel}"
    print(f"pass {k}: {tag} -> {serialize_grid(apply_transform(t, puzzle))}")
