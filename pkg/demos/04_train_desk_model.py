"""Train a small model end to end and watch the per-segment losses fall,
then run halt-governed inference on held-out puzzles.

The trained model is cached under demo_out/ and reused by demos 05 and 06.

Run: python demos/04_train_desk_model.py
"""

import json

from _common import demo_model
from hrmlab.inference import evaluate_plain, run_inference
from hrmlab.sudoku import serialize_grid

run_dir, params, config, train, evals = demo_model("mixed")

print("\n== training log (mean per-segment losses per interval) ==")
for line in (run_dir / "train_log.jsonl").read_text().splitlines()[::2]:
    rec = json.loads(line)
    losses = " ".join(f"{v:.3f}" for v in rec["segment_losses"])
    print(f"step {rec['step']:5d}  train-exact {rec['exact_rate']:.2f}  losses {losses}")

print("\n== held-out evaluation (halt-governed inference) ==")
outcome = evaluate_plain(evals, params, config)
print(f"exact accuracy on {len(evals)} held-out puzzles: {outcome.exact_accuracy:.1%}")
print("(the full desk-scale recipe in the acceptance suite reaches well above 90%)")

print("\n== one pass in detail ==")
hit = next((s for s in evals if run_inference(s.puzzle, params, config).prediction == s.solution), evals[0])
result = run_inference(hit.puzzle, params, config)
print(f"halted={result.halted} after {result.segments_used} segments, "
      f"conflict energy {result.energy}")
print("puzzle    :", serialize_grid(hit.puzzle))
print("prediction:", serialize_grid(result.prediction))
print("solution  :", serialize_grid(hit.solution))
