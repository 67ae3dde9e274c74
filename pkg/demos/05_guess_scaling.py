"""Scaling the number of guesses: relabel multipass, checkpoint
bootstrapping, and the combined vote, shown as an ablation table.

Reuses the cached demo model (run demo 04 first, or let this train it),
plus an unmixed twin for the mixing rows.

Run: python demos/05_guess_scaling.py
"""

from _common import demo_model
from hrmlab.cli import build_ablation_report, render_ablation_table
from hrmlab.inference import multipass_relabel

mixed_dir, _, config, train, evals = demo_model("mixed")
base_dir, base_params, _, _, _ = demo_model("unmixed")

later_half = lambda d: sorted(d.glob("checkpoint_*.ckpt"))[-5:]
table = build_ablation_report(
    evals,
    later_half(base_dir),
    config,
    k=9,
    seed=0,
    mixed_checkpoints=later_half(mixed_dir),
    mixed_config=config,
)
print("\n== ablation over guess-scaling techniques ==")
print(render_ablation_table(table))
print("(majority vote among halted passes; ties break by conflict energy)")
print(
    "note: at this tiny training budget the halt head is miscalibrated, so\n"
    "ensembles can underperform their fallback; with the full desk-scale\n"
    "recipe (see the acceptance suite) every technique row meets or beats\n"
    "its baseline"
)

print("\n== one puzzle through the relabel multipass ==")
sample = evals[0]
voted, report = multipass_relabel(sample.puzzle, base_params, k=9, config=config, rng_seed=3)
print(f"9 relabeled passes, {report.halted_count} halted, winner carried "
      f"{report.winner_votes} votes (unanimous: {report.unanimous})")
print("voted prediction correct:", voted == sample.solution)
for r in report.passes[:4]:
    print(f"  {r.source:12s} halted={r.halted} segments={r.segments_used} energy={r.energy}")
