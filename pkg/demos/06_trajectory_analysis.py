"""Mechanistic look inside the recursion: latent traces, the four
reasoning modes, PCA planes, attractor basins, conflict-energy landscapes,
the Jacobian probe, and the stability audit.

Trains a small model first (about a minute), then instruments it.

Run: python demos/06_trajectory_analysis.py
"""

from collections import Counter
from pathlib import Path

from _common import demo_model
from hrmlab.analysis import (
    basin_map,
    capture_trace,
    classify_mode,
    detect_fixed_point,
    energy_landscape,
    jacobian_probe,
    make_plane,
    make_stability_probes,
    pca_project,
    stability_audit,
    write_basin_csv,
    write_field_csv,
    write_trace_jsonl,
)

OUT = Path("demo_out/analysis")
OUT.mkdir(parents=True, exist_ok=True)

_, params, config, train, evals = demo_model("mixed")

print("\n== a full-depth trace (halting ignored, every segment recorded) ==")
# prefer a sample the model actually solves, so the basin has an attractor
chosen = evals[0]
for s in evals:
    t = capture_trace(s.puzzle, s.solution, params, config)
    if t.exact[-1]:
        chosen = s
        break
x, y = chosen.puzzle, chosen.solution
trace = capture_trace(x, y, params, config)
for i in range(trace.segments):
    print(f"segment {i + 1}: loss {trace.losses[i]:.4f}  energy {trace.energies[i]:2d}  "
          f"exact {bool(trace.exact[i])}  update-norm {trace.update_norms[i]:.3f}")
write_trace_jsonl(OUT / "trace.jsonl", trace)

fp = detect_fixed_point(trace)
if fp is None:
    print("no fixed point detected in this trace")
else:
    kind = "spurious" if fp.spurious else "true"
    print(f"{kind} fixed point from segment {fp.segment}, final energy {fp.final_energy}")

print("\n== reasoning-mode census over the held-out set ==")
labels = []
for s in evals:
    t = capture_trace(s.puzzle, s.solution, params, config)
    labels.append(classify_mode(t).mode.value)
for mode, count in sorted(Counter(labels).items()):
    print(f"{mode:20s} {count}")

print("\n== PCA plane, attractor basin, and energy landscape ==")
proj = pca_project([trace])
print(f"explained variance: {proj.explained_variance.round(4)}")
plane = make_plane(proj, resolution=21)
basin = basin_map(x, y, params, config, plane)
reached = basin.steps_to_correct >= 0
if reached.any():
    print(f"basin: {reached.mean():.0%} of lattice initializations reach the "
          f"solution; fastest needs {basin.steps_to_correct[reached].min()} segments")
else:
    print("basin: no lattice initialization reaches the solution for this sample")
write_basin_csv(OUT / "basin.csv", basin)

scape = energy_landscape(plane, params)
print(f"energy field over the plane: min {scape.field.min()}, max {scape.field.max()}")
write_field_csv(OUT / "landscape.csv", plane, scape.field, "energy")

print("\n== Jacobian probe at the trace's final state ==")
estimate, history = jacobian_probe(trace.snapshots[-1], x, params, config, iters=8)
print(f"dominant-eigenvalue magnitude of dF/dz: {estimate:.3f} "
      f"(contractive if < 1); history {[round(h, 3) for h in history]}")

print("\n== stability audit on nearly-solved probes ==")
solutions = [s.solution for s in evals]
for kind in ("full", "one-cell", "one-row"):
    probes = make_stability_probes(solutions, kind, 0)
    rep = stability_audit(params, probes, config)
    print(f"{kind:9s} stable {rep.stable:2d}  unstable {rep.unstable:2d}  "
          f"never-correct {rep.never_correct:2d}  rate {rep.rate:.2f}")
print(f"\nartifacts written under {OUT}")
