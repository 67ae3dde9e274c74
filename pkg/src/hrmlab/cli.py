"""Operator command surface: dataset generation, training, ablation
evaluation, and analysis exports.

Every command takes --seed and derives all randomness from named
substreams, writes machine-readable artifacts to files, prints a human
summary to stdout, and records an experiment manifest next to its outputs.
Exit codes: 0 success, 1 runtime/I-O failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .analysis import (
    ModeThresholds,
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
from .inference import (
    evaluate_bootstrap,
    evaluate_combined,
    evaluate_plain,
    evaluate_relabel,
)
from .model import ModelConfig, load_checkpoint
from .sudoku import (
    DatasetSample,
    GenerationError,
    GridError,
    generate_puzzle,
    read_dataset,
    solve_count,
    write_dataset,
)
from .training import TrainConfig, build_mixed_dataset, run_training, substream

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

OUT_DIR_ENV = "HRMLAB_OUT_DIR"


def _default_out(name: str) -> Path:
    """Default artifact location when --out is omitted: $HRMLAB_OUT_DIR
    (or ./hrmlab_out) joined with a command-specific name."""
    return Path(os.environ.get(OUT_DIR_ENV, "hrmlab_out")) / name


@dataclass
class ExperimentManifest:
    """Reproducibility record written beside every command's outputs.

    manifest_hash covers the identity (command, version, seed, configs,
    input hashes); outputs are listed with hashes but excluded from the
    identity so reports can embed the hash before they are written.
    """

    command: list[str]
    tool_version: str
    seed: int
    configs: dict
    inputs: dict[str, str]
    outputs: dict[str, str]

    def identity(self) -> dict:
        return {
            "command": self.command,
            "tool_version": self.tool_version,
            "seed": self.seed,
            "configs": self.configs,
            "inputs": self.inputs,
        }

    def hash(self) -> str:
        blob = json.dumps(self.identity(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def write(self, path: Path) -> str:
        digest = self.hash()
        doc = {
            "manifest_version": 1,
            "manifest_hash": digest,
            **self.identity(),
            "outputs": self.outputs,
        }
        path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
        return digest


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _model_config_from_args(args, box_size: int) -> ModelConfig:
    return ModelConfig(
        box_size=box_size,
        width=args.width,
        heads=args.heads,
        n_cycles=args.cycles,
        t_inner=args.t_inner,
        max_segments=args.max_segments,
        min_segments=args.min_segments,
        epsilon_greedy=0.0,
        seed=args.seed,
    )


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--cycles", type=int, default=2)
    p.add_argument("--t-inner", type=int, default=3)
    p.add_argument("--max-segments", type=int, default=8)
    p.add_argument("--min-segments", type=int, default=2)


# ---------------------------------------------------------------------------
# dataset


def cmd_dataset(args) -> int:
    if args.out is None:
        args.out = _default_out("dataset.jsonl")
    rng = substream(args.seed, "dataset")
    samples: list[DatasetSample] = []
    seen: set[bytes] = set()
    attempts = 0
    budget = max(64, 50 * args.count)
    while len(samples) < args.count:
        if attempts >= budget:
            raise GenerationError(
                f"only {len(samples)} distinct puzzles found in {budget} attempts"
            )
        attempts += 1
        puzzle = generate_puzzle(rng, args.box_size, args.clues)
        if puzzle.key() in seen:
            continue
        seen.add(puzzle.key())
        samples.append(DatasetSample(puzzle, solve_count(puzzle).first_solution))

    base_count = len(samples)
    if args.mix_replicates > 0:
        samples = build_mixed_dataset(
            samples, args.mix_replicates, rng_seed=substream(args.seed, "dataset.mix")
        )

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    written = write_dataset(out, samples)
    manifest = ExperimentManifest(
        command=["dataset"] + args.raw_argv,
        tool_version=__version__,
        seed=args.seed,
        configs={
            "box_size": args.box_size,
            "count": args.count,
            "clues": args.clues,
            "mix_replicates": args.mix_replicates,
        },
        inputs={},
        outputs={out.name: _sha256(out)},
    )
    digest = manifest.write(out.with_suffix(out.suffix + ".manifest.json"))
    print(
        f"wrote {written} samples ({base_count} base puzzles, "
        f"{written - base_count} replicates) to {out}"
    )
    print(f"manifest {digest[:12]}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    if args.out is None:
        args.out = _default_out("run")
    dataset = read_dataset(args.dataset)
    if not dataset:
        raise GridError(f"{args.dataset}: dataset is empty")
    box_size = dataset[0].puzzle.box_size

    start_params = None
    start_step = 0
    if args.from_checkpoint:
        start_params, model_config, start_step = load_checkpoint(args.from_checkpoint)
    else:
        model_config = _model_config_from_args(args, box_size)

    train_config = TrainConfig(
        learning_rate=args.lr,
        warmup_steps=args.warmup,
        lr_decay_steps=args.lr_decay_steps,
        batch_size=args.batch_size,
        total_steps=args.steps,
        checkpoint_interval=args.interval,
        q_loss_weight=args.q_loss_weight,
        augment_transforms=args.augment,
        seed=args.seed,
    )
    out_dir = Path(args.out)
    run = run_training(dataset, model_config, train_config, out_dir,
                       start_params=start_params, start_step=start_step)

    for line in run.log_path.read_text().splitlines():
        rec = json.loads(line)
        losses = " ".join(f"{v:.3f}" for v in rec["segment_losses"])
        print(f"step {rec['step']:6d} exact {rec['exact_rate']:.3f} losses {losses}")

    outputs = {p.name: _sha256(p) for p in run.checkpoint_paths}
    outputs[run.log_path.name] = _sha256(run.log_path)
    manifest = ExperimentManifest(
        command=["train"] + args.raw_argv,
        tool_version=__version__,
        seed=args.seed,
        configs={
            "model": model_config.to_json(),
            "train": train_config.to_json(),
        },
        inputs={str(args.dataset): _sha256(Path(args.dataset))},
        outputs=outputs,
    )
    digest = manifest.write(out_dir / "manifest.json")
    print(f"saved {len(run.checkpoint_paths)} checkpoints to {out_dir}")
    print(f"manifest {digest[:12]}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


ABLATION_ROWS = (
    "Baseline",
    "+Bootstrap",
    "+Relabel",
    "+Data Mixing",
    "+Data Mixing+Bootstrap",
    "+Data Mixing+Relabel",
    "+All",
)


def _collect_checkpoints(specs: Sequence[str]) -> list[Path]:
    paths: list[Path] = []
    for spec in specs:
        p = Path(spec)
        if p.is_dir():
            paths.extend(sorted(p.glob("checkpoint_*.ckpt")))
        else:
            paths.append(p)
    if not paths:
        raise FileNotFoundError(f"no checkpoints found in {list(specs)}")
    return paths


def build_ablation_report(
    samples: Sequence[DatasetSample],
    checkpoints: Sequence[Path],
    config: ModelConfig,
    k: int,
    seed: int,
    mixed_checkpoints: Optional[Sequence[Path]] = None,
    mixed_config: Optional[ModelConfig] = None,
) -> dict:
    """Exact accuracy per technique, rows in the standard ablation order.

    The final (latest) checkpoint is the single-model baseline; bootstrap
    votes across all supplied checkpoints; relabel uses k transforms. With
    a second, data-mixed checkpoint series the mixing rows and the
    combined "+All" row (mixed + bootstrap + relabel) are filled too.
    Techniques that would add no passes (k = 1, a single checkpoint) are
    omitted, so one checkpoint at k = 1 yields just the baseline row.

    Ensemble pools put the final checkpoint first: vote ties and the
    nobody-halted fallback then resolve toward the most-trained model.
    """
    base_params, _, _ = load_checkpoint(checkpoints[-1])
    mixed_params = None
    if mixed_checkpoints:
        mixed_params, _, _ = load_checkpoint(mixed_checkpoints[-1])
        mixed_checkpoints = list(mixed_checkpoints)[::-1]
    checkpoints = list(checkpoints)[::-1]
    relabel_seed = substream(seed, "eval.relabel").integers(0, 2**31)

    rows: dict[str, Optional[dict]] = {name: None for name in ABLATION_ROWS}
    solutions = [s.solution for s in samples]

    def row(outcome, passes_per_sample):
        per_sample = []
        for sol, pred, rep in zip(solutions, outcome.predictions, outcome.reports):
            per_sample.append(
                {
                    "correct": pred == sol,
                    "pool": len(rep.passes),
                    "halted": rep.halted_count,
                    "winner_votes": rep.winner_votes,
                    "fallback": rep.fallback,
                }
            )
        return {
            "exact_accuracy": outcome.exact_accuracy,
            "passes_per_sample": passes_per_sample,
            "per_sample": per_sample,
        }

    rows["Baseline"] = row(evaluate_plain(samples, base_params, config), 1)
    if len(checkpoints) > 1:
        rows["+Bootstrap"] = row(
            evaluate_bootstrap(samples, checkpoints, config), len(checkpoints)
        )
    if k > 1:
        rows["+Relabel"] = row(
            evaluate_relabel(samples, base_params, k, config, relabel_seed), k
        )

    if mixed_checkpoints:
        mc = mixed_config or config
        rows["+Data Mixing"] = row(evaluate_plain(samples, mixed_params, mc), 1)
        if len(mixed_checkpoints) > 1:
            rows["+Data Mixing+Bootstrap"] = row(
                evaluate_bootstrap(samples, mixed_checkpoints, mc),
                len(mixed_checkpoints),
            )
        if k > 1:
            rows["+Data Mixing+Relabel"] = row(
                evaluate_relabel(samples, mixed_params, k, mc, relabel_seed), k
            )
        rows["+All"] = row(
            evaluate_combined(samples, mixed_checkpoints, k, mc, relabel_seed),
            k * len(mixed_checkpoints),
        )
    elif k > 1 or len(checkpoints) > 1:
        rows["+All"] = row(
            evaluate_combined(samples, checkpoints, k, config, relabel_seed),
            k * len(checkpoints),
        )

    return {
        "rows": [
            {"method": name, **data}
            for name, data in rows.items()
            if data is not None
        ],
        "samples": len(samples),
        "k": k,
        "checkpoints": [str(p) for p in checkpoints],
        "mixed_checkpoints": [str(p) for p in mixed_checkpoints or []],
    }


def render_ablation_table(report: dict) -> str:
    width = max(len(r["method"]) for r in report["rows"])
    lines = [f"{'Method'.ljust(width)}  Exact Accuracy  Passes"]
    for r in report["rows"]:
        lines.append(
            f"{r['method'].ljust(width)}  {r['exact_accuracy']:14.1%}  {r['passes_per_sample']:6d}"
        )
    return "\n".join(lines)


def cmd_eval(args) -> int:
    if args.out is None:
        args.out = _default_out("eval_report.json")
    samples = read_dataset(args.dataset)
    if not samples:
        raise GridError(f"{args.dataset}: dataset is empty")
    checkpoints = _collect_checkpoints(args.checkpoints)
    _, config, _ = load_checkpoint(checkpoints[-1])
    mixed = _collect_checkpoints(args.mixed_checkpoints) if args.mixed_checkpoints else None
    mixed_config = None
    if mixed:
        _, mixed_config, _ = load_checkpoint(mixed[-1])

    report = build_ablation_report(
        samples, checkpoints, config, args.k, args.seed, mixed, mixed_config
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    manifest = ExperimentManifest(
        command=["eval"] + args.raw_argv,
        tool_version=__version__,
        seed=args.seed,
        configs={"k": args.k, "model": config.to_json()},
        inputs={
            str(args.dataset): _sha256(Path(args.dataset)),
            **{str(p): _sha256(p) for p in checkpoints},
            **{str(p): _sha256(p) for p in mixed or []},
        },
        outputs={},
    )
    report["manifest_hash"] = manifest.hash()
    out.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    if args.csv:
        csv_path = Path(args.csv)
        with csv_path.open("w", encoding="utf-8") as fh:
            fh.write("method,exact_accuracy,passes_per_sample\n")
            for r in report["rows"]:
                fh.write(f"{r['method']},{r['exact_accuracy']!r},{r['passes_per_sample']}\n")
        manifest.outputs[csv_path.name] = _sha256(csv_path)
    manifest.outputs[out.name] = _sha256(out)
    manifest.write(out.with_suffix(out.suffix + ".manifest.json"))

    print(render_ablation_table(report))
    print(f"manifest {report['manifest_hash'][:12]}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze


def _load_sample(args) -> DatasetSample:
    samples = read_dataset(args.dataset)
    if not 0 <= args.index < len(samples):
        raise IndexError(f"--index {args.index} outside dataset of {len(samples)}")
    return samples[args.index]


def cmd_analyze(args) -> int:
    if args.out is None:
        args.out = _default_out("analysis")
    params, config, _ = load_checkpoint(args.checkpoint)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    wrote: list[Path] = []

    if args.what == "trace":
        s = _load_sample(args)
        trace = capture_trace(s.puzzle, s.solution, params, config)
        path = out_dir / f"trace_{args.index:04d}.jsonl"
        write_trace_jsonl(path, trace, include_latents=args.with_latents)
        wrote.append(path)

    elif args.what == "pca":
        samples = read_dataset(args.dataset)[: args.count]
        traces = [capture_trace(s.puzzle, s.solution, params, config) for s in samples]
        proj = pca_project(traces)
        path = out_dir / "pca_coords.csv"
        with path.open("w", encoding="utf-8") as fh:
            fh.write("trace,segment,px,py\n")
            for ti, coords in enumerate(proj.coords):
                for si, (px, py) in enumerate(coords):
                    fh.write(f"{ti},{si + 1},{px!r},{py!r}\n")
        wrote.append(path)

    elif args.what == "modes":
        samples = read_dataset(args.dataset)[: args.count]
        histogram: dict[str, int] = {}
        per_sample = []
        for i, s in enumerate(samples):
            trace = capture_trace(s.puzzle, s.solution, params, config)
            label = classify_mode(trace, ModeThresholds())
            histogram[label.mode.value] = histogram.get(label.mode.value, 0) + 1
            per_sample.append(
                {
                    "index": i,
                    "mode": label.mode.value,
                    "first_correct": label.first_correct,
                    "plateau_length": label.plateau_length,
                    "converged": label.converged,
                }
            )
        path = out_dir / "modes.json"
        path.write_text(
            json.dumps(
                {"histogram": histogram, "samples": per_sample}, sort_keys=True, indent=2
            )
            + "\n"
        )
        wrote.append(path)

    elif args.what in ("basin", "landscape"):
        s = _load_sample(args)
        trace = capture_trace(s.puzzle, s.solution, params, config)
        plane = make_plane(pca_project([trace]), resolution=args.resolution)
        if args.what == "basin":
            result = basin_map(s.puzzle, s.solution, params, config, plane)
            path = out_dir / f"basin_{args.index:04d}.csv"
            write_basin_csv(path, result)
        else:
            scape = energy_landscape(plane, params)
            path = out_dir / f"landscape_{args.index:04d}.csv"
            write_field_csv(path, plane, scape.field, "energy")
        wrote.append(path)

    elif args.what == "stability":
        samples = read_dataset(args.dataset)[: args.count]
        solutions = [s.solution for s in samples]
        probes = make_stability_probes(
            solutions, args.probe, substream(args.seed, "analysis.probes")
        )
        report = stability_audit(params, probes, config)
        path = out_dir / f"stability_{args.probe}.json"
        path.write_text(
            json.dumps(
                {
                    "probe": args.probe,
                    "rate": report.rate,
                    "stable": report.stable,
                    "unstable": report.unstable,
                    "never_correct": report.never_correct,
                    "verdicts": report.verdicts,
                },
                sort_keys=True,
                indent=2,
            )
            + "\n"
        )
        wrote.append(path)

    elif args.what == "jacobian":
        s = _load_sample(args)
        trace = capture_trace(s.puzzle, s.solution, params, config)
        report = detect_fixed_point(trace)
        anchor = trace.snapshots[-1]
        estimate, history = jacobian_probe(
            anchor, s.puzzle, params, config, iters=args.iters,
            rng_seed=substream(args.seed, "analysis.jacobian"),
        )
        path = out_dir / f"jacobian_{args.index:04d}.json"
        path.write_text(
            json.dumps(
                {
                    "estimate": estimate,
                    "history": history,
                    "fixed_point_segment": None if report is None else report.segment,
                    "spurious": None if report is None else report.spurious,
                },
                sort_keys=True,
                indent=2,
            )
            + "\n"
        )
        wrote.append(path)

    manifest = ExperimentManifest(
        command=["analyze"] + args.raw_argv,
        tool_version=__version__,
        seed=args.seed,
        configs={"what": args.what, "model": config.to_json()},
        inputs={
            str(args.checkpoint): _sha256(Path(args.checkpoint)),
            str(args.dataset): _sha256(Path(args.dataset)),
        },
        outputs={p.name: _sha256(p) for p in wrote},
    )
    digest = manifest.write(out_dir / f"manifest_{args.what}.json")
    for p in wrote:
        print(f"wrote {p}")
    print(f"manifest {digest[:12]}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hrmlab",
        description="Desk-scale recurrent reasoner on Sudoku: data, training, "
        "guess-scaling evaluation, and latent-trajectory analysis.",
    )
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("dataset", help="generate a unique-solution puzzle dataset")
    p.add_argument("--box-size", type=int, default=2)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--clues", type=int, required=True)
    p.add_argument("--mix-replicates", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_dataset)

    p = sub.add_parser("train", help="train with deep supervision and one-step gradients")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--interval", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--warmup", type=int, default=200)
    p.add_argument("--lr-decay-steps", type=int, default=0)
    p.add_argument("--q-loss-weight", type=float, default=0.5)
    p.add_argument("--augment", choices=("none", "relabel", "full"), default="relabel")
    p.add_argument("--from-checkpoint")
    p.add_argument("--seed", type=int, default=0)
    _add_model_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="exact-accuracy ablation over guess-scaling techniques")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoints", nargs="+", required=True,
                   help="checkpoint files or directories (baseline model)")
    p.add_argument("--mixed-checkpoints", nargs="+",
                   help="checkpoint files or directories of the data-mixed model")
    p.add_argument("--k", type=int, default=9, help="relabel transforms per puzzle")
    p.add_argument("--out", default=None, help="JSON report path")
    p.add_argument("--csv", help="optional CSV export path")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("analyze", help="trajectory, mode, basin, landscape, stability exports")
    p.add_argument(
        "what",
        choices=("trace", "pca", "modes", "basin", "landscape", "stability", "jacobian"),
    )
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--count", type=int, default=50)
    p.add_argument("--resolution", type=int, default=41)
    p.add_argument("--probe", choices=("full", "one-cell", "one-row"), default="one-cell")
    p.add_argument("--iters", type=int, default=12)
    p.add_argument("--with-latents", action="store_true")
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_analyze)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    args.raw_argv = argv
    try:
        return args.fn(args)
    except (ValueError, IndexError, KeyError, GenerationError, GridError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
