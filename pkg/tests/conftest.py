"""Shared fixtures. Thread caps are set before numpy loads its BLAS so the
suite honors the single-core budget the acceptance criteria assume; the
two desk-scale trainings still run concurrently as separate single-core
processes."""

import os

for _var in (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
):
    os.environ.setdefault(_var, "1")

import subprocess
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import pytest

from hrmlab.model import ModelConfig
from hrmlab.sudoku import (
    DatasetSample,
    generate_puzzle,
    serialize_grid,
    solve_count,
    write_dataset,
)
from hrmlab.training import build_mixed_dataset, substream

DESK_MODEL = ModelConfig(
    box_size=2, width=64, heads=4, n_cycles=2, t_inner=3,
    max_segments=8, min_segments=2, seed=7,
)
DESK_STEPS = 2600
DESK_INTERVAL = 130
DESK_TRAIN_PUZZLES = 500
DESK_EVAL_PUZZLES = 200
DESK_CLUES = 6
DESK_REPLICATES = 4


def build_desk_data() -> tuple[list[DatasetSample], list[DatasetSample]]:
    """500 train + 200 held-out distinct unique-solution 6-clue puzzles."""
    puzzles = {}
    seed = 0
    want = DESK_TRAIN_PUZZLES + DESK_EVAL_PUZZLES
    while len(puzzles) < want:
        p = generate_puzzle(seed, box_size=2, target_clues=DESK_CLUES)
        puzzles.setdefault(serialize_grid(p), p)
        seed += 1
    samples = [
        DatasetSample(p, solve_count(p).first_solution) for p in puzzles.values()
    ]
    return samples[:DESK_TRAIN_PUZZLES], samples[DESK_TRAIN_PUZZLES:want]


@dataclass
class DeskBundle:
    """Artifacts of the desk-scale experiment shared across acceptance tests."""

    root: Path
    train_path: Path
    train_mixed_path: Path
    eval_path: Path
    eval_samples: list
    mixed_dir: Path
    unmixed_dir: Path
    mixed_checkpoints: list[Path]
    unmixed_checkpoints: list[Path]
    mixed_train_seconds: float
    unmixed_train_seconds: float
    config: ModelConfig


def _train_cmd(dataset: Path, out: Path, seed: int) -> list[str]:
    return [
        sys.executable, "-m", "hrmlab.cli", "train",
        "--dataset", str(dataset), "--out", str(out),
        "--steps", str(DESK_STEPS), "--interval", str(DESK_INTERVAL),
        "--batch-size", "32", "--lr", "2e-3", "--warmup", "200",
        "--lr-decay-steps", "600",
        "--augment", "relabel", "--seed", str(seed),
        "--width", str(DESK_MODEL.width), "--heads", str(DESK_MODEL.heads),
        "--cycles", str(DESK_MODEL.n_cycles), "--t-inner", str(DESK_MODEL.t_inner),
        "--max-segments", str(DESK_MODEL.max_segments),
        "--min-segments", str(DESK_MODEL.min_segments),
    ]


@pytest.fixture(scope="session")
def desk_bundle(tmp_path_factory) -> DeskBundle:
    """Train the data-mixed and unmixed desk-scale models once per session.

    Both trainings run as concurrent single-core subprocesses through the
    CLI; everything downstream (ablation, stability, analysis) reuses the
    resulting checkpoints.
    """
    root = tmp_path_factory.mktemp("desk")
    train, eval_samples = build_desk_data()
    mixed = build_mixed_dataset(
        train, DESK_REPLICATES, rng_seed=substream(DESK_MODEL.seed, "mix")
    )
    train_path = root / "train.jsonl"
    mixed_path = root / "train_mixed.jsonl"
    eval_path = root / "eval.jsonl"
    write_dataset(train_path, train)
    write_dataset(mixed_path, mixed)
    write_dataset(eval_path, eval_samples)

    mixed_dir = root / "mixed"
    unmixed_dir = root / "unmixed"
    env = dict(os.environ)
    env["OMP_NUM_THREADS"] = env["OPENBLAS_NUM_THREADS"] = "1"
    t0 = time.monotonic()
    procs = [
        subprocess.Popen(
            _train_cmd(mixed_path, mixed_dir, seed=DESK_MODEL.seed),
            env=env, stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True,
        ),
        subprocess.Popen(
            _train_cmd(train_path, unmixed_dir, seed=DESK_MODEL.seed + 1),
            env=env, stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True,
        ),
    ]
    durations = []
    for proc in procs:
        output, _ = proc.communicate()
        durations.append(time.monotonic() - t0)
        if proc.returncode != 0:
            raise RuntimeError(f"desk training failed:\n{output}")

    def later_half(run_dir: Path) -> list[Path]:
        ckpts = sorted(run_dir.glob("checkpoint_*.ckpt"))
        return ckpts[-10:]

    return DeskBundle(
        root=root,
        train_path=train_path,
        train_mixed_path=mixed_path,
        eval_path=eval_path,
        eval_samples=eval_samples,
        mixed_dir=mixed_dir,
        unmixed_dir=unmixed_dir,
        mixed_checkpoints=later_half(mixed_dir),
        unmixed_checkpoints=later_half(unmixed_dir),
        mixed_train_seconds=durations[0],
        unmixed_train_seconds=durations[1],
        config=DESK_MODEL,
    )
