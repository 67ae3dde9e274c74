"""Halt-governed inference and the guess-scaling machinery: relabeling
multipass, checkpoint-ensemble bootstrapping, and majority voting.

A pass halts voluntarily at the first segment >= min_segments where the
halt score beats the continue score; reaching the segment limit without
that signal marks the pass unhalted, and unhalted passes are excluded from
votes (with a flagged fallback when nobody halts).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .model import (
    ModelConfig,
    ModelParams,
    embed_ids,
    initial_state,
    load_checkpoint,
    output_logits,
    q_scores,
    segment_forward,
)
from .sudoku import PuzzleGrid, RngLike, as_rng, energy
from .symmetry import apply_transform, invert_transform, sample_relabel_set

CheckpointLike = Union[ModelParams, str, Path]


@dataclass
class PassResult:
    """One forward pass: its prediction and how it terminated."""

    prediction: PuzzleGrid
    halted: bool
    segments_used: int
    energy: int
    source: str


@dataclass
class VoteReport:
    """How a majority vote over a pool of passes was decided."""

    passes: list[PassResult]
    counts: list[tuple[bytes, int]]  # grid key -> vote count, tally order
    winner_votes: int
    halted_count: int
    unanimous: bool
    fallback: bool  # nobody halted; first pass's prediction returned


@dataclass
class BatchRollout:
    """Full-depth rollout of a batch: per-segment latents, scores, tokens."""

    latents: np.ndarray  # (segments, batch, seq, width)
    q: np.ndarray  # (segments, batch, 2)
    predictions: np.ndarray  # (segments, batch, seq)


def rollout_batch(
    ids: np.ndarray, params: ModelParams, config: ModelConfig
) -> BatchRollout:
    """Run all max_segments segments tape-free and record everything.

    The latent trajectory does not depend on halt decisions, so one full
    rollout serves halted inference, tracing, and batched evaluation; all
    ops are per-sample row-local, so results match single-sample runs
    bit-for-bit.
    """
    ids = np.atleast_2d(np.asarray(ids))
    x_emb = embed_ids(ids, params)
    z = initial_state(params, batch=ids.shape[0])
    latents, q, preds = [], [], []
    for _ in range(config.max_segments):
        z = segment_forward(z, x_emb, params, config)
        latents.append(z.data)
        q.append(q_scores(z, params).data)
        preds.append(np.argmax(output_logits(z, params).data, axis=-1))
    return BatchRollout(
        latents=np.stack(latents), q=np.stack(q), predictions=np.stack(preds)
    )


def halt_segment(
    q: np.ndarray,
    config: ModelConfig,
    epsilon: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> tuple[int, bool]:
    """First voluntary halt for one sample's (segments, 2) score series.

    Returns (segments_used, halted). With epsilon > 0, each eligible
    segment flips a seeded coin: explore with probability epsilon, picking
    halt or continue uniformly; otherwise act greedily on the scores.
    """
    if epsilon > 0.0 and rng is None:
        raise ValueError("epsilon-greedy halting needs an rng")
    for i in range(config.min_segments, config.max_segments + 1):
        q_halt, q_continue = float(q[i - 1, 0]), float(q[i - 1, 1])
        if epsilon > 0.0 and rng.random() < epsilon:
            halt = bool(rng.random() < 0.5)
        else:
            halt = q_halt > q_continue
        if halt:
            return i, True
    return config.max_segments, False


def run_inference(
    x: PuzzleGrid,
    params: ModelParams,
    config: ModelConfig,
    rng_seed: Optional[RngLike] = None,
    source: str = "plain",
) -> PassResult:
    """ACT-halted inference on one grid. Deterministic when epsilon is 0;
    the config's epsilon_greedy only randomizes the halt decision, never
    the latent trajectory."""
    rollout = rollout_batch(x.cells[None, :].astype(np.int64), params, config)
    eps = config.epsilon_greedy
    rng = as_rng(rng_seed) if rng_seed is not None else (as_rng(0) if eps > 0 else None)
    used, halted = halt_segment(rollout.q[:, 0], config, epsilon=eps, rng=rng)
    cells = rollout.predictions[used - 1, 0].astype(np.int16)
    prediction = PuzzleGrid(x.box_size, cells)
    return PassResult(
        prediction=prediction,
        halted=halted,
        segments_used=used,
        energy=energy(prediction),
        source=source,
    )


def majority_vote(results: Sequence[PassResult]) -> PuzzleGrid:
    """Most frequent full-grid prediction among halted passes. Ties break
    by lower conflict energy, then by earliest pass index; if no pass
    halted, the first pass's prediction is the flagged fallback."""
    grid, _ = majority_vote_report(results)
    return grid


def majority_vote_report(
    results: Sequence[PassResult],
) -> tuple[PuzzleGrid, VoteReport]:
    if not results:
        raise ValueError("majority_vote needs at least one result")
    halted = [r for r in results if r.halted]
    if not halted:
        report = VoteReport(
            passes=list(results),
            counts=[],
            winner_votes=0,
            halted_count=0,
            unanimous=False,
            fallback=True,
        )
        return results[0].prediction, report

    tally: dict[bytes, dict] = {}
    for idx, r in enumerate(halted):
        key = r.prediction.key()
        slot = tally.setdefault(
            key,
            {"votes": 0, "energy": r.energy, "first": idx, "grid": r.prediction},
        )
        slot["votes"] += 1
    best = min(
        tally.values(), key=lambda s: (-s["votes"], s["energy"], s["first"])
    )
    counts = sorted(
        ((k, s["votes"]) for k, s in tally.items()),
        key=lambda kv: -kv[1],
    )
    report = VoteReport(
        passes=list(results),
        counts=counts,
        winner_votes=best["votes"],
        halted_count=len(halted),
        unanimous=len(tally) == 1,
        fallback=False,
    )
    return best["grid"], report


def _resolve_checkpoint(ck: CheckpointLike) -> ModelParams:
    if isinstance(ck, ModelParams):
        return ck
    params, _, _ = load_checkpoint(ck)
    return params


def multipass_relabel(
    x: PuzzleGrid,
    params: ModelParams,
    k: int,
    config: ModelConfig,
    rng_seed: RngLike = 0,
) -> tuple[PuzzleGrid, VoteReport]:
    """k relabeling passes (identity first): infer on the transformed
    puzzle, map each prediction back through the inverse transform, vote."""
    transforms = sample_relabel_set(k, x.box_size, rng_seed)
    results = []
    for j, t in enumerate(transforms):
        r = run_inference(apply_transform(t, x), params, config, source=f"relabel[{j}]")
        back = apply_transform(invert_transform(t), r.prediction)
        results.append(
            PassResult(back, r.halted, r.segments_used, r.energy, r.source)
        )
    return majority_vote_report(results)


def ensemble_bootstrap(
    x: PuzzleGrid,
    checkpoints: Sequence[CheckpointLike],
    config: ModelConfig,
) -> tuple[PuzzleGrid, VoteReport]:
    """One pass per checkpoint, majority vote among those that halted."""
    if not checkpoints:
        raise ValueError("ensemble_bootstrap needs at least one checkpoint")
    results = []
    for j, ck in enumerate(checkpoints):
        params = _resolve_checkpoint(ck)
        results.append(
            run_inference(x, params, config, source=f"checkpoint[{j}]")
        )
    return majority_vote_report(results)


def combined_augmented_inference(
    x: PuzzleGrid,
    checkpoints: Sequence[CheckpointLike],
    k: int,
    config: ModelConfig,
    rng_seed: RngLike = 0,
) -> tuple[PuzzleGrid, VoteReport]:
    """The full guess-scaling pool: k relabelings x all checkpoints,
    ordered transform-major, one vote."""
    if not checkpoints:
        raise ValueError("combined inference needs at least one checkpoint")
    loaded = [_resolve_checkpoint(ck) for ck in checkpoints]
    transforms = sample_relabel_set(k, x.box_size, rng_seed)
    results = []
    for tj, t in enumerate(transforms):
        tx = apply_transform(t, x)
        inv = invert_transform(t)
        for cj, params in enumerate(loaded):
            r = run_inference(tx, params, config, source=f"relabel[{tj}]xcheckpoint[{cj}]")
            back = apply_transform(inv, r.prediction)
            results.append(
                PassResult(back, r.halted, r.segments_used, r.energy, r.source)
            )
    return majority_vote_report(results)


# ---------------------------------------------------------------------------
# batched evaluation (identical pass semantics, amortized across samples)


def _batched_passes(
    grids: Sequence[PuzzleGrid],
    params: ModelParams,
    config: ModelConfig,
    source: str,
) -> list[PassResult]:
    ids = np.stack([g.cells for g in grids]).astype(np.int64)
    rollout = rollout_batch(ids, params, config)
    out = []
    for b, g in enumerate(grids):
        used, halted = halt_segment(rollout.q[:, b], config)
        prediction = PuzzleGrid(g.box_size, rollout.predictions[used - 1, b].astype(np.int16))
        out.append(
            PassResult(prediction, halted, used, energy(prediction), source)
        )
    return out


@dataclass
class EvalOutcome:
    predictions: list[PuzzleGrid]
    exact_accuracy: float
    reports: list[VoteReport] = field(default_factory=list)


def _finish(
    pools: list[list[PassResult]], solutions: Sequence[PuzzleGrid]
) -> EvalOutcome:
    predictions, reports, hits = [], [], 0
    for pool, sol in zip(pools, solutions):
        grid, report = majority_vote_report(pool)
        predictions.append(grid)
        reports.append(report)
        hits += int(grid == sol)
    return EvalOutcome(predictions, hits / len(solutions), reports)


def evaluate_plain(
    samples: Sequence, params: ModelParams, config: ModelConfig
) -> EvalOutcome:
    """Single-pass exact accuracy over (puzzle, solution) samples."""
    passes = _batched_passes([s.puzzle for s in samples], params, config, "plain")
    pools = [[p] for p in passes]
    return _finish(pools, [s.solution for s in samples])


def evaluate_relabel(
    samples: Sequence,
    params: ModelParams,
    k: int,
    config: ModelConfig,
    rng_seed: RngLike = 0,
) -> EvalOutcome:
    """Relabel-multipass exact accuracy; one transform set shared by all
    samples (pool order matches multipass_relabel)."""
    puzzles = [s.puzzle for s in samples]
    transforms = sample_relabel_set(k, puzzles[0].box_size, rng_seed)
    pools: list[list[PassResult]] = [[] for _ in puzzles]
    for tj, t in enumerate(transforms):
        inv = invert_transform(t)
        moved = [apply_transform(t, p) for p in puzzles]
        for b, r in enumerate(_batched_passes(moved, params, config, f"relabel[{tj}]")):
            back = apply_transform(inv, r.prediction)
            pools[b].append(
                PassResult(back, r.halted, r.segments_used, r.energy, r.source)
            )
    return _finish(pools, [s.solution for s in samples])


def evaluate_bootstrap(
    samples: Sequence,
    checkpoints: Sequence[CheckpointLike],
    config: ModelConfig,
) -> EvalOutcome:
    puzzles = [s.puzzle for s in samples]
    pools: list[list[PassResult]] = [[] for _ in puzzles]
    for cj, ck in enumerate(checkpoints):
        params = _resolve_checkpoint(ck)
        for b, r in enumerate(
            _batched_passes(puzzles, params, config, f"checkpoint[{cj}]")
        ):
            pools[b].append(r)
    return _finish(pools, [s.solution for s in samples])


def evaluate_combined(
    samples: Sequence,
    checkpoints: Sequence[CheckpointLike],
    k: int,
    config: ModelConfig,
    rng_seed: RngLike = 0,
) -> EvalOutcome:
    puzzles = [s.puzzle for s in samples]
    loaded = [_resolve_checkpoint(ck) for ck in checkpoints]
    transforms = sample_relabel_set(k, puzzles[0].box_size, rng_seed)
    pools: list[list[PassResult]] = [[] for _ in puzzles]
    for tj, t in enumerate(transforms):
        inv = invert_transform(t)
        moved = [apply_transform(t, p) for p in puzzles]
        for cj, params in enumerate(loaded):
            src = f"relabel[{tj}]xcheckpoint[{cj}]"
            for b, r in enumerate(_batched_passes(moved, params, config, src)):
                back = apply_transform(inv, r.prediction)
                pools[b].append(
                    PassResult(back, r.halted, r.segments_used, r.energy, r.source)
                )
    return _finish(pools, [s.solution for s in samples])
