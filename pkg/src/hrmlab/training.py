"""Deep supervision with one-step gradients, halt-head Q-learning,
data-mixing augmentation, and the checkpointed training loop.

Every training rollout runs all max_segments segments. The latent state
entering segment i is detached, so the loss of segment i backpropagates
through exactly one segment; losses of all segments (plus the weighted
halt-head loss) are summed into one objective and one optimizer step is
taken per batch.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import AdamConfig, AdamState, Tape, adam_step
from .model import (
    ModelConfig,
    ModelParams,
    embed_ids,
    initial_state,
    init_params,
    output_logits,
    q_scores,
    save_checkpoint,
    segment_forward,
)
from .sudoku import DatasetSample, simplify_puzzle
from .symmetry import apply_transform, random_transform

RevealDistribution = Union[str, Callable[[np.random.Generator, int], int]]


class TrainingError(RuntimeError):
    """A training step produced a non-finite loss."""


def substream(seed: int, name: str) -> np.random.Generator:
    """A named RNG substream derived from one root seed."""
    tag = int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")
    return np.random.default_rng([seed, tag])


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    warmup_steps: int = 100
    lr_decay_steps: int = 0  # 0 = constant after warmup
    batch_size: int = 32
    total_steps: int = 2000
    checkpoint_interval: int = 100
    replicates: int = 4
    reveal_distribution: str = "uniform"
    q_loss_weight: float = 0.5
    epsilon: float = 0.0
    augment_transforms: str = "full"
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.checkpoint_interval < 1:
            raise ValueError("batch_size and checkpoint_interval must be >= 1")
        if self.total_steps < 0 or self.learning_rate <= 0:
            raise ValueError("total_steps must be >= 0 and learning_rate > 0")
        if self.augment_transforms not in ("none", "relabel", "full"):
            raise ValueError("augment_transforms must be none, relabel, or full")

    def to_json(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "warmup_steps": self.warmup_steps,
            "lr_decay_steps": self.lr_decay_steps,
            "batch_size": self.batch_size,
            "total_steps": self.total_steps,
            "checkpoint_interval": self.checkpoint_interval,
            "replicates": self.replicates,
            "reveal_distribution": self.reveal_distribution,
            "q_loss_weight": self.q_loss_weight,
            "epsilon": self.epsilon,
            "augment_transforms": self.augment_transforms,
            "seed": self.seed,
        }


@dataclass
class SegmentLossRecord:
    """Batch-averaged diagnostics for one segment of a training rollout."""

    segment: int
    loss: float
    exact_rate: float
    q_halt: float
    q_continue: float
    halt_target: float
    continue_target: float


def act_targets(exact: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-segment halt/continue targets from exact-match flags.

    exact has shape (segments, ...) with 1 where the decoded prediction
    matched the solution. The halt target is the flag itself. The continue
    target bootstraps backward over the targets: at the final segment the
    rollout is forced to halt, so continuing is worth exactly that
    segment's halt value; earlier, continue_t[i] = max(halt_t[i+1],
    continue_t[i+1]).
    """
    exact = np.asarray(exact)
    if exact.ndim < 1 or exact.shape[0] < 1:
        raise ValueError("need at least one segment of flags")
    halt = exact.astype(np.float64)
    cont = np.empty_like(halt)
    cont[-1] = halt[-1]
    for i in range(halt.shape[0] - 2, -1, -1):
        cont[i] = np.maximum(halt[i + 1], cont[i + 1])
    return halt, cont


@dataclass
class SupervisedRollout:
    """Taped per-segment tensors plus data-side diagnostics."""

    tape: Tape
    params: ModelParams  # tape-attached leaves
    ce_losses: list  # scalar Tensors, one per segment
    q_tensors: list  # (batch, 2) Tensors, one per segment
    latents: list  # detached per-segment latent values (ndarray)
    per_sample_loss: np.ndarray  # (segments, batch)
    exact: np.ndarray  # (segments, batch) bool
    predictions: np.ndarray  # (segments, batch, seq) int


def rollout_supervised(
    ids: np.ndarray,
    targets: np.ndarray,
    params: ModelParams,
    config: ModelConfig,
) -> SupervisedRollout:
    """Run all segments with deep supervision on a shared tape."""
    ids = np.atleast_2d(np.asarray(ids))
    targets = np.atleast_2d(np.asarray(targets))
    batch = ids.shape[0]
    tape = Tape()
    wp = params.attach(tape)
    x_emb = embed_ids(ids, wp)
    z = initial_state(wp, batch=batch)

    ce_losses, q_tensors, latents = [], [], []
    per_sample, exact, preds = [], [], []
    for i in range(config.max_segments):
        z_in = z if i == 0 else z.detach()
        z = segment_forward(z_in, x_emb, wp, config)
        logits = output_logits(z, wp)
        cells = ad.cross_entropy_tokens(logits, targets)
        ce_losses.append(ad.mean_all(cells))
        q_tensors.append(q_scores(z, wp))
        latents.append(z.data)
        per_sample.append(cells.data.mean(axis=-1))
        pred = np.argmax(logits.data, axis=-1)
        preds.append(pred)
        exact.append((pred == targets).all(axis=-1))
    return SupervisedRollout(
        tape=tape,
        params=wp,
        ce_losses=ce_losses,
        q_tensors=q_tensors,
        latents=latents,
        per_sample_loss=np.stack(per_sample),
        exact=np.stack(exact),
        predictions=np.stack(preds),
    )


def _objective(rollout: SupervisedRollout, q_loss_weight: float):
    """Sum over segments of (cell loss + weighted halt-head loss)."""
    halt_t, cont_t = act_targets(rollout.exact)
    total = None
    q_losses = []
    for i, (ce, q) in enumerate(zip(rollout.ce_losses, rollout.q_tensors)):
        target = np.stack([halt_t[i], cont_t[i]], axis=-1)
        q_loss = ad.mean_all(ad.bce_with_logits(q, target))
        q_losses.append(q_loss)
        term = ad.add(ce, ad.scale(q_loss, q_loss_weight))
        total = term if total is None else ad.add(total, term)
    return total, halt_t, cont_t, q_losses


def train_step(
    batch: Sequence[DatasetSample],
    params: ModelParams,
    opt_state: AdamState,
    model_config: ModelConfig,
    train_config: TrainConfig,
    step: int = 0,
) -> tuple[ModelParams, AdamState, list[SegmentLossRecord]]:
    """One optimizer update on a batch of (puzzle, solution) pairs."""
    ids = np.stack([s.puzzle.cells for s in batch]).astype(np.int64)
    targets = np.stack([s.solution.cells for s in batch]).astype(np.int64)
    rollout = rollout_supervised(ids, targets, params, model_config)

    if not np.isfinite(rollout.per_sample_loss).all():
        seg, sample = np.argwhere(~np.isfinite(rollout.per_sample_loss))[0]
        raise TrainingError(
            f"non-finite loss at step {step}, segment {seg + 1}, "
            f"batch sample {sample}"
        )

    total, halt_t, cont_t, q_losses = _objective(rollout, train_config.q_loss_weight)
    names = [n for n, _ in rollout.params.trainable()]
    tensors = [t for _, t in rollout.params.trainable()]
    grads = dict(zip(names, rollout.tape.gradients(total, tensors)))

    lr = train_config.learning_rate
    if train_config.warmup_steps > 0:
        lr *= min(1.0, (step + 1) / train_config.warmup_steps)
    into_decay = step - (train_config.total_steps - train_config.lr_decay_steps)
    if train_config.lr_decay_steps > 0 and into_decay >= 0:
        # linear fade to 10% over the terminal window: calms the endpoint
        frac = 1.0 - into_decay / train_config.lr_decay_steps
        lr *= 0.1 + 0.9 * max(0.0, frac)
    trained = dict(params.trainable())
    updated, opt_state = adam_step(trained, grads, opt_state, AdamConfig(learning_rate=lr))
    updated["z_init"] = params.z_init
    new_params = ModelParams.from_named({n: t.data for n, t in updated.items()})

    records = []
    q_data = np.stack([q.data for q in rollout.q_tensors])  # (segments, batch, 2)
    for i in range(model_config.max_segments):
        records.append(
            SegmentLossRecord(
                segment=i + 1,
                loss=float(rollout.per_sample_loss[i].mean()),
                exact_rate=float(rollout.exact[i].mean()),
                q_halt=float(q_data[i, :, 0].mean()),
                q_continue=float(q_data[i, :, 1].mean()),
                halt_target=float(halt_t[i].mean()),
                continue_target=float(cont_t[i].mean()),
            )
        )
    return new_params, opt_state, records


def segment_loss_gradients(
    batch: Sequence[DatasetSample],
    params: ModelParams,
    model_config: ModelConfig,
) -> tuple[list[dict[str, np.ndarray]], list[np.ndarray], int]:
    """Per-segment gradients of the cell loss alone, plus the stored
    incoming latents, plus the tape length (test instrumentation)."""
    ids = np.stack([s.puzzle.cells for s in batch]).astype(np.int64)
    targets = np.stack([s.solution.cells for s in batch]).astype(np.int64)
    rollout = rollout_supervised(ids, targets, params, model_config)
    names = [n for n, _ in rollout.params.trainable()]
    tensors = [t for _, t in rollout.params.trainable()]
    per_segment = []
    for ce in rollout.ce_losses:
        per_segment.append(dict(zip(names, rollout.tape.gradients(ce, tensors))))
    incoming = [initial_state(params, batch=ids.shape[0]).data] + rollout.latents[:-1]
    return per_segment, incoming, len(rollout.tape)


# ---------------------------------------------------------------------------
# data mixing


def _draw_reveal(
    dist: RevealDistribution, rng: np.random.Generator, n_blanks: int
) -> int:
    if callable(dist):
        return int(dist(rng, n_blanks))
    if dist == "uniform":
        return int(rng.integers(0, n_blanks + 1))
    raise ValueError(f"unknown reveal distribution {dist!r}")


def build_mixed_dataset(
    base: Sequence[DatasetSample],
    replicates: int,
    reveal_distribution: RevealDistribution = "uniform",
    rng_seed: Union[int, np.random.Generator] = 0,
) -> list[DatasetSample]:
    """Base puzzles plus `replicates` simplified replicates per puzzle.

    Each replicate reveals a random number of hidden cells drawn from the
    reveal distribution over {0..blanks}; fully-revealed and one-blank
    replicates occur naturally under the uniform default.
    """
    rng = (
        rng_seed
        if isinstance(rng_seed, np.random.Generator)
        else np.random.default_rng(rng_seed)
    )
    out: list[DatasetSample] = []
    for sample in base:
        out.append(sample)
        blanks = sample.puzzle.blank_count()
        for _ in range(replicates):
            reveal = _draw_reveal(reveal_distribution, rng, blanks)
            replica = simplify_puzzle(sample.puzzle, sample.solution, reveal, rng)
            out.append(DatasetSample(replica, sample.solution))
    return out


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainingRun:
    checkpoint_paths: list[Path]
    log_path: Path
    final_params: ModelParams
    final_step: int


def _mean_records(window: list[list[SegmentLossRecord]]) -> dict:
    segments = len(window[0])
    losses = [
        float(np.mean([recs[i].loss for recs in window])) for i in range(segments)
    ]
    exact = float(np.mean([recs[-1].exact_rate for recs in window]))
    return {"segment_losses": losses, "exact_rate": exact}


def run_training(
    dataset: Sequence[DatasetSample],
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_dir: Union[str, Path],
    start_params: Optional[ModelParams] = None,
    start_step: int = 0,
    log_name: str = "train_log.jsonl",
) -> TrainingRun:
    """Seeded epoch shuffling, a checkpoint at step 0 and every interval,
    and a JSON-lines log with mean per-segment losses per interval."""
    if not dataset:
        raise ValueError("dataset is empty")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc

    params = start_params if start_params is not None else init_params(model_config)
    opt_state = AdamState()
    shuffle_rng = substream(train_config.seed, "train.shuffle")
    augment_rng = substream(train_config.seed, "train.augment")
    order = shuffle_rng.permutation(len(dataset))
    cursor = 0

    def augment(sample: DatasetSample) -> DatasetSample:
        # Equivalence-group augmentation: the sample stays a valid puzzle
        # with the transported solution, so supervision is unchanged.
        mode = train_config.augment_transforms
        if mode == "none":
            return sample
        spatial = mode == "full"
        t = random_transform(
            sample.puzzle.box_size,
            augment_rng,
            relabel=True,
            spatial=spatial,
            transpose=spatial,
        )
        return DatasetSample(
            apply_transform(t, sample.puzzle), apply_transform(t, sample.solution)
        )

    def next_batch() -> list[DatasetSample]:
        nonlocal order, cursor
        if cursor + train_config.batch_size > len(order):
            order = shuffle_rng.permutation(len(dataset))
            cursor = 0
        idx = order[cursor : cursor + train_config.batch_size]
        cursor += train_config.batch_size
        return [augment(dataset[i]) for i in idx]

    checkpoints: list[Path] = []
    log_path = out_dir / log_name

    def save(step: int) -> None:
        path = out_dir / f"checkpoint_{step:06d}.ckpt"
        save_checkpoint(path, params, model_config, step)
        checkpoints.append(path)

    def eval_first_batch() -> dict:
        batch = [dataset[i] for i in order[: min(train_config.batch_size, len(order))]]
        ids = np.stack([s.puzzle.cells for s in batch]).astype(np.int64)
        targets = np.stack([s.solution.cells for s in batch]).astype(np.int64)
        rollout = rollout_supervised(ids, targets, params, model_config)
        return {
            "segment_losses": [float(v) for v in rollout.per_sample_loss.mean(axis=1)],
            "exact_rate": float(rollout.exact[-1].mean()),
        }

    with log_path.open("w", encoding="utf-8") as log:
        entry = {"step": start_step, **eval_first_batch()}
        log.write(json.dumps(entry, sort_keys=True) + "\n")
        save(start_step)

        window: list[list[SegmentLossRecord]] = []
        step = start_step
        for step in range(start_step + 1, start_step + train_config.total_steps + 1):
            params, opt_state, records = train_step(
                next_batch(), params, opt_state, model_config, train_config, step=step - 1
            )
            window.append(records)
            if (step - start_step) % train_config.checkpoint_interval == 0:
                entry = {"step": step, **_mean_records(window)}
                log.write(json.dumps(entry, sort_keys=True) + "\n")
                log.flush()
                save(step)
                window = []

    return TrainingRun(
        checkpoint_paths=checkpoints,
        log_path=log_path,
        final_params=params,
        final_step=start_step + train_config.total_steps,
    )
