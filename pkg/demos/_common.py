"""Shared setup for the demo scripts: one small trained model, cached under
demo_out/ so later demos reuse it instead of retraining."""

from pathlib import Path

from hrmlab.model import ModelConfig, load_checkpoint
from hrmlab.sudoku import DatasetSample, generate_puzzle, serialize_grid, solve_count
from hrmlab.training import TrainConfig, build_mixed_dataset, run_training, substream

DEMO_ROOT = Path("demo_out")
MODEL_CONFIG = ModelConfig(
    box_size=2, width=48, heads=4, n_cycles=2, t_inner=2,
    max_segments=6, min_segments=2, seed=3,
)
TRAIN_CONFIG = TrainConfig(
    learning_rate=2e-3, warmup_steps=80, total_steps=1000,
    checkpoint_interval=100, batch_size=32, augment_transforms="relabel", seed=3,
)


def demo_dataset(count=300, clues=7):
    """Distinct unique-solution puzzles, split 250 train / 50 held-out."""
    samples, seen, seed = [], set(), 0
    while len(samples) < count:
        p = generate_puzzle(seed, box_size=2, target_clues=clues)
        seed += 1
        key = serialize_grid(p)
        if key in seen:
            continue
        seen.add(key)
        samples.append(DatasetSample(p, solve_count(p).first_solution))
    return samples[:250], samples[250:]


def demo_model(kind="mixed"):
    """Train (or reuse) the shared demo model; returns (run_dir, params,
    config, train_samples, eval_samples). Takes a couple of minutes cold."""
    train, evals = demo_dataset()
    out = DEMO_ROOT / f"model_{kind}"
    final = out / f"checkpoint_{TRAIN_CONFIG.total_steps:06d}.ckpt"
    if not final.exists():
        data = train
        if kind == "mixed":
            data = build_mixed_dataset(train, 2, rng_seed=substream(3, "demo.mix"))
        print(f"training the shared demo model ({kind}, ~2 minutes, cached in {out})")
        run_training(data, MODEL_CONFIG, TRAIN_CONFIG, out)
    params, config, _ = load_checkpoint(final)
    return out, params, config, train, evals
