"""Mechanistic instrumentation for latent trajectories.

Capture full-depth reasoning traces, project them with PCA, detect fixed
points, classify the four qualitative reasoning modes, map attractor
basins and conflict-energy landscapes on a PCA plane, probe the segment
operator's Jacobian, and audit fixed-point stability on nearly-solved
probes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .autodiff import Tensor
from .inference import rollout_batch
from .model import (
    ModelConfig,
    ModelParams,
    embed_input,
    initial_state,
    output_logits,
    segment_forward,
)
from .sudoku import BLANK, DatasetSample, PuzzleGrid, RngLike, as_rng, energy, serialize_grid

NORM_EPS = 1e-12


@dataclass
class ReasoningTrace:
    """Everything recorded over a full max_segments rollout of one sample."""

    box_size: int
    initial_state: np.ndarray  # (seq, width), z0
    snapshots: np.ndarray  # (segments, seq, width)
    predictions: list[PuzzleGrid]
    losses: np.ndarray  # (segments,)
    energies: np.ndarray  # (segments,) int
    exact: np.ndarray  # (segments,) bool
    update_norms: np.ndarray  # (segments,), ||z_i - z_{i-1}||
    q_halt: np.ndarray  # (segments,)
    q_continue: np.ndarray  # (segments,)

    @property
    def segments(self) -> int:
        return self.snapshots.shape[0]

    def flat_snapshots(self) -> np.ndarray:
        return self.snapshots.reshape(self.segments, -1)

    def flat_initial(self) -> np.ndarray:
        return self.initial_state.reshape(-1)


class ReasoningMode(Enum):
    TRIVIAL_SUCCESS = "trivial-success"
    NONTRIVIAL_SUCCESS = "nontrivial-success"
    TRIVIAL_FAILURE = "trivial-failure"
    NONTRIVIAL_FAILURE = "nontrivial-failure"


@dataclass(frozen=True)
class ModeThresholds:
    early_segment: int = 2  # trivial success must be correct by here
    plateau_segments: int = 3  # evidence threshold for lingering
    plateau_tol: float = 1e-2  # relative update norm counted as lingering
    fixed_point_tol: float = 1e-3  # relative update norm for convergence


@dataclass
class ModeLabel:
    mode: ReasoningMode
    first_correct: Optional[int]  # 1-based segment, None if never correct
    plateau_length: int
    converged: bool


@dataclass
class FixedPointReport:
    segment: int  # earliest index (0 = from the initial state on)
    spurious: bool  # decoded output at the end disagrees with the target
    final_energy: int
    tail_relative_norms: np.ndarray


def capture_trace(
    x: PuzzleGrid,
    y: PuzzleGrid,
    params: ModelParams,
    config: ModelConfig,
) -> ReasoningTrace:
    """Roll all segments (halting ignored) and record every field."""
    if x.box_size != config.box_size or y.box_size != config.box_size:
        raise ValueError("grid dimension does not match the model config")
    rollout = rollout_batch(x.cells[None, :].astype(np.int64), params, config)
    z0 = initial_state(params).data
    snaps = rollout.latents[:, 0]
    preds = [
        PuzzleGrid(x.box_size, rollout.predictions[i, 0].astype(np.int16))
        for i in range(config.max_segments)
    ]
    targets = y.cells.astype(np.int64)
    losses = []
    for i in range(config.max_segments):
        logits = output_logits(Tensor(snaps[i]), params).data
        m = logits.max(axis=-1, keepdims=True)
        lse = m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
        picked = np.take_along_axis(logits, targets[:, None], axis=-1)
        losses.append(float((lse - picked).mean()))
    prev = np.concatenate([z0[None], snaps[:-1]])
    update_norms = np.linalg.norm(
        (snaps - prev).reshape(config.max_segments, -1), axis=1
    )
    return ReasoningTrace(
        box_size=x.box_size,
        initial_state=z0,
        snapshots=snaps,
        predictions=preds,
        losses=np.array(losses),
        energies=np.array([energy(p) for p in preds], dtype=np.int64),
        exact=np.array([p == y for p in preds], dtype=bool),
        update_norms=update_norms,
        q_halt=rollout.q[:, 0, 0].astype(np.float64),
        q_continue=rollout.q[:, 0, 1].astype(np.float64),
    )


# ---------------------------------------------------------------------------
# PCA


@dataclass
class PcaProjection:
    basis: np.ndarray  # (dims, flat_dim), orthonormal rows
    mean: np.ndarray  # (flat_dim,)
    coords: list  # per trace: (segments, dims)
    explained_variance: np.ndarray  # (dims,)

    def project(self, flat: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(flat) - self.mean) @ self.basis.T

    def reconstruct(self, coords: np.ndarray) -> np.ndarray:
        return np.atleast_2d(coords) @ self.basis + self.mean


def pca_project(traces: Sequence[ReasoningTrace], dims: int = 2) -> PcaProjection:
    """Center all supplied snapshots and keep the top eigenvectors of their
    covariance (deterministic eigendecomposition, fixed sign convention).

    One trace gives the per-sample plane; several give a shared plane.
    """
    if not traces:
        raise ValueError("pca_project needs at least one trace")
    rows = np.concatenate([t.flat_snapshots() for t in traces]).astype(np.float64)
    if rows.shape[0] < 2:
        raise ValueError("need at least two snapshots")
    mean = rows.mean(axis=0)
    centered = rows - mean
    total_var = float((centered ** 2).sum() / (rows.shape[0] - 1))
    if total_var < NORM_EPS:
        raise ValueError("zero variance: all snapshots identical")

    n, d = centered.shape
    if d <= n or d <= 2048:
        cov = centered.T @ centered / (n - 1)
        eigvals, eigvecs = np.linalg.eigh(cov)
        order = np.argsort(eigvals)[::-1][:dims]
        variance = eigvals[order]
        basis = eigvecs[:, order].T
    else:
        # Gram dual of the same eigenproblem for very wide snapshots.
        gram = centered @ centered.T / (n - 1)
        eigvals, eigvecs = np.linalg.eigh(gram)
        order = np.argsort(eigvals)[::-1][:dims]
        variance = eigvals[order]
        basis = (centered.T @ eigvecs[:, order]).T
        basis /= np.linalg.norm(basis, axis=1, keepdims=True) + NORM_EPS

    # Deterministic sign: the largest-magnitude entry of each axis is positive.
    for row in basis:
        pivot = np.argmax(np.abs(row))
        if row[pivot] < 0:
            row *= -1.0

    proj = PcaProjection(
        basis=basis,
        mean=mean,
        coords=[],
        explained_variance=np.maximum(variance, 0.0),
    )
    proj.coords = [proj.project(t.flat_snapshots()) for t in traces]
    return proj


# ---------------------------------------------------------------------------
# fixed points and reasoning modes


def relative_update_norms(trace: ReasoningTrace) -> np.ndarray:
    """||z_i - z_{i-1}|| / max(||z_{i-1}||, eps) for every segment."""
    flats = np.concatenate(
        [trace.flat_initial()[None], trace.flat_snapshots()[:-1]]
    )
    base = np.maximum(np.linalg.norm(flats, axis=1), NORM_EPS)
    return trace.update_norms / base


def detect_fixed_point(
    trace: ReasoningTrace, tol_rel: float = 1e-3
) -> Optional[FixedPointReport]:
    """The earliest segment index i such that every later relative update
    stays below tol_rel; i = 0 means the trace never moved appreciably."""
    rel = relative_update_norms(trace)
    below = rel < tol_rel
    idx = None
    for i in range(trace.segments - 1, -1, -1):
        if below[i:].all():
            idx = i
        else:
            break
    if idx is None:
        return None
    return FixedPointReport(
        segment=idx,
        spurious=not bool(trace.exact[-1]),
        final_energy=int(trace.energies[-1]),
        tail_relative_norms=rel[idx:],
    )


def classify_mode(
    trace: ReasoningTrace, thresholds: ModeThresholds = ModeThresholds()
) -> ModeLabel:
    """Total four-way classification of a trace.

    Success means the final segment matches the target. Trivial success
    additionally requires the first correct segment to be early and the
    answer to be retained ever after. Failures split on whether the
    trajectory converged to a (necessarily spurious) fixed point.
    """
    rel = relative_update_norms(trace)
    correct = trace.exact
    first_correct = int(np.argmax(correct)) + 1 if correct.any() else None

    plateau_length = 0
    run = 0
    limit = trace.segments if first_correct is None else first_correct - 1
    for i in range(limit):
        run = run + 1 if rel[i] < thresholds.plateau_tol else 0
        plateau_length = max(plateau_length, run)

    report = detect_fixed_point(trace, thresholds.fixed_point_tol)
    converged = report is not None

    if bool(correct[-1]):
        stable_since_first = bool(correct[first_correct - 1 :].all())
        if first_correct <= thresholds.early_segment and stable_since_first:
            mode = ReasoningMode.TRIVIAL_SUCCESS
        else:
            mode = ReasoningMode.NONTRIVIAL_SUCCESS
    else:
        mode = (
            ReasoningMode.NONTRIVIAL_FAILURE if converged else ReasoningMode.TRIVIAL_FAILURE
        )
    return ModeLabel(
        mode=mode,
        first_correct=first_correct,
        plateau_length=plateau_length,
        converged=converged,
    )


# ---------------------------------------------------------------------------
# basin maps and energy landscapes


@dataclass
class PlaneSpec:
    """A 2-D affine slice of latent space: origin + two basis rows."""

    basis: np.ndarray  # (2, flat_dim) orthonormal
    origin: np.ndarray  # (flat_dim,)
    px: np.ndarray  # (resolution,) lattice coordinates, axis 1
    py: np.ndarray  # (resolution,) lattice coordinates, axis 2

    def embed(self, px: np.ndarray, py: np.ndarray) -> np.ndarray:
        """Plane coordinates back into flat latent space."""
        pts = np.stack([np.asarray(px), np.asarray(py)], axis=-1)
        return pts @ self.basis + self.origin


def make_plane(
    projection: PcaProjection,
    std_span: float = 3.0,
    resolution: int = 41,
) -> PlaneSpec:
    """Lattice over +-std_span standard deviations of the projected
    coordinates, anchored at the snapshot mean."""
    if projection.basis.shape[0] != 2:
        raise ValueError("basin/landscape planes need a 2-D projection")
    coords = np.concatenate(projection.coords)
    spread = np.maximum(coords.std(axis=0), 1e-6)
    lo = coords.mean(axis=0) - std_span * spread
    hi = coords.mean(axis=0) + std_span * spread
    return PlaneSpec(
        basis=projection.basis,
        origin=projection.mean,
        px=np.linspace(lo[0], hi[0], resolution),
        py=np.linspace(lo[1], hi[1], resolution),
    )


@dataclass
class BasinMap:
    plane: PlaneSpec
    steps_to_correct: np.ndarray  # (ny, nx) int, -1 = failure
    arrows: np.ndarray  # (ny, nx, 2) first update projected on the plane


def rollout_from_states(
    z0_flat: np.ndarray,
    x: PuzzleGrid,
    params: ModelParams,
    config: ModelConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Roll max_segments segments from arbitrary initial latents.

    Returns (latents (segments, n, seq, d), predictions (segments, n, seq)).
    """
    n = z0_flat.shape[0]
    dtype = params.z_init.dtype
    z = Tensor(z0_flat.reshape(n, config.seq_len, config.width).astype(dtype))
    x_emb = embed_input(x, params)
    x_emb = Tensor(np.broadcast_to(x_emb.data, (n,) + x_emb.shape).copy())
    latents, preds = [], []
    for _ in range(config.max_segments):
        z = segment_forward(z, x_emb, params, config)
        latents.append(z.data)
        preds.append(np.argmax(output_logits(z, params).data, axis=-1))
    return np.stack(latents), np.stack(preds)


def basin_map(
    x: PuzzleGrid,
    y: PuzzleGrid,
    params: ModelParams,
    config: ModelConfig,
    plane: PlaneSpec,
) -> BasinMap:
    """Initialize the latent at every lattice point of the plane, roll
    segments, and record segments-to-correct plus the first update arrow.

    steps_to_correct is 0 when the point itself already decodes to the
    solution, otherwise the first segment whose decode matches, or -1."""
    nx, ny = len(plane.px), len(plane.py)
    gx, gy = np.meshgrid(plane.px, plane.py)
    flat0 = plane.embed(gx.ravel(), gy.ravel())
    latents, preds = rollout_from_states(flat0, x, params, config)

    target = y.cells.astype(np.int64)
    # decode of the lattice point itself
    z0 = flat0.reshape(-1, config.seq_len, config.width)
    logits0 = output_logits(Tensor(z0.astype(params.z_init.dtype)), params).data
    correct0 = (np.argmax(logits0, axis=-1) == target).all(axis=-1)

    match = (preds == target).all(axis=-1)  # (segments, n)
    steps = np.full(flat0.shape[0], -1, dtype=np.int64)
    any_match = match.any(axis=0)
    first = np.argmax(match, axis=0) + 1
    steps[any_match] = first[any_match]
    steps[correct0] = 0

    first_update = latents[0].reshape(flat0.shape[0], -1) - flat0
    arrows = first_update @ plane.basis.T
    return BasinMap(
        plane=plane,
        steps_to_correct=steps.reshape(ny, nx),
        arrows=arrows.reshape(ny, nx, 2),
    )


@dataclass
class EnergyLandscape:
    plane: PlaneSpec
    field: np.ndarray  # (ny, nx) int conflict energy of the decoded grid
    profile_ts: Optional[np.ndarray] = None  # (samples,) in [0, 1]
    profile: Optional[np.ndarray] = None  # (samples,) int along the segment


def _decode_energy(flat: np.ndarray, params: ModelParams, box_size: int) -> np.ndarray:
    d = params.z_init.shape[0]
    z = Tensor(flat.reshape(flat.shape[0], -1, d).astype(params.z_init.dtype))
    logits = output_logits(z, params).data
    tokens = np.argmax(logits, axis=-1).astype(np.int16)
    return np.array(
        [energy(PuzzleGrid(box_size, row)) for row in tokens], dtype=np.int64
    )


def energy_landscape(
    plane: PlaneSpec,
    params: ModelParams,
    endpoints: Optional[tuple[np.ndarray, np.ndarray]] = None,
    profile_samples: int = 101,
) -> EnergyLandscape:
    """Decode every lattice point and score its conflict energy; optionally
    also sample the 1-D profile along the segment joining two plane points
    (the rival attractors)."""
    vocab = params.w_out.shape[1]
    box_size = int(round((vocab - 1) ** 0.5))
    nx, ny = len(plane.px), len(plane.py)
    gx, gy = np.meshgrid(plane.px, plane.py)
    field = _decode_energy(
        plane.embed(gx.ravel(), gy.ravel()), params, box_size
    ).reshape(ny, nx)

    ts = prof = None
    if endpoints is not None:
        a = np.asarray(endpoints[0], dtype=np.float64)
        b = np.asarray(endpoints[1], dtype=np.float64)
        ts = np.linspace(0.0, 1.0, profile_samples)
        pts = a[None, :] + ts[:, None] * (b - a)[None, :]
        prof = _decode_energy(plane.embed(pts[:, 0], pts[:, 1]), params, box_size)
    return EnergyLandscape(plane=plane, field=field, profile_ts=ts, profile=prof)


# ---------------------------------------------------------------------------
# Jacobian probe


def power_iteration_estimate(
    apply_map: Callable[[np.ndarray], np.ndarray],
    shape: tuple,
    iters: int,
    rng: RngLike = 0,
) -> tuple[float, list[float]]:
    """Dominant-eigenvalue magnitude of a linear map by power iteration."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = as_rng(rng)
    v = rng.standard_normal(shape)
    v /= np.linalg.norm(v) + NORM_EPS
    history = []
    sigma = 0.0
    for _ in range(iters):
        w = apply_map(v)
        sigma = float(np.linalg.norm(w))
        history.append(sigma)
        if sigma < NORM_EPS:
            return 0.0, history
        v = w / sigma
    return sigma, history


def jacobian_probe(
    z: np.ndarray,
    x: PuzzleGrid,
    params: ModelParams,
    config: ModelConfig,
    iters: int = 12,
    fd_step: float = 1e-4,
    rng_seed: RngLike = 0,
) -> tuple[float, list[float]]:
    """Estimate the dominant-eigenvalue magnitude of dF/dz at z, where F is
    one segment, using power iteration on finite-difference
    Jacobian-vector products (evaluated at float64)."""
    params64 = params.astype(np.float64)
    x_emb = embed_input(x, params64)
    z = np.asarray(z, dtype=np.float64).reshape(config.seq_len, config.width)

    def f(state: np.ndarray) -> np.ndarray:
        out = segment_forward(Tensor(state), x_emb, params64, config)
        return out.data

    scale = fd_step * (1.0 + float(np.linalg.norm(z)))

    def jvp(v: np.ndarray) -> np.ndarray:
        return (f(z + scale * v) - f(z - scale * v)) / (2.0 * scale)

    return power_iteration_estimate(jvp, z.shape, iters, rng_seed)


# ---------------------------------------------------------------------------
# stability audit


@dataclass
class StabilityReport:
    rate: float  # stable / (stable + unstable)
    verdicts: list[str]  # per probe: stable | unstable | never-correct
    stable: int
    unstable: int
    never_correct: int


def make_stability_probes(
    solutions: Sequence[PuzzleGrid],
    kind: str,
    rng_seed: RngLike = 0,
) -> list[DatasetSample]:
    """Nearly-solved probes from complete grids: 'full' reveals everything,
    'one-cell' hides one cell, 'one-row' hides one row."""
    rng = as_rng(rng_seed)
    probes = []
    for sol in solutions:
        cells = sol.cells.copy()
        if kind == "full":
            pass
        elif kind == "one-cell":
            cells[rng.integers(0, sol.n_cells)] = BLANK
        elif kind == "one-row":
            row = int(rng.integers(0, sol.side))
            cells[row * sol.side : (row + 1) * sol.side] = BLANK
        else:
            raise ValueError(f"unknown probe kind {kind!r}")
        probes.append(DatasetSample(PuzzleGrid(sol.box_size, cells), sol))
    return probes


def stability_audit(
    params: ModelParams,
    probe_set: Sequence[DatasetSample],
    config: ModelConfig,
) -> StabilityReport:
    """Stable means: once the rollout decodes exactly the solution, every
    later segment still does. Probes that are never correct land in their
    own bucket and do not enter the rate."""
    if not probe_set:
        raise ValueError("probe set is empty")
    ids = np.stack([p.puzzle.cells for p in probe_set]).astype(np.int64)
    targets = np.stack([p.solution.cells for p in probe_set]).astype(np.int64)
    rollout = rollout_batch(ids, params, config)
    match = (rollout.predictions == targets[None]).all(axis=-1)  # (segments, n)

    verdicts = []
    stable = unstable = never = 0
    for b in range(len(probe_set)):
        col = match[:, b]
        if not col.any():
            verdicts.append("never-correct")
            never += 1
            continue
        first = int(np.argmax(col))
        if col[first:].all():
            verdicts.append("stable")
            stable += 1
        else:
            verdicts.append("unstable")
            unstable += 1
    rate = stable / (stable + unstable) if (stable + unstable) else 0.0
    return StabilityReport(
        rate=rate,
        verdicts=verdicts,
        stable=stable,
        unstable=unstable,
        never_correct=never,
    )


# ---------------------------------------------------------------------------
# exports


def write_trace_jsonl(
    path: Union[str, Path], trace: ReasoningTrace, include_latents: bool = False
) -> None:
    """One JSON line per segment."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for i in range(trace.segments):
            rec = {
                "segment": i + 1,
                "loss": float(trace.losses[i]),
                "energy": int(trace.energies[i]),
                "exact": bool(trace.exact[i]),
                "update_norm": float(trace.update_norms[i]),
                "q_halt": float(trace.q_halt[i]),
                "q_continue": float(trace.q_continue[i]),
                "prediction": serialize_grid(trace.predictions[i]),
            }
            if include_latents:
                rec["latent"] = [float(v) for v in trace.flat_snapshots()[i]]
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def write_field_csv(path: Union[str, Path], plane: PlaneSpec, field: np.ndarray, value_name: str = "value") -> None:
    """Lattice field as CSV rows (px, py, value)."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["px", "py", value_name])
        for iy, py in enumerate(plane.py):
            for ix, px in enumerate(plane.px):
                writer.writerow([repr(float(px)), repr(float(py)), field[iy, ix]])


def write_basin_csv(path: Union[str, Path], basin: BasinMap) -> None:
    """Basin lattice as CSV rows (px, py, steps, arrow_px, arrow_py)."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["px", "py", "steps_to_correct", "arrow_px", "arrow_py"])
        for iy, py in enumerate(basin.plane.py):
            for ix, px in enumerate(basin.plane.px):
                writer.writerow(
                    [
                        repr(float(px)),
                        repr(float(py)),
                        int(basin.steps_to_correct[iy, ix]),
                        repr(float(basin.arrows[iy, ix, 0])),
                        repr(float(basin.arrows[iy, ix, 1])),
                    ]
                )
