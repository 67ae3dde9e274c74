"""The recurrent reasoning network.

One *segment* maps the latent sequence z to its successor: the low-level
encoder updates t_inner times per cycle (seeing z_low + z_high + the input
embedding), the high-level encoder updates once per cycle (seeing
z_high + z_low), for n_cycles cycles; the segment's output is the final
high-level state. Both encoders are single-layer transformer blocks with
post-RMS-normalization, no biases, and a gated feed-forward of width 2d.

A linear head decodes tokens from z; a second linear head (after mean
pooling over positions) produces the halt/continue scores used by adaptive
computation.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .sudoku import PuzzleGrid

CHECKPOINT_MAGIC = b"HRMLCP01"
CHECKPOINT_VERSION = 1

# LatentState: the per-position hidden sequence, shape (seq_len, width),
# or (batch, seq_len, width) for batched rollouts.
LatentState = Tensor


@dataclass(frozen=True)
class ModelConfig:
    box_size: int = 2
    width: int = 64
    heads: int = 4
    n_cycles: int = 2
    t_inner: int = 3
    max_segments: int = 8
    min_segments: int = 2
    epsilon_greedy: float = 0.0
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ValueError(f"width {self.width} not divisible by {self.heads} heads")
        if self.n_cycles < 1 or self.t_inner < 1:
            raise ValueError("n_cycles and t_inner must be >= 1")
        if not self.max_segments >= self.min_segments >= 1:
            raise ValueError("need max_segments >= min_segments >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype}")

    @property
    def side(self) -> int:
        return self.box_size ** 2

    @property
    def seq_len(self) -> int:
        return self.box_size ** 4

    @property
    def vocab(self) -> int:
        # token 0 is the blank, then the side digits
        return self.side + 1

    def to_json(self) -> dict:
        return {
            "box_size": self.box_size,
            "width": self.width,
            "heads": self.heads,
            "n_cycles": self.n_cycles,
            "t_inner": self.t_inner,
            "max_segments": self.max_segments,
            "min_segments": self.min_segments,
            "epsilon_greedy": self.epsilon_greedy,
            "seed": self.seed,
            "dtype": self.dtype,
        }

    @staticmethod
    def from_json(obj: dict) -> "ModelConfig":
        return ModelConfig(
            box_size=int(obj["box_size"]),
            width=int(obj["width"]),
            heads=int(obj["heads"]),
            n_cycles=int(obj["n_cycles"]),
            t_inner=int(obj["t_inner"]),
            max_segments=int(obj["max_segments"]),
            min_segments=int(obj["min_segments"]),
            epsilon_greedy=float(obj["epsilon_greedy"]),
            seed=int(obj["seed"]),
            dtype=str(obj["dtype"]),
        )


@dataclass
class BlockParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    norm_attn: Tensor
    w_gate: Tensor
    w_val: Tensor
    w_down: Tensor
    norm_ffn: Tensor

    FIELDS = ("wq", "wk", "wv", "wo", "norm_attn", "w_gate", "w_val", "w_down", "norm_ffn")


@dataclass
class ModelParams:
    """All learnable arrays plus the frozen initial latent vector z_init."""

    tok_emb: Tensor
    pos_emb: Tensor
    low: BlockParams
    high: BlockParams
    w_out: Tensor
    q_w: Tensor
    q_b: Tensor
    z_init: Tensor  # never receives gradient updates

    def named(self) -> list[tuple[str, Tensor]]:
        """All arrays in checkpoint declaration order."""
        out: list[tuple[str, Tensor]] = [
            ("tok_emb", self.tok_emb),
            ("pos_emb", self.pos_emb),
        ]
        for prefix, block in (("low", self.low), ("high", self.high)):
            for f in BlockParams.FIELDS:
                out.append((f"{prefix}.{f}", getattr(block, f)))
        out += [
            ("w_out", self.w_out),
            ("q_w", self.q_w),
            ("q_b", self.q_b),
            ("z_init", self.z_init),
        ]
        return out

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named() if n != "z_init"]

    def attach(self, tape: Tape) -> "ModelParams":
        """The same values as fresh leaves on tape (z_init stays constant)."""

        def blk(b: BlockParams) -> BlockParams:
            return BlockParams(**{f: getattr(b, f).watched(tape) for f in BlockParams.FIELDS})

        return ModelParams(
            tok_emb=self.tok_emb.watched(tape),
            pos_emb=self.pos_emb.watched(tape),
            low=blk(self.low),
            high=blk(self.high),
            w_out=self.w_out.watched(tape),
            q_w=self.q_w.watched(tape),
            q_b=self.q_b.watched(tape),
            z_init=self.z_init,
        )

    @staticmethod
    def from_named(arrays: dict[str, np.ndarray]) -> "ModelParams":
        def blk(prefix: str) -> BlockParams:
            return BlockParams(
                **{f: Tensor(arrays[f"{prefix}.{f}"]) for f in BlockParams.FIELDS}
            )

        return ModelParams(
            tok_emb=Tensor(arrays["tok_emb"]),
            pos_emb=Tensor(arrays["pos_emb"]),
            low=blk("low"),
            high=blk("high"),
            w_out=Tensor(arrays["w_out"]),
            q_w=Tensor(arrays["q_w"]),
            q_b=Tensor(arrays["q_b"]),
            z_init=Tensor(arrays["z_init"]),
        )

    def astype(self, dtype) -> "ModelParams":
        return ModelParams.from_named(
            {n: t.data.astype(dtype) for n, t in self.named()}
        )


@dataclass
class HaltDecision:
    q_halt: float
    q_continue: float
    halted: bool


def trunc_normal(rng: np.random.Generator, shape, std: float, trunc: float = 2.0) -> np.ndarray:
    """Normal(0, std) with resampling outside +-trunc standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > trunc
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > trunc
    return out * std


def init_params(config: ModelConfig, rng: Optional[np.random.Generator] = None) -> ModelParams:
    """Seeded initialization; the Q head starts at zero so both scores tie."""
    if rng is None:
        rng = np.random.default_rng([config.seed, 0x706172616D])  # tag: params
    d = config.width
    dt = np.dtype(config.dtype)

    def w(rows, cols, fan_in):
        return Tensor(trunc_normal(rng, (rows, cols), std=1.0 / math.sqrt(fan_in)).astype(dt))

    def block() -> BlockParams:
        return BlockParams(
            wq=w(d, d, d),
            wk=w(d, d, d),
            wv=w(d, d, d),
            wo=w(d, d, d),
            norm_attn=Tensor(np.ones(d, dtype=dt)),
            w_gate=w(d, 2 * d, d),
            w_val=w(d, 2 * d, d),
            w_down=w(2 * d, d, 2 * d),
            norm_ffn=Tensor(np.ones(d, dtype=dt)),
        )

    # Output and Q heads start at zero: decoding begins at the exact
    # uniform-logit limit and both halt scores tie.
    return ModelParams(
        tok_emb=w(config.vocab, d, d),
        pos_emb=w(config.seq_len, d, d),
        low=block(),
        high=block(),
        w_out=Tensor(np.zeros((d, config.vocab), dtype=dt)),
        q_w=Tensor(np.zeros((d, 2), dtype=dt)),
        q_b=Tensor(np.zeros(2, dtype=dt)),
        z_init=Tensor(trunc_normal(rng, (d,), std=1.0, trunc=2.0).astype(dt)),
    )


# ---------------------------------------------------------------------------
# forward pieces


def embed_ids(ids: np.ndarray, params: ModelParams) -> Tensor:
    """Token embedding plus learned absolute positional embedding.

    ids is (seq,) or (batch, seq); output gains a trailing width axis.
    """
    ids = np.asarray(ids)
    if ids.shape[-1] != params.pos_emb.shape[0]:
        raise ad.ShapeError(
            f"sequence length {ids.shape[-1]} != positional table {params.pos_emb.shape[0]}"
        )
    return ad.add(ad.embedding(params.tok_emb, ids), params.pos_emb)


def embed_input(x: PuzzleGrid, params: ModelParams) -> Tensor:
    """Embed one grid into the (seq_len, width) input representation."""
    if x.n_cells != params.pos_emb.shape[0]:
        raise ad.ShapeError(
            f"grid has {x.n_cells} cells, model expects {params.pos_emb.shape[0]}"
        )
    return embed_ids(x.cells.astype(np.int64), params)


def encoder_block_composed(x: Tensor, block: BlockParams, heads: int) -> Tensor:
    """Single-layer encoder: attention and gated FFN sublayers, post-norm.

    Reference composition from tape primitives; encoder_block computes the
    same function as one fused tape op."""
    attended = ad.multi_head_self_attention(
        x, block.wq, block.wk, block.wv, block.wo, heads
    )
    h = ad.rms_norm(ad.add(x, attended), block.norm_attn)
    f = ad.glu_ffn(h, block.w_gate, block.w_val, block.w_down)
    return ad.rms_norm(ad.add(h, f), block.norm_ffn)


def encoder_block(x: Tensor, block: BlockParams, heads: int) -> Tensor:
    """Fused encoder block: one tape entry, hand-written adjoints.

    Same math as encoder_block_composed (asserted in tests); fusing cuts
    the per-op tape and allocation overhead that dominates training time
    at desk scale.
    """
    d = x.shape[-1]
    if d % heads != 0:
        raise ad.ShapeError(f"width {d} not divisible by {heads} heads")
    if block.wq.shape != (d, d):
        raise ad.ShapeError(f"block width {block.wq.shape} does not match input {x.shape}")
    scl = 1.0 / math.sqrt(d // heads)
    u = x.data
    wq, wk, wv, wo = block.wq.data, block.wk.data, block.wv.data, block.wo.data
    g1, g2 = block.norm_attn.data, block.norm_ffn.data
    wg, wval, wd = block.w_gate.data, block.w_val.data, block.w_down.data

    # attention
    qh = ad._split_heads(ad._flat_mm(u, wq), heads)
    kh = ad._split_heads(ad._flat_mm(u, wk), heads)
    vh = ad._split_heads(ad._flat_mm(u, wv), heads)
    p = ad._softmax_raw(np.matmul(qh, kh.swapaxes(-1, -2)) * scl)
    cm = ad._merge_heads(np.matmul(p, vh))
    r1 = u + ad._flat_mm(cm, wo)
    n1_raw, inv1 = ad._rms_forward(r1)
    n1 = n1_raw * g1
    # gated feed-forward
    gate = ad._sigmoid_raw(ad._flat_mm(n1, wg))
    val = ad._flat_mm(n1, wval)
    h = gate * val
    r2 = n1 + ad._flat_mm(h, wd)
    n2_raw, inv2 = ad._rms_forward(r2)

    tape = _merged_tape_of_block(x, block)
    out = Tensor(n2_raw * g2, tape)
    if tape is None:
        return out

    def backward(g):
        # post-norm 2
        dr2, dg2 = ad._rms_backward(g, r2, inv2, g2)
        # feed-forward
        dh = ad._flat_mm(dr2, wd.T)
        dwd = ad._weight_grad(h, dr2)
        dgate = dh * val
        dval = dh * gate
        dgz = dgate * gate * (1.0 - gate)
        dn1 = dr2 + ad._flat_mm(dgz, wg.T) + ad._flat_mm(dval, wval.T)
        dwg = ad._weight_grad(n1, dgz)
        dwval = ad._weight_grad(n1, dval)
        # post-norm 1
        dr1, dg1 = ad._rms_backward(dn1, r1, inv1, g1)
        # attention
        dcm = ad._flat_mm(dr1, wo.T)
        dwo = ad._weight_grad(cm, dr1)
        dc = ad._split_heads(dcm, heads)
        dp = np.matmul(dc, vh.swapaxes(-1, -2))
        dvh = np.matmul(p.swapaxes(-1, -2), dc)
        ds = p * (dp - ad._dot_last(dp, p, keepdims=True)) * scl
        dqh = np.matmul(ds, kh)
        dkh = np.matmul(ds.swapaxes(-1, -2), qh)
        dq = ad._merge_heads(dqh)
        dk = ad._merge_heads(dkh)
        dv = ad._merge_heads(dvh)
        du = (
            dr1
            + ad._flat_mm(dq, wq.T)
            + ad._flat_mm(dk, wk.T)
            + ad._flat_mm(dv, wv.T)
        )
        dwq = ad._weight_grad(u, dq)
        dwk = ad._weight_grad(u, dk)
        dwv = ad._weight_grad(u, dv)
        return du, dwq, dwk, dwv, dwo, dg1, dwg, dwval, dwd, dg2

    in_uids = (
        ad._uid_or_none(x),
        ad._uid_or_none(block.wq),
        ad._uid_or_none(block.wk),
        ad._uid_or_none(block.wv),
        ad._uid_or_none(block.wo),
        ad._uid_or_none(block.norm_attn),
        ad._uid_or_none(block.w_gate),
        ad._uid_or_none(block.w_val),
        ad._uid_or_none(block.w_down),
        ad._uid_or_none(block.norm_ffn),
    )
    tape.record(out.uid, in_uids, backward)
    return out


def _merged_tape_of_block(x: Tensor, block: BlockParams):
    tensors = [x] + [getattr(block, f) for f in BlockParams.FIELDS]
    return ad._merged_tape(*tensors)


def initial_state(params: ModelParams, batch: Optional[int] = None) -> Tensor:
    """z0: the frozen init vector broadcast across positions (and batch)."""
    seq = params.pos_emb.shape[0]
    d = params.z_init.shape[0]
    shape = (seq, d) if batch is None else (batch, seq, d)
    return Tensor(np.broadcast_to(params.z_init.data, shape).copy())


def segment_forward(
    z: LatentState,
    x_emb: Tensor,
    params: ModelParams,
    config: ModelConfig,
    counter: Optional[dict] = None,
) -> LatentState:
    """One full segment: n_cycles of (t_inner low-level updates, one
    high-level update). The low-level state starts at zero inside every
    segment; the returned tensor is the new high-level state.

    counter, when given, tallies {"f_low": ..., "f_high": ...} applications.
    """
    if z.shape != x_emb.shape:
        raise ad.ShapeError(f"latent {z.shape} and embedding {x_emb.shape} disagree")
    z_high = z
    z_low = Tensor(np.zeros_like(z.data))
    for _ in range(config.n_cycles):
        # z_high is constant within a cycle; hoist its sum with the input
        high_plus_x = ad.add(z_high, x_emb)
        for _ in range(config.t_inner):
            z_low = encoder_block(
                ad.add(z_low, high_plus_x), params.low, config.heads
            )
            if counter is not None:
                counter["f_low"] = counter.get("f_low", 0) + 1
        z_high = encoder_block(ad.add(z_high, z_low), params.high, config.heads)
        if counter is not None:
            counter["f_high"] = counter.get("f_high", 0) + 1
    return z_high


def output_logits(z: LatentState, params: ModelParams) -> Tensor:
    return ad.matmul(z, params.w_out)


def argmax_tokens(logits: np.ndarray) -> np.ndarray:
    """Per-position argmax; ties break toward the lowest token index."""
    return np.argmax(logits, axis=-1)


def decode_output(z: LatentState, params: ModelParams) -> tuple[Tensor, PuzzleGrid]:
    """Logits and the greedy-decoded grid for a single (seq, d) latent.

    The decoder never copies input clues; the blank token is a legal output,
    so early-training predictions may contain blanks or corrupted clues.
    """
    if z.ndim != 2:
        raise ad.ShapeError("decode_output expects an unbatched (seq, d) latent")
    logits = output_logits(z, params)
    vocab = params.w_out.shape[1]
    box_size = math.isqrt(vocab - 1)
    cells = argmax_tokens(logits.data).astype(np.int16)
    return logits, PuzzleGrid(box_size, cells)


def q_scores(z: LatentState, params: ModelParams) -> Tensor:
    """Mean-pool positions, then an affine map to (halt, continue) scores."""
    pooled = ad.mean_axis(z, axis=-2, keepdims=True)
    q = ad.affine(pooled, params.q_w, params.q_b)
    return ad.reshape(q, q.shape[:-2] + (2,))


def q_head(z: LatentState, params: ModelParams, force_halt: bool = False) -> HaltDecision:
    q = q_scores(z, params).data
    if q.ndim != 1:
        raise ad.ShapeError("q_head expects an unbatched latent")
    q_halt, q_continue = float(q[0]), float(q[1])
    return HaltDecision(q_halt, q_continue, bool(force_halt or q_halt > q_continue))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(
    path: Union[str, Path], params: ModelParams, config: ModelConfig, step: int
) -> None:
    """Binary container: magic, a canonical JSON header (config, step, array
    manifest), then raw little-endian float32 arrays in declaration order."""
    path = Path(path)
    named = params.named()
    header = {
        "version": CHECKPOINT_VERSION,
        "config": config.to_json(),
        "step": int(step),
        "arrays": [{"name": n, "shape": list(t.shape)} for n, t in named],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, t in named:
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path: Union[str, Path]) -> tuple[ModelParams, ModelConfig, int]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (header_len,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + header_len].decode("utf-8"))
    if header["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header['version']}")
    config = ModelConfig.from_json(header["config"])
    offset = 12 + header_len
    arrays: dict[str, np.ndarray] = {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(raw):
            raise ValueError(f"{path}: truncated checkpoint")
        arrays[spec["name"]] = np.frombuffer(
            raw[offset:end], dtype="<f4"
        ).reshape(shape).copy()
        offset = end
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    params = ModelParams.from_named(arrays)
    return params, config, int(header["step"])
