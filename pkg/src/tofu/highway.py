"""Dual-path execution: compute on a reduced token set, distribute to full length.

The full-length path is never recomputed. Each block reduces the local
(already shrunk) token set a bit further, runs attention and the MLP there,
and scatters the results back to all original positions through a local
path index that composes every reduce seen so far. Positions fused together
receive identical copies; magnitude-based masking can suppress those copies
wherever the full path already carries large activations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fusion import MergeMethod, ReduceSpec, ReduceTrace, apply_reduce, layer_methods
from .tensor import FLOAT, layernorm
from .vit import BlockWeights, VitModel, attention, mlp_map, _effective_r


@dataclass(frozen=True)
class MbmConfig:
    """Magnitude-based masking of distributed residuals at merged positions."""

    t: float = 1.0
    enabled: bool = False

    def __post_init__(self):
        if self.t < 0:
            raise ValueError(f"MBM threshold must be >= 0, got {self.t}")


@dataclass
class HighwayState:
    """Full-length features, the reduced local features, and their linkage.

    index[b, i] is the local row that full position i currently resolves to;
    affected[b, i] marks positions that have taken part in any merge so far.
    last_traces holds the per-item reduce traces of the most recent block
    (None when that block did not reduce).
    """

    x_full: np.ndarray   # (B, N, C)
    x_local: np.ndarray  # (B, M, C)
    index: np.ndarray    # (B, N) int64 into local rows
    affected: np.ndarray  # (B, N) bool
    last_traces: list[ReduceTrace] | None = None


def init_state(x: np.ndarray) -> HighwayState:
    x = np.asarray(x, dtype=FLOAT)
    if x.ndim != 3:
        raise ValueError(f"highway input must be (B, N, C), got {x.shape}")
    b, n, _ = x.shape
    return HighwayState(
        x_full=x.copy(),
        x_local=x.copy(),
        index=np.tile(np.arange(n, dtype=np.int64), (b, 1)),
        affected=np.zeros((b, n), dtype=bool),
    )


def update_index(index: np.ndarray, trace: ReduceTrace) -> np.ndarray:
    """Compose one more reduce into a local path index.

    Every entry is pushed through the trace's input-to-output map, so merged
    local rows collapse onto their destination's new row.
    """
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= trace.n_input):
        raise IndexError(
            f"index entries exceed the trace's {trace.n_input} input rows")
    return trace.output_index_of_input[index]


def distribute(f_local: np.ndarray, index: np.ndarray) -> np.ndarray:
    """Scatter local rows to full length: out[i] = f_local[index[i]]."""
    f_local = np.asarray(f_local, dtype=FLOAT)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= f_local.shape[0]):
        raise IndexError(
            f"dangling local path index (local length {f_local.shape[0]})")
    return f_local[index]


def mbm_mask(x_full: np.ndarray, affected: np.ndarray, cfg: MbmConfig) -> np.ndarray:
    """0/1 mask for a distributed residual.

    Zero exactly where the position took part in a merge and the existing
    full-path activation magnitude is at or above the threshold. Disabled
    config (or an infinite threshold) yields all ones.
    """
    x_full = np.asarray(x_full)
    ones = np.ones(x_full.shape, dtype=FLOAT)
    if not cfg.enabled:
        return ones
    hit = np.asarray(affected, dtype=bool)[:, None] & (np.abs(x_full) >= cfg.t)
    return np.where(hit, FLOAT(0.0), ones)


def highway_block(state: HighwayState, w: BlockWeights, n_heads: int,
                  method: MergeMethod, r: int, mbm: MbmConfig = MbmConfig(),
                  protect_cls: bool = True) -> HighwayState:
    """One block on the local path, residuals distributed to the full path.

    The local set shrinks by r (clamped) before the attention; matching runs
    on the raw local features. Attention and MLP outputs are each scattered
    through the composed index and residual-added to both paths.
    """
    b = state.x_full.shape[0]
    n_local = state.x_local.shape[1]
    r_eff = _effective_r(n_local, r)

    x_local = state.x_local
    index = state.index
    affected = state.affected
    traces = None
    if r_eff > 0:
        reduced, new_index, new_affected, traces = [], [], [], []
        for i in range(b):
            x_red, trace = apply_reduce(
                x_local[i], x_local[i], method, r_eff, protect_cls)
            touched_local = np.zeros(n_local, dtype=bool)
            touched_local[trace.match.idx_src] = True
            touched_local[trace.match.idx_dst] = True
            new_affected.append(affected[i] | touched_local[index[i]])
            new_index.append(update_index(index[i], trace))
            reduced.append(x_red)
            traces.append(trace)
        x_local = np.stack(reduced)
        index = np.stack(new_index)
        affected = np.stack(new_affected)

    x_full = state.x_full
    f_attn, _ = attention(
        layernorm(x_local, w.norm1_gamma, w.norm1_beta), w, n_heads)
    x_full = _distribute_add(x_full, f_attn, index, affected, mbm)
    x_local = x_local + f_attn

    f_mlp = mlp_map(layernorm(x_local, w.norm2_gamma, w.norm2_beta), w)
    x_full = _distribute_add(x_full, f_mlp, index, affected, mbm)
    x_local = x_local + f_mlp

    return HighwayState(x_full=x_full, x_local=x_local, index=index,
                        affected=affected, last_traces=traces)


def _distribute_add(x_full: np.ndarray, f_local: np.ndarray, index: np.ndarray,
                    affected: np.ndarray, mbm: MbmConfig) -> np.ndarray:
    out = np.empty_like(x_full)
    for i in range(x_full.shape[0]):
        d = distribute(f_local[i], index[i])
        if mbm.enabled:
            d = mbm_mask(x_full[i], affected[i], mbm) * d
        out[i] = x_full[i] + d
    return out


def highway_forward(x: np.ndarray, model: VitModel, spec: ReduceSpec,
                    mbm: MbmConfig = MbmConfig()) -> tuple[np.ndarray, list[int]]:
    """Run the whole stack in highway mode.

    Returns the full-length output and the local token count after each
    layer. With r = 0 everywhere this is exactly the plain forward pass.
    """
    state = init_state(x)
    cfg = model.config
    methods = layer_methods(spec, cfg.depth)
    counts = []
    for l, w in enumerate(model.blocks):
        state = highway_block(state, w, cfg.heads, methods[l], spec.r, mbm,
                              protect_cls=spec.protect_cls)
        counts.append(state.x_local.shape[1])
    return state.x_full, counts
