"""Graph layers over convolutional feature maps.

Two complementary structures:

  - a context-aware graph: every spatial position of one feature map is
    a node of a fully-connected graph; affinities come from an embedded
    Gaussian kernel (exp of projected dot products) normalized per node
    by a softmax, followed by value aggregation, an output projection
    and a residual connection,
  - a multi-stage bipartite graph: each pixel of a shallower stage links
    to its top-n most similar pixels of a deeper stage, where similarity
    is measured between parameter-free dilated neighbourhood averages
    ("context features"); messages are the mean over the n neighbours,
    linearly projected to the shallower stage's channel count.

The two branch outputs are fused into a sigmoid gate that modulates the
final backbone map with a residual, yielding the map consumed by the
patch encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .imageops import conv1x1, crop2d, pad2d, resize_nearest
from .tensor import (
    Parameter,
    Tensor,
    add,
    concat,
    gather_rows,
    matmul,
    mul,
    no_grad,
    reduce,
    reshape,
    scale,
    sigmoid,
    softmax,
    transpose,
)

__all__ = [
    "ContextGraphParams",
    "MultiStageGraphConfig",
    "BipartiteAdjacency",
    "FusionParams",
    "context_aware_graph",
    "dilated_context",
    "topn_neighbors",
    "bipartite_propagate",
    "multi_stage_graph",
    "fuse",
]


@dataclass
class ContextGraphParams:
    """Projections for the fully-connected graph layer.

    ``theta``/``phi`` embed nodes for the affinity kernel (Cin x Cattn),
    ``value`` maps node features (Cin x Cattn), ``out`` projects the
    aggregate back (Cattn x Cin).  With ``use_embedding`` off the
    affinity is the plain Gaussian exp(x_i . x_j) on raw features.
    ``residual`` adds the input back, letting the layer start near
    identity.
    """

    theta: Parameter
    phi: Parameter
    value: Parameter
    out: Parameter
    use_embedding: bool = True
    residual: bool = True


@dataclass(frozen=True)
class MultiStageGraphConfig:
    """Wiring of the bipartite graph between two stages.

    ``stage_pair`` indexes the source (shallower) and target (deeper)
    stage; negative indices count from the deepest.  ``dilation`` and
    ``kernel`` shape the parameter-free context window, ``neighbors``
    is the per-source edge count n.
    """

    stage_pair: tuple[int, int] = (-2, -1)
    dilation: int = 2
    kernel: int = 3
    neighbors: int = 4

    def validate(self) -> None:
        if self.kernel < 3 or self.kernel % 2 == 0:
            raise ContractError(f"context kernel must be odd and >= 3, got {self.kernel}")
        if self.dilation < 1:
            raise ContractError(f"dilation must be >= 1, got {self.dilation}")
        if self.neighbors < 1:
            raise ContractError(f"neighbor count must be >= 1, got {self.neighbors}")


@dataclass
class BipartiteAdjacency:
    """Sparse per-source neighbour lists of the bipartite graph.

    ``indices[s]`` holds the flat row-major pixel indices of the n
    target-stage neighbours of source pixel s (sources in row-major
    order over the source stage grid).
    """

    indices: np.ndarray  # (num_source_pixels, n) int64
    source_hw: tuple[int, int]
    target_hw: tuple[int, int]

    @property
    def neighbors(self) -> int:
        return self.indices.shape[1]

    def dense(self) -> np.ndarray:
        """0/1 matrix of shape (source pixels, target pixels)."""
        n_src = self.source_hw[0] * self.source_hw[1]
        n_tgt = self.target_hw[0] * self.target_hw[1]
        out = np.zeros((n_src, n_tgt), dtype=np.int64)
        for s in range(n_src):
            out[s, self.indices[s]] = 1
        return out

    def coords(self, s: int) -> list[tuple[int, int]]:
        """Neighbour (row, col) coordinates of source pixel s."""
        w = self.target_hw[1]
        return [(int(i) // w, int(i) % w) for i in self.indices[s]]


@dataclass
class FusionParams:
    """1x1 convolution (weights + bias) producing the fusion gate."""

    w: Parameter  # (C_ghat + C_ghat_prime) x C_last
    b: Parameter  # C_last


def context_aware_graph(
    f: Tensor, params: ContextGraphParams, capture: dict | None = None
) -> Tensor:
    """Fully-connected graph propagation over one feature map.

    Every one of the N = H*W positions attends to every other; each
    node's incoming weights are softmax-normalized (rows sum to 1).
    Output shape equals input shape.
    """
    if f.ndim != 3:
        raise DimensionError(f"context_aware_graph: expected H x W x C map, got {f.shape}")
    h, w, c = f.shape
    if params.theta.shape[0] != c:
        raise DimensionError(
            f"context_aware_graph: projections expect {params.theta.shape[0]} channels, map has {c}"
        )
    x = reshape(f, (h * w, c))
    if params.use_embedding:
        q = matmul(x, params.theta)
        k = matmul(x, params.phi)
        scores = matmul(q, transpose(k))
    else:
        scores = matmul(x, transpose(x))
    attn = softmax(scores, axis=1)
    if capture is not None:
        capture["attention"] = attn.data.copy()
    v = matmul(x, params.value)
    agg = matmul(matmul(attn, v), params.out)
    out = reshape(agg, (h, w, c))
    return add(f, out) if params.residual else out


def dilated_context(f: Tensor, d: int, k: int) -> Tensor:
    """Parameter-free context feature: mean of the k*k-1 dilated
    neighbours of each pixel (center excluded), replicate padding."""
    if f.ndim != 3:
        raise DimensionError(f"dilated_context: expected H x W x C map, got {f.shape}")
    if k < 3 or k % 2 == 0:
        raise ContractError(f"dilated_context: kernel must be odd and >= 3, got {k}")
    if d < 1:
        raise ContractError(f"dilated_context: dilation must be >= 1, got {d}")
    h, w, _ = f.shape
    r = k // 2
    p = d * r
    xp = pad2d(f, p, "replicate")
    acc: Tensor | None = None
    for oi in range(-r, r + 1):
        for oj in range(-r, r + 1):
            if oi == 0 and oj == 0:
                continue
            s = crop2d(xp, p + oi * d, p + oj * d, h, w)
            acc = s if acc is None else add(acc, s)
    return scale(acc, 1.0 / (k * k - 1))


def topn_neighbors(fc0: Tensor, fc1: Tensor, n: int) -> BipartiteAdjacency:
    """Top-n nearest target pixels per source pixel.

    Distances are squared Euclidean between per-pixel feature vectors;
    ties break toward the smaller row-major target index.  The result is
    index structure only and carries no gradient.
    """
    if fc0.ndim != 3 or fc1.ndim != 3:
        raise DimensionError("topn_neighbors: inputs must be H x W x C maps")
    if fc0.shape[2] != fc1.shape[2]:
        raise DimensionError(
            f"topn_neighbors: channel counts differ: {fc0.shape[2]} vs {fc1.shape[2]}"
        )
    h1, w1 = fc1.shape[0], fc1.shape[1]
    if not 1 <= n <= h1 * w1:
        raise ContractError(f"topn_neighbors: n={n} out of range for {h1 * w1} target pixels")
    a = fc0.data.reshape(-1, fc0.shape[2])
    b = fc1.data.reshape(-1, fc1.shape[2])
    diff = a[:, None, :] - b[None, :, :]
    dist = np.einsum("ijd,ijd->ij", diff, diff)
    order = np.argsort(dist, axis=1, kind="stable")
    return BipartiteAdjacency(
        indices=np.ascontiguousarray(order[:, :n]),
        source_hw=(fc0.shape[0], fc0.shape[1]),
        target_hw=(h1, w1),
    )


def bipartite_propagate(
    f1: Tensor, adj: BipartiteAdjacency, proj: Parameter, out_hw: tuple[int, int] | None = None
) -> Tensor:
    """Mean over each source pixel's n neighbours in the target stage,
    projected to the source stage's channel count."""
    if f1.ndim != 3:
        raise DimensionError(f"bipartite_propagate: expected H x W x C map, got {f1.shape}")
    if (f1.shape[0], f1.shape[1]) != adj.target_hw:
        raise ContractError(
            f"bipartite_propagate: adjacency targets {adj.target_hw}, map is {f1.shape[:2]}"
        )
    if proj.shape[0] != f1.shape[2]:
        raise DimensionError(
            f"bipartite_propagate: projection expects {proj.shape[0]} channels, map has {f1.shape[2]}"
        )
    if out_hw is None:
        out_hw = adj.source_hw
    elif out_hw != adj.source_hw:
        raise ContractError(
            f"bipartite_propagate: adjacency sources {adj.source_hw} != requested {out_hw}"
        )
    n_src = adj.source_hw[0] * adj.source_hw[1]
    flat = reshape(f1, (f1.shape[0] * f1.shape[1], f1.shape[2]))
    gathered = gather_rows(flat, adj.indices.reshape(-1))
    stacked = reshape(gathered, (n_src, adj.neighbors, f1.shape[2]))
    mean = reduce(stacked, (1,), "mean")
    return reshape(matmul(mean, proj), (adj.source_hw[0], adj.source_hw[1], proj.shape[1]))


def _align_channels(ctx: np.ndarray, target_c: int) -> np.ndarray:
    """Reduce a context map's channel count by averaging equal groups."""
    c = ctx.shape[2]
    if c == target_c:
        return ctx
    if c % target_c != 0:
        raise ContractError(
            f"cannot align {c} context channels to {target_c}: not an integer multiple"
        )
    return ctx.reshape(ctx.shape[0], ctx.shape[1], target_c, c // target_c).mean(axis=3)


def multi_stage_graph(
    f0: Tensor,
    f1: Tensor,
    cfg: MultiStageGraphConfig,
    proj: Parameter,
    capture: dict | None = None,
) -> Tensor:
    """Bipartite propagation from stage l1 into stage l0's grid.

    Adjacency is built from parameter-free context features and treated
    as non-differentiable structure: contexts and distances run outside
    the tape.  When the two stages differ in channel count, the wider
    context map is reduced by channel-group averaging before the
    distance computation (the message path still uses the raw ``f1``).
    """
    cfg.validate()
    with no_grad():
        c0 = dilated_context(Tensor(f0.data), cfg.dilation, cfg.kernel)
        c1 = dilated_context(Tensor(f1.data), cfg.dilation, cfg.kernel)
        cc = min(c0.shape[2], c1.shape[2])
        c0a = Tensor(_align_channels(c0.data, cc))
        c1a = Tensor(_align_channels(c1.data, cc))
    adj = topn_neighbors(c0a, c1a, cfg.neighbors)
    if capture is not None:
        capture["adjacency"] = adj
    return bipartite_propagate(f1, adj, proj)


def fuse(
    ghat: Tensor | None,
    ghat_prime: Tensor | None,
    f_last: Tensor,
    params: FusionParams,
    capture: dict | None = None,
) -> Tensor:
    """Gated fusion of the graph branch outputs onto the final stage map.

    Branches are resized (nearest) to the final map's extent and
    channel-concatenated; a 1x1 convolution plus sigmoid produces a gate
    V in (0,1), and the result is f_last * V + f_last.  Either branch
    may be absent (ablations); at least one is required.
    """
    branches = [t for t in (ghat, ghat_prime) if t is not None]
    if not branches:
        raise ContractError("fuse: at least one graph branch is required")
    h, w = f_last.shape[0], f_last.shape[1]
    resized = [resize_nearest(t, h, w) for t in branches]
    cat = concat(resized, axis=2) if len(resized) > 1 else resized[0]
    if cat.shape[2] != params.w.shape[0]:
        raise DimensionError(
            f"fuse: fusion weights expect {params.w.shape[0]} channels, branches give {cat.shape[2]}"
        )
    if params.w.shape[1] != f_last.shape[2]:
        raise DimensionError(
            f"fuse: fusion output channels {params.w.shape[1]} != final map channels {f_last.shape[2]}"
        )
    gate = sigmoid(conv1x1(cat, params.w, params.b))
    if capture is not None:
        capture["gate"] = gate.data.copy()
    return add(mul(f_last, gate), f_last)
