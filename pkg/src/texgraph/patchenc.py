"""Multi-scale patch extraction and codebook residual encoding.

Square windows of several sizes slide densely over a feature map; the
pixels of each window are treated as descriptors and soft-assigned to a
learnable codebook.  Per-center residual sums form an orderless patch
signature; patch signatures are summed per scale, combined with fixed
scale weights, L2-normalized, and concatenated with the global average
pool of the input map.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ContractError, DimensionError
from .imageops import conv1x1, crop2d, global_avg_pool
from .tensor import (
    Parameter,
    Tensor,
    add,
    concat,
    gather_rows,
    mul,
    pairwise_sq_dist,
    reciprocal,
    reduce,
    reshape,
    residual_aggregate,
    scale,
    scale_by,
    scale_columns,
    softmax,
    sqrt,
)

__all__ = [
    "PatchConfig",
    "Codebook",
    "patch_count",
    "extract_patches",
    "encode_patch",
    "encode_descriptors",
    "aggregate_multiscale",
    "fuse_global",
]

SMOOTHING_FLOOR = 1e-4  # optimizer clamps smoothing factors here


@dataclass(frozen=True)
class PatchConfig:
    """Sliding-window scales, stride and per-scale weights."""

    sizes: tuple[int, ...] = (3, 5, 7)
    weights: tuple[float, ...] = (0.35, 0.45, 0.2)
    stride: int = 1

    def validate(self, h: int | None = None, w: int | None = None) -> None:
        if len(self.sizes) != len(self.weights):
            raise ContractError(
                f"{len(self.sizes)} window sizes but {len(self.weights)} weights"
            )
        if self.stride < 1:
            raise ContractError(f"stride must be >= 1, got {self.stride}")
        if any(d < 1 for d in self.sizes):
            raise ContractError(f"window sizes must be >= 1, got {self.sizes}")
        if h is not None and w is not None:
            bad = [d for d in self.sizes if d > h or d > w]
            if bad:
                raise ContractError(
                    f"window sizes {bad} violate d <= H and d <= W for a {h}x{w} map"
                )


@dataclass
class Codebook:
    """K learnable cluster centers with per-center smoothing factors."""

    centers: Parameter  # (K, D)
    smoothing: Parameter  # (K,), kept positive by the optimizer clamp

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @staticmethod
    def init(k: int, dim: int, rng: np.random.Generator, prefix: str = "codebook") -> "Codebook":
        """Centers uniform in [-1, 1]^D, smoothing factors 1."""
        if k < 1:
            raise ContractError(f"codebook needs K >= 1, got {k}")
        centers = Parameter(f"{prefix}.centers", rng.uniform(-1.0, 1.0, size=(k, dim)))
        smoothing = Parameter(
            f"{prefix}.smoothing", np.ones(k), min_value=SMOOTHING_FLOOR
        )
        return Codebook(centers, smoothing)


def patch_count(h: int, w: int, d: int, s: int) -> int:
    """Number of d x d windows at stride s: floor((H-d)/s+1) * floor((W-d)/s+1)."""
    return ((h - d) // s + 1) * ((w - d) // s + 1)


def extract_patches(q: Tensor, d: int, s: int) -> list[Tensor]:
    """All d x d windows of a feature map in row-major window order.

    Patches are differentiable views: gradients route back to ``q``
    (overlapping windows accumulate).
    """
    if q.ndim != 3:
        raise DimensionError(f"extract_patches: expected H x W x C map, got {q.shape}")
    h, w, _ = q.shape
    if d > h or d > w:
        raise ContractError(
            f"extract_patches: window {d} violates the precondition d <= H and d <= W "
            f"for a {h}x{w} map"
        )
    if s < 1:
        raise ContractError(f"extract_patches: stride must be >= 1, got {s}")
    return [
        crop2d(q, r0, c0, d, d)
        for r0 in range(0, h - d + 1, s)
        for c0 in range(0, w - d + 1, s)
    ]


def encode_descriptors(v: Tensor, cb: Codebook) -> Tensor:
    """Soft-assignment residual aggregation of descriptor rows.

    Assignment of descriptor i to center k is the softmax over k of
    ``-s_k * ||v_i - c_k||^2``; the result row k is the assignment-
    weighted sum of residuals (v_i - c_k), a (K, D) matrix.
    """
    if v.ndim != 2 or v.shape[1] != cb.dim:
        raise ContractError(
            f"encode_descriptors: descriptors {v.shape} do not match codebook dim {cb.dim}"
        )
    dist = pairwise_sq_dist(v, cb.centers)
    assign = softmax(scale(scale_columns(dist, cb.smoothing), -1.0), axis=1)
    return residual_aggregate(assign, v, cb.centers)


def encode_patch(p: Tensor, cb: Codebook) -> Tensor:
    """Encode one d x d x D patch; its d*d pixels are the descriptors."""
    if p.ndim != 3:
        raise DimensionError(f"encode_patch: expected d x d x D patch, got {p.shape}")
    if p.shape[2] != cb.dim:
        raise ContractError(
            f"encode_patch: patch channels {p.shape[2]} != codebook dim {cb.dim}"
        )
    return encode_descriptors(reshape(p, (p.shape[0] * p.shape[1], p.shape[2])), cb)


@lru_cache(maxsize=128)
def _window_pixel_indices(h: int, w: int, d: int, s: int) -> np.ndarray:
    """Flat pixel index of every window pixel, windows row-major."""
    cell = (np.arange(d)[:, None] * w + np.arange(d)[None, :]).reshape(-1)
    starts = np.array(
        [r0 * w + c0 for r0 in range(0, h - d + 1, s) for c0 in range(0, w - d + 1, s)],
        dtype=np.intp,
    )
    return (starts[:, None] + cell[None, :]).reshape(-1)


def aggregate_multiscale(
    q: Tensor,
    cfg: PatchConfig,
    cb: Codebook,
    proj: Parameter,
    capture: dict | None = None,
) -> Tensor:
    """Weighted sum of patch encodings over all scales, L2-normalized.

    ``q`` is first channel-projected to the codebook dimension.  Within
    a scale, assignments are per-descriptor, so the sum over patches is
    computed by encoding the pooled descriptor matrix of all windows at
    once; this matches the per-patch sum up to summation order.
    """
    if q.ndim != 3:
        raise DimensionError(f"aggregate_multiscale: expected H x W x C map, got {q.shape}")
    h, w, _ = q.shape
    cfg.validate(h, w)
    if proj.shape[1] != cb.dim:
        raise DimensionError(
            f"aggregate_multiscale: projection emits {proj.shape[1]} channels, codebook dim is {cb.dim}"
        )
    qp = conv1x1(q, proj)
    flat = reshape(qp, (h * w, cb.dim))
    total: Tensor | None = None
    for d, wj in zip(cfg.sizes, cfg.weights):
        idx = _window_pixel_indices(h, w, d, cfg.stride)
        descriptors = gather_rows(flat, idx)
        enc = encode_descriptors(descriptors, cb)
        if capture is not None:
            dist = np.einsum(
                "ijd,ijd->ij",
                descriptors.data[:, None, :] - cb.centers.data[None, :, :],
                descriptors.data[:, None, :] - cb.centers.data[None, :, :],
            )
            logits = -dist * cb.smoothing.data[None, :]
            e = np.exp(logits - logits.max(axis=1, keepdims=True))
            capture[f"assignments_d{d}"] = e / e.sum(axis=1, keepdims=True)
        term = scale(enc, wj)
        total = term if total is None else add(total, term)
    return _l2_normalize(total)


def _l2_normalize(u: Tensor) -> Tensor:
    """Scale so the flattened vector has unit L2 norm (zero stays zero)."""
    sq = reduce(mul(u, u), tuple(range(u.ndim)), "sum")
    if sq.data == 0.0:
        return u
    return scale_by(u, reciprocal(sqrt(sq)))


def fuse_global(q: Tensor, u: Tensor) -> Tensor:
    """Concatenate the global average pool of ``q`` with flattened ``u``."""
    if q.ndim != 3:
        raise DimensionError(f"fuse_global: expected H x W x C map, got {q.shape}")
    pooled = global_avg_pool(q)
    flat = reshape(u, (u.size,))
    return concat([pooled, flat], axis=0)
