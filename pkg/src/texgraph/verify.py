"""Finite-difference verification suite covering every differentiable op
plus the assembled model, shared by the CLI and the test suite."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import imageops as im
from . import tensor as T
from .backbone import BackboneConfig
from .gradcheck import grad_check, grad_check_params
from .graphmod import (
    BipartiteAdjacency,
    ContextGraphParams,
    FusionParams,
    MultiStageGraphConfig,
    bipartite_propagate,
    context_aware_graph,
    dilated_context,
    fuse,
)
from .model import Model, ModelConfig
from .patchenc import Codebook, PatchConfig, aggregate_multiscale, encode_patch, fuse_global
from .tensor import Parameter, Tensor
from .trainer import cross_entropy

__all__ = ["GradCase", "op_cases", "model_case", "run_case", "tiny_model_config"]

OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3


@dataclass
class GradCase:
    name: str
    build: Callable[[np.random.Generator], tuple[Callable[[Tensor], Tensor], Tensor]]
    tolerance: float = OP_TOLERANCE


def _away_from_zero(arr: np.ndarray, eps: float = 1e-2) -> np.ndarray:
    """Nudge entries off 0 so kinked ops stay differentiable at the sample."""
    shift = np.where(arr >= 0, eps, -eps)
    return np.where(np.abs(arr) < eps, arr + shift, arr)


def _readout(rng: np.random.Generator, shape) -> Callable[[Tensor], Tensor]:
    """Fixed random weighted sum turning any-shape output into a scalar."""
    w = Tensor(rng.uniform(-1.0, 1.0, size=shape))

    def read(y: Tensor) -> Tensor:
        return T.reduce(T.mul(y, w), tuple(range(y.ndim)), "sum")

    return read


def op_cases() -> list[GradCase]:
    """One case per differentiable operation (kernel ops and composites)."""
    cases: list[GradCase] = []

    def case(name, build, tol=OP_TOLERANCE):
        cases.append(GradCase(name, build, tol))

    def b_add(rng):
        b = Tensor(rng.uniform(-1, 1, (4, 3)))
        read = _readout(rng, (4, 3))
        return lambda x: read(T.add(x, b)), Tensor(rng.uniform(-1, 1, (4, 3)))

    case("add", b_add)

    def b_sub(rng):
        b = Tensor(rng.uniform(-1, 1, (4, 3)))
        read = _readout(rng, (4, 3))
        return lambda x: read(T.sub(b, x)), Tensor(rng.uniform(-1, 1, (4, 3)))

    case("sub", b_sub)

    def b_mul(rng):
        b = Tensor(rng.uniform(-1, 1, (4, 3)))
        read = _readout(rng, (4, 3))
        return lambda x: read(T.mul(x, b)), Tensor(rng.uniform(-1, 1, (4, 3)))

    case("mul", b_mul)

    def b_scale(rng):
        read = _readout(rng, (5,))
        return lambda x: read(T.scale(x, -1.7)), Tensor(rng.uniform(-1, 1, 5))

    case("scale", b_scale)

    def b_exp(rng):
        read = _readout(rng, (4, 2))
        return lambda x: read(T.exp(x)), Tensor(rng.uniform(-1, 1, (4, 2)))

    case("exp", b_exp)

    def b_relu(rng):
        read = _readout(rng, (5, 4))
        x = Tensor(_away_from_zero(rng.uniform(-1, 1, (5, 4))))
        return lambda t: read(T.relu(t)), x

    case("relu", b_relu)

    def b_sigmoid(rng):
        read = _readout(rng, (4, 3))
        return lambda x: read(T.sigmoid(x)), Tensor(rng.uniform(-1, 1, (4, 3)))

    case("sigmoid", b_sigmoid)

    def b_softmax(rng):
        read = _readout(rng, (3, 5))
        return lambda x: read(T.softmax(x, 1)), Tensor(rng.uniform(-1, 1, (3, 5)))

    case("softmax", b_softmax)

    def b_matmul_a(rng):
        b = Tensor(rng.uniform(-1, 1, (4, 2)))
        read = _readout(rng, (3, 2))
        return lambda x: read(T.matmul(x, b)), Tensor(rng.uniform(-1, 1, (3, 4)))

    case("matmul (left)", b_matmul_a)

    def b_matmul_b(rng):
        a = Tensor(rng.uniform(-1, 1, (3, 4)))
        read = _readout(rng, (3, 2))
        return lambda x: read(T.matmul(a, x)), Tensor(rng.uniform(-1, 1, (4, 2)))

    case("matmul (right)", b_matmul_b)

    def b_conv_x(rng):
        w = Tensor(rng.uniform(-1, 1, (3, 3, 2, 3)))
        read = _readout(rng, (3, 3, 3))
        return (
            lambda x: read(im.conv2d(x, w, stride=2, pad=1, pad_mode="replicate")),
            Tensor(rng.uniform(-1, 1, (5, 5, 2))),
        )

    case("conv2d (input)", b_conv_x)

    def b_conv_w(rng):
        x = Tensor(rng.uniform(-1, 1, (6, 5, 2)))
        read = _readout(rng, (2, 2, 3))
        return (
            lambda w: read(im.conv2d(x, w, stride=2, pad=0, dilation=2)),
            Tensor(rng.uniform(-1, 1, (2, 2, 2, 3))),
        )

    case("conv2d (kernel)", b_conv_w)

    def b_reduce_sum(rng):
        read = _readout(rng, (4,))
        return lambda x: read(T.reduce(x, (0, 2), "sum")), Tensor(rng.uniform(-1, 1, (3, 4, 2)))

    case("reduce (sum)", b_reduce_sum)

    def b_reduce_mean(rng):
        read = _readout(rng, (4,))
        return lambda x: read(T.reduce(x, (0, 2), "mean")), Tensor(rng.uniform(-1, 1, (3, 4, 2)))

    case("reduce (mean)", b_reduce_mean)

    def b_concat(rng):
        b = Tensor(rng.uniform(-1, 1, (2, 3)))
        read = _readout(rng, (5, 3))
        return lambda x: read(T.concat([x, b], 0)), Tensor(rng.uniform(-1, 1, (3, 3)))

    case("concat", b_concat)

    def b_resize(rng):
        read = _readout(rng, (5, 7, 2))
        return lambda x: read(im.resize_nearest(x, 5, 7)), Tensor(rng.uniform(-1, 1, (3, 4, 2)))

    case("resize_nearest", b_resize)

    def b_gap(rng):
        read = _readout(rng, (3,))
        return lambda x: read(im.global_avg_pool(x)), Tensor(rng.uniform(-1, 1, (4, 5, 3)))

    case("global_avg_pool", b_gap)

    def b_psd_a(rng):
        b = Tensor(rng.uniform(-1, 1, (4, 3)))
        read = _readout(rng, (5, 4))
        return lambda x: read(T.pairwise_sq_dist(x, b)), Tensor(rng.uniform(-1, 1, (5, 3)))

    case("pairwise_sq_dist", b_psd_a)

    def b_cag(rng):
        c, ca = 4, 2
        params = ContextGraphParams(
            theta=Parameter("t", rng.uniform(-1, 1, (c, ca))),
            phi=Parameter("p", rng.uniform(-1, 1, (c, ca))),
            value=Parameter("v", rng.uniform(-1, 1, (c, ca))),
            out=Parameter("o", rng.uniform(-1, 1, (ca, c))),
        )
        read = _readout(rng, (3, 3, c))
        return lambda x: read(context_aware_graph(x, params)), Tensor(
            rng.uniform(-1, 1, (3, 3, c))
        )

    case("context_aware_graph", b_cag)

    def b_dilated(rng):
        read = _readout(rng, (5, 6, 2))
        return lambda x: read(dilated_context(x, 2, 3)), Tensor(rng.uniform(-1, 1, (5, 6, 2)))

    case("dilated_context", b_dilated)

    def b_bipartite(rng):
        adj = BipartiteAdjacency(
            indices=np.stack([rng.choice(12, size=2, replace=False) for _ in range(6)]),
            source_hw=(2, 3),
            target_hw=(3, 4),
        )
        proj = Parameter("proj", rng.uniform(-1, 1, (3, 2)))
        read = _readout(rng, (2, 3, 2))
        return lambda x: read(bipartite_propagate(x, adj, proj)), Tensor(
            rng.uniform(-1, 1, (3, 4, 3))
        )

    case("bipartite_propagate", b_bipartite)

    def b_fuse(rng):
        params = FusionParams(
            w=Parameter("fw", rng.uniform(-1, 1, (5, 3))),
            b=Parameter("fb", rng.uniform(-0.2, 0.2, 3)),
        )
        ghp = Tensor(rng.uniform(-1, 1, (8, 8, 2)))
        f_last = Tensor(rng.uniform(-1, 1, (4, 4, 3)))
        read = _readout(rng, (4, 4, 3))
        return lambda x: read(fuse(x, ghp, f_last, params)), Tensor(rng.uniform(-1, 1, (4, 4, 3)))

    case("fuse", b_fuse)

    def b_encode(rng):
        cb = Codebook(
            centers=Parameter("c", rng.uniform(-1, 1, (3, 2))),
            smoothing=Parameter("s", rng.uniform(0.5, 1.5, 3)),
        )
        read = _readout(rng, (3, 2))
        return lambda p: read(encode_patch(p, cb)), Tensor(rng.uniform(-1, 1, (3, 3, 2)))

    case("encode_patch", b_encode)

    def b_encode_centers(rng):
        p = Tensor(rng.uniform(-1, 1, (3, 3, 2)))
        smoothing = Parameter("s", rng.uniform(0.5, 1.5, 3))
        read = _readout(rng, (3, 2))

        def f(c: Tensor) -> Tensor:
            cb = Codebook(centers=c, smoothing=smoothing)
            return read(encode_patch(p, cb))

        return f, Tensor(rng.uniform(-1, 1, (3, 2)))

    case("encode_patch (centers)", b_encode_centers)

    def b_aggregate(rng):
        cb = Codebook(
            centers=Parameter("c", rng.uniform(-1, 1, (3, 2))),
            smoothing=Parameter("s", rng.uniform(0.5, 1.5, 3)),
        )
        proj = Parameter("proj", rng.uniform(-1, 1, (3, 2)))
        cfg = PatchConfig(sizes=(2, 3), weights=(0.6, 0.4), stride=1)
        read = _readout(rng, (3, 2))
        return lambda q: read(aggregate_multiscale(q, cfg, cb, proj)), Tensor(
            rng.uniform(-1, 1, (4, 4, 3))
        )

    case("aggregate_multiscale", b_aggregate)

    def b_fuse_global(rng):
        u = Tensor(rng.uniform(-1, 1, (3, 2)))
        read = _readout(rng, (9,))
        return lambda q: read(fuse_global(q, u)), Tensor(rng.uniform(-1, 1, (4, 4, 3)))

    case("fuse_global", b_fuse_global)

    def b_cross_entropy(rng):
        return lambda x: cross_entropy(x, 1), Tensor(rng.uniform(-1, 1, 5))

    case("cross_entropy", b_cross_entropy)

    return cases


def run_case(case: GradCase, trials: int = 3, seed: int = 0) -> float:
    """Worst grad_check error over ``trials`` freshly seeded inputs."""
    worst = 0.0
    for t in range(trials):
        rng = np.random.default_rng(np.random.SeedSequence((seed, t, 0xC0FFEE)))
        f, x = case.build(rng)
        worst = max(worst, grad_check(f, x))
    return worst


def tiny_model_config(num_classes: int = 3) -> ModelConfig:
    """Smallest full-featured model, sized for 16x16 inputs."""
    return ModelConfig(
        num_classes=num_classes,
        backbone=BackboneConfig(stages=2, channels=(4, 8)),
        mag=MultiStageGraphConfig(stage_pair=(-2, -1), dilation=1, kernel=3, neighbors=2),
        patches=PatchConfig(sizes=(3,), weights=(1.0,), stride=1),
        codebook_k=4,
        encode_dim=4,
    )


def model_case(seed: int = 0) -> tuple[dict[str, float], float]:
    """End-to-end finite-difference check of every parameter at 16x16.

    Returns (per-parameter max relative error, worst error).
    """
    cfg = tiny_model_config()
    model = Model.build(cfg, seed)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 16, 16)))
    image = Tensor(rng.uniform(0.0, 1.0, (16, 16, 3)))

    def loss_fn():
        return cross_entropy(model.forward(image), 1)

    errors = grad_check_params(loss_fn, model.params)
    return errors, max(errors.values())
