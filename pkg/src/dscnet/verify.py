"""Gradient-check suites for the CLI and the acceptance tests.

Every differentiable primitive, the kernel-selection module with singleton
banks, the test-time-training module (gradients through the unrolled inner
loop), and a small two-level network are compared against central finite
differences.  Inputs are drawn from the deterministic generator and nudged
away from activation kinks so the checks are reproducible.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import ops
from .autodiff import GradCheckReport, grad_check
from .dataio import Prng
from .dmsk import dmsk_forward, init_dmsk
from .tensor import Tensor, concat, matmul, split
from .traineval import seg_loss
from .ttt import init_ttt, ttt_layer, ttt_module_forward, ttt_step
from .unet import build_unet, unet_forward

DEFAULT_EPS = 1e-6
DEFAULT_TOL = 1e-4


def _arr(rng: Prng, *shape, scale=1.0, kink_gap=0.0):
    a = rng.normal_array(int(np.prod(shape))).reshape(shape) * scale
    if kink_gap:
        a += kink_gap * np.sign(a)
    return a


def _param(rng: Prng, *shape, scale=1.0, kink_gap=0.0) -> Tensor:
    return Tensor(_arr(rng, *shape, scale=scale, kink_gap=kink_gap), requires_grad=True)


def _projected(out: Tensor, rng: Prng) -> Tensor:
    """Random-projection scalar loss; keeps per-coordinate gradients O(1)."""
    r = Tensor(_arr(rng, *out.data.shape))
    return (out * r).sum()


def op_check_cases() -> list[tuple[str, Callable[[], Tensor], dict[str, Tensor]]]:
    """(name, loss-builder, checked leaves) for every registered primitive,
    each on three random shapes."""
    cases = []

    def add(name, builder, seed):
        rng = Prng(seed)
        fn, params = builder(rng)
        cases.append((name, fn, params))

    def conv_case(c_in, c_out, h, w, k, dilation, groups):
        def build(rng):
            x = _param(rng, c_in, h, w)
            wt = _param(rng, c_out, c_in // groups, k, k, scale=0.7)
            b = _param(rng, c_out, scale=0.3)
            proj = Prng(rng.u64())

            def fn():
                p = ops.Conv2dParams(wt, b, dilation=dilation, groups=groups)
                return _projected(ops.conv2d(x, p), Prng(proj.seed))

            return fn, {"x": x, "weight": wt, "bias": b}

        return build

    for i, (ci, co, h, w, k, d, g) in enumerate(
        [(3, 4, 5, 5, 3, 1, 1), (2, 2, 6, 4, 3, 2, 2), (4, 6, 4, 4, 1, 1, 2),
         (1, 3, 7, 5, 5, 1, 1), (4, 4, 5, 5, 3, 2, 4)]
    ):
        add(f"conv2d[{ci}->{co} k{k} d{d} g{g}]", conv_case(ci, co, h, w, k, d, g), 100 + i)

    def unary_case(op, shape, kink_gap=0.0):
        def build(rng):
            x = _param(rng, *shape, kink_gap=kink_gap)
            proj = Prng(rng.u64())

            def fn():
                return _projected(op(x), Prng(proj.seed))

            return fn, {"x": x}

        return build

    for i, shape in enumerate([(3, 4), (2, 3, 3), (6,)]):
        add(f"relu{shape}", unary_case(ops.relu, shape, kink_gap=0.25), 200 + i)
        add(f"leaky_relu{shape}", unary_case(ops.leaky_relu, shape, kink_gap=0.25), 210 + i)
        add(f"sigmoid{shape}", unary_case(ops.sigmoid, shape), 220 + i)
        add(f"silu{shape}", unary_case(ops.silu, shape), 230 + i)

    for i, shape in enumerate([(3, 4, 5), (2, 3, 3), (5, 2, 2)]):
        add(f"gap{shape}", unary_case(ops.gap, shape), 240 + i)
        add(f"channel_pool_avg{shape}", unary_case(lambda x: ops.channel_pool(x, "avg"), shape), 250 + i)
        add(f"channel_pool_max{shape}", unary_case(lambda x: ops.channel_pool(x, "max"), shape), 260 + i)

    for i, n in enumerate([2, 4, 7]):
        add(f"softmax[{n}]", unary_case(ops.softmax, (n,)), 270 + i)
    for i, shape in enumerate([(2, 3, 3), (4, 2, 2), (3, 1, 5)]):
        add(f"log_softmax{shape}", unary_case(ops.log_softmax_channels, shape), 280 + i)

    def norm_case(op, shape):
        def build(rng):
            x = _param(rng, *shape)
            c = shape[0] if op is ops.instance_norm else shape[-1]
            gamma = _param(rng, c, scale=0.5)
            beta = _param(rng, c, scale=0.5)
            proj = Prng(rng.u64())

            def fn():
                return _projected(op(x, ops.NormParams(gamma, beta)), Prng(proj.seed))

            return fn, {"x": x, "gamma": gamma, "beta": beta}

        return build

    for i, shape in enumerate([(2, 3, 3), (3, 2, 4), (1, 4, 4)]):
        add(f"instance_norm{shape}", norm_case(ops.instance_norm, shape), 300 + i)
    # Normalized axes of >= 3: with 2 elements the normalized values are the
    # constants +/-1 and the input gradient is epsilon-scale, below what a
    # central difference can resolve.
    for i, shape in enumerate([(4, 3), (2, 3, 5), (6, 4)]):
        add(f"layer_norm{shape}", norm_case(ops.layer_norm, shape), 310 + i)

    def linear_case(shape, n_out):
        def build(rng):
            x = _param(rng, *shape)
            wt = _param(rng, n_out, shape[-1], scale=0.7)
            b = _param(rng, n_out, scale=0.3)
            proj = Prng(rng.u64())

            def fn():
                return _projected(ops.linear(x, wt, b), Prng(proj.seed))

            return fn, {"x": x, "weight": wt, "bias": b}

        return build

    for i, (shape, n_out) in enumerate([((5, 3), 4), ((3,), 2), ((2, 2, 4), 3)]):
        add(f"linear{shape}->{n_out}", linear_case(shape, n_out), 320 + i)

    for i, shape in enumerate([(2, 4, 4), (3, 2, 6), (1, 8, 2)]):
        add(f"maxpool2{shape}", unary_case(ops.maxpool2, shape), 330 + i)
        add(f"upsample{shape}", unary_case(ops.upsample_nearest2, shape), 340 + i)

    def matmul_case(m, k, n):
        def build(rng):
            a = _param(rng, m, k)
            b = _param(rng, k, n)
            proj = Prng(rng.u64())

            def fn():
                return _projected(matmul(a, b), Prng(proj.seed))

            return fn, {"a": a, "b": b}

        return build

    for i, (m, k, n) in enumerate([(3, 4, 2), (1, 5, 5), (4, 2, 3)]):
        add(f"matmul[{m}x{k}x{n}]", matmul_case(m, k, n), 350 + i)

    def concat_split_case(shape, axis):
        def build(rng):
            a = _param(rng, *shape)
            b = _param(rng, *shape)
            proj = Prng(rng.u64())

            def fn():
                joined = concat([a, b], axis=axis)
                left, right = split(joined, axis, [shape[axis], shape[axis]])
                return _projected(left * 2.0 + right, Prng(proj.seed))

            return fn, {"a": a, "b": b}

        return build

    for i, (shape, axis) in enumerate([((2, 3), 0), ((2, 3), 1), ((2, 2, 2), 2)]):
        add(f"concat_split{shape}ax{axis}", concat_split_case(shape, axis), 360 + i)

    def arithmetic_case(rows, cols):
        # One expression covering the scalar graph ops the modules lean on:
        # broadcastable mul/div, pow, exp, log, slicing, reductions, reshape.
        def build(rng):
            a = _param(rng, rows, cols, kink_gap=0.5)
            b = _param(rng, cols, kink_gap=0.5)
            proj = Prng(rng.u64())

            def fn():
                mixed = (a * b - a / (b * b + 2.0)) ** 2
                bent = (mixed + 1.0).log() + (-mixed).exp()
                row = bent[0].reshape(1, cols).transpose()
                return _projected(bent, Prng(proj.seed)) + row.sum() + bent.mean(axis=1).sum()

            return fn, {"a": a, "b": b}

        return build

    for i, (rows, cols) in enumerate([(2, 3), (4, 2), (3, 5)]):
        add(f"arithmetic[{rows}x{cols}]", arithmetic_case(rows, cols), 370 + i)

    return cases


def gradcheck_ops(tol: float = DEFAULT_TOL, eps: float = DEFAULT_EPS) -> dict[str, GradCheckReport]:
    return {name: grad_check(fn, params, eps=eps, tol=tol) for name, fn, params in op_check_cases()}


def gradcheck_dmsk(tol: float = DEFAULT_TOL, eps: float = DEFAULT_EPS) -> dict[str, GradCheckReport]:
    """Full module with singleton banks, where the hard pick cannot flip and
    the selector path is inert."""
    rng = Prng(7001)
    params = init_dmsk(4, [(3, 1)], [(5, 2)], rng, scale=0.8)
    x = _param(rng, 4, 6, 6)
    proj_seed = rng.u64()
    leaves = {"x": x}
    leaves.update(dict(params.named_parameters()))

    def fn():
        return _projected(dmsk_forward(x, params, "train"), Prng(proj_seed))

    return {"dmsk[4,6,6] singleton banks": grad_check(fn, leaves, eps=eps, tol=tol)}


def gradcheck_ttt(tol: float = DEFAULT_TOL, eps: float = DEFAULT_EPS) -> dict[str, GradCheckReport]:
    reports = {}

    rng = Prng(7101)
    w = _param(rng, 3, 3, scale=0.5)
    k = _param(rng, 3, scale=0.6)
    v = _param(rng, 3, scale=0.6)
    proj_seed = rng.u64()

    def step_fn():
        w_next, loss_before = ttt_step(w, k, v, eta=0.3)
        return _projected(w_next, Prng(proj_seed)) + loss_before

    reports["ttt_step[3]"] = grad_check(step_fn, {"w": w, "k": k, "v": v}, eps=eps, tol=tol)

    rng = Prng(7102)
    params = init_ttt(4, rng, eta=0.05, scale=0.8)
    tokens = _param(rng, 4, 4)  # T=4, C=4
    proj2 = rng.u64()
    leaves = {"tokens": tokens}
    leaves.update(dict(params.named_parameters()))

    def layer_fn():
        z, _ = ttt_layer(tokens, params)
        return _projected(z, Prng(proj2))

    reports["ttt_layer[T4,C4]"] = grad_check(layer_fn, leaves, eps=eps, tol=tol)

    rng = Prng(7103)
    mparams = init_ttt(4, rng, eta=0.05, scale=0.8)
    x = _param(rng, 4, 2, 2)  # T = 4 tokens
    proj3 = rng.u64()
    mleaves = {"x": x}
    mleaves.update(dict(mparams.named_parameters()))

    def module_fn():
        return _projected(ttt_module_forward(x, mparams, "train"), Prng(proj3))

    reports["ttt_module[4,2,2]"] = grad_check(module_fn, mleaves, eps=eps, tol=tol)
    return reports


def gradcheck_unet(tol: float = DEFAULT_TOL, eps: float = DEFAULT_EPS) -> dict[str, GradCheckReport]:
    """Two-level network with the full dynamic block on its skip, singleton
    banks, checked through the segmentation loss."""
    rng = Prng(7200)
    params = build_unet(
        levels=2,
        channels=[4, 8],
        in_channels=1,
        num_classes=2,
        skip_mode="dsc",
        dsc_placement="all",
        bank_small=[(3, 1)],
        bank_large=[(5, 2)],
        eta=0.05,
        rng=rng,
    )
    x = Tensor(_arr(rng, 1, 16, 16, scale=0.8))
    mask = Tensor((_arr(rng, 16, 16) > 0).astype(np.float64))
    leaves = params.named_parameters()

    def fn():
        return seg_loss(unet_forward(x, params, "train"), mask)

    return {"unet[2-level dsc 16x16]": grad_check(fn, leaves, eps=eps, tol=tol)}


SUITES = {
    "ops": gradcheck_ops,
    "dmsk": gradcheck_dmsk,
    "ttt": gradcheck_ttt,
    "unet": gradcheck_unet,
}


def run_suite(module: str, tol: float = DEFAULT_TOL, eps: float = DEFAULT_EPS) -> dict:
    """Run one suite (or all) and return a JSON-ready summary."""
    names = list(SUITES) if module == "all" else [module]
    results = {}
    for name in names:
        if name not in SUITES:
            raise KeyError(f"unknown gradcheck module {name!r}")
        results.update(SUITES[name](tol=tol, eps=eps))
    return {
        "tol": tol,
        "eps": eps,
        "passed": all(r.passed for r in results.values()),
        "checks": {name: r.to_dict() for name, r in results.items()},
    }
