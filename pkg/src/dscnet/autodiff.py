"""Backward-pass driver and the central-finite-difference gradient checker.

The graph is define-by-run: ops in :mod:`dscnet.tensor` and
:mod:`dscnet.ops` attach backward closures as they execute, so the "tape"
is the tensor graph itself, rebuilt on every call.  This module adds the
pieces that operate on a finished graph: gradient collection for a set of
named leaves, and ``grad_check``, the numerical oracle used throughout the
test suite.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import DisconnectedTape, NonDeterministicFn
from .tensor import Tensor, no_grad, toposort

# -- discrete-choice recorder ---------------------------------------------------
#
# Ops with a hard selection (argmax kernel pick, max pooling) report their
# decision here when a recorder is active.  grad_check compares the decisions
# of perturbed forward passes against the base pass and skips coordinates
# whose perturbation flips a choice, where a central difference is meaningless.

_RECORDER: list | None = None


class record_choices:
    def __init__(self):
        self.values: list = []

    def __enter__(self):
        global _RECORDER
        self._outer = _RECORDER
        _RECORDER = self.values
        return self

    def __exit__(self, *exc):
        global _RECORDER
        _RECORDER = self._outer
        return False


def note_choice(value) -> None:
    if _RECORDER is not None:
        _RECORDER.append(value)


def same_choices(a: list, b: list) -> bool:
    if len(a) != len(b):
        return False
    for x, y in zip(a, b):
        if isinstance(x, np.ndarray) or isinstance(y, np.ndarray):
            if not (
                isinstance(x, np.ndarray)
                and isinstance(y, np.ndarray)
                and x.shape == y.shape
                and np.array_equal(x, y)
            ):
                return False
        elif x != y:
            return False
    return True


# -- gradient collection ----------------------------------------------------


def backward(loss: Tensor, leaves: Mapping[str, Tensor], strict: bool = False) -> dict[str, np.ndarray]:
    """Run reverse mode from ``loss`` and return one gradient per leaf.

    Leaves with no path to the loss get a zero gradient, or raise
    ``DisconnectedTape`` when ``strict`` is set.
    """
    reachable = {id(n) for n in toposort(loss)}
    if strict:
        for name, leaf in leaves.items():
            if id(leaf) not in reachable:
                raise DisconnectedTape(f"leaf {name!r} does not reach the loss")
    for leaf in leaves.values():
        leaf.grad = None
    loss.backward()
    return {
        name: (leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.data))
        for name, leaf in leaves.items()
    }


# -- finite-difference checking ----------------------------------------------


@dataclass
class ParamCheck:
    name: str
    size: int
    max_rel_err: float
    skipped: int


@dataclass
class GradCheckReport:
    eps: float
    tol: float
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((p.max_rel_err for p in self.params), default=0.0)

    @property
    def skipped(self) -> int:
        return sum(p.skipped for p in self.params)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def to_dict(self) -> dict:
        return {
            "eps": self.eps,
            "tol": self.tol,
            "passed": self.passed,
            "max_rel_err": self.max_rel_err,
            "skipped": self.skipped,
            "params": [
                {
                    "name": p.name,
                    "size": p.size,
                    "max_rel_err": p.max_rel_err,
                    "skipped": p.skipped,
                }
                for p in self.params
            ],
        }


def grad_check(
    fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-6,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``fn`` against central differences.

    ``fn`` must build a fresh graph on each call, close over the tensors in
    ``params``, and return a rank-0 tensor.  Each coordinate is perturbed in
    place by +/-eps; the relative error is |a-n| / max(1e-8, |a|, |n|).
    Coordinates whose perturbation flips a recorded discrete choice are
    skipped and counted.  Raises ``NonDeterministicFn`` if two unperturbed
    passes disagree.
    """
    with record_choices() as base_rec:
        loss = fn()
    base_val = float(loss.data)
    with no_grad(), record_choices() as again_rec:
        repeat = float(fn().data)
    if repeat != base_val or not same_choices(base_rec.values, again_rec.values):
        raise NonDeterministicFn("two forward passes of the checked function differ")

    analytic = backward(loss, params)

    report = GradCheckReport(eps=eps, tol=tol)
    for name, p in params.items():
        flat = p.data.flat
        ana_flat = analytic[name].reshape(-1)
        worst = 0.0
        skipped = 0
        for i in range(p.data.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad(), record_choices() as rec_p:
                f_plus = float(fn().data)
            flat[i] = orig - eps
            with no_grad(), record_choices() as rec_m:
                f_minus = float(fn().data)
            flat[i] = orig
            if not (
                same_choices(rec_p.values, base_rec.values)
                and same_choices(rec_m.values, base_rec.values)
            ):
                skipped += 1
                continue
            numeric = (f_plus - f_minus) / (2.0 * eps)
            ana = float(ana_flat[i])
            rel = abs(ana - numeric) / max(1e-8, abs(ana), abs(numeric))
            if rel > worst:
                worst = rel
        report.params.append(ParamCheck(name, p.data.size, worst, skipped))
    return report
