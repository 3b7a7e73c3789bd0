"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor, default_dtype, discrete_tape, no_grad


def finite_diff_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-4,
    freeze_discrete: bool = True,
    max_coords: int | None = None,
    seed: int = 0,
    pick: str = "random",
) -> float:
    """Max relative error between backprop and central differences.

    ``f(*inputs)`` must return a scalar. Inputs are promoted to float64 in
    place for the duration of the check (parameters captured by ``f`` must
    already be float64). Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``.

    With ``freeze_discrete`` the sort permutations and orientation bins of
    the unperturbed evaluation are replayed for every perturbed one, so the
    numeric derivative is taken on the same smooth piece that the analytic
    gradient differentiates. ``max_coords`` limits the check to that many
    coordinates per input, drawn at random (``pick="random"``) or taken
    where the analytic gradient is largest (``pick="largest"``).
    """
    saved = [(t.data, t.requires_grad, t.grad) for t in inputs]
    try:
        for t in inputs:
            t.data = np.array(t.data, dtype=np.float64)
            t.requires_grad = True
            t.grad = None

        tape: list = []
        if freeze_discrete:
            with discrete_tape("record", tape):
                out = f(*inputs)
        else:
            out = f(*inputs)
        if out.data.size != 1:
            raise ValueError(f"finite_diff_check needs a scalar function, got shape {out.shape}")
        out.backward()
        analytic = [np.zeros_like(t.data) if t.grad is None else np.array(t.grad) for t in inputs]

        def evaluate() -> float:
            with no_grad():
                if freeze_discrete:
                    with discrete_tape("replay", tape):
                        return float(f(*inputs).data)
                return float(f(*inputs).data)

        rng = np.random.default_rng(seed)
        worst = 0.0
        for t, a in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            a_flat = a.reshape(-1)
            if max_coords is not None and flat.size > max_coords:
                if pick == "largest":
                    coords = np.sort(np.argsort(-np.abs(a_flat), kind="stable")[:max_coords])
                else:
                    coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = evaluate()
                flat[i] = orig - eps
                f_minus = evaluate()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                ai = a_flat[i]
                err = abs(ai - numeric) / max(abs(ai), abs(numeric), 1e-8)
                worst = max(worst, err)
        return worst
    finally:
        for t, (data, rg, grad) in zip(inputs, saved):
            t.data, t.requires_grad, t.grad = data, rg, grad


# ---------------------------------------------------------------------------
# Suite over the model's differentiable building blocks
# ---------------------------------------------------------------------------

SUITE_TOLERANCE = 1e-4
SUITE_GROUPS = ("hog", "loss", "blocks", "model")


@dataclass
class CheckResult:
    target: str
    group: str
    error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < SUITE_TOLERANCE


def _randomize(module, rng: np.random.Generator, std: float = 0.3) -> None:
    """Replace init weights by wider random ones (float64).

    At init scale many gradients sit near round-off, and the zero output head
    would hide everything upstream of it; wider weights make every path
    carry signal without saturating the softmax.
    """
    for name, p in module.named_parameters():
        if name.endswith("gamma"):
            p.data = 1.0 + std * rng.standard_normal(p.shape)
        else:
            p.data = std * rng.standard_normal(p.shape)
        p.grad = None


def _weighted_sum(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    w = Tensor(rng.standard_normal(out.shape))
    return lambda y: T.sum_(y * w)


def _check_module(module, x: Tensor, rng, param_coords: int | None) -> float:
    with no_grad():
        probe = _weighted_sum(module(x), rng)
    err_x = finite_diff_check(lambda t: probe(module(t)), [x])
    params = module.parameters()
    err_p = finite_diff_check(lambda *_: probe(module(x)), params, max_coords=param_coords)
    return max(err_x, err_p)


# Below this gradient size a central difference at eps 1e-4 on an O(1)
# float64 function is dominated by round-off, so it verifies nothing.
MODEL_SIGNAL_FLOOR = 1e-6


def _check_model(model, x: Tensor, rng, per_tensor: int = 2) -> float:
    """All input coordinates, plus the largest-gradient coordinates of every
    parameter tensor whose gradient clears MODEL_SIGNAL_FLOOR."""
    with no_grad():
        probe = _weighted_sum(model(x), rng)
    err_x = finite_diff_check(lambda t: probe(model(t)), [x])
    model.zero_grad()
    probe(model(x)).backward()
    live = [p for p in model.parameters() if p.grad is not None and np.abs(p.grad).max() >= MODEL_SIGNAL_FLOOR]
    model.zero_grad()
    err_p = finite_diff_check(lambda *_: probe(model(x)), live, max_coords=per_tensor, pick="largest")
    return max(err_x, err_p)


def _suite_targets():
    from .blocks import DIFF, HOGTB, DHOGSA, LDRConv
    from .config import preset
    from .hog import soft_cell_histogram
    from .losses import hog_loss, pearson_loss
    from .model import build_model

    cfg = preset("tiny")

    def histogram():
        rng = np.random.default_rng(0)
        x = Tensor(rng.random((16, 16)))
        with no_grad():
            probe = _weighted_sum(soft_cell_histogram(x), rng)
        return finite_diff_check(lambda t: probe(soft_cell_histogram(t)), [x])

    def hog_loss_check():
        rng = np.random.default_rng(0)
        pred, gt = Tensor(rng.random((3, 16, 16))), Tensor(rng.random((3, 16, 16)))
        return finite_diff_check(lambda p: hog_loss(p, gt), [pred])

    def pearson_check():
        rng = np.random.default_rng(1)
        pred, gt = Tensor(rng.random((1, 3, 16, 16))), Tensor(rng.random((1, 3, 16, 16)))
        return finite_diff_check(lambda p: pearson_loss(p, gt), [pred])

    def block(factory, c=4, size=8):
        def run():
            rng = np.random.default_rng(2)
            module = factory(rng, c)
            _randomize(module, rng)
            x = Tensor(rng.standard_normal((1, c, size, size)))
            return _check_module(module, x, rng, param_coords=None)

        return run

    def model():
        rng = np.random.default_rng(3)
        m = build_model(cfg, seed=0)
        # fourteen stacked blocks: a smaller scale keeps activations O(1)
        _randomize(m, rng, std=0.1)
        x = Tensor(rng.random((1, 3, 16, 16)))
        return _check_model(m, x, rng)

    return [
        ("soft_cell_histogram", "hog", histogram),
        ("hog_loss", "loss", hog_loss_check),
        ("pearson_loss", "loss", pearson_check),
        ("ldrconv_forward", "blocks", block(lambda r, c: LDRConv(r, c, cfg.ldr_patch, cfg.n_bin))),
        ("dhogsa_forward", "blocks", block(lambda r, c: DHOGSA(r, c, 2, cfg))),
        ("diff_forward", "blocks", block(lambda r, c: DIFF(r, c, cfg.ffn_expansion))),
        ("hogtb", "blocks", block(lambda r, c: HOGTB(r, c, 2, cfg))),
        ("tiny_model_3x16x16", "model", model),
    ]


def run_suite(group: str = "all", report: Callable[[CheckResult], None] | None = None) -> list[CheckResult]:
    """64-bit finite-difference checks (eps 1e-4) of the listed targets."""
    if group != "all" and group not in SUITE_GROUPS:
        raise ValueError(f"unknown grad-check group {group!r}; choose all or one of {SUITE_GROUPS}")
    results = []
    with default_dtype(np.float64):
        for name, grp, fn in _suite_targets():
            if group not in ("all", grp):
                continue
            start = time.perf_counter()
            res = CheckResult(name, grp, float(fn()), time.perf_counter() - start)
            results.append(res)
            if report:
                report(res)
    return results
