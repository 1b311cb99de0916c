"""Self-checks run by ``mvc3d verify``."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops, oracles
from .model import ModelConfig, build, shape_plan
from .tensor import Tensor, finite_diff_check, reduce_sum
from .training import early_stop, loss_total, oversample


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<24} {self.seconds * 1e3:9.1f} ms  {self.detail}"


def check_layer_table(pool_view_rounding: str = "floor") -> tuple[bool, str]:
    for n in (12, 8, 16, 20, 36):
        plan = shape_plan(ModelConfig(n_views=n, n_classes=40, pool_view_rounding=pool_view_rounding))
        miss = oracles.first_mismatch(plan, oracles.layer_table_rows(n, 40))
        if miss:
            return False, f"N={n}: {miss}"
    return True, "N in {8, 12, 16, 20, 36} match"


def check_conv_oracle(cases: int = 100, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        c_in, c_out = rng.integers(1, 5, size=2)
        V, H, W = rng.integers(1, 7, size=3)
        kv = int(rng.choice([1, 3, 5]))
        x = rng.normal(size=(c_in, V, H, W))
        w = rng.normal(size=(c_out, c_in, kv, 3, 3))
        b = rng.normal(size=c_out)
        fast = ops.conv3d(Tensor(x), Tensor(w), Tensor(b)).data
        worst = max(worst, float(np.abs(fast - oracles.conv3d_direct(x, w, b)).max()))
    return worst < 1e-10, f"max abs diff {worst:.2e} over {cases} cases"


def _op_grad_errors(seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 2, 3, 4, 4))
    w3 = rng.normal(size=(3, 2, 3, 3, 3))
    w2 = rng.normal(size=(3, 3, 2, 3, 3))
    up = rng.normal(size=(2, 3, 3, 4, 4))
    upool = rng.normal(size=(2, 2, 1, 2, 2))
    fc_w, fc_b = rng.normal(size=(5, 4)), rng.normal(size=4)
    logits, labels = rng.normal(size=(3, 4)), np.array([0, 3, 1])

    def weighted(t, g):
        return reduce_sum(t * Tensor(g))

    return {
        "conv3d/input": finite_diff_check(lambda t: weighted(ops.conv3d(t, Tensor(w3)), up), Tensor(x)),
        "conv3d/weight": finite_diff_check(lambda t: weighted(ops.conv3d(Tensor(x), t), up), Tensor(w3)),
        "conv2d_ind/weight": finite_diff_check(lambda t: weighted(ops.conv2d_independent(Tensor(x), t), up), Tensor(w2)),
        "maxpool3d": finite_diff_check(lambda t: weighted(ops.maxpool3d(t)[0], upool), Tensor(x)),
        "fully_connected": finite_diff_check(
            lambda t: weighted(ops.fully_connected(Tensor(rng_fixed(3, 5)), t, Tensor(fc_b)), np.ones((3, 4))),
            Tensor(fc_w),
        ),
        "softmax": finite_diff_check(lambda t: weighted(ops.softmax(t), np.arange(12.0).reshape(3, 4)), Tensor(logits)),
        "loss_total": finite_diff_check(lambda t: loss_total(t, labels, [], 0.0), Tensor(logits)),
    }


def rng_fixed(*shape) -> np.ndarray:
    return np.random.default_rng(123).normal(size=shape)


def toy_model_config(conv_pattern: str = "joint3d", seed: int = 0) -> ModelConfig:
    """Two-view 8x8 network small enough for exhaustive finite differences."""
    return ModelConfig(
        n_views=2,
        n_classes=3,
        channels=(3,) * 8,
        fc_dims=(4, 4),
        image_size=8,
        init_std=0.6,
        dropout_rate=0.0,
        conv_pattern=conv_pattern,
        seed=seed,
    )


def model_grad_errors(config: ModelConfig | None = None, lam: float = 1.0, seed: int = 1, max_coords: int | None = None):
    """Per-parameter finite-difference errors of the full loss on a toy batch.

    The default ``lam`` is large on purpose: border taps of the deepest convs
    only see zero padding on a 1x1 map, so their whole gradient is the weight
    decay term, and at 5e-4 it sits below central-difference round-off.
    """
    config = config or toy_model_config()
    model = build(config)
    rng = np.random.default_rng(seed)
    # zero biases leave most toy relus dead; positive ones keep every path live
    for name, param in model.params.items():
        if name.endswith(".bias"):
            param.data[...] = rng.uniform(0.05, 0.3, size=param.shape)
    batch = rng.uniform(0, 1, size=(2, 3, config.n_views, config.image_size, config.image_size))
    labels = np.array([0, 2])
    errors = {}
    for name, param in model.params.items():

        def f(t, name=name, param=param):
            model.params[name] = t
            try:
                return loss_total(model.forward(batch), labels, model.regularized(), lam)
            finally:
                model.params[name] = param

        coords = None
        if max_coords is not None and param.size > max_coords:
            coords = rng.choice(param.size, size=max_coords, replace=False)
        errors[name] = finite_diff_check(f, param, eps=1e-5, coords=coords)
    return errors


def check_gradients() -> tuple[bool, str]:
    errs = _op_grad_errors()
    errs.update({f"model/{k}": v for k, v in model_grad_errors(max_coords=40).items()})
    worst = max(errs, key=errs.get)
    return errs[worst] < 1e-4, f"worst {worst} rel err {errs[worst]:.2e}"


def check_v1_equivalence(seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 4, 5, 5))
    w = rng.normal(size=(4, 3, 1, 3, 3))
    b = rng.normal(size=4)
    a = ops.conv3d(Tensor(x), Tensor(w), Tensor(b)).data
    tied = np.repeat(w[:, :, 0][None], 4, axis=0)
    c = ops.conv2d_independent(Tensor(x), Tensor(tied), Tensor(np.tile(b, (4, 1)))).data
    diff = float(np.abs(a - c).max())
    return diff <= 1e-12, f"max abs diff {diff:.1e}"


def check_early_stop() -> tuple[bool, str]:
    ok = (
        not early_stop([1.0, 0.5, 0.25], 1e-3)
        and early_stop([2.0] * 6, 1e-3)
        and early_stop([1.0, 0.999, 0.9985, 0.998, 0.9978, 0.9976, 0.9975], 1e-3)
    )
    return ok, "plateau / improving / slow-drift sequences"


def check_oversample() -> tuple[bool, str]:
    items = [f"a{i}" for i in range(3)] + [f"b{i}" for i in range(7)]
    labels = ["a"] * 3 + ["b"] * 7
    out, out_labels = oversample(items, labels, 10, seed=0)
    counts = {c: out_labels.count(c) for c in "ab"}
    ok = counts == {"a": 10, "b": 10} and all(i in out for i in items)
    return ok, f"counts {counts}"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "layer-table": check_layer_table,
    "conv3d-oracle": check_conv_oracle,
    "gradient-check": check_gradients,
    "v1-equals-2d": check_v1_equivalence,
    "early-stop": check_early_stop,
    "oversample": check_oversample,
}


def run_checks(overrides: dict[str, Callable] | None = None) -> list[CheckResult]:
    checks = dict(CHECKS, **(overrides or {}))
    results = []
    for name, fn in checks.items():
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(ok), detail, time.perf_counter() - t0))
    return results
