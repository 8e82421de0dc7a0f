"""Finite-difference verification of every hand-written backward pass.

Each check draws double-precision inputs in [-1, 1], contracts the op's
output with a fixed random cotangent ``R`` so the objective is the scalar
``sum(out * R)``, and compares the analytic gradient of every input against
central differences with step 1e-6. The error for one element is
``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``; a check reports
the maximum over all its elements.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .model import DrnConfig, ParamStore, build_model, init_params, rd_unit_backward, \
    rd_unit_forward, rdg_backward, rdg_forward

STEP = 1e-6
PRIMITIVE_TOL = 1e-5
MODEL_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    n_elements: int

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)


@dataclass
class GradCheckReport:
    seed: int
    results: list[CheckResult]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def table(self) -> str:
        rows = [f"{'check':<16} {'elements':>8} {'max rel err':>12} {'tol':>8}  result"]
        for r in self.results:
            rows.append(f"{r.name:<16} {r.n_elements:>8d} {r.max_rel_error:>12.3e} "
                        f"{r.tolerance:>8.0e}  {'PASS' if r.passed else 'FAIL'}")
        return "\n".join(rows)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def numeric_gradient(f: Callable[[], np.ndarray], x: np.ndarray, cotangent: np.ndarray,
                     step: float = STEP) -> np.ndarray:
    """Central differences of ``sum(f() * cotangent)`` w.r.t. ``x``, perturbed in place."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        plus = np.sum(f() * cotangent)
        flat[i] = old - step
        minus = np.sum(f() * cotangent)
        flat[i] = old
        grad.reshape(-1)[i] = (plus - minus) / (2 * step)
    return grad


def _compare(name, inputs, forward, analytic, rng, tol, perturb):
    cotangent = rng.uniform(-1, 1, forward().shape)
    grads = analytic(cotangent)
    if perturb is not None and perturb[0] == name:
        _, key, index = perturb
        grads[key] = grads[key].copy()
        grads[key].reshape(-1)[index] *= 1.1
    worst, count = 0.0, 0
    for key, x in inputs.items():
        numeric = numeric_gradient(forward, x, cotangent)
        worst = max(worst, float(relative_error(grads[key], numeric).max()))
        count += x.size
    return CheckResult(name, worst, tol, count)


def _u(rng, *shape):
    return rng.uniform(-1, 1, shape)


def _check_conv(rng, k, perturb):
    x, w, b = _u(rng, 1, 2, 4, 4), _u(rng, 3, 2, k, k), _u(rng, 3)
    spec = T.ConvSpec.for_kernel(k)

    def analytic(cot):
        gx, gw, gb = T.conv2d_backward(cot, x, w, spec)
        return {"x": gx, "weight": gw, "bias": gb}

    return _compare(f"conv{k}x{k}", {"x": x, "weight": w, "bias": b},
                    lambda: T.conv2d_forward(x, w, b, spec), analytic, rng, PRIMITIVE_TOL, perturb)


def _check_elu(rng, perturb):
    x, alpha = _u(rng, 2, 3, 4, 4), 0.2
    return _compare("elu", {"x": x}, lambda: T.elu_forward(x, alpha),
                    lambda cot: {"x": T.elu_backward(cot, x, alpha)}, rng, PRIMITIVE_TOL, perturb)


def _check_pixel_shuffle(rng, perturb):
    x = _u(rng, 1, 8, 3, 3)
    return _compare("pixel-shuffle", {"x": x}, lambda: T.pixel_shuffle(x, 2),
                    lambda cot: {"x": T.pixel_shuffle_backward(cot, 2)}, rng, PRIMITIVE_TOL, perturb)


def _check_pixel_unshuffle(rng, perturb):
    y = _u(rng, 1, 2, 6, 6)
    return _compare("pixel-unshuffle", {"x": y}, lambda: T.pixel_unshuffle(y, 3),
                    lambda cot: {"x": T.pixel_unshuffle_backward(cot, 3)}, rng, PRIMITIVE_TOL, perturb)


def _check_concat(rng, perturb):
    a, b = _u(rng, 1, 3, 4, 4), _u(rng, 1, 2, 4, 4)

    def analytic(cot):
        ga, gb = T.concat_backward(cot, a.shape[1])
        return {"a": ga, "b": gb}

    return _compare("concat", {"a": a, "b": b}, lambda: T.concat_channels(a, b),
                    analytic, rng, PRIMITIVE_TOL, perturb)


def _check_split(rng, perturb):
    x = _u(rng, 1, 5, 3, 3)
    w1, w2 = _u(rng, 1, 3, 3, 3), _u(rng, 1, 2, 3, 3)

    # scalarise both halves with independent weights before the cotangent
    def forward():
        first, second = T.split_channels(x, 3)
        return np.array([np.sum(first * w1) + np.sum(second * w2)])

    def analytic(cot):
        return {"x": T.split_backward(w1 * cot[0], w2 * cot[0])}

    return _compare("split", {"x": x}, forward, analytic, rng, PRIMITIVE_TOL, perturb)


def _check_add(rng, perturb):
    a, b = _u(rng, 1, 2, 3, 3), _u(rng, 1, 2, 3, 3)

    def analytic(cot):
        ga, gb = T.add_backward(cot)
        return {"a": ga, "b": gb}

    return _compare("add", {"a": a, "b": b}, lambda: T.add(a, b), analytic, rng, PRIMITIVE_TOL, perturb)


def _random_store(cfg: DrnConfig, rng) -> ParamStore:
    model = build_model(cfg, np.float64)
    init_params(model, int(rng.integers(2 ** 31)))
    store = model.params
    for name, p in store.params.items():
        if name.endswith(".bias"):
            p[...] = rng.uniform(-0.1, 0.1, p.shape)
    return store


def _params_and_input(store, x, prefix=""):
    inputs = {"x": x}
    inputs.update({n: p for n, p in store.params.items() if n.startswith(prefix)})
    return inputs


def _grads_and_input(store, gx, prefix=""):
    grads = {"x": gx}
    grads.update({n: store.grads[n] for n in store.params if n.startswith(prefix)})
    return grads


def _check_rd_unit(rng, perturb):
    # D_i = 4, d = 2, bottleneck width 4
    cfg = DrnConfig(scale=2, base_channels=4, groups=1, blocks_per_group=1,
                    rd_units_per_block=1, distill_width=2)
    store = _random_store(cfg, rng)
    x = _u(rng, 1, 4, 4, 4)
    prefix = "g1.b1.u1"

    def analytic(cot):
        store.zero_grad()
        _, cache = rd_unit_forward(x, store, prefix, cfg.elu_alpha)
        gx = rd_unit_backward(cot, cache, store, prefix, cfg.elu_alpha)
        return _grads_and_input(store, gx, prefix)

    return _compare("rd-unit", _params_and_input(store, x, prefix),
                    lambda: rd_unit_forward(x, store, prefix, cfg.elu_alpha)[0],
                    analytic, rng, PRIMITIVE_TOL, perturb)


def _check_rdg(rng, perturb):
    cfg = DrnConfig(scale=2, base_channels=8, groups=1, blocks_per_group=2,
                    rd_units_per_block=1, distill_width=2)
    store = _random_store(cfg, rng)
    x = _u(rng, 1, 8, 4, 4)

    def analytic(cot):
        store.zero_grad()
        _, cache = rdg_forward(x, store, 1, cfg)
        gx = rdg_backward(cot, cache, store, 1, cfg)
        return _grads_and_input(store, gx, "g1.")

    return _compare("rdg", _params_and_input(store, x, "g1."),
                    lambda: rdg_forward(x, store, 1, cfg)[0], analytic, rng, MODEL_TOL, perturb)


def tiny_model_config(**overrides) -> DrnConfig:
    base = dict(scale=2, base_channels=8, groups=1, blocks_per_group=1,
                rd_units_per_block=1, distill_width=2)
    base.update(overrides)
    return DrnConfig(**base)


def _check_full_model(rng, perturb, name="full-model", **overrides):
    cfg = tiny_model_config(**overrides)
    model = build_model(cfg, np.float64)
    init_params(model, int(rng.integers(2 ** 31)))
    for pname, p in model.params.params.items():
        if pname.endswith(".bias"):
            p[...] = rng.uniform(-0.1, 0.1, p.shape)
    x = rng.uniform(0, 1, (1, 3, 6, 6))

    def analytic(cot):
        model.params.zero_grad()
        model.forward(x)
        gx = model.backward(cot)
        return _grads_and_input(model.params, gx)

    return _compare(name, _params_and_input(model.params, x), lambda: model(x),
                    analytic, rng, MODEL_TOL, perturb)


def grad_check_suite(seed: int = 0, perturb: tuple[str, str, int] | None = None) -> GradCheckReport:
    """Run every check. ``perturb=(check, tensor, index)`` scales one analytic
    gradient element by 1.1 before comparison, to prove the harness can fail."""
    rng = np.random.default_rng(seed)
    results = [
        _check_conv(rng, 3, perturb),
        _check_conv(rng, 1, perturb),
        _check_elu(rng, perturb),
        _check_pixel_shuffle(rng, perturb),
        _check_pixel_unshuffle(rng, perturb),
        _check_concat(rng, perturb),
        _check_split(rng, perturb),
        _check_add(rng, perturb),
        _check_rd_unit(rng, perturb),
        _check_rdg(rng, perturb),
        _check_full_model(rng, perturb),
        _check_full_model(rng, perturb, name="ablated-model", ablate_rdb=True),
    ]
    return GradCheckReport(seed, results)
