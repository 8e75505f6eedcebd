"""Self-checks: group axioms, kernel transforms, equivariance, gradients, parameter scaling.

Each suite returns a :class:`SuiteResult`; :func:`run_all` bundles them into a
report that the ``verify`` command writes as JSON.
"""
from __future__ import annotations

import itertools
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from . import layers as L
from .groups import (
    GroupSpec,
    cayley_table,
    compose,
    enumerate_elements,
    exact_subgroup,
    fiber_permutation,
    inverse,
    is_exact,
    act_on_image,
    act_on_gfeatures,
    transform_kernel,
)
from .model import ModelConfig, analytic_param_count, build

ALL_GROUPS = ("c2", "c4", "c8", "d2", "d4", "d8")


@dataclass
class SuiteResult:
    name: str
    passed: bool
    max_error: float = 0.0
    tolerance: float = 0.0
    seconds: float = 0.0
    details: dict = field(default_factory=dict)


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Max-norm error relative to the max-norm of the reference ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(float(np.abs(b).max(initial=0.0)), 1e-30)
    return float(np.abs(a - b).max(initial=0.0)) / scale


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# ---------------------------------------------------------------------------


@_timed
def group_axioms(spec: GroupSpec) -> SuiteResult:
    els = enumerate_elements(spec)
    e = els[0]
    failures = []
    for g, h, k in itertools.product(els, repeat=3):
        if compose(spec, compose(spec, g, h), k) != compose(spec, g, compose(spec, h, k)):
            failures.append(f"assoc {g} {h} {k}")
    for g in els:
        if compose(spec, e, g) != g or compose(spec, g, e) != g:
            failures.append(f"identity {g}")
        gi = inverse(spec, g)
        if compose(spec, gi, g) != e or compose(spec, g, gi) != e:
            failures.append(f"inverse {g}")
        if sum(compose(spec, h, g) == e for h in els) != 1:
            failures.append(f"inverse not unique for {g}")
    tab = cayley_table(spec).compose
    G = spec.order
    latin = all(sorted(row) == list(range(G)) for row in tab) and all(
        sorted(col) == list(range(G)) for col in tab.T
    )
    if not latin:
        failures.append("Cayley table is not a Latin square")
    for g, h in itertools.product(els, repeat=2):
        lhs = fiber_permutation(spec, g)[fiber_permutation(spec, h)]
        if not np.array_equal(lhs, fiber_permutation(spec, compose(spec, g, h))):
            failures.append(f"fiber homomorphism {g} {h}")
    return SuiteResult(f"group_axioms[{spec.name}]", not failures, float(len(failures)), 0.0,
                       details={"failures": failures[:10], "triples": G**3})


@_timed
def kernel_transforms(spec: GroupSpec, seed: int = 0, k: int = 3) -> SuiteResult:
    rng = np.random.default_rng(seed)
    psi = rng.standard_normal((k, k))
    delta = np.zeros((k, k))
    delta[k // 2, k // 2] = 1.0
    els = enumerate_elements(spec)
    failures = []
    worst_energy = 0.0
    for g in els:
        if not np.array_equal(transform_kernel(delta, g, spec), delta):
            failures.append(f"delta not fixed by {g}")
        ratio = np.linalg.norm(transform_kernel(psi, g, spec)) / np.linalg.norm(psi)
        worst_energy = max(worst_energy, ratio - 1.0)
    for g, h in itertools.product(els, repeat=2):
        if not (is_exact(spec, g) and is_exact(spec, h)):
            continue
        lhs = transform_kernel(psi, compose(spec, g, h), spec)
        rhs = transform_kernel(transform_kernel(psi, h, spec), g, spec)
        if not np.array_equal(lhs, rhs):
            failures.append(f"T({g}∘{h}) != T({g})T({h})")
    if worst_energy > 1e-12:
        failures.append(f"energy grew by {worst_energy}")
    return SuiteResult(f"kernel_transforms[{spec.name}]", not failures, worst_energy, 0.0,
                       details={"failures": failures[:10]})


def _random_layers(spec: GroupSpec, rng, dtype, c_in=2, fields=3):
    lift = L.LiftingConvLayer(
        rng.standard_normal((fields, c_in, 3, 3)).astype(dtype), rng.standard_normal(fields).astype(dtype), spec
    )
    gconv = L.GConvLayer(
        rng.standard_normal((fields, fields, spec.order, 3, 3)).astype(dtype),
        rng.standard_normal(fields).astype(dtype),
        spec,
    )
    return lift, gconv


def layer_equivariance_errors(spec: GroupSpec, dtype=np.float32, seed: int = 0, size: int = 16) -> dict[str, float]:
    """Worst relative error per layer type over the exact subgroup (batch 2, 3 fields)."""
    rng = np.random.default_rng(seed)
    lift, gconv = _random_layers(spec, rng, dtype)
    x = rng.standard_normal((2, 2, size, size)).astype(dtype)
    f = L.GFeatureMap(rng.standard_normal((2, 3, spec.order, size, size)).astype(dtype), spec)
    f2 = L.GFeatureMap(rng.standard_normal((2, 2, spec.order, size, size)).astype(dtype), spec)
    errs = {k: 0.0 for k in ("lift", "gconv", "relu", "maxpool", "upsample", "concat", "stack")}

    def stack(inp):
        h = L.relu_g(L.lift_forward(inp, lift))
        h = L.relu_g(L.gconv_forward(h, gconv))
        h, _ = L.maxpool_g(h)
        return L.gconv_forward(L.upsample_g(h), gconv).data

    base = {
        "lift": L.lift_forward(x, lift).data,
        "gconv": L.gconv_forward(f, gconv).data,
        "relu": L.relu_g(f).data,
        "maxpool": L.maxpool_g(f)[0].data,
        "upsample": L.upsample_g(f).data,
        "concat": L.concat_fields(f, f2).data,
        "stack": stack(x),
    }
    for g in exact_subgroup(spec):
        gx = act_on_image(spec, g, x)
        gf = L.GFeatureMap(act_on_gfeatures(spec, g, f.data), spec)
        gf2 = L.GFeatureMap(act_on_gfeatures(spec, g, f2.data), spec)
        moved = {
            "lift": L.lift_forward(gx, lift).data,
            "gconv": L.gconv_forward(gf, gconv).data,
            "relu": L.relu_g(gf).data,
            "maxpool": L.maxpool_g(gf)[0].data,
            "upsample": L.upsample_g(gf).data,
            "concat": L.concat_fields(gf, gf2).data,
            "stack": stack(gx),
        }
        for key in errs:
            errs[key] = max(errs[key], rel_err(moved[key], act_on_gfeatures(spec, g, base[key])))
    return errs


@_timed
def layer_equivariance(spec: GroupSpec, seed: int = 0) -> SuiteResult:
    e32 = layer_equivariance_errors(spec, np.float32, seed)
    e64 = layer_equivariance_errors(spec, np.float64, seed)
    ok = max(e32.values()) <= 1e-4 and max(e64.values()) <= 1e-8
    return SuiteResult(f"layer_equivariance[{spec.name}]", ok, max(e32.values()), 1e-4,
                       details={"float32": e32, "float64": e64, "tolerance_float64": 1e-8})


def model_equivariance_errors(spec: GroupSpec, size: int = 64, width_scale=Fraction(1, 4), seed: int = 0) -> dict[str, float]:
    model = build(ModelConfig(spec=spec, width_scale=width_scale, seed=seed))
    rng = np.random.default_rng(seed + 1)
    x = np.zeros((1, 2, size, size), dtype=np.float32)
    x[0, 0] = rng.random((size, size)) < 0.3
    x[0, 1] = rng.standard_normal((size, size))
    y = model(x)
    out = {}
    for g in exact_subgroup(spec):
        out[f"r{g.r}{'m' if g.m else ''}"] = rel_err(model(act_on_image(spec, g, x)), act_on_image(spec, g, y))
    return out


@_timed
def model_equivariance(spec: GroupSpec, size: int = 64, seed: int = 0) -> SuiteResult:
    errs = model_equivariance_errors(spec, size, seed=seed)
    worst = max(errs.values())
    return SuiteResult(f"model_equivariance[{spec.name}]", worst <= 1e-3, worst, 1e-3, details=errs)


# ---------------------------------------------------------------------------
# finite differences


def finite_difference(fn, arr: np.ndarray, index, h: float = 1e-6) -> float:
    old = arr[index]
    arr[index] = old + h
    fp = fn()
    arr[index] = old - h
    fm = fn()
    arr[index] = old
    return (fp - fm) / (2 * h)


def _fd_compare(fn, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray], rng, n_probe: int, h: float):
    errs = {}
    for name, arr in arrays.items():
        flat_idx = rng.choice(arr.size, size=min(n_probe, arr.size), replace=False)
        idx = [np.unravel_index(i, arr.shape) for i in flat_idx]
        num = np.array([finite_difference(fn, arr, i, h) for i in idx])
        ana = np.array([grads[name][i] for i in idx])
        errs[name] = rel_err(ana, num)
    return errs


def layer_gradient_errors(spec: GroupSpec, seed: int = 0, n_probe: int = 12, size: int = 8) -> dict[str, float]:
    """Backward passes of the lifting and group layers against central differences (float64)."""
    rng = np.random.default_rng(seed)
    lift, gconv = _random_layers(spec, rng, np.float64)
    x = rng.standard_normal((2, 2, size, size))
    f = L.GFeatureMap(rng.standard_normal((2, 3, spec.order, size, size)), spec)
    w_out = rng.standard_normal((2, 3, spec.order, size, size))

    def lift_loss():
        return float((L.lift_forward(x, lift).data * w_out).sum())

    def gconv_loss():
        return float((L.gconv_forward(f, gconv).data * w_out).sum())

    gx, gw, gb = L.lift_backward(x, lift, w_out)
    e_lift = _fd_compare(lift_loss, {"x": x, "w": lift.weights, "b": lift.bias}, {"x": gx, "w": gw, "b": gb}, rng, n_probe, 1e-6)
    gf, gw, gb = L.gconv_backward(f, gconv, w_out)
    e_g = _fd_compare(gconv_loss, {"x": f.data, "w": gconv.weights, "b": gconv.bias},
                      {"x": gf.data, "w": gw, "b": gb}, rng, n_probe, 1e-6)
    return {**{f"lift.{k}": v for k, v in e_lift.items()}, **{f"gconv.{k}": v for k, v in e_g.items()}}


def model_gradient_errors(
    spec: GroupSpec, size: int = 32, width_scale=Fraction(1, 8), seed: int = 0, n_probe: int = 4
) -> dict[str, float]:
    """End-to-end MSE gradient per parameter tensor against central differences (float64)."""
    from .train import mse_loss

    model = build(ModelConfig(spec=spec, width_scale=width_scale, seed=seed)).astype(np.float64)
    rng = np.random.default_rng(seed + 7)
    # zero-init biases leave exact-zero pre-activations behind dead regions, i.e. points
    # sitting on a ReLU kink where central differences disagree with the subgradient
    for layer in model.layers:
        layer.bias[:] = 0.1 * rng.standard_normal(layer.bias.shape)
    x = np.zeros((1, 2, size, size))
    x[0, 0] = rng.random((size, size)) < 0.3
    x[0, 1] = rng.standard_normal((size, size))
    t = rng.random((1, 1, size, size))

    def loss():
        return mse_loss(model(x), t)[0]

    pred = model.forward(x, keep=True)
    _, g = mse_loss(pred, t)
    gx = model.backward(g)
    arrays = {"input": x}
    grads = {"input": gx}
    for name, layer, (gw, gb) in zip(model.names, model.layers, model.grads):
        arrays[f"{name}.w"], grads[f"{name}.w"] = layer.weights, gw
        arrays[f"{name}.b"], grads[f"{name}.b"] = layer.bias, gb
    return _fd_compare(loss, arrays, grads, rng, n_probe, 1e-6)


@_timed
def gradient_check(spec: GroupSpec, full: bool = False, seed: int = 0) -> SuiteResult:
    errs = layer_gradient_errors(spec, seed)
    if full:
        errs.update({f"model.{k}": v for k, v in model_gradient_errors(spec, seed=seed).items()})
    tol = 1e-5 if not full else 1e-4
    worst = max(errs.values())
    return SuiteResult(f"gradient_check[{spec.name}]", worst <= tol, worst, tol, details=errs)


# ---------------------------------------------------------------------------

# published full-width counts in millions; only the ratios are expected to match
REFERENCE_PARAMS_M = {"c2": 5.9, "d2": 11.8, "c4": 11.8, "d4": 23.7, "c8": 23.7, "d8": 47.3}
RATIO_PAIRS = (("c4", "c2"), ("d2", "c2"), ("c8", "c4"), ("d4", "d2"), ("d8", "d4"))


def full_width_counts(count_arrays: bool = False) -> dict[str, int]:
    counts = {}
    for name in ALL_GROUPS:
        cfg = ModelConfig(spec=GroupSpec.parse(name))
        n = analytic_param_count(cfg)
        if count_arrays:
            m = build(cfg)
            stored = sum(p.size for p in m.params())
            if stored != n or m.count_params() != n:
                raise AssertionError(f"{name}: stored {stored} vs analytic {n}")
        counts[name] = n
    return counts


@_timed
def parameter_scaling(count_arrays: bool = False) -> SuiteResult:
    counts = full_width_counts(count_arrays)
    ratios = {f"{a}/{b}": counts[a] / counts[b] for a, b in RATIO_PAIRS}
    worst = max(abs(r - 2.0) / 2.0 for r in ratios.values())
    ok = worst <= 0.02 and counts["d4"] == counts["c8"]
    return SuiteResult("parameter_scaling", ok, worst, 0.02, details={"counts": counts, "ratios": ratios})


def run_all(spec: GroupSpec, full: bool = False, model_size: int = 64) -> list[SuiteResult]:
    return [
        group_axioms(spec),
        kernel_transforms(spec),
        layer_equivariance(spec),
        model_equivariance(spec, model_size),
        gradient_check(spec, full),
        parameter_scaling(count_arrays=full),
    ]


def report_dict(spec: GroupSpec, results: list[SuiteResult]) -> dict:
    return {
        "group": spec.name,
        "passed": all(r.passed for r in results),
        "suites": [asdict(r) for r in results],
    }
