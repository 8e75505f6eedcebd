import numpy as np
import pytest

from conftest import fd_grad, max_rel
from gequnet import layers as L
from gequnet import tensor as T
from gequnet.groups import C1, GroupSpec, act_on_gfeatures, act_on_image, exact_subgroup
from gequnet.verify import ALL_GROUPS, layer_equivariance_errors, layer_gradient_errors

SPECS = [GroupSpec.parse(n) for n in ALL_GROUPS]


def rand_lift(rng, spec, c_in=2, out=3, dtype=np.float64):
    return L.LiftingConvLayer(rng.standard_normal((out, c_in, 3, 3)).astype(dtype),
                              rng.standard_normal(out).astype(dtype), spec)


def rand_gconv(rng, spec, fin=3, fout=4, dtype=np.float64):
    return L.GConvLayer(rng.standard_normal((fout, fin, spec.order, 3, 3)).astype(dtype),
                        rng.standard_normal(fout).astype(dtype), spec)


def gmap(rng, spec, fields=3, size=8, batch=2):
    return L.GFeatureMap(rng.standard_normal((batch, fields, spec.order, size, size)), spec)


def test_lift_zero_input_zero_bias(rng):
    layer = rand_lift(rng, GroupSpec("cyclic", 4))
    layer.bias[:] = 0
    out = L.lift_forward(np.zeros((1, 2, 8, 8)), layer)
    assert out.shape == (1, 3, 4, 8, 8) and not out.data.any()


def test_lift_c1_is_plain_conv(rng):
    layer = rand_lift(rng, C1)
    x = rng.standard_normal((2, 2, 9, 9))
    ref = T.conv2d(x, layer.weights) + layer.bias[None, :, None, None]
    np.testing.assert_allclose(L.lift_forward(x, layer).data[:, :, 0], ref, rtol=1e-12)


def test_gconv_zero_weights_gives_bias(rng):
    spec = GroupSpec("dihedral", 4)
    layer = L.GConvLayer.create(3, 2, spec, dtype=np.float64)
    layer.bias[:] = [0.5, -2.0]
    out = L.gconv_forward(gmap(rng, spec), layer).data
    assert np.all(out[:, 0] == 0.5) and np.all(out[:, 1] == -2.0)


def test_gconv_c1_is_plain_conv(rng):
    layer = rand_gconv(rng, C1, 5, 2)
    f = gmap(rng, C1, 5)
    ref = T.conv2d(f.data[:, :, 0], layer.weights[:, :, 0]) + layer.bias[None, :, None, None]
    np.testing.assert_allclose(L.gconv_forward(f, layer).data[:, :, 0], ref, rtol=1e-12)


@pytest.mark.parametrize("spec", SPECS, ids=ALL_GROUPS)
@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-4), (np.float64, 1e-8)])
def test_layer_equivariance(spec, dtype, tol):
    errs = layer_equivariance_errors(spec, dtype, seed=5)
    assert max(errs.values()) <= tol, errs


def test_equivariance_direct_c4_rotation(rng):
    spec = GroupSpec("cyclic", 4)
    lift, gconv = rand_lift(rng, spec), rand_gconv(rng, spec)
    x = rng.standard_normal((1, 2, 12, 12))
    y = L.gconv_forward(L.lift_forward(x, lift), gconv).data
    yr = L.gconv_forward(L.lift_forward(T.rot90(x), lift), gconv).data
    # rotating the input rotates each fiber and shifts fibers cyclically by one
    np.testing.assert_allclose(yr, np.roll(T.rot90(y), 1, axis=2), atol=1e-10)


@pytest.mark.parametrize("spec", SPECS, ids=ALL_GROUPS)
def test_random_three_layer_stack_equivariant(spec, rng):
    lift, g1, g2 = rand_lift(rng, spec), rand_gconv(rng, spec, 3, 3), rand_gconv(rng, spec, 3, 2)

    def net(x):
        h = L.relu_g(L.lift_forward(x, lift))
        h = L.relu_g(L.gconv_forward(h, g1))
        return L.gconv_forward(h, g2).data

    x = rng.standard_normal((2, 2, 8, 8))
    y = net(x)
    for g in exact_subgroup(spec):
        assert max_rel(net(act_on_image(spec, g, x)), act_on_gfeatures(spec, g, y)) < 1e-10


def test_backward_zero_grad(rng):
    spec = GroupSpec("cyclic", 4)
    f = gmap(rng, spec)
    gi, gw, gb = L.gconv_backward(f, rand_gconv(rng, spec), np.zeros((2, 4, 4, 8, 8)))
    assert not gi.data.any() and not gw.any() and not gb.any()


def test_backward_c1_matches_conv(rng):
    layer = rand_gconv(rng, C1, 3, 2)
    f = gmap(rng, C1, 3)
    go = rng.standard_normal((2, 2, 1, 8, 8))
    gi, gw, gb = L.gconv_backward(f, layer, go)
    rx, rk = T.conv2d_backward(f.data[:, :, 0], layer.weights[:, :, 0], go[:, :, 0])
    np.testing.assert_allclose(gi.data[:, :, 0], rx, rtol=1e-12)
    np.testing.assert_allclose(gw[:, :, 0], rk, rtol=1e-12)
    np.testing.assert_allclose(gb, go.sum(axis=(0, 2, 3, 4)))


@pytest.mark.parametrize("name", ["c4", "d4"])
def test_backward_finite_differences(name, rng):
    spec = GroupSpec.parse(name)
    lift, gconv = rand_lift(rng, spec), rand_gconv(rng, spec)
    x = rng.standard_normal((1, 2, 6, 6))
    f = gmap(rng, spec, 3, 6, 1)
    go_l = rng.standard_normal((1, 3, spec.order, 6, 6))
    go_g = rng.standard_normal((1, 4, spec.order, 6, 6))

    def fl():
        return float((L.lift_forward(x, lift).data * go_l).sum())

    def fg():
        return float((L.gconv_forward(f, gconv).data * go_g).sum())

    gx, gw, gb = L.lift_backward(x, lift, go_l)
    assert max_rel(gx, fd_grad(fl, x)) < 1e-5
    assert max_rel(gw, fd_grad(fl, lift.weights)) < 1e-5
    assert max_rel(gb, fd_grad(fl, lift.bias)) < 1e-5
    gi, gw, gb = L.gconv_backward(f, gconv, go_g)
    assert max_rel(gi.data, fd_grad(fg, f.data)) < 1e-5
    assert max_rel(gw, fd_grad(fg, gconv.weights)) < 1e-5
    assert max_rel(gb, fd_grad(fg, gconv.bias)) < 1e-5


@pytest.mark.parametrize("name", ["c8", "d8"])
def test_backward_45_degree_groups(name):
    errs = layer_gradient_errors(GroupSpec.parse(name), seed=2)
    assert max(errs.values()) < 1e-5, errs


def test_group_pool(rng):
    f = gmap(rng, C1)
    np.testing.assert_array_equal(L.group_pool(f, "mean"), f.data[:, :, 0])
    spec = GroupSpec("cyclic", 2)
    g = L.GFeatureMap(np.stack([np.full((1, 1, 2, 2), 1.0), np.full((1, 1, 2, 2), 3.0)], axis=2), spec)
    assert np.all(L.group_pool(g, "mean") == 2.0) and np.all(L.group_pool(g, "max") == 3.0)
    const = L.GFeatureMap(np.full((1, 2, 8, 4, 4), 0.25), GroupSpec("dihedral", 4))
    assert np.all(L.group_pool(const) == 0.25)
    with pytest.raises(ValueError):
        L.group_pool(f, "median")


@pytest.mark.parametrize("mode", ["mean", "max"])
def test_group_pool_is_scalar_field_and_differentiable(mode, rng):
    spec = GroupSpec("dihedral", 4)
    f = gmap(rng, spec)
    pooled = L.group_pool(f, mode)
    for g in exact_subgroup(spec):
        moved = L.group_pool(L.GFeatureMap(act_on_gfeatures(spec, g, f.data), spec), mode)
        np.testing.assert_allclose(moved, act_on_image(spec, g, pooled), rtol=1e-12)
    go = rng.standard_normal(pooled.shape)
    num = fd_grad(lambda: float((L.group_pool(f, mode) * go).sum()), f.data)
    assert max_rel(L.group_pool_backward(f, go, mode).data, num) < 1e-6


def test_concat_fields_bottleneck_widths(rng):
    spec = GroupSpec("cyclic", 2)
    a = L.GFeatureMap(np.zeros((1, 170, 2, 2, 2)), spec)
    assert L.concat_fields(a, a).fields == 340
    with pytest.raises(L.GroupMismatchError):
        L.concat_fields(a, L.GFeatureMap(np.zeros((1, 1, 4, 2, 2)), GroupSpec("cyclic", 4)))
    with pytest.raises(T.ShapeError):
        L.concat_fields(a, L.GFeatureMap(np.zeros((1, 1, 2, 4, 4)), spec))


def test_relu_identity_on_nonnegative(rng):
    f = L.GFeatureMap(np.abs(rng.standard_normal((1, 2, 4, 4, 4))), GroupSpec("cyclic", 4))
    np.testing.assert_array_equal(L.relu_g(f).data, f.data)


def test_param_counts():
    spec = GroupSpec("dihedral", 8)
    assert L.LiftingConvLayer.create(3, 6, spec).param_count() == 6 * 3 * 9 + 6
    assert L.GConvLayer.create(6, 50, spec).param_count() == 50 * 6 * 16 * 9 + 50


def test_group_and_shape_errors(rng):
    c4, d4 = GroupSpec("cyclic", 4), GroupSpec("dihedral", 4)
    with pytest.raises(L.GroupMismatchError):
        L.gconv_forward(gmap(rng, d4), rand_gconv(rng, c4))
    with pytest.raises(T.ShapeError):
        L.gconv_forward(gmap(rng, c4, fields=2), rand_gconv(rng, c4))
    with pytest.raises(T.ShapeError):
        L.lift_forward(rng.standard_normal((1, 3, 8, 8)), rand_lift(rng, c4))
    with pytest.raises(T.ShapeError):
        L.lift_forward(rng.standard_normal((1, 2, 8, 6)), rand_lift(rng, c4))
    with pytest.raises(T.ShapeError):
        L.GFeatureMap(np.zeros((1, 1, 3, 4, 4)), c4)
    with pytest.raises(ValueError):
        L.GConvLayer.create(1, 1, c4, k=4)


def test_fault_injection_breaks_equivariance():
    spec = GroupSpec("cyclic", 4)
    with L.inject_fiber_fault():
        errs = layer_equivariance_errors(spec, np.float64)
    assert errs["gconv"] > 1e-2
    assert max(layer_equivariance_errors(spec, np.float64).values()) < 1e-8


@pytest.mark.parametrize("name", ["c4", "d8"])
def test_serialization_roundtrip(name, rng):
    spec = GroupSpec.parse(name)
    for layer in (rand_lift(rng, spec, dtype=np.float32), rand_gconv(rng, spec, dtype=np.float32)):
        blob = L.layer_to_bytes(layer)
        back, off = L.layer_from_bytes(blob)
        assert off == len(blob) and back.spec == spec and type(back) is type(layer)
        np.testing.assert_array_equal(back.weights, layer.weights)
        np.testing.assert_array_equal(back.bias, layer.bias)
    blob = L.layer_to_bytes(rand_gconv(rng, spec, 3, 4, np.float32))
    assert blob[:4] == b"GQL1"
    assert blob[4] == (0 if spec.kind == "cyclic" else 1) and blob[5] == spec.n and blob[6] == 1 and blob[7] == 3
    assert len(blob) == 16 + 4 * (4 * 3 * spec.order * 9 + 4)
    with pytest.raises(ValueError):
        L.layer_from_bytes(b"XXXX" + blob[4:])
