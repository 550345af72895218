import numpy as np
import pytest

from emfieldnet import autodiff as ad
from emfieldnet.container import BadMagicError, LengthMismatchError, TruncatedError
from emfieldnet.unet import (
    ArchSpec, Checkpoint, UNetParams, backward, count_receptive_field, forward, init_params,
    layer_specs, load_checkpoint, param_count, read_checkpoint_header, save_checkpoint,
)

# conv shapes of the default net, counted by hand from the documented layer list
# (cout*cin*27 + cout per 3^3 conv, 8*12 + 12 for the 1x1 head)
HAND_COUNT = (
    (8 * 19 * 27 + 8) + (8 * 8 * 27 + 8)            # enc0
    + (16 * 8 * 27 + 16) + (16 * 16 * 27 + 16)      # enc1
    + (32 * 16 * 27 + 32) + (32 * 32 * 27 + 32)     # mid
    + (16 * 32 * 27 + 16) + (16 * 32 * 27 + 16) + (16 * 16 * 27 + 16)  # dec1 up, conv0, conv1
    + (8 * 16 * 27 + 8) + (8 * 16 * 27 + 8) + (8 * 8 * 27 + 8)         # dec0
    + (12 * 8 + 12)                                 # head
)
TINY = ArchSpec(in_channels=3, depth=1, base_width=2)


def test_param_count_matches_hand_count():
    assert HAND_COUNT == 101164
    assert param_count(ArchSpec()) == HAND_COUNT


def test_init_is_deterministic_with_zero_biases():
    a, b = init_params(ArchSpec(), 7), init_params(ArchSpec(), 7)
    assert np.array_equal(a.vector, b.vector)
    assert not np.array_equal(a.vector, init_params(ArchSpec(), 8).vector)
    for name, t in a.tensors().items():
        if name.endswith(".b"):
            assert not t.any()
        else:
            bound = np.sqrt(6 / np.prod(t.shape[1:]))
            assert np.abs(t).max() <= bound and t.std() > 0.3 * bound


def test_output_shape_and_zero_params():
    arch = ArchSpec(in_channels=5, depth=2, base_width=2)
    x = np.random.default_rng(0).standard_normal((5, 8, 8, 8))
    y, _ = forward(init_params(arch, 0), x)
    assert y.shape == (12, 8, 8, 8) and np.all(np.isfinite(y))
    z, _ = forward(UNetParams(arch, np.zeros(param_count(arch))), x)
    assert not z.any()


def test_default_net_on_32_cube():
    x = np.random.default_rng(0).standard_normal((19, 32, 32, 32))
    p = init_params(ArchSpec(), 0)
    y1, _ = forward(p, x)
    y2, _ = forward(p, x)
    assert y1.shape == (12, 32, 32, 32)
    assert y1.tobytes() == y2.tobytes()


@pytest.mark.parametrize("shape, match", [((3, 8, 8), "shape"), ((4, 8, 8, 8), "channels"),
                                          ((3, 8, 5, 8), "divisible")])
def test_forward_shape_errors(shape, match):
    with pytest.raises(ValueError, match=match):
        forward(init_params(TINY), np.zeros(shape))


def test_forward_rejects_non_finite():
    x = np.zeros((3, 4, 4, 4))
    x[0, 0, 0, 0] = np.inf
    with pytest.raises(ValueError, match="non-finite"):
        forward(init_params(TINY), x)


def test_zero_params_gradient():
    arch = TINY
    p = UNetParams(arch, np.zeros(param_count(arch)))
    x = np.random.default_rng(1).standard_normal((3, 4, 4, 4))
    y, tape = forward(p, x)
    g = backward(tape, y)  # d(0.5*|y|^2)/dy = y = 0
    assert not g.any()
    # with a nonzero output gradient, only the head bias sees it: all activations are zero
    G = np.random.default_rng(2).standard_normal(y.shape)
    y, tape = forward(p, x)
    g = backward(tape, G)
    t = UNetParams(arch, g).tensors()
    np.testing.assert_allclose(t["head.b"], G.reshape(12, -1).sum(axis=1), rtol=1e-14)
    for name, v in t.items():
        if name != "head.b":
            assert not v.any(), name


def test_receptive_field_examples():
    assert count_receptive_field(ArchSpec(depth=0, convs_per_block=1)) == 1
    # hand evaluation of the recurrence: R(1) = 2, R(0) = 2 + (2*2 + 1) + 1 + 2
    assert count_receptive_field(ArchSpec(depth=1)) == 10
    assert count_receptive_field(ArchSpec()) == 26
    assert count_receptive_field(ArchSpec(depth=0, kernel=1)) == 0


def _empirical_radius(arch, n):
    """Largest per-axis offset at which perturbing one input voxel changes the output."""
    rng = np.random.default_rng(0)
    p = init_params(arch, 3)
    p = UNetParams(arch, p.vector + 0.05 * rng.standard_normal(p.vector.size))
    x = rng.standard_normal((arch.in_channels, n, n, n))
    base, _ = forward(p, x)
    radius = 0
    for c in range(n // 2, n // 2 + 2 ** arch.depth):  # every position relative to the pooling grid
        xp = x.copy()
        xp[:, c, c, c] += 1.0
        changed = np.any(forward(p, xp)[0] != base, axis=0)
        idx = np.argwhere(changed)
        radius = max(radius, int(np.max(np.abs(idx - c))))
    return radius


@pytest.mark.parametrize("arch", [
    ArchSpec(in_channels=2, depth=0, convs_per_block=1, base_width=2),
    ArchSpec(in_channels=2, depth=1, base_width=2),
    ArchSpec(in_channels=2, depth=1, base_width=2, kernel=1),
    ArchSpec(in_channels=2, depth=2, base_width=2, convs_per_block=1),
])
def test_receptive_field_matches_perturbation_oracle(arch):
    r = count_receptive_field(arch)
    n = 4 * ((2 * r + 6) // 4 + 1)
    assert _empirical_radius(arch, n) == r


def test_translation_covariance_for_pool_aligned_shifts():
    arch = ArchSpec(in_channels=2, depth=1, base_width=2)
    r = count_receptive_field(arch)
    n, s = 32, 2 ** arch.depth
    rng = np.random.default_rng(5)
    p = init_params(arch, 1)
    x = rng.standard_normal((2, n, n, n))
    y, _ = forward(p, x)
    ys, _ = forward(p, np.roll(x, s, axis=1))
    lo, hi = r + s + 1, n - r - s - 1
    win = (slice(None), slice(lo, hi), slice(lo, hi), slice(lo, hi))
    shifted = np.roll(ys, -s, axis=1)
    assert np.array_equal(shifted[win], y[win])


def test_param_count_independent_of_grid():
    p = init_params(TINY)
    for n in (4, 8):
        y, tape = forward(p, np.ones((3, n, n, n)))
        assert backward(tape, y).size == param_count(TINY)


def test_layer_list_order():
    names = [s[0] for s in layer_specs(ArchSpec(depth=1, convs_per_block=1))]
    assert names == ["enc0.conv0", "mid.conv0", "dec0.up", "dec0.conv0", "head"]


# -- primitive gradients ----------------------------------------------------------------------

def _check_primitive(build, inputs, rng, eps=1e-6, tol=1e-6):
    """Compare tape gradients of sum(W * f(inputs)) against central differences."""
    tape = ad.Tape()
    vs = [tape.leaf(a) for a in inputs]
    out = build(vs)
    W = rng.standard_normal(out.value.shape)
    grads = tape.backward(out, W)

    def scalar(arrs):
        t = ad.Tape()
        return float(np.sum(W * build([t.leaf(a) for a in arrs]).value))

    for i, a in enumerate(inputs):
        g = grads.get(vs[i].id, np.zeros_like(a))
        for j in rng.choice(a.size, min(20, a.size), replace=False):
            ap, am = [x.copy() for x in inputs], [x.copy() for x in inputs]
            ap[i].flat[j] += eps
            am[i].flat[j] -= eps
            num = (scalar(ap) - scalar(am)) / (2 * eps)
            assert abs(num - g.flat[j]) <= tol * max(1.0, abs(num)), (i, j, num, g.flat[j])


def test_conv3d_gradient(rng):
    x = rng.standard_normal((2, 4, 5, 3))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    b = rng.standard_normal(3)
    _check_primitive(lambda v: ad.conv3d(*v), [x, w, b], rng)
    w5 = rng.standard_normal((2, 2, 5, 5, 5))
    _check_primitive(lambda v: ad.conv3d(*v), [x, w5, b[:2]], rng)


def test_conv3d_matches_direct_loop(rng):
    x = rng.standard_normal((2, 4, 4, 4))
    w = rng.standard_normal((1, 2, 3, 3, 3))
    y = ad.conv3d_raw(x, w)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    for i, j, k in [(0, 0, 0), (1, 2, 3), (3, 3, 3)]:
        assert y[0, i, j, k] == pytest.approx(np.sum(w[0] * xp[:, i:i + 3, j:j + 3, k:k + 3]))


def test_leaky_relu_gradient(rng):
    x = rng.standard_normal((2, 3, 3, 3))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    _check_primitive(lambda v: ad.leaky_relu(v[0], 0.01), [x], rng)


def test_pool_upsample_concat_gradients(rng):
    x = rng.standard_normal((2, 4, 4, 2))
    _check_primitive(lambda v: ad.avg_pool2(v[0]), [x], rng)
    _check_primitive(lambda v: ad.upsample2(v[0]), [x], rng)
    _check_primitive(lambda v: ad.concat([v[0], v[1]]), [x, rng.standard_normal((3, 4, 4, 2))], rng)


def test_pool_rejects_odd_dims():
    t = ad.Tape()
    with pytest.raises(ValueError, match="even"):
        ad.avg_pool2(t.leaf(np.zeros((1, 3, 4, 4))))


def test_conv_rejects_bad_kernel():
    t = ad.Tape()
    with pytest.raises(ValueError):
        ad.conv3d(t.leaf(np.zeros((1, 4, 4, 4))), t.leaf(np.zeros((1, 1, 2, 2, 2))), t.leaf(np.zeros(1)))
    with pytest.raises(ValueError, match="channels"):
        ad.conv3d(t.leaf(np.zeros((2, 4, 4, 4))), t.leaf(np.zeros((1, 1, 3, 3, 3))), t.leaf(np.zeros(1)))


def test_backward_rejects_wrong_gradient_shape():
    y, tape = forward(init_params(TINY), np.ones((3, 4, 4, 4)))
    with pytest.raises(ValueError, match="shape"):
        backward(tape, np.ones((12, 4, 4, 2)))


def test_backward_is_deterministic(rng):
    p = init_params(TINY, 4)
    x = rng.standard_normal((3, 8, 8, 8))
    y, tape = forward(p, x)
    g1 = backward(tape, y)
    y, tape = forward(p, x)
    assert backward(tape, y).tobytes() == g1.tobytes()


# -- checkpoints ------------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, rng):
    p = init_params(TINY, 9)
    m, v = rng.standard_normal(p.vector.size), rng.random(p.vector.size)
    save_checkpoint(tmp_path / "c.emw", Checkpoint(p, 17, (m, v), {"note": "x"}))
    c = load_checkpoint(tmp_path / "c.emw")
    assert c.params.arch == TINY and c.step == 17 and c.params.seed == 9
    assert c.params.vector.tobytes() == p.vector.tobytes()
    assert c.moments[0].tobytes() == m.tobytes() and c.moments[1].tobytes() == v.tobytes()
    assert c.extra == {"note": "x"}
    h = read_checkpoint_header(tmp_path / "c.emw")
    assert h["has_optimizer"] and h["param_count"] == param_count(TINY)
    save_checkpoint(tmp_path / "d.emw", Checkpoint(p))
    assert load_checkpoint(tmp_path / "d.emw").moments is None


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "c.emw"
    save_checkpoint(path, Checkpoint(init_params(TINY)))
    raw = path.read_bytes()
    path.write_bytes(b"EMG1" + raw[4:])
    with pytest.raises(BadMagicError):
        load_checkpoint(path)
    path.write_bytes(raw[:-8])
    with pytest.raises(TruncatedError):
        load_checkpoint(path)
    path.write_bytes(raw + b"\0" * 8)
    with pytest.raises(LengthMismatchError):
        load_checkpoint(path)


def test_arch_invariants():
    with pytest.raises(ValueError):
        ArchSpec(out_channels=6)
    with pytest.raises(ValueError):
        ArchSpec(kernel=2)
    with pytest.raises(ValueError, match="entries"):
        UNetParams(TINY, np.zeros(3))
