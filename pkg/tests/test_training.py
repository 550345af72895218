import json
import math
from dataclasses import replace

import numpy as np
import pytest

from emfieldnet.fieldgrid import B_SLICE, EPS0
from emfieldnet.training import (
    LossSpec, NumericalAbort, OptimSpec, PhysicsContext, PreparedSample, TrainState, adam_step,
    batch_indices, composite_loss, physical_medium, train, write_history, zero_baseline,
)
from emfieldnet.unet import ArchSpec, init_params, load_checkpoint

from conftest import make_record

CTX = PhysicsContext((0.01, 0.01, 0.01), 2 * math.pi * 297.2e6)
ALL_ON = LossSpec(1.0, 0.5, 0.25)


def divergence_free_target(rng, n=6):
    y = rng.standard_normal((12, n, n, n))
    z = np.arange(n)[None, None, :] * np.ones((n, n, n))
    y[B_SLICE] = 0
    y[B_SLICE][2] = z  # B_re_y depends only on z
    return y


def test_exact_divergence_free_prediction_has_zero_gauss_loss(rng):
    y = divergence_free_target(rng)
    total, parts = composite_loss(y, y, CTX, LossSpec())
    assert total == 0.0 and parts["gauss"] == 0.0


def test_all_lambdas_zero_is_plain_mse(rng):
    p, y = rng.standard_normal((2, 12, 6, 6, 6))
    total, parts = composite_loss(p, y, CTX, LossSpec(0, 0, 0))
    assert total == float(np.mean((p - y) ** 2)) == parts["mse"]


def test_constant_offset_costs_exactly_one(rng):
    y = divergence_free_target(rng)
    total, parts = composite_loss(y + 1.0, y, CTX, LossSpec(lambda_gauss=1.0))
    assert parts["mse"] == 1.0 and parts["gauss"] == 0.0 and total == 1.0


def test_shape_mismatch(rng):
    with pytest.raises(ValueError, match="12"):
        composite_loss(np.zeros((12, 4, 4, 4)), np.zeros((12, 4, 4, 5)), CTX)
    with pytest.raises(ValueError):
        composite_loss(np.zeros((6, 4, 4, 4)), np.zeros((6, 4, 4, 4)), CTX)


def test_physics_weight_never_changes_data_term(rng):
    p, y = rng.standard_normal((2, 12, 6, 6, 6))
    a = composite_loss(p, y, CTX, LossSpec(0, 0, 0))[1]
    b = composite_loss(p, y, CTX, ALL_ON)[1]
    assert a["mse"] == b["mse"] and a["gauss"] == b["gauss"]


def test_zero_weight_term_contributes_nothing_to_gradient(rng):
    p, y = rng.standard_normal((2, 12, 6, 6, 6))
    g0 = composite_loss(p, y, CTX, LossSpec(0, 0, 0), need_grad=True)[2]
    expected = (p - y) * (2.0 / p.size)
    assert g0.tobytes() == expected.tobytes()


def test_composite_gradient_with_all_terms(rng):
    eps = EPS0 * rng.uniform(1, 80, (6, 6, 6))
    ctx = PhysicsContext((0.01, 0.012, 0.011), CTX.omega, eps, rng.uniform(0, 2, (6, 6, 6)))
    p, y = rng.standard_normal((2, 12, 6, 6, 6))
    _, _, g = composite_loss(p, y, ctx, ALL_ON, need_grad=True)
    # the loss is quadratic in the prediction, so a large central step is exact up to roundoff
    step = 0.5
    for i in rng.choice(p.size, 40, replace=False):
        pp, pm = p.copy(), p.copy()
        pp.flat[i] += step
        pm.flat[i] -= step
        num = (composite_loss(pp, y, ctx, ALL_ON)[0] - composite_loss(pm, y, ctx, ALL_ON)[0]) / (2 * step)
        assert abs(num - g.flat[i]) <= 1e-6 * max(abs(num), 1.0)


def test_loss_spec_rejects_negative_weights():
    with pytest.raises(ValueError):
        LossSpec(lambda_gauss=-1.0)
    with pytest.raises(ValueError):
        LossSpec(lambda_ampere=float("nan"))
    with pytest.raises(ValueError):
        OptimSpec(lr=0)
    with pytest.raises(ValueError):
        OptimSpec(batch_size=0)


# -- Adam -------------------------------------------------------------------------------------

def test_adam_first_step_moves_by_lr():
    o = OptimSpec(lr=1e-3)
    p = np.array([0.5, -2.0])
    new, m, v = adam_step(p, np.ones(2), np.zeros(2), np.zeros(2), 1, o)
    np.testing.assert_allclose(p - new, o.lr / (1 + o.eps), rtol=1e-12)


def test_adam_zero_gradient_never_moves():
    o = OptimSpec()
    p = np.array([1.0, 2.0, 3.0])
    m = v = np.zeros(3)
    for t in range(1, 6):
        new, m, v = adam_step(p, np.zeros(3), m, v, t, o)
        assert new.tobytes() == p.tobytes()


def test_adam_is_scale_invariant_per_coordinate():
    o = OptimSpec(lr=1e-2)
    g = np.array([0.3, 0.6])
    new, _, _ = adam_step(np.zeros(2), g, np.zeros(2), np.zeros(2), 1, o)
    np.testing.assert_allclose(new, -o.lr, rtol=1e-6)


# -- baseline ---------------------------------------------------------------------------------

def test_zero_baseline():
    rec = make_record()
    z = zero_baseline(rec)
    assert z.shape == (12,) + rec.geom.shape and not z.any()
    y = rec.target_stack().astype(np.float64)
    mse = composite_loss(z, y, PhysicsContext.from_record(rec), LossSpec(0, 0, 0))[1]["mse"]
    assert mse == pytest.approx(np.mean(y ** 2), rel=1e-14)


def test_physical_medium_prefers_recorded_background():
    rec = make_record()
    eps, sigma = physical_medium(rec)
    assert eps.shape == rec.geom.shape  # no meta["medium"] -> material grids
    rec2 = replace(rec, meta={"medium": {"eps_r": 4.0, "sigma": 0.2}})
    assert physical_medium(rec2) == (4.0 * EPS0, 0.2)


# -- training loop ----------------------------------------------------------------------------

TINY = ArchSpec(in_channels=7, depth=1, base_width=2)


def tiny_samples(count=3):
    return [make_record(8, coils=2, seed=s) for s in range(count)]


def test_batch_schedule_is_a_pure_function():
    o = OptimSpec(batch_size=2, seed=3)
    seq = [batch_indices(s, 5, o) for s in range(10)]
    assert seq == [batch_indices(s, 5, o) for s in range(10)]
    flat = sum(seq[:5], [])  # two full epochs
    assert sorted(flat[:5]) == list(range(5)) and sorted(flat[5:]) == list(range(5))
    assert batch_indices(0, 4, OptimSpec(batch_size=3, shuffle=False)) == [0, 1, 2]


def test_zero_steps_returns_init_params():
    st = train(tiny_samples(1), LossSpec(), OptimSpec(max_steps=0), TINY, init_seed=5)
    assert st.params.vector.tobytes() == init_params(TINY, 5).vector.tobytes()
    assert st.step == 0 and st.history == []


def test_training_is_deterministic_and_logs_breakdown():
    o = OptimSpec(max_steps=4, lr=1e-2)
    a = train(tiny_samples(), LossSpec(), o, TINY)
    b = train(tiny_samples(), LossSpec(), o, TINY)
    assert a.params.vector.tobytes() == b.params.vector.tobytes()
    assert [r["step"] for r in a.history] == [0, 1, 2, 3]
    assert set(a.history[0]) == {"step", "mse", "gauss", "faraday", "ampere", "total"}


def test_resume_is_bitwise_identical(tmp_path):
    samples = tiny_samples()
    o = OptimSpec(max_steps=8, lr=1e-2, checkpoint_every=3)
    full = train(samples, LossSpec(), o, TINY, checkpoint_dir=tmp_path)
    ck = load_checkpoint(tmp_path / "ckpt_000006.emw")
    assert ck.step == 6
    resumed = train(samples, LossSpec(), o, state=TrainState.from_checkpoint(ck))
    assert resumed.params.vector.tobytes() == full.params.vector.tobytes()
    assert resumed.m.tobytes() == full.m.tobytes() and resumed.v.tobytes() == full.v.tobytes()
    assert resumed.history == full.history


def test_smoke_loss_goes_down():
    st = train(tiny_samples(1), LossSpec(), OptimSpec(max_steps=60, lr=1e-2, batch_size=1), TINY)
    h = [r["total"] for r in st.history]
    k = len(h) // 10
    assert np.median(h[-k:]) < np.median(h[:k])


def test_nan_loss_aborts_with_term_and_step():
    rec = make_record()
    s = PreparedSample.from_record(rec)
    s.y = s.y.copy()
    s.y[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericalAbort) as exc:
        train([s], LossSpec(), OptimSpec(max_steps=3), TINY)
    assert exc.value.term == "mse" and exc.value.step == 0


def test_empty_training_set():
    with pytest.raises(ValueError, match="empty"):
        train([], LossSpec(), OptimSpec(), TINY)


def test_history_is_json_lines(tmp_path):
    st = train(tiny_samples(1), LossSpec(), OptimSpec(max_steps=2), TINY)
    write_history(tmp_path / "h.jsonl", st.history)
    lines = (tmp_path / "h.jsonl").read_text().splitlines()
    assert [json.loads(l)["step"] for l in lines] == [0, 1]
