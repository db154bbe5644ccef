import logging
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gialab.data import gen_synthetic
from gialab.nn import Batch, CrossEntropy, DenseModel, SquaredError, batch_gradient, forward_rows, per_sample_output_grad
from gialab.vgia import (
    AttackConfig,
    CraftedModel,
    DegenerateCoefficientError,
    DegenerateGainError,
    Distribution,
    FeatureBox,
    Interval,
    SliceRecord,
    check_isolation,
    compute_slices,
    craft_parameters,
    initial_interval,
    reconstruct_input,
    recover_target,
    robust_span_test,
    run_vgia,
    set_hyperplanes,
    span_residual,
)
from gialab.vgia.recover import TargetRangeError, bisect_target
from gialab.vgia.search import Assignment, pad_biases


def cfg_for(d, **kw):
    return AttackConfig(feature_box=FeatureBox.uniform(d), **kw)


# -- configuration ----------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(min_probes=2)
    with pytest.raises(ValueError):
        AttackConfig(span_tolerance=0)
    with pytest.raises(ValueError):
        Distribution("uniform", 1, 0)
    assert AttackConfig(direction=["normal", 0, 1e-2]).direction == Distribution("normal", 0.0, 1e-2)


def test_feature_box_projection_range_is_exact(rng):
    box = FeatureBox(np.array([-1.0, 0.0, 2.0]), np.array([1.0, 3.0, 2.5]))
    w = np.array([0.5, -2.0, 1.0])
    corners = np.array(np.meshgrid(*zip(box.lower, box.upper))).reshape(3, -1).T
    p = corners @ w
    assert box.projection_range(w) == (pytest.approx(p.min()), pytest.approx(p.max()))
    lo, hi = initial_interval(w, box)
    assert lo < -p.max() and hi > -p.min()


# -- crafting ---------------------------------------------------------------------


def test_crafted_rows_share_w(rng):
    cfg = cfg_for(5)
    w = rng.normal(0, 1e-2, 5)
    biases = np.array([-1.0, 0.0, 1.0, 2.0])
    cm = craft_parameters(cfg, w, biases, rng)
    first = cm.model.layers[0]
    np.testing.assert_array_equal(first.weight[:4], np.tile(w, (4, 1)))
    np.testing.assert_array_equal(first.bias[:4], biases)
    assert cm.n_attack == 4 and cm.gains.shape == (4,)
    with pytest.raises(ValueError):
        craft_parameters(cfg, w, np.array([0.0, 0.0, 1.0]), rng)


def test_classification_head_is_rank_one(rng):
    cm = craft_parameters(cfg_for(4), rng.normal(0, 1e-2, 4), np.linspace(-0.1, 0.1, 6), rng, n_classes=5)
    head = cm.model.layers[-1].weight
    assert np.linalg.matrix_rank(head, tol=1e-12 * np.abs(head).max()) == 1
    minors = head[:, None, :, None] * head[None, :, None, :] - head[:, None, None, :] * head[None, :, :, None]
    assert np.max(np.abs(minors)) < 1e-13 * np.abs(head).max() ** 2


def test_mixing_units_are_always_on(rng):
    cfg = cfg_for(6, mixing_units=5)
    cm = craft_parameters(cfg, rng.normal(0, 1e-2, 6), np.linspace(-0.05, 0.05, 4), rng)
    x = rng.uniform(0, 1, (300, 6))
    _, pre, _ = forward_rows(cm.model, x)
    assert np.all(pre[0][:, 4:] > 0)


# -- placement ---------------------------------------------------------------------


def test_first_round_uniform_split():
    p = set_hyperplanes([Interval(0.0, 1.0)], 5)
    np.testing.assert_array_equal(p.biases, [0.0, 0.25, 0.5, 0.75, 1.0])
    assert len(p.assignments) == 1 and list(p.assignments[0].child_range) == [0, 1, 2, 3]


def test_abutting_intervals_share_the_boundary():
    p = set_hyperplanes([Interval(0.5, 1.0), Interval(0.0, 0.5)], 7)
    assert p.used == 7 and len(set(p.biases.tolist())) == 7
    assert np.all(np.diff(p.biases) > 0)
    assert np.count_nonzero(p.biases == 0.5) == 1
    a, b = p.assignments
    assert a.last == b.first
    assert p.biases[a.first] == 0.0 and p.biases[b.last] == 1.0


def test_probe_counts_and_deferral():
    ivs = [Interval(float(k), k + 0.5) for k in range(5)]
    p = set_hyperplanes(ivs, 10)
    # M = min(5, 10 // 3) = 3; q = 4, 3, 3
    assert [a.last - a.first + 1 for a in p.assignments] == [4, 3, 3]
    assert [iv.low for iv in p.deferred] == [3.0, 4.0]


def test_too_narrow_interval_stalls():
    x = 1.0
    p = set_hyperplanes([Interval(x, np.nextafter(x, 2.0)), Interval(2.0, 3.0)], 6)
    assert len(p.stalled) == 1 and len(p.assignments) == 1


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(-10, 10), st.floats(1e-3, 2)), min_size=1, max_size=12), st.integers(3, 40), st.booleans())
def test_placement_invariants(spans, n, abut):
    ivs, cursor = [], -20.0
    for gap, width in spans:
        low = cursor if abut else cursor + abs(gap) + 1e-2
        ivs.append(Interval(low, low + width))
        cursor = low + width
    p = set_hyperplanes(ivs, n)
    assert p.used <= n and np.all(np.diff(p.biases) > 0)
    for a in p.assignments:
        assert p.biases[a.first] == a.interval.low and p.biases[a.last] == a.interval.high
        assert a.last - a.first + 1 >= 3
    assert len(p.assignments) + len(p.deferred) + len(p.stalled) == len(ivs)
    padded = pad_biases(p, n, -100.0, 1.0)
    assert padded.used == n and np.all(np.diff(padded.biases) > 0)
    for a, b in zip(p.assignments, padded.assignments):
        np.testing.assert_array_equal(p.biases[a.first : a.last + 1], padded.biases[b.first : b.last + 1])


# -- slices -------------------------------------------------------------------------


def test_slices_match_per_sample_oracle(rng):
    d, B = 3, 3
    box = FeatureBox.uniform(d)
    cfg = AttackConfig(feature_box=box)
    x = rng.uniform(0, 1, (B, d))
    y = rng.normal(size=B)
    w = rng.normal(0, 1e-2, d)
    p = x @ w
    biases = np.sort(-np.concatenate([p + 1e-6, [p.max() + 1e-3, p.min() - 1e-3]]))
    cm = craft_parameters(cfg, w, biases, rng)
    slices = compute_slices(batch_gradient(cm.model, Batch(x, y), SquaredError()), cm.gains, biases)
    assert len(slices) == len(biases) - 1
    for sl in slices:
        res = [j for j in range(B) if -sl.b_high < p[j] <= -sl.b_low]
        coef = [per_sample_output_grad(cm.model, x[j], y[j], SquaredError())[0] / B for j in res]
        s_true = sum((c * x[j] for c, j in zip(coef, res)), np.zeros(d))
        np.testing.assert_allclose(sl.s, s_true, rtol=0, atol=1e-12)
        assert sl.beta == pytest.approx(sum(coef), abs=1e-12)
        if len(res) == 1:
            assert np.linalg.norm(reconstruct_input(sl) - x[res[0]]) < 1e-9


def test_degenerate_gain_rejected(rng):
    model = DenseModel.from_arrays([np.ones((2, 2)), np.ones((1, 2))], [np.zeros(2), np.zeros(1)])
    g = batch_gradient(model, Batch([[0.1, 0.2]], [1.0]), SquaredError())
    with pytest.raises(DegenerateGainError):
        compute_slices(g, np.array([1.0, 0.0]), np.array([0.0, 1.0]))


# -- recovery -----------------------------------------------------------------------


def _constant_model(value):
    model = DenseModel.from_arrays([np.zeros((1, 2))], [np.array([value])])
    return CraftedModel(model, np.ones(1), np.zeros(1))


def test_reconstruct_input_scalar_division():
    B = 4
    rec = SliceRecord(0.0, 1.0, (2 / B) * np.array([0.3, 0.7]), 2 / B)
    np.testing.assert_allclose(reconstruct_input(rec), [0.3, 0.7], rtol=1e-15)
    with pytest.raises(DegenerateCoefficientError):
        reconstruct_input(SliceRecord(0.0, 1.0, np.ones(2), 1e-13))


def test_closed_form_target():
    y = recover_target(np.zeros(2), 0.2, _constant_model(0.9), SquaredError(), 4)
    assert y == pytest.approx(0.5, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(-3, 3), st.integers(1, 512))
def test_bisection_agrees_with_closed_form(z, beta, B):
    cm = _constant_model(z)
    closed = recover_target(np.zeros(2), beta, cm, SquaredError(), B, method="closed")
    bis = recover_target(np.zeros(2), beta, cm, SquaredError(), B, method="bisect", target_range=(-2000.0, 2000.0))
    assert abs(closed - bis) < 1e-10 * max(1.0, abs(closed))


def test_bisection_bracket_failure():
    with pytest.raises(TargetRangeError):
        bisect_target(lambda y: y, 10.0, -1.0, 1.0)


def test_classification_target_picks_true_class(rng):
    d, C = 4, 6
    cfg = cfg_for(d)
    w = rng.normal(0, 1e-2, d)
    cm = craft_parameters(cfg, w, np.linspace(-0.2, 0.05, 5), rng, n_classes=C)
    x = rng.uniform(0, 1, d)
    for label in range(C):
        g = per_sample_output_grad(cm.model, x, label, CrossEntropy())
        beta = float(g @ cm.head) / 7
        assert recover_target(x, beta, cm, CrossEntropy(), 7) == label


# -- isolation ----------------------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_span_residual_properties(seed, k):
    rng = np.random.default_rng(seed)
    vecs = rng.normal(size=(k, 10))
    inside = rng.normal(size=k) @ vecs
    assert span_residual(inside, list(vecs)) < 1e-12
    outside = rng.normal(size=10)
    r = span_residual(outside, list(vecs))
    q, _ = np.linalg.qr(vecs.T)
    truth = np.linalg.norm(outside - q @ (q.T @ outside)) / np.linalg.norm(outside)
    assert r == pytest.approx(truth, rel=1e-9, abs=1e-14)


def test_robust_test_accepts_small_drift(rng):
    kids = list(rng.normal(size=(2, 8)))
    parent = kids[0] + kids[1]
    drift = rng.normal(size=8)
    drift -= np.linalg.qr(np.array(kids).T)[0] @ (np.linalg.qr(np.array(kids).T)[0].T @ drift)
    noisy = parent + 1e-5 * np.linalg.norm(parent) * drift / np.linalg.norm(drift)
    assert robust_span_test(noisy, kids, 1e-3)
    assert not span_residual(noisy, kids) < 1e-8
    assert robust_span_test(parent, kids, 1e-3) == (span_residual(parent, kids) < 1e-8)


def _two_rounds(x, y, w, parent_edges, child_edges, cfg, rng):
    batch = Batch(x, y)

    def slices(biases, t):
        cm = craft_parameters(cfg, w, biases, rng, round_index=t)
        return compute_slices(batch_gradient(cm.model, batch, SquaredError()), cm.gains, biases, t, cfg.zero_tolerance, cm)

    parent = slices(-np.asarray(parent_edges)[::-1], 1)[0]
    biases = -np.asarray(child_edges)[::-1]
    assignment = Assignment(Interval(parent.b_low, parent.b_high, parent), 0, len(biases) - 1)
    return [assignment], slices(biases, 2)


def test_isolated_children_are_certified(rng):
    d = 5
    cfg = cfg_for(d)
    w = rng.normal(0, 1e-2, d)
    x = rng.uniform(0, 1, (3, d))
    p = np.sort(x @ w)
    x = x[np.argsort(x @ w)]
    lo, hi = p[0] - 1e-4, p[2] + 1e-4
    edges = [lo, (p[0] + p[1]) / 2, (p[1] + p[2]) / 2, (p[2] + hi) / 2, hi]
    assignments, kids = _two_rounds(x, rng.normal(size=3), w, [lo, hi], edges, cfg, rng)
    out = check_isolation(assignments, kids, cfg, SquaredError(), 3)
    nonzero = [k for k in kids if not k.is_empty]
    assert len(out.certified) == len(nonzero) == 3 and not out.intervals
    for rec in out.certified:
        assert min(np.linalg.norm(x - rec.x_hat, axis=1)) < 1e-9
        # beta * x_hat reproduces the slice it came from
        sl = next(k for k in kids if k.b_low == rec.b_low)
        assert np.max(np.abs(rec.beta * rec.x_hat - sl.s)) < 1e-12


def test_collision_is_not_certified(rng):
    d = 5
    cfg = cfg_for(d)
    w = rng.normal(0, 1e-2, d)
    x = rng.uniform(0, 1, (2, d))
    p = x @ w
    lo, hi = p.min() - 1e-3, p.max() + 1e-3
    # the upper child holds both records, the lower one is empty
    edges = [lo, lo + 1e-4, hi]
    assignments, kids = _two_rounds(x, rng.normal(size=2), w, [lo, hi], edges, cfg, rng)
    out = check_isolation(assignments, kids, cfg, SquaredError(), 2)
    assert not out.certified and len(out.intervals) == 1


# -- end-to-end ---------------------------------------------------------------------


def test_single_record_certified_in_round_two():
    batch = gen_synthetic(4, 1, 3)
    r = run_vgia(batch, cfg_for(4, n_neurons=8), rounds=5)
    assert r.complete and r.rounds_to_verifiability == 2
    assert r.reconstructions[0].round_found == 2
    assert np.linalg.norm(r.reconstructions[0].x_hat - batch.features[0]) < 1e-9


def test_toy_batch_fully_recovered():
    batch = gen_synthetic(4, 8, 5)
    r = run_vgia(batch, cfg_for(4, n_neurons=16, seed=2), rounds=25)
    assert r.complete and len(r.reconstructions) == 8
    for rec in r.reconstructions:
        j = np.argmin(np.linalg.norm(batch.features - rec.x_hat, axis=1))
        assert np.linalg.norm(batch.features[j] - rec.x_hat) < 1e-9
        assert abs(rec.y_hat - batch.targets[j]) < 1e-8


def test_trace_and_progress_invariants():
    batch = gen_synthetic(8, 64, 9)
    r = run_vgia(batch, cfg_for(8, n_neurons=32, seed=4), rounds=40)
    assert r.complete and len(r.reconstructions) == 64
    assert r.trace[-1].certified_total == 64 and r.trace[-1].live_intervals == 0
    assert all(t.budget_used <= 32 for t in r.trace)
    assert [t.round for t in r.trace] == list(range(1, len(r.trace) + 1))
    for rec in r.reconstructions:
        assert rec.b_high > rec.b_low


def test_live_intervals_never_widen(monkeypatch):
    import gialab.vgia.run as run_mod

    seen = []
    orig = run_mod.check_isolation

    def spy(assignments, slices, cfg, loss, bs, robust=False):
        out = orig(assignments, slices, cfg, loss, bs, robust)
        for a in assignments:
            for k in a.child_range:
                seen.append(slices[k].width <= a.interval.width)
        return out

    monkeypatch.setattr(run_mod, "check_isolation", spy)
    run_vgia(gen_synthetic(6, 40, 1), cfg_for(6, n_neurons=24), rounds=30)
    assert seen and all(seen)


def test_duplicates_leave_run_incomplete(caplog):
    batch = gen_synthetic(6, 20, 4)
    x = np.array(batch.features)
    x[7] = x[3]
    dup = Batch(x, batch.targets)
    with caplog.at_level(logging.ERROR):
        r = run_vgia(dup, cfg_for(6, n_neurons=32, seed=1), rounds=40)
    assert r.incomplete and r.rounds_to_verifiability is None
    assert len(r.reconstructions) == 18
    for rec in r.reconstructions:
        assert np.min(np.linalg.norm(x - rec.x_hat, axis=1)) < 1e-9
        assert np.linalg.norm(rec.x_hat - x[3]) > 1e-6


def test_box_mismatch_rejected():
    with pytest.raises(ValueError):
        run_vgia(gen_synthetic(3, 4, 0), cfg_for(5))
