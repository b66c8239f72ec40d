import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import max_abs
from hrss import sscan
from hrss.gradcheck import fd_check, weighted_sum_loss
from hrss.sscan import DiscretizedStep, ScanParams, s6_parameterize, scan_chunked, scan_naive
from hrss.tensor import Tensor


def random_instance(r, b, l, c, n):
    p = ScanParams(c, n, rng=r)
    x = Tensor(r.standard_normal((b, l, c)))
    return s6_parameterize(x, p), x, p


def manual_step(abar, bbar, cvec, delta=None, A=None):
    b, l, c, n = abar.shape
    delta = np.ones((b, l, c)) if delta is None else delta
    A = -np.ones((c, n)) if A is None else A
    return DiscretizedStep(Tensor(abar), Tensor(bbar), Tensor(cvec), Tensor(delta), Tensor(A))


# ---------------------------------------------------------------------------
# parameterization


def test_zero_input_gives_softplus_zero_step():
    p = ScanParams(3, 4, rng=np.random.default_rng(0))
    p.delta_bias.data = np.zeros(3)
    step = s6_parameterize(Tensor(np.zeros((1, 5, 3))), p)
    assert max_abs(step.delta, np.full((1, 5, 3), math.log(2))) < 1e-15
    assert max_abs(step.abar.data[0, 0], np.exp(p.A.data * math.log(2))) < 1e-15


def test_vanishing_step_is_identity_dynamics():
    p = ScanParams(2, 3, rng=np.random.default_rng(1))
    p.delta_bias.data = np.full(2, -60.0)
    step = s6_parameterize(Tensor(np.zeros((1, 4, 2))), p)
    assert np.all(np.abs(step.abar.data - 1.0) < 1e-20 + 1e-12)
    assert np.max(np.abs(step.bbar.data)) < 1e-20


def test_bbar_is_delta_times_b(rng):
    step, x, p = random_instance(rng, 2, 6, 4, 3)
    b_t = x.data @ p.w_b.data
    assert max_abs(step.bbar, step.delta.data[..., None] * b_t[:, :, None, :]) < 1e-15


def test_exact_zoh_flag(rng):
    _, x, p = random_instance(rng, 1, 5, 3, 2)
    step = s6_parameterize(x, p, exact_zoh=True)
    A = p.A.data
    b_t = x.data @ p.w_b.data
    ref = (np.exp(step.delta.data[..., None] * A) - 1.0) / A * b_t[:, :, None, :]
    assert max_abs(step.bbar, ref) < 1e-15


def test_a_negative_and_init_ranges(rng):
    p = ScanParams(8, 5, rng=rng)
    assert np.all(p.A.data < 0)
    assert max_abs(p.A.data[3], -np.arange(1, 6, dtype=float)) < 1e-14
    dt = np.log1p(np.exp(p.delta_bias.data))
    assert np.all((dt >= 1e-3 - 1e-15) & (dt <= 0.1 + 1e-15))
    assert p.rank == 1 and ScanParams(64, 2).rank == 4


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError, match=r"\(B, L, 3\)"):
        s6_parameterize(Tensor(np.zeros((1, 4, 5))), ScanParams(3, 2))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**20), scale=st.floats(0.1, 30.0))
def test_positivity(seed, scale):
    r = np.random.default_rng(seed)
    p = ScanParams(4, 3, rng=r)
    step = s6_parameterize(Tensor(r.standard_normal((2, 9, 4)) * scale), p)
    assert np.all(step.delta.data > 0)
    abar = step.abar.data
    assert np.all((abar >= 0) & (abar <= 1))
    # strictly inside (0, 1) wherever |delta * A| is representable away from 0 and underflow
    da = np.abs(step.delta.data[..., None] * p.A.data)
    ok = (da > 1e-15) & (da < 700)
    assert np.all((abar[ok] > 0) & (abar[ok] < 1))


# ---------------------------------------------------------------------------
# reference scan


def test_single_step(rng):
    step, x, _ = random_instance(rng, 2, 1, 3, 4)
    y = scan_naive(step, x).data
    ref = np.einsum("bcn,bn->bc", step.bbar.data[:, 0] * x.data[:, 0, :, None], step.c.data[:, 0])
    assert max_abs(y[:, 0], ref) < 1e-15


def test_memoryless_when_abar_zero(rng):
    b, l, c, n = 1, 6, 2, 3
    bbar = rng.standard_normal((b, l, c, n))
    cvec = rng.standard_normal((b, l, n))
    x = rng.standard_normal((b, l, c))
    step = manual_step(np.zeros((b, l, c, n)), bbar, cvec)
    ref = np.einsum("blcn,bln->blc", bbar * x[..., None], cvec)
    for chunk in (2, 6):
        assert max_abs(scan_chunked(step, Tensor(x), chunk), ref) < 1e-15
    assert max_abs(scan_naive(step, Tensor(x)), ref) < 1e-15


@pytest.mark.parametrize("a,b", [(0.5, 1.0), (0.9, -2.0), (0.99, 0.3)])
def test_geometric_series(a, b):
    l = 40
    step = manual_step(np.full((1, l, 1, 1), a), np.full((1, l, 1, 1), b), np.ones((1, l, 1)))
    t = np.arange(1, l + 1)
    ref = b * (1 - a**t) / (1 - a)
    for chunk in (1, 7, l):
        assert max_abs(scan_chunked(step, Tensor(np.ones((1, l, 1))), chunk).data[0, :, 0], ref) < 1e-12


# ---------------------------------------------------------------------------
# chunked scan


def test_chunk_at_least_length_is_bitwise_naive(rng):
    step, x, _ = random_instance(rng, 2, 20, 3, 4)
    ref = scan_naive(step, x).data
    assert np.array_equal(scan_chunked(step, x, 20).data, ref)
    assert np.array_equal(scan_chunked(step, x, 64).data, ref)


def test_chunk_one_and_sixteen(rng):
    step, x, _ = random_instance(rng, 2, 64, 4, 8)
    ref = scan_naive(step, x)
    assert max_abs(scan_chunked(step, x, 1), ref) < 1e-12
    assert max_abs(scan_chunked(step, x, 16), ref) < 1e-10


@settings(max_examples=40, deadline=None)
@given(b=st.integers(1, 3), l=st.integers(1, 50), c=st.integers(1, 5), n=st.integers(1, 6),
       chunk=st.integers(1, 60), seed=st.integers(0, 2**20))
def test_chunked_equals_naive(b, l, c, n, chunk, seed):
    step, x, _ = random_instance(np.random.default_rng(seed), b, l, c, n)
    assert max_abs(scan_chunked(step, x, chunk), scan_naive(step, x)) < 1e-10


def test_chunk_must_be_positive(rng):
    step, x, _ = random_instance(rng, 1, 4, 2, 2)
    with pytest.raises(ValueError):
        scan_chunked(step, x, 0)


def test_thread_count_does_not_change_result(rng, monkeypatch):
    step, x, _ = random_instance(rng, 2, 33, 7, 5)
    monkeypatch.setenv("HRSS_THREADS", "1")
    one = scan_chunked(step, x, 8).data
    monkeypatch.setenv("HRSS_THREADS", "4")
    four = scan_chunked(step, x, 8).data
    assert np.array_equal(one, four)


def test_causality(rng):
    p = ScanParams(3, 4, rng=rng)
    x = rng.standard_normal((1, 16, 3))
    y = sscan.selective_scan(Tensor(x), p, 4).data
    x2 = x.copy()
    x2[:, 9:] += rng.standard_normal((1, 7, 3)) * 10
    y2 = sscan.selective_scan(Tensor(x2), p, 4).data
    assert np.array_equal(y[:, :9], y2[:, :9])
    assert not np.allclose(y[:, 9:], y2[:, 9:])


# ---------------------------------------------------------------------------
# backward


def _conditioned(r, c, n, rank=None):
    p = ScanParams(c, n, rank, rng=r)
    for t in p.parameters():
        t.data = np.array(t.data) + r.standard_normal(t.shape) * 0.2
    p.delta_bias.data = r.normal(0.0, 0.3, size=c)
    return p


@pytest.mark.parametrize("l,chunk", [(1, 4), (9, 4), (9, 9), (9, 1)])
def test_scan_gradients_match_fd(rng, l, chunk):
    p = _conditioned(rng, 3, 4)
    x = Tensor(rng.standard_normal((2, l, 3)), requires_grad=True)
    probe = rng.standard_normal((2, l, 3))
    params = {"x": x, **dict(p.named_parameters())}
    reports = fd_check("scan", lambda: weighted_sum_loss(sscan.selective_scan(x, p, chunk), probe), params, rng=rng)
    assert all(r.passed for r in reports), [r.csv_row() for r in reports if not r.passed]


def test_delta_bias_gradient_on_zero_input(rng):
    p = _conditioned(rng, 3, 2)
    # x = 0 makes the output identically zero; the probe goes through Δ via abar
    x = Tensor(np.zeros((1, 6, 3)))
    probe = rng.standard_normal((1, 6, 3, 2))

    def loss():
        return weighted_sum_loss(s6_parameterize(x, p).abar, probe)

    reports = fd_check("delta_bias", loss, {"delta_bias": p.delta_bias}, rng=rng)
    assert reports[0].passed


def test_scan_backward_single_step_product_rule(rng):
    b, c, n = 1, 2, 3
    abar, bbar = rng.uniform(0.1, 0.9, (b, 1, c, n)), rng.standard_normal((b, 1, c, n))
    cvec, x = rng.standard_normal((b, 1, n)), rng.standard_normal((b, 1, c))
    gy = rng.standard_normal((b, 1, c))
    h = bbar * x[..., None]
    g_abar, g_bbar, g_c, g_x = sscan.scan_backward(abar, bbar, cvec, x, h, gy)
    assert np.array_equal(g_abar, np.zeros_like(abar))
    assert max_abs(g_bbar, gy[..., None] * cvec[:, :, None, :] * x[..., None]) < 1e-15
    assert max_abs(g_x, np.einsum("blc,bln,blcn->blc", gy, cvec, bbar)) < 1e-15
    assert max_abs(g_c, np.einsum("blc,blcn->bln", gy, h)) < 1e-15


# ---------------------------------------------------------------------------
# contribution analysis


def _unrolled_weight(step, m, n, channel):
    """Coefficient of x_m in y_n from the recurrence itself (1-based)."""
    abar = step.abar.data[0, :, channel]
    w = step.bbar.data[0, m - 1, channel].copy()
    for t in range(m + 1, n + 1):
        w = abar[t - 1] * w
    return float(step.c.data[0, n - 1] @ w)


def test_contribution_exclusive_matches_unrolled_recurrence(rng):
    step, x, _ = random_instance(rng, 1, 12, 3, 4)
    for m, n in [(1, 2), (3, 9), (1, 12), (11, 12)]:
        for ch in range(3):
            got = sscan.contribution(step, m, n, ch, inclusive=False)
            assert got == pytest.approx(_unrolled_weight(step, m, n, ch), rel=1e-12, abs=1e-15)


def test_outputs_are_sums_of_contributions(rng):
    step, x, _ = random_instance(rng, 1, 10, 2, 3)
    y = scan_naive(step, x).data[0]
    for n in (2, 6, 10):
        for ch in range(2):
            own = float(step.c.data[0, n - 1] @ (step.bbar.data[0, n - 1, ch] * x.data[0, n - 1, ch]))
            rest = sum(sscan.contribution(step, m, n, ch, inclusive=False) * x.data[0, m - 1, ch]
                       for m in range(1, n))
            assert own + rest == pytest.approx(y[n - 1, ch], rel=1e-12, abs=1e-14)


def test_contribution_inclusive_next_token(rng):
    step, _, _ = random_instance(rng, 1, 8, 2, 3)
    m, n, ch = 4, 5, 1
    abar = step.abar.data[0, :, ch]
    direct = float(step.c.data[0, n - 1] @ (abar[m - 1] * abar[n - 1] * step.bbar.data[0, m - 1, ch]))
    assert sscan.contribution(step, m, n, ch) == pytest.approx(direct, rel=1e-12)


def test_contribution_no_decay_limit(rng):
    b, l, c, n = 1, 6, 2, 3
    bbar, cvec = rng.standard_normal((b, l, c, n)), rng.standard_normal((b, l, n))
    step = manual_step(np.ones((b, l, c, n)), bbar, cvec, A=np.zeros((c, n)))
    assert sscan.contribution(step, 2, 5, 1) == pytest.approx(float(cvec[0, 4] @ bbar[0, 1, 1]), rel=1e-14)


def test_contribution_unit_decay_closed_form(rng):
    l = 9
    bbar, cvec = rng.standard_normal((1, l, 1, 1)), rng.standard_normal((1, l, 1))
    step = manual_step(np.full((1, l, 1, 1), math.exp(-1)), bbar, cvec,
                       delta=np.ones((1, l, 1)), A=-np.ones((1, 1)))
    for m, n in [(1, 2), (2, 7), (3, 9)]:
        ref = math.exp(-(n - m + 1)) * cvec[0, n - 1, 0] * bbar[0, m - 1, 0, 0]
        assert sscan.contribution(step, m, n, 0) == pytest.approx(ref, rel=1e-14)


@pytest.mark.parametrize("m,n", [(3, 3), (4, 2), (0, 3), (2, 99)])
def test_contribution_rejects_bad_indices(rng, m, n):
    step, _, _ = random_instance(rng, 1, 5, 1, 2)
    with pytest.raises(ValueError):
        sscan.contribution(step, m, n, 0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**20), m=st.integers(1, 15), inclusive=st.booleans())
def test_log_decay_monotone(seed, m, inclusive):
    step, _, _ = random_instance(np.random.default_rng(seed), 1, 16, 3, 4)
    ld = sscan.log_decay(step, m, inclusive=inclusive)
    assert ld.shape == (16 - m + 1, 3, 4)
    assert np.all(np.diff(ld, axis=0) <= 0)


def test_contribution_map_matches_pointwise_calls(rng):
    step, _, _ = random_instance(rng, 1, 10, 3, 2)
    for ch in (0, 2):
        row = sscan.contribution_map(step, 7, channel=ch)
        ref = [abs(sscan.contribution(step, m, 7, ch)) for m in range(1, 7)]
        assert max_abs(row[:6], ref) < 1e-15
        assert np.all(row[6:] == 0)
    avg = sscan.contribution_map(step, 7)
    ref = np.mean([[abs(sscan.contribution(step, m, 7, c)) for c in range(3)] for m in range(1, 7)], axis=1)
    assert max_abs(avg[:6], ref) < 1e-15


def test_contribution_map_decays_with_distance():
    l, c, n = 12, 2, 3
    A = -np.tile(np.arange(1.0, n + 1), (c, 1))
    delta = np.full((1, l, c), 0.3)
    abar = np.exp(delta[..., None] * A)
    bbar = np.abs(np.random.default_rng(5).standard_normal((1, 1, c, n))).repeat(l, axis=1)
    cvec = np.ones((1, l, n))
    step = manual_step(abar, bbar, cvec, delta=delta, A=A)
    row = sscan.contribution_map(step, 10)[:9]
    assert np.all(np.diff(row) > 0)  # m closer to n -> larger weight


def test_contribution_map_second_token_has_one_entry(rng):
    step, _, _ = random_instance(rng, 1, 6, 2, 2)
    row = sscan.contribution_map(step, 2)
    assert np.count_nonzero(row) == 1 and row[0] > 0
    assert np.count_nonzero(sscan.contribution_map(step, 1)) == 0


def test_normalize_map():
    assert np.array_equal(sscan.normalize_map(np.array([0.0, 2.0, 1.0])), [0.0, 1.0, 0.5])
    assert np.array_equal(sscan.normalize_map(np.zeros(3)), np.zeros(3))
