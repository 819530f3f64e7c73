import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dfm.denoisers import ExactPosterior, PointMassDenoiser
from dfm.errors import InvalidDenoiserError, NotAvailableError, TimeDomainError
from dfm.flows import Alphabet, MaskingFlow, TabularDistribution, TabularFlow, UniformFlow
from dfm.rates import (
    RatePlan,
    RateRow,
    conditional_rate_row,
    db_residual,
    diffusion_implied_rate_matrix,
    r_db_row,
    r_star,
    r_star_row,
    rate_matrix,
    unconditional_rate_row,
    unconditional_rates,
    unconditional_rates_by_enumeration,
    uniform_db_general,
)

kinds = st.sampled_from(["masking", "uniform", "tabular"])
inner_times = st.floats(0.01, 0.99)


def build(kind, S):
    if kind == "masking":
        return MaskingFlow(S)
    if kind == "uniform":
        return UniformFlow(S)
    return TabularFlow.clone(MaskingFlow(S), analytic_dt=True)


def generic_star(flow, t, xt, x1):
    """ReLU(dp_j - dp_xt) / (Z p_xt), written out one entry at a time."""
    p = flow.probs(t, np.int64(x1))
    dp = flow.probs_dt(t, np.int64(x1))
    Z = np.sum(p > 1e-12)
    out = np.zeros(flow.n_states)
    if p[xt] <= 1e-12:
        return out
    for j in range(flow.n_states):
        if j != xt and p[j] > 1e-12:
            out[j] = max(dp[j] - dp[xt], 0.0) / (Z * p[xt])
    return out


def test_plan_validation():
    with pytest.raises(ValueError):
        RatePlan(MaskingFlow(2), -1.0)
    with pytest.raises(NotAvailableError):
        RatePlan(MaskingFlow(2), 1.0, db_kind=None)


def test_r_star_masking_example():
    row = r_star_row(MaskingFlow(3), 0.75, 3, 1)
    assert row[1] == pytest.approx(4.0)
    assert np.allclose(np.delete(row.off_diagonal, 1), 0.0)
    assert row.diagonal == pytest.approx(-4.0)


def test_r_star_at_target_is_zero():
    assert np.all(r_star_row(MaskingFlow(3), 0.4, 2, 2).rates == 0.0)


def test_r_star_uniform_example_matches_generic_form():
    f = UniformFlow(3)
    row = r_star_row(f, 0.5, 0, 2)
    assert row[2] == pytest.approx(2.0)
    assert row[1] == 0.0
    assert np.allclose(row.off_diagonal, generic_star(f, 0.5, 0, 2))


@given(kinds, st.integers(2, 5), inner_times, st.data())
def test_r_star_closed_forms_match_generic(kind, S, t, data):
    f = build(kind, S)
    xt = data.draw(st.integers(0, f.n_states - 1))
    x1 = data.draw(st.integers(0, S - 1))
    assert np.allclose(r_star_row(f, t, xt, x1).off_diagonal, generic_star(f, t, xt, x1), atol=1e-9)


@pytest.mark.parametrize("t", [0.0, 1.0, -0.1])
def test_rates_outside_open_interval_raise(t):
    with pytest.raises(TimeDomainError):
        r_star_row(MaskingFlow(2), t, 2, 0)


def test_r_db_examples():
    m = MaskingFlow(3)
    assert r_db_row(m, 0.5, 1, 1)[3] == pytest.approx(1.0)
    assert r_db_row(m, 0.5, 3, 1)[1] == pytest.approx(1.0)
    u = UniformFlow(3)
    assert r_db_row(u, 0.5, 0, 2)[2] == pytest.approx(4.0)
    assert r_db_row(u, 0.5, 2, 2)[0] == pytest.approx(1.0)
    assert r_db_row(u, 0.5, 0, 2)[1] == 0.0


def test_combined_masking_rows():
    plan = RatePlan(MaskingFlow(3), 2.0)
    assert conditional_rate_row(plan, 0.5, 3, 1)[1] == pytest.approx(4.0)
    assert conditional_rate_row(plan, 0.5, 1, 1)[3] == pytest.approx(2.0)
    zero = RatePlan(MaskingFlow(3), 0.0)
    assert np.array_equal(conditional_rate_row(zero, 0.3, 3, 0).rates, r_star_row(MaskingFlow(3), 0.3, 3, 0).rates)


@given(kinds, st.integers(2, 5), inner_times, st.floats(0, 10), st.floats(0, 10), st.data())
def test_eta_linearity(kind, S, t, a, b, data):
    f = build(kind, S)
    xt = data.draw(st.integers(0, f.n_states - 1))
    x1 = data.draw(st.integers(0, S - 1))
    lhs = conditional_rate_row(RatePlan(f, a + b), t, xt, x1).off_diagonal
    rhs = conditional_rate_row(RatePlan(f, a), t, xt, x1).off_diagonal + b * r_db_row(f, t, xt, x1).off_diagonal
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-9)


def test_off_diagonals_non_negative_and_rows_sum_to_zero(rng):
    for _ in range(10_000 // 50):
        kind = rng.choice(["masking", "uniform", "tabular"])
        S = int(rng.integers(2, 6))
        f = build(kind, S)
        t = rng.uniform(0.001, 0.999, size=(50, 1))
        x1 = rng.integers(0, S, size=(50, 1))
        R = rate_matrix(RatePlan(f, float(rng.uniform(0, 20))), t[:, :, None], x1)
        off = R * (1 - np.eye(f.n_states))
        assert off.min() >= 0
        assert np.max(np.abs(R.sum(axis=-1))) < 1e-9 * max(1.0, np.abs(R).max())


@pytest.mark.parametrize("kind", ["masking", "uniform", "tabular"])
def test_db_residual_vanishes(kind, rng):
    f = build(kind, 4)
    for _ in range(50):
        t = float(rng.uniform(0.01, 0.99))
        assert db_residual(f, t, int(rng.integers(0, 4)), r_db_row) < 1e-10


def test_db_residual_detects_r_star_asymmetry():
    assert db_residual(MaskingFlow(3), 0.4, 0, r_star_row) > 0.1


def test_db_residual_of_zero_rows():
    def zero_rows(flow, t, i, k):
        return RateRow(i, np.zeros(flow.n_states))

    assert db_residual(MaskingFlow(3), 0.4, 0, zero_rows) == 0.0


def test_diffusion_identity_uniform_three_states():
    for t in np.linspace(0.05, 0.95, 19):
        for x1 in range(3):
            star = rate_matrix(RatePlan(UniformFlow(3)), t, np.int64(x1))
            b = 1.0 / (3 * t)
            diff = diffusion_implied_rate_matrix(3, t, x1)
            assert np.max(np.abs(diff - (star + uniform_db_general(3, t, x1, b, b)))) < 1e-9


def test_unconditional_rate_with_point_mass_denoiser_equals_conditional():
    plan = RatePlan(MaskingFlow(3), 1.5)
    den = PointMassDenoiser(np.array([2, 0]), 3)
    xt = np.array([3, 0])
    row = unconditional_rate_row(plan, den, 0.4, xt, 0)
    assert np.allclose(row.rates, conditional_rate_row(plan, 0.4, 3, 2).rates)


def test_unconditional_uniform_by_hand():
    rates = unconditional_rates(RatePlan(UniformFlow(2)), np.array([0.9, 0.1]), 0.5, np.int64(1))
    assert rates[0] == pytest.approx(1.8)


def test_unconditional_masking_unmasked_dimension_is_zero():
    d = TabularDistribution(3, np.array([[0, 1], [2, 2]]), np.array([0.5, 0.5]))
    plan = RatePlan(MaskingFlow(3))
    row = unconditional_rate_row(plan, ExactPosterior(d, MaskingFlow(3)), 0.3, np.array([0, 3]), 0)
    assert np.all(row.rates == 0.0)


def test_denoiser_mass_on_mask_rejected():
    with pytest.raises(InvalidDenoiserError):
        unconditional_rates(RatePlan(MaskingFlow(2)), np.array([0.5, 0.3, 0.2]), 0.5, np.int64(2))


@given(st.sampled_from(["masking", "uniform"]), st.integers(2, 5), st.floats(0, 15), inner_times, st.data())
def test_closed_form_matches_enumeration(kind, S, eta, t, data):
    f = build(kind, S)
    plan = RatePlan(f, eta)
    xt = np.array(data.draw(st.lists(st.integers(0, f.n_states - 1), min_size=3, max_size=3)))
    probs = np.random.default_rng(data.draw(st.integers(0, 999))).dirichlet(np.ones(S), size=3)
    a = unconditional_rates(plan, probs, t, xt)
    b = unconditional_rates_by_enumeration(plan, probs, t, xt)
    assert np.allclose(a, b, rtol=1e-10, atol=1e-10)


def test_r_star_is_zero_on_unreachable_states():
    # a masking x_t that is neither MASK nor x_1 has no mass
    assert np.all(r_star(MaskingFlow(3), 0.5, np.int64(0), np.int64(1)) == 0.0)


def test_tabular_db_requires_positive_masses():
    f = TabularFlow(Alphabet(2, mask=True), lambda t, k: MaskingFlow(2).probs(t, np.int64(k)))
    row = r_db_row(f, 0.5, 0, 1)  # state 0 has no mass when x1 = 1
    assert np.all(row.rates == 0.0)
