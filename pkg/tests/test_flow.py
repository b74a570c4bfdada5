import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wpolab._validation import ContractViolation
from wpolab.flow import (
    CFLViolation, DensityFlow, GridDensity, expected_functional, face_velocity, fisher_rao_flow_step,
    max_stable_dt, project_flow_to_gaussian, wasserstein_flow_step,
)
from wpolab.policies import DiagGaussian
from wpolab.verify import expected_wpo_update


def neg_quad(a):
    return -0.5 * a**2


def quartic(a):
    return -(a**4) / 100.0 + a**2


def gaussian_pdf(x, m, s):
    return np.exp(-0.5 * ((x - m) / s) ** 2) / (s * np.sqrt(2 * np.pi))


def test_grid_moments():
    d = GridDensity.gaussian(1.5, 0.7, cells=4096)
    assert d.mass() == pytest.approx(1.0, abs=1e-12)
    assert d.mean() == pytest.approx(1.5, abs=1e-9)
    assert d.stddev() == pytest.approx(0.7, rel=1e-4)


def test_grid_validation():
    with pytest.raises(ContractViolation):
        GridDensity(0.0, 1.0, np.array([1.0, -0.1, 1.0]))
    with pytest.raises(ContractViolation):
        GridDensity(1.0, 0.0, np.ones(4))


@pytest.mark.parametrize("scheme", ["upwind", "van_leer"])
def test_mass_conservation_and_positivity(scheme):
    d = GridDensity.gaussian(2.0, 1.0, cells=1024)
    v = face_velocity(d, quartic)
    dt = max_stable_dt(d, v)
    for _ in range(300):
        new = wasserstein_flow_step(d, quartic, dt, scheme=scheme, velocity=v)
        assert abs(new.mass() - d.mass()) <= 1e-10
        assert np.all(new.values >= 0)
        d = new


def test_cfl_violation_raises():
    d = GridDensity.gaussian(0.0, 1.0, cells=256)
    v = face_velocity(d, neg_quad)
    with pytest.raises(CFLViolation):
        wasserstein_flow_step(d, neg_quad, 2 * max_stable_dt(d, v, cfl=0.5))
    with pytest.raises(ContractViolation):
        wasserstein_flow_step(d, neg_quad, 0.0)


def test_exact_gaussian_contraction():
    # for Q=-a^2/2 particles follow a(t) = a0 exp(-t), so N(1, 1) becomes N(e^-1, e^-1)
    flow = DensityFlow(t_final=1.0, cfl=0.4).fit(GridDensity.gaussian(1.0, 1.0, cells=4096), neg_quad)
    d = flow.density_
    exact = gaussian_pdf(d.centers, np.exp(-1), np.exp(-1))
    assert np.sum(np.abs(d.values - exact)) * d.dx < 1e-3
    assert flow.means_[-1] == pytest.approx(np.exp(-1), rel=1e-3)


@pytest.mark.parametrize("q,sign", [(neg_quad, -1.0), (lambda a: 0.5 * a**2, 1.0)])
def test_projected_rates_match_expected_update(q, sign):
    for m, s in ((1.0, 1.0), (-0.5, 1.5), (0.3, 0.6)):
        before = GridDensity.gaussian(m, s, cells=4096)
        v = face_velocity(before, q)
        dt = 0.05 * max_stable_dt(before, v)
        after = wasserstein_flow_step(before, q, dt, velocity=v)
        rates = np.array(project_flow_to_gaussian(before, after, dt))
        target = expected_wpo_update(DiagGaussian([m], [s]), lambda a, sg=sign: sg * a).flat()
        np.testing.assert_allclose(rates, target, rtol=0.02)
        np.testing.assert_allclose(rates, [sign * m, sign * s], rtol=0.02)


def test_expected_q_nondecreasing():
    flow = DensityFlow(t_final=2.0).fit(GridDensity.gaussian(0.5, 1.5, lo=-9.0, hi=9.0, cells=2048), quartic)
    assert np.min(np.diff(flow.expected_q_)) >= -1e-9


def test_constant_q_leaves_density_unchanged():
    d = GridDensity.gaussian(0.0, 1.0, cells=512)
    flow = DensityFlow(t_final=1.0, dt=0.01).fit(d, lambda a: np.zeros_like(a))
    assert flow.density_.values.tobytes() == d.values.tobytes()


def test_cube_root_squash_moves_slower_far_away():
    d = GridDensity.gaussian(6.0, 0.5, cells=2048)
    plain = DensityFlow(t_final=0.1).fit(d, neg_quad)
    cube = DensityFlow(t_final=0.1, squash="cube_root").fit(d, neg_quad)
    assert plain.means_[-1] < cube.means_[-1] < 6.0


def test_fisher_rao_step():
    d = GridDensity.gaussian(0.0, 1.0, lo=-8.0, hi=8.0, cells=1024)
    new = fisher_rao_flow_step(d, neg_quad, 0.01)
    assert new.mass() == pytest.approx(1.0, abs=1e-12)
    assert new.stddev() < d.stddev()
    assert expected_functional(new, neg_quad) > expected_functional(d, neg_quad)
    with pytest.raises(ContractViolation):
        fisher_rao_flow_step(d, lambda a: 1e6 * a**2, 1.0)


def test_fisher_rao_rates_match_score_gradient():
    # moment rates of the multiplicative flow for Q=-a^2/2: dm/dt = -m s^2, ds/dt = -s^3/2
    m, s = 1.0, 1.0
    d = GridDensity.gaussian(m, s, lo=-8.0, hi=8.0, cells=4096)
    dt = 1e-4
    rates = project_flow_to_gaussian(d, fisher_rao_flow_step(d, neg_quad, dt), dt)
    assert rates[0] == pytest.approx(-m * s**2, rel=0.01)
    assert rates[1] == pytest.approx(-(s**3) / 2, rel=0.01)


@given(mean=st.floats(-3, 3), std=st.floats(0.3, 2.0))
@settings(max_examples=15, deadline=None)
def test_flow_estimator_records_consistent_trajectory(mean, std):
    flow = DensityFlow(t_final=0.2).fit(GridDensity.gaussian(mean, std, cells=512), neg_quad)
    assert flow.times_[0] == 0.0 and flow.times_[-1] == pytest.approx(0.2)
    assert len(flow.means_) == flow.n_steps_ + 1
    assert abs(flow.means_[-1]) <= abs(mean) + 1e-9
