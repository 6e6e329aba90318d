import logging

import numpy as np
import pytest

from exceptions import (
    BlowUpError, DimensionMismatchError, InvalidStateError, NegativeSusceptibleError, NonFiniteInputError,
    WeightOutOfRangeError
)
from service_graph import Complete, ErdosRenyi, Graph, GraphKind, make_graph, unit_diagonal
from service_seir_dynamics import (
    CouplingMode, EpidemicParams, IntegrationMethod, SeirState, check_step_size, coupling_matrix,
    detect_equilibrium, integrate, rhs, rhs_laplacian, rhs_symmetric, scalar_seir_rhs, seasonal_profile,
    switch_profile
)


def scalar_rk4(y0, t_end, dt, beta=0.74, mu=0.5, gamma=0.14):
    """単一集団 SEIR の独立した RK4 積分"""
    y = np.array(y0, dtype=float)
    n_steps = int(round(t_end / dt))
    for k in range(n_steps):
        t = k * dt
        k1 = scalar_seir_rhs(t, y, beta, mu, gamma)
        k2 = scalar_seir_rhs(t, y + 0.5 * dt * k1, beta, mu, gamma)
        k3 = scalar_seir_rhs(t, y + 0.5 * dt * k2, beta, mu, gamma)
        k4 = scalar_seir_rhs(t, y + dt * k3, beta, mu, gamma)
        y = y + dt * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
    return y


def random_state(rng, n):
    raw = rng.dirichlet(np.ones(4), size=n).T
    return SeirState(raw[0], raw[1], raw[2], raw[3])


@pytest.fixture
def single_node():
    return Graph([[0.0]])


@pytest.fixture
def k4():
    return make_graph(Complete(), 4)


@pytest.fixture
def params():
    return EpidemicParams(beta=0.74, mu=0.5, gamma=0.14)


class TestSeirState:
    def test_length_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            SeirState([1.0, 1.0], [0.0], [0.0], [0.0])

    def test_validate_rejects_bad_sum(self):
        with pytest.raises(InvalidStateError):
            SeirState([0.5], [0.0], [0.0], [0.0]).validate()

    def test_validate_rejects_out_of_range(self):
        with pytest.raises(InvalidStateError):
            SeirState([1.2], [-0.2], [0.0], [0.0]).validate()

    def test_validate_rejects_nan(self):
        with pytest.raises(NonFiniteInputError):
            SeirState([np.nan], [0.0], [0.0], [0.0]).validate()

    def test_seed_node(self):
        state = SeirState.seed_node(3, 1, 0.05)
        np.testing.assert_allclose(state.s, [1.0, 0.95, 1.0])
        np.testing.assert_allclose(state.i, [0.0, 0.05, 0.0])
        assert state.conservation_residual() == 0.0


class TestEpidemicParams:
    def test_scalar_broadcasts(self, params):
        beta, mu, gamma = params.values(0.0, 3)
        np.testing.assert_array_equal(beta, [0.74, 0.74, 0.74])

    def test_vector_length_checked(self):
        with pytest.raises(DimensionMismatchError):
            EpidemicParams(beta=np.array([0.1, 0.2])).values(0.0, 3)

    def test_negative_rejected(self):
        with pytest.raises(WeightOutOfRangeError):
            EpidemicParams(gamma=-0.1).values(0.0, 2)

    def test_switch_profile(self):
        p = EpidemicParams(beta=switch_profile(0.74, 0.2, 10.0))
        assert p.is_time_dependent
        assert p.values(5.0, 2)[0][0] == 0.74
        assert p.values(10.0, 2)[0][0] == 0.2

    def test_seasonal_profile_requires_positive_floor(self):
        with pytest.raises(WeightOutOfRangeError):
            seasonal_profile(0.5, 0.6, 10.0)

    def test_describe(self):
        p = EpidemicParams(beta=switch_profile(0.74, 0.2, 10.0), mu=np.array([0.5, 0.4]), gamma=0.14)
        assert p.describe() == {'beta': 'switch(0.74, 0.2, 10.0)', 'mu': 'node(2)', 'gamma': '0.14'}

    def test_integrate_logs_parameters(self, caplog):
        g = make_graph(Complete(), 3)
        p = EpidemicParams(beta=seasonal_profile(0.5, 0.2, 4.0))

        with caplog.at_level(logging.INFO):
            integrate(SeirState.seed_node(3, 0, 0.01), g, p, t_end=0.1, dt=0.01)

        assert "seasonal(0.5, 0.2, 4.0)" in caplog.text

    def test_bounds_over_time(self):
        p = EpidemicParams(beta=seasonal_profile(0.5, 0.2, 4.0), mu=0.5, gamma=0.14)
        c0, k0 = p.bounds(2, np.linspace(0.0, 4.0, 17))
        assert c0 == pytest.approx(0.14)
        assert k0 == pytest.approx(0.7)


class TestRhs:
    def test_no_infection_pressure(self, k4, params):
        x = SeirState([0.8] * 4, [0.2] * 4, [0.0] * 4, [0.0] * 4)
        d = rhs(0.0, x, k4, params)
        np.testing.assert_array_equal(d.s, 0.0)
        np.testing.assert_allclose(d.e, -0.5 * 0.2)
        np.testing.assert_allclose(d.i, 0.5 * 0.2)
        np.testing.assert_array_equal(d.r, 0.0)

    def test_single_node_mean_field(self, single_node, params):
        x = SeirState([0.99], [0.0], [0.01], [0.0])
        d = rhs(0.0, x, single_node, params, CouplingMode.MEAN_FIELD)
        assert d.s[0] == pytest.approx(-0.0073260, abs=1e-15)

    def test_sum_of_derivatives_vanishes(self, params):
        rng = np.random.default_rng(1)
        g = make_graph(ErdosRenyi(0.5, seed=2), 8)
        for _ in range(20):
            d = rhs(0.0, random_state(rng, 8), g, params)
            assert np.max(np.abs(d.totals())) <= 1e-15

    def test_dimension_mismatch(self, k4, params):
        with pytest.raises(DimensionMismatchError):
            rhs(0.0, SeirState.uniform(3, 0.99, 0.0, 0.01), k4, params)

    def test_non_finite_input(self, k4, params):
        x = SeirState([np.nan, 1, 1, 1], [0] * 4, [0] * 4, [0] * 4)
        with pytest.raises(NonFiniteInputError):
            rhs(0.0, x, k4, params)

    def test_mean_field_uses_unit_diagonal(self, k4):
        coupling = coupling_matrix(k4, CouplingMode.MEAN_FIELD)
        np.testing.assert_allclose(coupling, np.full((4, 4), 0.25))
        raw = coupling_matrix(k4, CouplingMode.MEAN_FIELD_RAW)
        np.testing.assert_allclose(np.diag(raw), 0.0)


class TestRhsSymmetric:
    def test_fully_susceptible_matches_adjacency(self, k4, params):
        i = np.array([0.0, 0.1, 0.2, 0.3])
        x = SeirState(np.ones(4), np.zeros(4), i, np.zeros(4))
        d = rhs_symmetric(0.0, x, k4, params)
        np.testing.assert_allclose(d.s, -0.74 * (k4.weights @ i))

    def test_no_infection(self, k4, params):
        d = rhs_symmetric(0.0, SeirState.uniform(4, 0.9, 0.1, 0.0), k4, params)
        np.testing.assert_array_equal(d.s, 0.0)

    def test_matches_dense_oracle(self, params):
        g = Graph([[0.3, 0.7], [0.7, 0.1]])
        x = SeirState([0.36, 0.81], [0.04, 0.09], [0.5, 0.05], [0.1, 0.05])
        root = np.diag(np.sqrt(x.s))
        expected = -(root @ g.weights @ root) @ (0.74 * x.i)
        d = rhs_symmetric(0.0, x, g, params)
        np.testing.assert_allclose(d.s, expected, rtol=1e-14)
        assert np.max(np.abs(d.totals())) <= 1e-15

    def test_negative_susceptible(self, k4, params):
        x = SeirState([-0.1, 1, 1, 1], [0.1, 0, 0, 0], [0.5, 0, 0, 0], [0.5, 0, 0, 0])
        with pytest.raises(NegativeSusceptibleError):
            rhs_symmetric(0.0, x, k4, params)


class TestRhsLaplacian:
    def test_equals_mobility_rhs_with_unit_diagonal(self, params):
        rng = np.random.default_rng(4)
        k3 = make_graph(Complete(), 3)
        with_loops = Graph(unit_diagonal(k3))
        for _ in range(50):
            x = random_state(rng, 3)
            a = rhs_laplacian(0.0, x, k3, params)
            b = rhs(0.0, x, with_loops, params, CouplingMode.MOBILITY)
            assert np.max(np.abs(a.as_array() - b.as_array())) <= 1e-13

    def test_no_infection(self, k4, params):
        d = rhs_laplacian(0.0, SeirState.uniform(4, 0.9, 0.1, 0.0), k4, params)
        np.testing.assert_array_equal(d.s, 0.0)

    def test_single_isolated_node(self, params):
        g = Graph([[0.0]], GraphKind.SIMPLE01)
        x = SeirState([0.9], [0.0], [0.1], [0.0])
        d = rhs_laplacian(0.0, x, g, params)
        assert d.s[0] == pytest.approx(-0.74 * 0.9 * 0.1, rel=1e-15)

    def test_requires_simple_graph(self, params):
        with pytest.raises(WeightOutOfRangeError):
            rhs_laplacian(0.0, SeirState.uniform(2, 0.9, 0.0, 0.1), Graph([[0.0, 0.5], [0.5, 0.0]]), params)


class TestIntegrate:
    def test_disease_free_state_is_constant(self, k4, params):
        tr = integrate(SeirState.uniform(4, 0.7, 0.0, 0.0), k4, params, t_end=10.0, dt=0.01, record_every=50)
        for state in tr.states:
            np.testing.assert_array_equal(state.s, 0.7)
            np.testing.assert_allclose(state.r, 0.3)

    def test_complete_graph_matches_scalar_oracle(self, params):
        g = make_graph(Complete(), 5)
        x0 = SeirState.uniform(5, 0.99, 0.0, 0.01)
        tr = integrate(x0, g, params, CouplingMode.MEAN_FIELD, t_end=50.0, dt=1e-3,
                       method=IntegrationMethod.RK4, record_every=1000)
        oracle = scalar_rk4([0.99, 0.0, 0.01, 0.0], 50.0, 1e-3)
        final = tr.final_state.as_array()
        assert tr.times[-1] == 50.0
        assert np.max(np.abs(final - oracle[:, None])) <= 1e-8

    def test_scalar_epidemic_dies_out(self, single_node, params):
        x0 = SeirState([0.99], [0.0], [0.01], [0.0])
        tr = integrate(x0, single_node, params, CouplingMode.MEAN_FIELD, t_end=200.0, dt=0.01, record_every=100)
        final = tr.final_state
        assert final.e[0] + final.i[0] <= 1e-4

    def test_conservation_positivity_and_monotonicity(self, params):
        g = make_graph(ErdosRenyi(0.4, seed=3), 10)
        x0 = SeirState.seed_node(10, 0, 0.1)
        tr = integrate(x0, g, params, t_end=100.0, dt=0.01, record_every=20)

        assert max(d.conservation_residual for d in tr.diagnostics) <= 1e-10
        assert min(d.min_component for d in tr.diagnostics) >= -1e-9
        s = tr.array('s')
        r = tr.array('r')
        se = s + tr.array('e')
        assert np.all(np.diff(s, axis=0) <= 1e-12)
        assert np.all(np.diff(r, axis=0) >= -1e-12)
        assert np.all(np.diff(se, axis=0) <= 1e-12)

    def test_conservation_over_many_euler_steps(self, single_node, params):
        x0 = SeirState([0.99], [0.0], [0.01], [0.0])
        tr = integrate(x0, single_node, params, CouplingMode.MEAN_FIELD, t_end=1000.0, dt=0.01,
                       record_every=1000)
        assert max(d.conservation_residual for d in tr.diagnostics) <= 1e-10

    def test_records_every_k_and_final_step(self, k4, params):
        tr = integrate(SeirState.uniform(4, 0.99, 0.0, 0.01), k4, params, t_end=1.05, dt=0.1, record_every=3)
        np.testing.assert_allclose(tr.times, [0.0, 0.3, 0.6, 0.9, 1.05])

    def test_rk4_is_fourth_order(self, single_node, params):
        x0 = SeirState([0.99], [0.0], [0.01], [0.0])

        def final(dt):
            tr = integrate(x0, single_node, params, CouplingMode.MEAN_FIELD, t_end=20.0, dt=dt,
                           method=IntegrationMethod.RK4, record_every=10 ** 6)
            return tr.final_state.as_array()

        reference = final(1e-3)
        coarse = np.max(np.abs(final(0.2) - reference))
        fine = np.max(np.abs(final(0.1) - reference))
        assert coarse / fine >= 12.0

    def test_blow_up_for_huge_step(self, k4):
        p = EpidemicParams(beta=50.0, mu=50.0, gamma=50.0)
        with pytest.raises(BlowUpError):
            integrate(SeirState.uniform(4, 0.5, 0.25, 0.25), k4, p, t_end=10.0, dt=1.0)

    @pytest.mark.parametrize("dt, t_end", [(0.0, 1.0), (-0.1, 1.0), (0.1, 0.0)])
    def test_invalid_time_grid(self, k4, params, dt, t_end):
        with pytest.raises(InvalidStateError):
            integrate(SeirState.uniform(4, 0.99, 0.0, 0.01), k4, params, t_end=t_end, dt=dt)

    def test_invalid_initial_state(self, k4, params):
        with pytest.raises(InvalidStateError):
            integrate(SeirState([1.0] * 4, [0.1] * 4, [0.0] * 4, [0.0] * 4), k4, params)

    def test_step_size_warning(self, params, caplog):
        with caplog.at_level(logging.WARNING, logger='service_seir_dynamics'):
            check_step_size(params, 3, 0.0, 1.0, 0.5)
        assert "0.1/K0" in caplog.text

    def test_trace_frame_columns(self, k4, params):
        tr = integrate(SeirState.uniform(4, 0.99, 0.0, 0.01), k4, params, t_end=1.0, dt=0.1, record_every=5)
        frame = tr.to_frame()
        assert frame.columns == ['t', 'node', 's', 'e', 'i', 'r', 'conservation_residual']
        assert frame.height == 3 * 4
        assert frame['node'].to_list()[:4] == [1, 2, 3, 4]


class TestDetectEquilibrium:
    def test_disease_free_returns_start(self, k4, params):
        tr = integrate(SeirState.uniform(4, 1.0, 0.0, 0.0), k4, params, t_end=1.0, dt=0.1)
        assert detect_equilibrium(tr) == 0.0

    def test_spreading_scenario_reaches_equilibrium(self, single_node, params):
        x0 = SeirState([0.99], [0.0], [0.01], [0.0])
        tr = integrate(x0, single_node, params, CouplingMode.MEAN_FIELD, t_end=200.0, dt=0.01, record_every=100)
        t_eq = detect_equilibrium(tr, 1e-4)
        assert t_eq is not None
        assert 0.0 < t_eq <= 200.0

    def test_zero_tolerance_on_positive_trace(self, single_node, params):
        x0 = SeirState([0.99], [0.0], [0.01], [0.0])
        tr = integrate(x0, single_node, params, CouplingMode.MEAN_FIELD, t_end=5.0, dt=0.01, record_every=10)
        assert detect_equilibrium(tr, 0.0) is None
