import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from enkfbench.forward import (
    BoundarySpec, DynamicState, FluidProps, ForwardModel, RockProps, SolverSettings,
    boundary_flux, darcy_velocity, run_forward, step_flow, step_transport, write_trajectory_csv,
)
from enkfbench.grid import Grid2D, LogPermField
from enkfbench.scenarios import build_scenario

DAY = 86400.0


def _model(grid, logk_bc=BoundarySpec(south=11.0, north=10.0), tbc=None, dt=DAY, rock=RockProps(), D=0.0):
    return ForwardModel(grid, dt, FluidProps(), rock, logk_bc, tbc, D)


class TestDarcy:
    def test_vertical_example(self):
        g = Grid2D(2, 2, 62.0, 62.0)
        head = np.array([[1.0, 1.0], [0.0, 0.0]])  # row 0 is south: head drops 1 m over 62 m towards +y
        vel = darcy_velocity(LogPermField(g, np.full(4, -12.0)), head)
        np.testing.assert_allclose(vel.vy, 1e-12 * 1000 * 9.81 / 1e-3 / 62.0, rtol=1e-12)
        assert abs(vel.vy[0, 0]) == pytest.approx(1.582e-7, rel=1e-3)
        np.testing.assert_allclose(vel.vx, 0.0)

    def test_harmonic_face_permeability(self):
        g = Grid2D(2, 2, 1.0, 1.0)
        logk = np.array([-12.0, -14.0, -12.0, -14.0])
        head = np.array([[1.0, 0.0], [1.0, 0.0]])
        vel = darcy_velocity(LogPermField(g, logk), head)
        k_face = vel.vx[0, 0] / (1000 * 9.81 / 1e-3)
        assert k_face == pytest.approx(2 / (1e12 + 1e14), rel=1e-12)
        assert k_face == pytest.approx(1.980e-14, rel=1e-3)

    def test_uniform_head_no_flow(self):
        g = Grid2D(4, 3, 2.0, 2.0)
        vel = darcy_velocity(np.random.default_rng(0).normal(-12, 1, g.n_cells), np.full(g.shape, 3.0), grid=g)
        assert np.all(vel.vx == 0) and np.all(vel.vy == 0)


class TestFlow:
    def test_steady_linear_profile(self):
        g = Grid2D(5, 11, 2.0, 2.0)
        bc = BoundarySpec(south=11.0, north=10.0)
        model = ForwardModel(g, 1e6, FluidProps(), RockProps(), bc)
        logk = np.full((1, g.n_cells), -12.0)
        h = np.full((1, g.n_cells), 10.0)
        for _ in range(5):
            h, _ = model.step(logk, h)
        y = g.centers()[:, 1]
        expected = 11.0 - (y - y.min()) / (y.max() - y.min())
        np.testing.assert_allclose(h[0], expected, atol=1e-8)

    def test_flux_balance_heterogeneous(self):
        g = Grid2D(12, 12, 2.0, 2.0)
        bc = BoundarySpec(south=11.0, north=10.0)
        logk = np.random.default_rng(1).normal(-12, 0.5, g.n_cells)
        model = ForwardModel(g, 1e9, FluidProps(), RockProps(), bc)
        h = np.full((1, g.n_cells), 10.5)
        for _ in range(10):
            h, _ = model.step(logk[None], h)
        net, gross = boundary_flux(LogPermField(g, logk), h.reshape(g.shape), FluidProps(), bc)
        assert abs(net[0]) < 1e-10 * gross[0] + 1e-25

    @settings(max_examples=15)
    @given(seed=st.integers(0, 10_000), lo=st.floats(5, 10), span=st.floats(0.1, 3))
    def test_maximum_principle(self, seed, lo, span):
        g = Grid2D(6, 7, 3.0, 3.0)
        bc = BoundarySpec(south=lo + span, north=lo)
        rng = np.random.default_rng(seed)
        logk = rng.normal(-12, 1.0, g.n_cells)
        h0 = rng.uniform(lo, lo + span, g.n_cells)
        st_ = step_flow(DynamicState(h0), LogPermField(g, logk), FluidProps(), RockProps(), bc, 1000.0)
        tol = 1e-9 * span
        assert st_.head.min() >= lo - tol and st_.head.max() <= lo + span + tol

    def test_uniform_state_unchanged(self):
        g = Grid2D(5, 5, 2.0, 2.0)
        bc = BoundarySpec(south=10.0, north=10.0)
        tbc = BoundarySpec(south=0.05, north=0.05)
        model = _model(g, bc, tbc, D=1e-9)
        logk = np.random.default_rng(2).normal(-12, 0.5, (1, g.n_cells))
        h, c = model.step(logk, np.full((1, g.n_cells), 10.0), np.full((1, g.n_cells), 0.05))
        np.testing.assert_allclose(h, 10.0, atol=1e-12)
        np.testing.assert_allclose(c, 0.05, atol=1e-14)

    def test_halving_dt_heads(self):
        spec = build_scenario("tracer")
        logk = np.full((1, spec.grid.n_cells), -12.0)
        logk += np.random.default_rng(3).normal(0, 0.5, logk.shape)
        init = spec.initial_state()
        results = []
        for factor in (1, 2):
            model = ForwardModel(spec.grid, spec.dt / factor, spec.fluid, spec.rock, spec.flow_bc)
            h = init.head[None].copy()
            for _ in range(10 * factor):
                h, _ = model.step(logk, h)
            results.append(h)
        assert np.max(np.abs(results[0] - results[1])) < 1e-6

    def test_specific_storage_insensitive(self):
        # with 6-day steps flow is near-steady: observed concentrations move by
        # well under 1% of the measurement noise across two decades of S_s
        spec = build_scenario("tracer")
        logk = np.random.default_rng(4).normal(-12, 0.5, (1, spec.grid.n_cells))
        obs = list(spec.obs_cells)
        out = []
        for ss in (1e-6, 1e-5, 1e-4):
            model = ForwardModel(spec.grid, spec.dt, spec.fluid, RockProps(0.1, ss), spec.flow_bc,
                                 spec.transport_bc, spec.diffusion)
            st_ = spec.initial_state()
            h, c = st_.head[None], st_.conc[None]
            for _ in range(30):
                h, c = model.step(logk, h, c)
            out.append((h, c[:, obs]))
        for h, c in out[1:]:
            assert np.max(np.abs(h - out[0][0])) < 1e-8
            assert np.max(np.abs(c - out[0][1])) < 0.01 * spec.noise_std["conc"]


class TestTransport:
    def _breakthrough_days(self):
        spec = build_scenario("tracer")
        logk = np.full((1, spec.grid.n_cells), -12.0)
        model = spec.forward_model()
        st_ = spec.initial_state()
        h, c = st_.head[None], st_.conc[None]
        centre = spec.grid.cell_of(31.0, 31.0)
        for n in range(1, 200):
            h, c = model.step(logk, h, c)
            if c[0, centre] > 70e-3:
                return n * spec.dt / DAY
        return np.inf

    def test_breakthrough_near_plug_flow(self):
        # Dirichlet heads at the outer cell centres: gradient 1 m over 60 m
        v = 1e-12 * 1000 * 9.81 / 1e-3 / 60.0
        plug = 30.0 / (v / 0.1) / DAY
        assert plug == pytest.approx(212.3, abs=0.5)
        assert self._breakthrough_days() == pytest.approx(plug, rel=0.15)

    def test_concentration_bounded(self):
        spec = build_scenario("tracer")
        rng = np.random.default_rng(5)
        logk = rng.normal(-12, 0.5, (2, spec.grid.n_cells))
        model = spec.forward_model()
        st_ = spec.initial_state()
        h, c = np.repeat(st_.head[None], 2, 0), np.repeat(st_.conc[None], 2, 0)
        for _ in range(20):
            h, c = model.step(logk, h, c)
            assert c.min() >= 60e-3 - 1e-12 and c.max() <= 80e-3 + 1e-12

    def test_step_transport_matches_model(self):
        spec = build_scenario("tracer")
        logk = np.random.default_rng(6).normal(-12, 0.5, spec.grid.n_cells)
        model = spec.forward_model()
        st_ = spec.initial_state()
        h, c = model.step(logk[None], st_.head[None], st_.conc[None])
        flow = step_flow(st_, LogPermField(spec.grid, logk), spec.fluid, spec.rock, spec.flow_bc, spec.dt)
        np.testing.assert_allclose(flow.head.ravel(), h.ravel(), atol=1e-9)
        vel = darcy_velocity(LogPermField(spec.grid, logk), flow.head.reshape(spec.grid.shape))
        tr = step_transport(DynamicState(flow.head.reshape(spec.grid.shape), st_.conc.reshape(spec.grid.shape)),
                            vel, spec.rock, spec.transport_bc, spec.diffusion, spec.dt, grid=spec.grid)
        np.testing.assert_allclose(tr.conc.ravel(), c.ravel(), atol=1e-12)


class TestRunForward:
    def test_zero_length(self):
        spec = build_scenario("tracer")
        model = spec.forward_model()
        out = run_forward(model, spec.initial_state(), np.full(spec.grid.n_cells, -12.0), 5 * spec.dt, 5 * spec.dt)
        assert len(out) == 1 and model.steps == 0

    def test_counts_and_params_untouched(self):
        spec = build_scenario("tracer")
        model = spec.forward_model()
        logk = np.full(spec.grid.n_cells, -12.0)
        out = run_forward(model, spec.initial_state(), logk, 0.0, 3 * spec.dt)
        assert len(out) == 4 and model.steps == 3 and np.all(logk == -12.0)

    def test_off_grid_times(self):
        spec = build_scenario("tracer")
        with pytest.raises(ValueError):
            run_forward(spec.forward_model(), spec.initial_state(), np.full(spec.grid.n_cells, -12.0), 0, 1.5 * spec.dt)

    def test_trajectory_csv(self, tmp_path):
        spec = build_scenario("tracer")
        out = run_forward(spec.forward_model(), spec.initial_state(), np.full(spec.grid.n_cells, -12.0), 0, 2 * spec.dt)
        write_trajectory_csv(out, tmp_path / "t.csv", every=2)
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "step,cell,h,c" and len(lines) == 1 + 2 * spec.grid.n_cells


class TestValidation:
    def test_bad_settings(self):
        with pytest.raises(ValueError):
            SolverSettings(ilu_relax=1.5)
        with pytest.raises(ValueError):
            RockProps(porosity=0.0)
        with pytest.raises(ValueError):
            BoundarySpec(south=np.nan)

    def test_fixed_cell_overrides_edge(self):
        g = Grid2D(3, 3, 1, 1)
        mask, vals = BoundarySpec(south=1.0, fixed=((1, 5.0),)).dirichlet(g)
        assert mask[0, 1] and vals[0, 1] == 5.0
