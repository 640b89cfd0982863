import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import small_operator
from sparseinit.errors import NonFiniteIterate
from sparseinit.gd import GdParams, run_gd, subgradient_l1
from sparseinit.grid import Field, make_grid
from sparseinit.pdhg import PdhgParams, run_pdhg


def test_subgradient_examples():
    grid = make_grid(1, 1, 0.25, 0.25)
    assert not np.any(subgradient_l1(Field.zeros(grid), 0.7).values)
    np.testing.assert_array_equal(subgradient_l1(np.array([2.0, -3.0, 0.0]), 0.5), [0.5, -0.5, 0.0])
    u = Field(grid, np.arange(9.0).reshape(3, 3) - 4)
    assert not np.any(subgradient_l1(u, 0.0).values)
    with pytest.raises(ValueError):
        subgradient_l1(u, -1.0)


def test_zero_target_is_fixed_point():
    op = small_operator()
    res = run_gd(op, Field.zeros(op.grid), GdParams())
    assert res.converged and res.iterations == 1
    assert not np.any(res.u0_star.values)


def test_first_step_is_steepest_descent(rng):
    op = small_operator()
    uT = Field(op.grid, rng.standard_normal(op.grid.shape))
    eta = 0.3
    res = run_gd(op, uT, GdParams(eta=eta, tau=0.0, beta=0.0, kmax=1))
    np.testing.assert_allclose(res.u0_star.flat, eta * op.adjoint(uT.flat), rtol=1e-14)


def _smooth_objective(op, u, uT, tau):
    r = op.forward(u) - uT
    w = op.grid.cell_area
    return 0.5 * w * r @ r + 0.5 * tau * w * u @ u


@given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.99))
def test_descent_without_l1(seed, frac):
    op = small_operator(nx=4, ny=3)
    L = np.linalg.matrix_power(np.linalg.inv(np.eye(op.grid.size) + op.dt * op.A.toarray()), op.nsteps)
    tau = 0.01
    opn = np.linalg.eigvalsh(L @ L.T).max()
    eta = frac * 2 / (opn + tau)
    g = np.random.default_rng(seed)
    uT = g.standard_normal(op.grid.size)
    vals = []
    run_gd(
        op,
        Field.from_flat(op.grid, uT),
        GdParams(eta=eta, tau=tau, beta=0.0, kmax=15, tol=1e-300),
        u0_init=Field.from_flat(op.grid, g.standard_normal(op.grid.size)),
        callback=lambda k, u: vals.append(_smooth_objective(op, u, uT, tau)),
    )
    assert all(b <= a * (1 + 1e-12) for a, b in zip(vals, vals[1:]))


def test_one_forward_and_one_adjoint_per_iteration(desk):
    _, op, uT, opn = desk["I"]
    calls = {"forward": 0, "adjoint": 0}

    class Counting:
        grid = op.grid

        def forward(self, u):
            calls["forward"] += 1
            return op.forward(u)

        def adjoint(self, p):
            calls["adjoint"] += 1
            return op.adjoint(p)

    res = run_gd(Counting(), uT, GdParams(kmax=10), opnorm=opn)
    # one extra forward solve for the initial residual
    assert calls == {"forward": res.iterations + 1, "adjoint": res.iterations}


def test_divergence_is_reported(desk):
    _, op, uT, opn = desk["I"]
    with pytest.raises(NonFiniteIterate):
        run_gd(op, uT, GdParams(eta=1e3, kmax=1000), opnorm=opn)


def test_gd_slower_than_pdhg(desk):
    _, op, uT, opn = desk["I"]
    gd = run_gd(op, uT, GdParams(), opnorm=opn)
    pd = run_pdhg(op, uT, PdhgParams(s=0.193), opnorm=opn)
    assert gd.converged and pd.converged
    assert gd.iterations > pd.iterations
    assert gd.params.eta == pytest.approx(1 / (opn + 0.01))
    assert gd.residual_history[-1] <= 1e-5


def test_invalid_step():
    op = small_operator()
    with pytest.raises(ValueError):
        run_gd(op, Field.zeros(op.grid), GdParams(eta=-1.0))
