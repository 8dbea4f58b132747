import numpy as np
import pytest

from extfwi.acquisition import ReceiverSet, SourceSet, generate_data, spread_positions
from extfwi.helmholtz import counter
from extfwi.mesh import Grid, Model
from extfwi.objective import Problem
from extfwi.phantoms import linear_gradient, two_layer


def small_setup(nx=32, nz=16, h=0.05, sponge=4, n_s=3, n_r=6, freqs=(2.0, 3.0), noise=0.0,
                seed=0):
    grid = Grid(nx, nz, h, h, sponge)
    truth = Model.from_velocity(two_layer(grid, seed=seed), 1.0, 6.0)
    src = SourceSet(grid, tuple(spread_positions(grid, n_s)))
    rec = ReceiverSet(grid, tuple(spread_positions(grid, n_r)))
    obs = generate_data(grid, truth, src, rec, freqs, noise, seed=seed)
    m0 = Model.from_velocity(linear_gradient(grid), 1.0, 6.0)
    return Problem(grid, src, rec, obs), truth, m0


@pytest.fixture
def small():
    return small_setup()


@pytest.fixture(autouse=True)
def _reset_counter():
    counter.reset()
    yield


def rng_complex(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def taylor_slope(f, grad_dot_v, m, v, hs=(1e-2, 1e-3, 1e-4, 1e-5)):
    """Least-squares log-log slope of |f(m + h v) - f(m) - h g.v| over ``hs``."""
    f0 = f(m)
    rem = [abs(f(m + h * v) - f0 - h * grad_dot_v) for h in hs]
    return float(np.polyfit(np.log(hs), np.log(rem), 1)[0]), rem


# (number, description, passed) for each acceptance criterion run in this session
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, text, passed in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {number:2d}: {text}")
