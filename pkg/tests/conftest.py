import numpy as np
import pytest

from precipext.condext import CondExtremesModel, ExceedanceEvents, StandardizingParams, simulate_conditional_field
from precipext.datastore import GridGeometry, PrecipCube
from precipext.randfield import MaternParams, build_sampler
from precipext.simulate import sample_exceedance
from precipext.standardize import threshold_on_laplace

TAU = threshold_on_laplace(0.9)

# near the prior means used for the scale function
TRUTH_PARAMS = StandardizingParams(10.0, 4.0, 1.2, 3.0, 1.5, 0.65, 8.5, 0.5)
TRUTH_RESIDUAL = MaternParams(0.5, 15.0, 1.5)
TRUTH_NUGGET = 0.1


def centre(g: GridGeometry) -> int:
    return (g.ny // 2) * g.nx + g.nx // 2


def truth_model(g: GridGeometry, params=TRUTH_PARAMS, residual=TRUTH_RESIDUAL, nugget=TRUTH_NUGGET):
    return CondExtremesModel(params, residual, nugget, TAU, centre(g))


def laplace_cube(g: GridGeometry, values) -> PrecipCube:
    n = len(values)
    return PrecipCube(g, np.arange(n), np.full(n, 180), np.full(n, 6), np.asarray(values, float), kind="laplace")


def make_events(model: CondExtremesModel, g: GridGeometry, n: int, rng) -> ExceedanceEvents:
    """Events drawn straight from the conditional law, y0 = tau + Exp(1)."""
    sampler = build_sampler(g, model.residual, constraint=model.s0)
    y0 = sample_exceedance(model.tau, rng, n)
    fields = np.stack([simulate_conditional_field(model, y, g, rng, sampler) for y in y0])
    return ExceedanceEvents(laplace_cube(g, fields), model.s0, model.tau)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: acceptance criteria with runtime budgets")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion number -> (passed, detail, seconds); filled by the acceptance tests
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail, secs = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  ({secs:.1f} s)  {detail}")
