import json
from pathlib import Path

import numpy as np
import pytest

from adaprom.fem import BeamGeometry, KelvinCellGeometry
from adaprom.models import beam_model, kelvin_cell_model

ORACLES = Path(__file__).parent / "oracles"

_ACCEPTANCE = []


def record_acceptance(criterion, passed, detail):
    """Log one acceptance line; the summary prints them after the run."""
    line = f"{'PASS' if passed else 'FAIL'}  {criterion}: {detail}"
    _ACCEPTANCE.append(line)
    print("ACCEPTANCE " + line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)


def load_oracle(name):
    path = ORACLES / f"{name}_oracle.json"
    if not path.exists():
        pytest.fail(f"missing oracle fixture {path}; run tests/oracles/make_oracles.py {name}")
    data = json.loads(path.read_text())
    data["axes"] = [np.array(a) for a in data["axes"]]
    data["objectives"] = {k: np.array(v) for k, v in data["objectives"].items()}
    data["band_peaks"] = {k: np.array(v) for k, v in data["band_peaks"].items()}
    return data


@pytest.fixture(scope="session")
def beam():
    return beam_model()


@pytest.fixture(scope="session")
def kelvin():
    return kelvin_cell_model()


@pytest.fixture(scope="session")
def coarse_beam():
    """40-element cantilever: same physics, fast to assemble."""
    return beam_model(geometry=BeamGeometry(element_count=40))


@pytest.fixture(scope="session")
def coarse_kelvin():
    return kelvin_cell_model(geometry=KelvinCellGeometry(elements_per_strut=4))


@pytest.fixture(scope="session")
def beam_config():
    from adaprom.config import load_config
    return load_config("beam")


@pytest.fixture(scope="session")
def beam_run(beam_config):
    """The bundled beam experiment, run once per session."""
    from adaprom.sampling import run_adaptive
    return run_adaptive(beam_config.build_model(), beam_config.adaptive_config())


@pytest.fixture(scope="session")
def beam_fd_run(beam_config):
    """Finite-difference optimization on the full beam model from the box center."""
    from adaprom.sampling import run_fd_optimization
    return run_fd_optimization(beam_config.build_model(), beam_config.adaptive_config(),
                               level="FOM", x0=[0.03, 0.03])
