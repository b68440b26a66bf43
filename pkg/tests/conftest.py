import numpy as np
import pytest

from stillmesh.synthgen import NoiseSpec, ScenarioSpec, generate_scenario, make_procedural_body


@pytest.fixture(scope="session")
def body():
    return make_procedural_body()


def small_spec(seed=0, n_frames=40, noise=None):
    """A short orbit at quarter raster so pipeline tests stay quick."""
    return ScenarioSpec(seed=seed, n_frames=n_frames, width=380, height=214,
                        orbit_degrees=360.0 * n_frames / 375, noise=noise or NoiseSpec())


@pytest.fixture(scope="session")
def clean_small(body):
    return generate_scenario(small_spec(), body)


@pytest.fixture(scope="session")
def occluded_small(body):
    """Clean orbit except for a short window where the body slides mostly out of view."""
    noise = NoiseSpec(occlusion_windows=[(16, 21, 0.2)])
    return generate_scenario(small_spec(seed=1, noise=noise), body)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
