import numpy as np
import pytest
from hypothesis import settings

from asilfd.backend import compiled_available, get_kernels
from asilfd.buffers import save_trajectories
from asilfd.envs import POINTMASS, collect_demos, expert_controller, imperfect_controller, make_spec

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

BACKENDS = ["python"] + (["compiled"] if compiled_available() else [])


@pytest.fixture(params=BACKENDS)
def kern(request):
    return get_kernels(request.param)


@pytest.fixture(scope="session")
def pointmass():
    return make_spec(POINTMASS)


@pytest.fixture(scope="session")
def demo_files(tmp_path_factory, pointmass):
    root = tmp_path_factory.mktemp("demos")
    paths = {}
    for name, ctrl in (("expert", expert_controller()), ("imperfect", imperfect_controller(POINTMASS))):
        path = root / f"{name}.csv"
        save_trajectories(path, collect_demos(pointmass, ctrl, 4, seed=1), pointmass.id)
        paths[name] = path
    return paths


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, repeated in the terminal summary
VERDICTS: list[str] = []


@pytest.fixture(scope="session")
def verdict():
    def record(number: int, title: str, status: str, detail: str) -> None:
        line = f"criterion {number:>2} {status:<4} {title}: {detail}"
        VERDICTS.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
