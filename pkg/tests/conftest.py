import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from splatavatar.data import default_cameras, generate_dataset
from splatavatar.template import BodyConfig, build_template

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def body():
    return build_template(BodyConfig(), seed=0)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory, body):
    """Three time steps, two 32x32 cameras (camera 1 held out), on disk."""
    root = tmp_path_factory.mktemp("tiny_seq")
    cams = default_cameras(2, 32, 32)
    generate_dataset(body, cameras=cams, n_frames=3, seed=0, out_dir=root, test_cameras=(1,),
                     dense_points=30_000)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line; returns the verdict so tests can assert it."""
    tr = request.config.pluginmanager.get_plugin("terminalreporter")

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        if tr is not None:
            tr.write_line("")
            tr.write_line(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
