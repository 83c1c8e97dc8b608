import pytest
from hypothesis import HealthCheck, settings

from dtq.pipeline import calibrate, runtime, STATIC_DYNAMIC_W4A8
from dtq.toydit import build_toy_model, run_denoise

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

STEPS = 20

# criterion number -> (passed, detail), filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def model():
    return build_toy_model()


@pytest.fixture(scope="session")
def fp_run(model):
    return run_denoise(model, STEPS, record_traces=True)


@pytest.fixture(scope="session")
def w4a8_states(model, fp_run):
    return calibrate(model, fp_run.traces, STATIC_DYNAMIC_W4A8)


@pytest.fixture(scope="session")
def w4a8_run(model, fp_run, w4a8_states):
    return run_denoise(model, STEPS, True, runtime(model, w4a8_states, STEPS))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        ok, detail = ACCEPTANCE.get(n, (False, "not run"))
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n:>2}: {detail}")
