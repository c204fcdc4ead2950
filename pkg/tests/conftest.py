import pytest

from exitserve.model import ModelConfig, ToyDecoder


@pytest.fixture(scope="session")
def small_model():
    return ToyDecoder.from_config(ModelConfig(n_layers=4, d_model=16, vocab_size=32, seed=3))


@pytest.fixture(scope="session")
def default_model():
    return ToyDecoder.from_config(ModelConfig())


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        title, ok = results[n]
        terminalreporter.write_line(f"criterion {n:>2} {title:<26} {'PASS' if ok else 'FAIL'}")
