import pytest
import torch

from pjscc.codec import ModelConfig, PJSCC


def micro_config(**kw):
    """Smallest 32x32 model that still exercises every code path."""
    base = dict(base_dim=8, head_dim=4)
    base.update(kw)
    return ModelConfig.low(**base)


@pytest.fixture
def micro_cfg():
    return micro_config()


@pytest.fixture
def micro_model(micro_cfg):
    return PJSCC(micro_cfg)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


# ---------------------------------------------------------------- acceptance report
# Tests marked ``@pytest.mark.acceptance(n, "title")`` get one PASS/FAIL line
# each in the terminal summary; ``record(key, value)`` adds measured values.

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, title): numbered acceptance criterion")


@pytest.fixture
def record(request):
    def _record(key, value):
        request.node.user_properties.append((key, value))
    return _record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or rep.when not in ("setup", "call"):
        return
    n, title = mark.args
    if rep.when == "setup" and rep.passed:
        return
    _ACCEPTANCE[n] = (title, rep.passed, dict(item.user_properties))


def _fmt(v):
    return f"{v:.4g}" if isinstance(v, float) else str(v)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        title, ok, props = _ACCEPTANCE[n]
        detail = ", ".join(f"{k}={_fmt(v)}" for k, v in props.items())
        tr.write_line(f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}"
                      + (f"  [{detail}]" if detail else ""))
    passed = sum(ok for _, ok, _ in _ACCEPTANCE.values())
    tr.write_line(f"{passed}/{len(_ACCEPTANCE)} acceptance criteria passed")
