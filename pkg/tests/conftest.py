import pytest

from bevuncert.config import parse_config

TINY = """
[model]
d_in = 16
d_h = 8
n_heads = 2
k_static = 6
encoder_hidden = 12
head_hidden = 10
uncer_hidden = 7
hidden_sizes = 11
[train]
epochs_stage1 = 2
epochs_stage2 = 2
batch_size = 4
learning_rate = 1e-3
[data]
n_train = 8
n_test = 6
k_static = 6
feature_dim = 16
[noise]
b0 = 0.1
b_dist = 0.01
b_occl = 0.3
"""


@pytest.fixture
def tiny_text():
    return TINY


@pytest.fixture
def tiny_cfg():
    return parse_config(TINY)


@pytest.fixture
def tiny_ini(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY, encoding="utf-8")
    return path


ACCEPTANCE = {}  # criterion number -> (passed, one-line summary)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, line = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n}. {line}")
