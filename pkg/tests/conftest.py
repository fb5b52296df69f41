import numpy as np
import pytest
import torch

from isgib.graph import Graph


@pytest.fixture
def chain():
    """0 - 1 - 2 with one-dimensional features [1], [3], [5]."""
    return Graph(3, [(0, 1), (1, 2)], [[1.0], [3.0], [5.0]], [0, 1, 0], name="chain")


@pytest.fixture
def toy_dir(tmp_path):
    """The 3-node dataset directory from the format description."""
    root = tmp_path / "toy"
    g = root / "g0"
    g.mkdir(parents=True)
    (g / "edges.tsv").write_text("0\t1\n1\t2\n")
    (g / "features.csv").write_text("1.0,0.0\n0.5,0.5\n0.0,1.0\n")
    (g / "labels.csv").write_text("0\n1\n1\n")
    (root / "meta.json").write_text(
        '{"task": "node", "c": 2, "d_in": 2, "graphs": [{"name": "g0", "path": "g0"}]}'
    )
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _double():
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(torch.float32)


def pytest_configure(config):
    config.acceptance_lines = []
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria")


@pytest.fixture
def acceptance_log(request):
    """Record one pass/fail line per criterion; printed in the terminal summary."""
    lines = request.config.acceptance_lines

    def record(criterion: int, ok: bool, detail: str, skipped: bool = False):
        status = "SKIP" if skipped else "PASS" if ok else "FAIL"
        line = f"criterion {criterion}: {status} - {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(config.acceptance_lines):
            terminalreporter.write_line(line)
