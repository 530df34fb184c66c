import json

import pytest

TINY = {
    "dataset": {"n": 120, "n_eval": 40},
    "model": {"hidden": [8], "latent_dim": 10, "alv_hidden": [6], "coder_hidden": [6], "v_dim": 2, "prior_hidden": 6},
    "objective": {"betas": [0.01, 1.0]},
    "training": {"steps": 6, "log_every": 3, "batch": 16},
    "eval": {"snrs": [0.5, 2.0], "seeds": [0, 1], "mmd_samples": 30, "sample_count": 3},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
