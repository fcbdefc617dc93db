import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest

TINY = {
    "seed": 3,
    "world": {"per_component": 40, "member_n": 80, "holdout_n": 80, "aux_member_n": 80, "aux_holdout_n": 80},
    "training": {"total_steps": 200, "checkpoint_every": 50, "hidden_widths": [32, 32]},
    "evaluation": {"samples_per_condition": 20, "utility_samples_per_condition": 20},
    "defense": {"policies": [{"kind": "shuffle", "shuffle_fraction": 0.5}], "compare_augmentation": True},
}


@pytest.fixture(scope="session")
def tiny_cfg():
    from clid_audit.config import config_from_dict

    return config_from_dict(TINY)


@pytest.fixture(scope="session")
def tiny_run(tiny_cfg):
    from clid_audit.experiments import run_audit

    return run_audit(tiny_cfg)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
