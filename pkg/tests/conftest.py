import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


TINY_MANIFEST = {
    "dataset": {"kind": "synthetic", "n_images": 48, "n_classes": 4, "seed": 0},
    "folds": 3,
    "holistic_net": {"hidden": 16, "epochs": 10},
    "part_nets": {"hidden": 8, "epochs": 10},
    "forest": {"n_trees": 7},
    "features": {"sift": [{"patch_size": 64}], "hog": [{"resize_to": 64, "cell_size": 32}]},
    "attacks": ["FGSM-M", "Itr-M"],
}


@pytest.fixture
def tiny_manifest(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY_MANIFEST))
    return path


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE.values():
            terminalreporter.write_line(line)
