import json
import shutil
from pathlib import Path

import pytest

from llhkg.facts import HyperRelationalFact

REPO = Path(__file__).resolve().parent.parent
MOCK_DIR = REPO / "fixtures" / "mock"


def fact(s, r, o, *quals, doc=None, attempt=0):
    f = HyperRelationalFact(s, r, o, tuple(quals))
    return f.with_provenance(doc, attempt) if doc else f


@pytest.fixture
def mock_workspace(tmp_path):
    """Copy of the bundled mock corpus/config with work and cache dirs under tmp."""
    dest = tmp_path / "mock"
    shutil.copytree(MOCK_DIR, dest)
    cfg = json.loads((dest / "config.json").read_text())
    cfg["paths"]["work_dir"] = str(tmp_path / "work")
    cfg["paths"]["cache_dir"] = str(tmp_path / "cache")
    (dest / "config.json").write_text(json.dumps(cfg, indent=2))
    return dest
