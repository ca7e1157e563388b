import os
import sys
from pathlib import Path

import pytest

from mrctl.master import MasterServer

REPO_ROOT = Path(__file__).resolve().parent.parent

# child processes spawned by launch tests must see the package
_src = str(REPO_ROOT / "src")
if _src not in os.environ.get("PYTHONPATH", ""):
    os.environ["PYTHONPATH"] = _src + os.pathsep + os.environ.get("PYTHONPATH", "")
if _src not in sys.path:
    sys.path.insert(0, _src)


@pytest.fixture
def master():
    server = MasterServer(port=0, host="127.0.0.1").start()
    yield server
    server.stop()


@pytest.fixture
def master_uri(master):
    return master.uri
