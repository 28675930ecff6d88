import shutil
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mqtt_broker import Broker  # noqa: E402

from cma.stdlib import data_path  # noqa: E402


@pytest.fixture
def broker():
    b = Broker().start()
    yield b
    b.stop()


@pytest.fixture
def plantbot_def():
    return data_path("plantbot.json")


@pytest.fixture
def alter3_def():
    return data_path("alter3.json")


@pytest.fixture(scope="session")
def mosquitto_bin():
    return shutil.which("mosquitto")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
