import json

import pytest

from golfnrt.harness.scene import bundled_scene, bundled_scene_path, resized_spec


@pytest.fixture(scope="session")
def small_scene():
    """The bundled plane + sphere scene at 16x16."""
    return bundled_scene(16)


@pytest.fixture
def small_scene_file(tmp_path):
    doc = resized_spec(json.loads(bundled_scene_path().read_text()), 16)
    path = tmp_path / "scene16.json"
    path.write_text(json.dumps(doc))
    return path


# criterion lines recorded by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
