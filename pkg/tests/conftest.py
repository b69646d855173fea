import json

import pytest

_TOY_VIT = {"image_size": 16, "patch_size": 4, "embed_dim": 16, "depth": 1, "num_heads": 2}

TINY_CONFIG = {
    "spatial_vit": _TOY_VIT,
    "temporal_vit": _TOY_VIT,
    "mae": {"decoder_dim": 8, "decoder_depth": 1, "decoder_heads": 2, "epochs": 1, "batch_size": 8},
    "flow": {"levels": 2, "iterations": 10},
    "train": {"epochs": 1, "batch_size": 8},
    "synth": {"n_pairs": 10, "frames": 3, "height": 16, "width": 16},
    "eval": {"saliency_clips": 2, "alpha_grid": [0.0, 0.5, 1.0]},
}


@pytest.fixture
def tiny_config(tmp_path):
    """A config file small enough for the full CLI chain to run in seconds."""
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY_CONFIG))
    return path


# -- acceptance summary ------------------------------------------------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (report.when == "call" or report.failed or report.skipped):
        return
    number, title = mark.args
    entry = _CRITERIA.setdefault(number, {"title": title, "status": "PASS", "notes": []})
    if report.failed:
        entry["status"] = "FAIL"
    elif report.skipped and entry["status"] == "PASS":
        entry["status"] = "SKIP"
    if report.when == "call":
        entry["notes"].extend(f"{k}={v}" for k, v in item.user_properties)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        notes = f"  [{', '.join(entry['notes'])}]" if entry["notes"] else ""
        terminalreporter.write_line(f"criterion {number:2d} {entry['status']}: {entry['title']}{notes}")
