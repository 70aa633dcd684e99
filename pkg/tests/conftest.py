import numpy as np
import pytest

from mitolora.manifest import CropRecord, Manifest


def make_manifest(rows):
    """rows: iterable of (crop_id, source_image_id, label, domain_id)."""
    return Manifest(
        tuple(CropRecord(c, f"crops/{c}.png", s, lab, d, "synthetic") for c, s, lab, d in rows)
    )


def random_manifest(rng: np.random.Generator, n_images=None, n_domains=None, max_crops=4) -> Manifest:
    n_domains = n_domains or int(rng.integers(1, 10))
    n_images = n_images or int(rng.integers(max(3, n_domains), 60))
    rows = []
    for i in range(n_images):
        d = i % n_domains if i < n_domains else int(rng.integers(0, n_domains))
        for j in range(int(rng.integers(1, max_crops + 1))):
            rows.append((f"c{i}_{j}", f"img{i}", int(rng.integers(0, 2)), f"d{d}"))
    return make_manifest(rows)


@pytest.fixture
def manifest_factory():
    return make_manifest


@pytest.fixture(scope="session")
def small_synthetic(tmp_path_factory):
    """40 crops over 2 domains; enough for fast training checks."""
    from mitolora.synthetic import make_synthetic_dataset

    out = tmp_path_factory.mktemp("synth_small")
    return make_synthetic_dataset(out, n_crops=40, n_domains=2, amf_fraction=0.4, seed=1)


# ---------------------------------------------------------------------------
# acceptance summary: one pass/fail line per criterion

_ACCEPTANCE: dict[str, str] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    label = marker.args[0]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        prev = _ACCEPTANCE.get(label, "PASS")
        _ACCEPTANCE[label] = "PASS" if prev == "PASS" and report.outcome == "passed" else "FAIL"


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion covered by this test")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[0].lstrip("AC"))):
        terminalreporter.write_line(f"[{_ACCEPTANCE[label]}] {label}")
