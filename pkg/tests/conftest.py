import os

# Pin BLAS to one thread before numpy loads anywhere, so reductions are
# reproducible and the timed acceptance runs measure single-core work.
for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import pytest  # noqa: E402

from scenecap.fixtures import FixtureConfig, gen_fixtures  # noqa: E402


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A tiny generated corpus shared by read-only tests."""
    out = tmp_path_factory.mktemp("corpus")
    paths = gen_fixtures(11, 4, out, FixtureConfig(vocab_size=32))
    return out, paths


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None) if mod else None
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for line in results:
        terminalreporter.write_line(line)
