"""Shared test plumbing: a capture-proof channel for acceptance verdicts."""

_capman = None


def pytest_configure(config):
    global _capman
    _capman = config.pluginmanager.getplugin("capturemanager")


def write_verdict(line):
    """Print to the real terminal even under pytest's fd-level capture."""
    if _capman is not None:
        with _capman.global_and_fixture_disabled():
            print(line, flush=True)
    else:
        print(line, flush=True)
