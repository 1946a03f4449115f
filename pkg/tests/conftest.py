import pytest

# criterion number -> (passed, description), filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, text = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {text}")


@pytest.fixture()
def criterion():
    """Record a criterion's outcome; use as ``with criterion(n, text): ...``."""

    class _Rec:
        def __init__(self):
            self.k = None

        def __call__(self, k, text):
            self.k, self.text = k, text
            return self

        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            ACCEPTANCE[self.k] = (exc_type is None, self.text)
            print(f"criterion {self.k}: {'PASS' if exc_type is None else 'FAIL'}  {self.text}")
            return False

    return _Rec()
