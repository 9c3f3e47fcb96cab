from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def fixture_manifest():
    """Bundled schema fixture mirroring the published 305/830 class counts."""
    return FIXTURES / "mmob_manifest.jsonl"
