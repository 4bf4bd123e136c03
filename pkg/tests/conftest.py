from __future__ import annotations

import pytest

from flakidock.providers import HashingEmbeddingProvider


@pytest.fixture(scope="session")
def offline_provider() -> HashingEmbeddingProvider:
    return HashingEmbeddingProvider()
