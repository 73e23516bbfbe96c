import os

import pytest
import torch

from attnedit.experiments import ReferenceSetup, reference_model

torch.set_num_threads(1)


def pytest_report_header(config):
    return f"reference model key: {ReferenceSetup().key()}"


@pytest.fixture(scope="session")
def model_cache_dir(request):
    # ATTNEDIT_MODEL_CACHE overrides pytest's cache (e.g. to share one checkpoint across checkouts)
    override = os.environ.get("ATTNEDIT_MODEL_CACHE")
    return override or str(request.config.cache.mkdir("attnedit-model"))


@pytest.fixture(scope="session")
def trained_model(model_cache_dir):
    """The reference toy model; trained once (about 8 minutes) and cached."""
    return reference_model(model_cache_dir)
