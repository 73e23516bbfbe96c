"""Shared bits for the demo scripts: where the reference model lives, and logging."""
import logging
import os
from pathlib import Path

import torch

from attnedit.experiments import reference_model

torch.set_num_threads(1)
logging.basicConfig(level=logging.INFO, format="%(message)s")

CACHE = Path(os.environ.get("ATTNEDIT_MODEL_CACHE", Path.home() / ".cache" / "attnedit"))
OUT = Path(os.environ.get("ATTNEDIT_DEMO_OUT", "demo_output"))


def model():
    # first call trains for about 8 minutes on one core; later calls load the checkpoint
    return reference_model(CACHE)
