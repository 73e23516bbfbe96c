"""Properties of the reference toy model (trained once per cache, see conftest)."""
import json
from pathlib import Path

import numpy as np
import pytest
import torch

from attnedit import cli, io
from attnedit.data import make_dataset
from attnedit.denoiser import DenoiserConfig, ToyVideoDenoiser, eps_mse
from attnedit.experiments import ReferenceSetup, recolor_task
from attnedit.scheduler import default_schedule

pytestmark = pytest.mark.slow


def test_heldout_mse_halved(trained_model):
    held, _ = make_dataset(8, frames=8, size=64, seed=123)
    torch.manual_seed(ReferenceSetup().seed)
    untrained = ToyVideoDenoiser(trained_model.config)
    s = default_schedule()
    with torch.no_grad():
        base = eps_mse(untrained, held, s)
        trained = eps_mse(trained_model, held, s)
    print(f"held-out eps-MSE untrained {base:.4f} trained {trained:.4f}")
    assert trained <= 0.5 * base


def test_loss_blocks_decrease(model_cache_dir, trained_model):
    path = Path(model_cache_dir) / f"reference-{ReferenceSetup().key()}" / "training.json"
    hist = json.loads(path.read_text())["loss_history"]
    assert len(hist) == ReferenceSetup().epochs
    blocks = [float(np.mean(hist[i:i + 10])) for i in range(0, len(hist), 10)]
    assert all(b < a for a, b in zip(blocks, blocks[1:])), blocks


def _recolor_run(root: Path, ckpt: Path, seed: int) -> Path:
    task = recolor_task(seed)
    io.write_frames(task.video, root / "source")
    cfg = {
        "checkpoint": str(ckpt),
        "source": {"frames": "source", "prompt": task.source_words},
        "edit": {"prompt": task.edited_words, "steps": 50, "seed": seed,
                 "objects": [tr.to_dict() for tr in task.tracks],
                 "rad": {"alpha_start": 20.0, "alpha_end": 10.0}},
        "eval": {"relation": {"subject": task.relation.subject, "relation": "left",
                              "reference": task.relation.reference}},
        "vis": {"every": 25},
    }
    (root / "run.json").write_text(json.dumps(cfg))
    return root / "run.json"


@pytest.mark.parametrize("seed", [0, 1])
def test_vis_attention_peaks_inside_boxes(tmp_path, model_cache_dir, trained_model, seed):
    ckpt = Path(model_cache_dir) / f"reference-{ReferenceSetup().key()}"
    run = _recolor_run(tmp_path, ckpt.resolve(), seed)
    assert cli.main(["vis-attention", "--config", str(run), "--out", str(tmp_path / "on")]) == 0
    assert cli.main(["vis-attention", "--config", str(run), "--out", str(tmp_path / "off"), "--no-rad"]) == 0
    on = json.loads((tmp_path / "on/att/summary.json").read_text())["peak_inside_fraction"]
    off = json.loads((tmp_path / "off/att/summary.json").read_text())["peak_inside_fraction"]
    print(f"seed {seed} peak-inside fraction with guidance {on} without {off}")
    assert all(v >= 0.8 for v in on.values())
