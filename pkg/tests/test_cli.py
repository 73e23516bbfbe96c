import json
import shutil

import numpy as np
import pytest
import torch

from attnedit import cli
from attnedit.io import read_frames, read_raw
from attnedit.pipeline import sample_video
from attnedit.scheduler import LatentState, default_schedule
from attnedit.denoiser import load_checkpoint
from attnedit.text import Vocabulary


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Tiny dataset and a one-epoch checkpoint produced through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["make-dataset", "--out", str(root / "data"), "--num-videos", "2",
                     "--frames", "4", "--size", "32", "--seed", "3"]) == 0
    manifest = json.loads((root / "data/manifest.json").read_text())
    (root / "train.json").write_text(json.dumps({
        "dataset": "data", "checkpoint": "ckpt",
        "train": {"epochs": 1, "batch_size": 2, "width": 4, "seed": 0}}))
    assert cli.main(["train", "--config", str(root / "train.json")]) == 0
    v0 = manifest["videos"][0]
    objs = sorted(v0["objects"], key=lambda o: o["centers"][0][0])
    source = v0["caption"]
    edited = ["a", "blue", objs[0]["shape"], "and", "a", "yellow", objs[1]["shape"]]
    run = {
        "checkpoint": "ckpt", "vocab": "data/vocab.json",
        "source": {"frames": "data/" + v0["dir"], "prompt": source},
        "edit": {"prompt": edited, "steps": 3, "seed": 1,
                 "objects": [{"object_id": "l", "word_index": 1, "boxes": objs[0]["boxes"]},
                             {"object_id": "r", "word_index": 5, "boxes": objs[1]["boxes"]}]},
        "eval": {"relation": {"subject": "blue", "relation": "left", "reference": "yellow"}},
        "vis": {"every": 2},
    }
    (root / "run.json").write_text(json.dumps(run))
    return root, run


def write_cfg(root, name, cfg):
    p = root / name
    p.write_text(json.dumps(cfg))
    return str(p)


def test_make_dataset_layout(tmp_path):
    assert cli.main(["make-dataset", "--out", str(tmp_path / "d"), "--num-videos", "0"]) == 0
    m = json.loads((tmp_path / "d/manifest.json").read_text())
    assert m["videos"] == [] and (tmp_path / "d/vocab.json").exists()
    assert cli.main(["make-dataset", "--out", str(tmp_path / "e"), "--num-videos", "1",
                     "--frames", "2", "--size", "32"]) == 0
    assert read_frames(tmp_path / "e/video_0000").shape == (2, 3, 32, 32)
    assert cli.main(["make-dataset", "--out", str(tmp_path / "f"), "--size", "8"]) == 2


def test_train_outputs(workspace):
    root, _ = workspace
    hist = json.loads((root / "ckpt/training.json").read_text())["loss_history"]
    assert len(hist) == 1 and np.isfinite(hist[0])
    assert load_checkpoint(root / "ckpt").config.width == 4


def test_invert_then_edit_from_latent(workspace):
    root, run = workspace
    assert cli.main(["invert", "--config", str(root / "run.json"), "--out", str(root / "inv")]) == 0
    lat = read_raw(root / "inv/latent.f32")
    assert lat.shape == (4, 3, 32, 32)
    rep = json.loads((root / "inv/invert_report.json").read_text())
    assert rep["t"] == 200 and rep["steps"] == 3
    cfg = json.loads(json.dumps(run))
    cfg["edit"]["latent"] = "inv/latent.f32"
    a = write_cfg(root, "latent.json", cfg)
    assert cli.main(["edit", "--config", a, "--out", str(root / "from_latent")]) == 0
    assert cli.main(["edit", "--config", str(root / "run.json"), "--out", str(root / "direct")]) == 0
    assert torch.equal(read_frames(root / "from_latent"), read_frames(root / "direct"))


def test_edit_outputs_and_reruns_byte_identical(workspace):
    root, _ = workspace
    for d in ("e1", "e2"):
        assert cli.main(["edit", "--config", str(root / "run.json"), "--out", str(root / d)]) == 0
    for name in [f"frame_{i:04d}.png" for i in range(4)] + ["report.json", "loss_curve.png"]:
        assert (root / "e1" / name).read_bytes() == (root / "e2" / name).read_bytes(), name
    rep = json.loads((root / "e1/report.json").read_text())
    assert set(rep["metrics"]) == {"frame_consistency", "textual_alignment", "visor", "invariant_psnr_db"}
    assert rep["config"]["rad"]["word_indices"] == [1, 5] and len(rep["losses"]) == 3
    assert "edit_seconds" in json.loads((root / "e1/timings.json").read_text())


def test_edit_flags_disable_guidance(workspace):
    root, run = workspace
    assert cli.main(["edit", "--config", str(root / "run.json"), "--out", str(root / "plain"),
                     "--no-rad", "--no-irjs"]) == 0
    rep = json.loads((root / "plain/report.json").read_text())
    assert rep["config"]["rad"] is None and rep["config"]["irjs"]["enabled"] is False
    vocab = Vocabulary.load(root / "data/vocab.json")
    model = load_checkpoint(root / "ckpt")
    assert cli.main(["invert", "--config", str(root / "run.json"), "--out", str(root / "inv2")]) == 0
    x_T = LatentState(read_raw(root / "inv2/latent.f32"), 200)
    with torch.no_grad():
        ref = sample_video(x_T, vocab.encode(run["edit"]["prompt"]), model, default_schedule(), 3)
    got = read_frames(root / "plain")
    assert float((got - ref).abs().max()) <= 0.5 / 255 + 1e-6


def test_window_equal_to_length_is_identical(workspace):
    root, _ = workspace
    assert cli.main(["edit", "--config", str(root / "run.json"), "--out", str(root / "w"),
                     "--window", "4", "--stride", "4"]) == 0
    assert cli.main(["edit", "--config", str(root / "run.json"), "--out", str(root / "nw")]) == 0
    for i in range(4):
        n = f"frame_{i:04d}.png"
        assert (root / "w" / n).read_bytes() == (root / "nw" / n).read_bytes()
    assert cli.main(["edit", "--config", str(root / "run.json"), "--out", str(root / "w2"),
                     "--window", "2", "--stride", "1"]) == 0


def test_eval_source_against_itself(workspace):
    root, run = workspace
    cfg = json.loads(json.dumps(run))
    cfg["eval"].update(edited=run["source"]["frames"], invariant="full")
    p = write_cfg(root, "eval.json", cfg)
    assert cli.main(["eval", "--config", p, "--out", str(root / "ev")]) == 0
    m = json.loads((root / "ev/metrics.json").read_text())
    assert m["invariant_psnr_db"] == 99.0 and 0 <= m["visor"] <= 1


def test_vis_attention(workspace):
    root, _ = workspace
    assert cli.main(["vis-attention", "--config", str(root / "run.json"), "--out", str(root / "vis")]) == 0
    summary = json.loads((root / "vis/att/summary.json").read_text())
    assert set(summary["peak_inside_fraction"]) == {"1", "5"} and summary["final_t"] == 67
    names = sorted(p.name for p in (root / "vis/att").glob("*.png"))
    # steps 0 and 2 (every=2, last=2), two words, four frames
    assert len(names) == 2 * 2 * 4 and names[0] == "t0067_w01_f00.png"


def test_peak_inside_fraction():
    maps = np.zeros((2, 4, 4)); maps[0, 0, 0] = 1; maps[1, 3, 3] = 1
    masks = np.zeros((2, 4, 4)); masks[:, :2, :2] = 1
    assert cli.peak_inside_fraction(maps, masks) == 0.5


# --------------------------------------------------------------------------- failures

@pytest.mark.parametrize("mutate", [
    lambda c: c.pop("checkpoint"),
    lambda c: c["edit"].update(steps=0),
    lambda c: c["edit"].update(prompt=["a", "purple", "circle"]),
    lambda c: c["source"].update(frames="missing"),
    lambda c: c["edit"]["objects"][0].update(boxes=[[0.5, 0.5, 0.5, 0.9]] * 4),
    lambda c: c["edit"]["objects"][0].update(word_index=40),
])
def test_bad_configs_exit_2(workspace, mutate, capsys):
    root, run = workspace
    cfg = json.loads(json.dumps(run))
    mutate(cfg)
    p = write_cfg(root, "bad.json", cfg)
    assert cli.main(["--json-errors", "edit", "--config", p, "--out", str(root / "bad")]) == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["exit_code"] == 2 and err["error"] in ("config", "io") and err["message"]


def test_unparseable_config(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    assert cli.main(["eval", "--config", str(p)]) == 2
    assert "attnedit: config" in capsys.readouterr().err
    assert cli.main(["eval", "--config", str(tmp_path / "none.json")]) == 2


def test_numeric_failure_exit_3(workspace, capsys):
    root, run = workspace
    shutil.copytree(root / "ckpt", root / "nan_ckpt", dirs_exist_ok=True)
    size = (root / "nan_ckpt/weights.bin").stat().st_size
    (root / "nan_ckpt/weights.bin").write_bytes(np.full(size // 4, np.nan, "<f4").tobytes())
    cfg = json.loads(json.dumps(run))
    cfg["checkpoint"] = "nan_ckpt"
    p = write_cfg(root, "nan.json", cfg)
    assert cli.main(["--json-errors", "edit", "--config", p, "--out", str(root / "nan")]) == 3
    assert json.loads(capsys.readouterr().err.strip())["error"] == "numeric"
