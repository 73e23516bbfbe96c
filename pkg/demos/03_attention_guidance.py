"""Attention guidance puts each new color on the right object.

The task: a clip with a red and a green shape gets the prompt
"a blue <shape> and a yellow <shape>", with a box around each source shape
and blue assigned to the left one. Without guidance the toy model has no idea
which shape should get which color and mostly ignores the new words. With
guidance the noisy sample is nudged every step so that each color word's
attention concentrates inside its box, and the colors land where asked.

Scored with VISOR: the fraction of frames where the blue blob's centroid is
left of the yellow blob's centroid (missing blobs count as failures).
"""
import torch

from _common import OUT, model
from attnedit import io
from attnedit.experiments import recolor_task, run_rad_trend

m = model()
seeds = range(10)
res = run_rad_trend(m, seeds)
print(f"VISOR with guidance {res.mean_on:.3f}, without {res.mean_off:.3f}")
print("per seed (with):   ", res.on)
print("per seed (without):", res.off)

# the default step size (1 -> 0.5) is too gentle for this model; both arms score 0
weak = run_rad_trend(m, range(3), alpha_start=1.0, alpha_end=0.5)
print(f"default step size on 3 seeds: with {weak.mean_on:.3f}, without {weak.mean_off:.3f}")

# save one example side by side: source | without | with
from attnedit.irjs import IrjsConfig
from attnedit.pipeline import EditConfig, edit_video
from attnedit.rad import RadConfig
from attnedit.scheduler import default_schedule
from attnedit.text import Vocabulary

task = recolor_task(0)
vocab = Vocabulary()
rows = [task.video]
for rad in (None, RadConfig((1, 5), alpha_start=20.0, alpha_end=10.0)):
    cfg = EditConfig(vocab.encode(task.source_words), vocab.encode(task.edited_words), task.tracks,
                     rad, IrjsConfig(True), 50, 0.0, 0)
    rows.append(edit_video(task.video, cfg, m, default_schedule()).video)
grid = torch.cat([torch.cat(list(r), dim=2) for r in rows], dim=1)
io.write_frames(grid[None], OUT / "03_guidance")
print(f"comparison strip (source / without / with) in {OUT / '03_guidance'}")
