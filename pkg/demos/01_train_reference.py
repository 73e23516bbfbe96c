"""Train (or load) the reference toy denoiser and check that it learned something.

The model is a small U-Net with one cross-attention layer at 1/4 resolution,
trained on synthetic videos of two moving colored shapes with captions such
as "a red circle and a green square". After training, the attention map of a
color word should light up on the shape of that color.
"""
import numpy as np
import torch

from _common import CACHE, OUT, model
from attnedit import io
from attnedit.data import make_dataset
from attnedit.denoiser import ToyVideoDenoiser, denoise, eps_mse
from attnedit.scheduler import default_schedule, diffuse_forward
from attnedit.text import Vocabulary

m = model()
print(f"checkpoint cache: {CACHE}")

# held-out data never seen in training (different generator seed)
held, videos = make_dataset(8, seed=123)
s = default_schedule()
torch.manual_seed(0)
with torch.no_grad():
    base = eps_mse(ToyVideoDenoiser(m.config), held, s)
    trained = eps_mse(m, held, s)
print(f"held-out eps-MSE: untrained {base:.4f} -> trained {trained:.4f}")

# where does each color word attend on a moderately noisy copy of a held-out clip?
sv = videos[0]
vocab = Vocabulary()
seq = vocab.encode(sv.caption)
x = diffuse_forward(sv.video * 2 - 1, 60, torch.randn_like(sv.video), s)
with torch.no_grad():
    _, rec = denoise(x.sample, 60, m.embed(seq), m)
print("caption:", " ".join(sv.caption))
for obj in sv.objects:
    j = sv.caption.index(obj.color)
    amap = rec.maps[0, j].numpy()
    r, c = np.unravel_index(amap.argmax(), amap.shape)
    cx, cy = obj.centers[0]
    print(f"  '{obj.color}' (word {j}) peaks at cell ({c}, {r}); shape centre is near "
          f"cell ({int(cx * amap.shape[1])}, {int(cy * amap.shape[0])})")
    io.write_heatmap(amap, OUT / "01_attention" / f"word{j:02d}_{obj.color}.png", size=64)
io.write_frames(sv.video[:1], OUT / "01_attention")
print(f"heatmaps written to {OUT / '01_attention'}")
