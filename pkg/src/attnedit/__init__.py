"""Region-guided text-driven video editing on a toy pixel-space diffusion model."""
from .scheduler import (NoiseSchedule, LatentState, make_linear_schedule, default_schedule,
                        diffuse_forward, ddim_step, ddim_invert_step, ddpm_posterior)
from .regions import BoxTrack, MaskSet, rasterize, rasterize_tracks, union_mask
from .text import TokenSequence, Vocabulary
from .denoiser import (ToyVideoDenoiser, DenoiserConfig, AttentionRecord, denoise,
                       train_toy_denoiser, load_checkpoint, save_checkpoint)
from .rad import RadConfig, rad_objective, rad_guidance_step
from .irjs import IrjsConfig, irjs_step
from .pipeline import EditConfig, EditResult, invert_video, edit_video, sliding_window_edit
from .metrics import metric_report

__version__ = "0.1.0"
