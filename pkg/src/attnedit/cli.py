"""Command-line entry point: ``attnedit <command> [options]``.

Commands: make-dataset, train, invert, edit, eval, vis-attention. All but
make-dataset read a JSON run config (``--config``). Exit codes: 0 success,
2 config error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np
import torch

from . import io
from .data import make_shape_video
from .denoiser import (NonFiniteError, TrainingDivergedError, load_checkpoint, save_checkpoint,
                       train_toy_denoiser, DenoiserConfig)
from .irjs import IrjsConfig
from .metrics import RelationSpec, metric_report, toy_color_detector
from .pipeline import EditConfig, NumericFailure, edit_video, invert_video, sliding_window_edit
from .rad import RadConfig, RadGradientError
from .regions import BoxTrack, DegenerateRegionError, rasterize_tracks, union_mask
from .scheduler import NoiseSchedule, ScheduleError, default_schedule, make_linear_schedule
from .text import UnknownTokenError, Vocabulary

log = logging.getLogger("attnedit")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

_BOX = {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4}
_TRACK = {
    "type": "object",
    "required": ["object_id", "word_index", "boxes"],
    "properties": {"object_id": {"type": "string"}, "word_index": {"type": "integer", "minimum": 0},
                   "boxes": {"type": "array", "items": _BOX, "minItems": 1}},
}
_PROMPT = {"type": "array", "items": {"type": "string"}, "minItems": 1, "maxItems": 16}
RUN_SCHEMA = {
    "type": "object",
    "properties": {
        "checkpoint": {"type": "string"},
        "vocab": {"type": "string"},
        "dataset": {"type": "string"},
        "output_dir": {"type": "string"},
        "schedule": {"type": "object", "properties": {
            "T": {"type": "integer", "minimum": 1},
            "beta_start": {"type": "number"}, "beta_end": {"type": "number"},
            "path": {"type": "string"}}},
        "train": {"type": "object", "properties": {
            "epochs": {"type": "integer", "minimum": 0},
            "batch_size": {"type": "integer", "minimum": 1},
            "lr": {"type": "number", "exclusiveMinimum": 0},
            "weighting": {"enum": ["uniform", "snr"]},
            "width": {"type": "integer", "minimum": 1},
            "seed": {"type": "integer", "minimum": 0}}},
        "source": {"type": "object", "required": ["frames", "prompt"], "properties": {
            "frames": {"type": "string"}, "prompt": _PROMPT}},
        "edit": {"type": "object", "required": ["prompt"], "properties": {
            "prompt": _PROMPT,
            "objects": {"type": "array", "items": _TRACK},
            "steps": {"type": "integer", "minimum": 1},
            "eta": {"type": "number", "minimum": 0, "maximum": 1},
            "seed": {"type": "integer", "minimum": 0},
            "latent": {"type": "string"},
            "rad": {"type": "object", "properties": {
                "enabled": {"type": "boolean"},
                "word_indices": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                "fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "alpha_start": {"type": "number", "exclusiveMinimum": 0},
                "alpha_end": {"type": "number", "exclusiveMinimum": 0},
                "apply_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "reuse_eps": {"type": "boolean"}}},
            "irjs": {"type": "object", "properties": {
                "enabled": {"type": "boolean"},
                "mode": {"enum": ["deterministic", "stochastic"]},
                "blend_final_step": {"type": "boolean"}}},
            "window": {"type": "integer", "minimum": 1},
            "stride": {"type": "integer", "minimum": 1}}},
        "eval": {"type": "object", "properties": {
            "edited": {"type": "string"},
            "invariant": {"enum": ["objects", "full"]},
            "tolerance": {"type": "number", "exclusiveMinimum": 0},
            "relation": {"type": "object", "required": ["subject", "relation", "reference"],
                         "properties": {"subject": {"type": "string"},
                                        "relation": {"enum": ["left", "right", "above", "below"]},
                                        "reference": {"type": "string"}}}}},
        "vis": {"type": "object", "properties": {
            "word_indices": {"type": "array", "items": {"type": "integer", "minimum": 0}},
            "every": {"type": "integer", "minimum": 1}}},
    },
}

# which config keys each command needs, and which of them are input paths
_REQUIRED = {
    "train": ["dataset", "checkpoint"],
    "invert": ["checkpoint", "source"],
    "edit": ["checkpoint", "source", "edit"],
    "eval": ["source"],
    "vis-attention": ["checkpoint", "source", "edit"],
}
_INPUT_PATHS = {
    "train": [("dataset",)],
    "invert": [("checkpoint",), ("source", "frames")],
    "edit": [("checkpoint",), ("source", "frames"), ("edit", "latent")],
    "eval": [("source", "frames"), ("eval", "edited")],
    "vis-attention": [("checkpoint",), ("source", "frames")],
}


class ConfigError(ValueError):
    pass


def _lookup(cfg: dict, keys: tuple):
    cur = cfg
    for k in keys:
        if not isinstance(cur, dict) or k not in cur:
            return None
        cur = cur[k]
    return cur


def load_run_config(path, command: str) -> dict:
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    try:
        jsonschema.validate(cfg, RUN_SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {e.message}") from None
    for key in _REQUIRED.get(command, []):
        if key not in cfg:
            raise ConfigError(f"command {command!r} needs config key {key!r}")
    base = path.parent
    for keys in _INPUT_PATHS.get(command, []):
        value = _lookup(cfg, keys)
        if value is not None and not (base / value).exists():
            raise ConfigError(f"path {'.'.join(keys)}={value!r} does not exist")
    if "vocab" in cfg and not (base / cfg["vocab"]).exists():
        raise ConfigError(f"vocab file {cfg['vocab']!r} does not exist")
    if "path" in cfg.get("schedule", {}) and not (base / cfg["schedule"]["path"]).exists():
        raise ConfigError(f"schedule file {cfg['schedule']['path']!r} does not exist")
    cfg["_base"] = str(base)
    return cfg


def _path(cfg: dict, value: str) -> Path:
    return Path(cfg["_base"]) / value


def _schedule(cfg: dict) -> NoiseSchedule:
    sc = cfg.get("schedule")
    if not sc:
        return default_schedule()
    if "path" in sc:
        return NoiseSchedule.load(_path(cfg, sc["path"]))
    return make_linear_schedule(sc.get("T", 200), sc.get("beta_start", 1e-4), sc.get("beta_end", 0.05))


def _vocab(cfg: dict) -> Vocabulary:
    return Vocabulary.load(_path(cfg, cfg["vocab"])) if "vocab" in cfg else Vocabulary()


def build_edit_config(cfg: dict, vocab: Vocabulary, seed=None, no_rad=False,
                      no_irjs=False, record_attention=False) -> EditConfig:
    ed = cfg["edit"]
    tracks = [BoxTrack.from_dict(d) for d in ed.get("objects", [])]
    rc = ed.get("rad", {})
    rad = None
    if rc.get("enabled", bool(tracks)) and not no_rad:
        indices = rc.get("word_indices") or [tr.word_index for tr in tracks]
        rad = RadConfig(tuple(indices), rc.get("fraction", 0.2), rc.get("alpha_start", 1.0),
                        rc.get("alpha_end", 0.5), rc.get("apply_fraction", 1.0),
                        rc.get("reuse_eps", False))
    ic = ed.get("irjs", {})
    irjs = IrjsConfig(ic.get("enabled", True) and not no_irjs, ic.get("mode", "deterministic"),
                      ic.get("blend_final_step", True))
    return EditConfig(vocab.encode(cfg["source"]["prompt"]), vocab.encode(ed["prompt"]), tracks,
                      rad, irjs, ed.get("steps", 50), ed.get("eta", 0.0),
                      ed.get("seed", 0) if seed is None else seed, record_attention)


def _out_dir(cfg: dict, args) -> Path:
    if args.out:
        return Path(args.out)
    if "output_dir" in cfg:
        return _path(cfg, cfg["output_dir"])
    raise ConfigError("no output directory: pass --out or set output_dir")


def _save_loss_curve(losses: list, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps = [e["step"] for e in losses if e["rad"] is not None]
    fig, ax = plt.subplots(figsize=(5, 3))
    if steps:
        for key, label in (("inner_total", "inner"), ("outer_total", "outer"), ("total", "total")):
            ax.plot(steps, [e["rad"][key] for e in losses if e["rad"] is not None], label=label)
        ax.legend()
    ax.set_xlabel("denoising step")
    ax.set_ylabel("attention loss")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


# --------------------------------------------------------------------------- commands

def cmd_make_dataset(out_dir, num_videos: int, frames: int, size: int, seed: int) -> dict:
    if size < 32:
        raise ConfigError("size must be at least 32")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab = Vocabulary()
    vocab.save(out_dir / "vocab.json")
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(num_videos):
        sv = make_shape_video(rng, frames, size)
        name = f"video_{i:04d}"
        io.write_frames(sv.video, out_dir / name)
        entries.append({"dir": name, "caption": sv.caption,
                        "objects": [o.to_dict() for o in sv.objects]})
    manifest = {"seed": seed, "frames": frames, "size": size, "videos": entries}
    io.dump_json(manifest, out_dir / "manifest.json")
    return manifest


def cmd_train(cfg: dict, args) -> dict:
    ds_dir = _path(cfg, cfg["dataset"])
    manifest = json.loads((ds_dir / "manifest.json").read_text())
    vocab = Vocabulary.load(ds_dir / "vocab.json") if (ds_dir / "vocab.json").exists() else _vocab(cfg)
    dataset = [(io.read_frames(ds_dir / e["dir"]), vocab.encode(e["caption"])) for e in manifest["videos"]]
    tc = cfg.get("train", {})
    seed = args.seed if args.seed is not None else tc.get("seed", 0)
    config = DenoiserConfig(width=tc.get("width", 16), vocab_size=max(64, len(vocab)))
    model = train_toy_denoiser(dataset, _schedule(cfg), tc.get("epochs", 60), seed, config,
                               tc.get("batch_size", 4), tc.get("lr", 2e-3),
                               weighting=tc.get("weighting", "snr"))
    ckpt = _path(cfg, cfg["checkpoint"])
    save_checkpoint(model, ckpt)
    io.dump_json({"loss_history": model.loss_history, "seed": seed}, ckpt / "training.json")
    return {"epochs": len(model.loss_history), "final_loss": model.loss_history[-1] if model.loss_history else None}


def cmd_invert(cfg: dict, args) -> dict:
    vocab = _vocab(cfg)
    model = load_checkpoint(_path(cfg, cfg["checkpoint"]))
    video = io.read_frames(_path(cfg, cfg["source"]["frames"]))
    steps = cfg.get("edit", {}).get("steps", 50)
    with torch.no_grad():
        xT = invert_video(video, vocab.encode(cfg["source"]["prompt"]), model, _schedule(cfg), steps)
    out = _out_dir(cfg, args)
    io.write_raw(xT.sample, out / "latent.f32")
    report = {"t": xT.t, "steps": steps, "shape": list(xT.sample.shape)}
    io.dump_json(report, out / "invert_report.json")
    return report


def _run_edit(cfg: dict, args, record_attention=False):
    vocab = _vocab(cfg)
    model = load_checkpoint(_path(cfg, cfg["checkpoint"]))
    video = io.read_frames(_path(cfg, cfg["source"]["frames"]))
    schedule = _schedule(cfg)
    ec = build_edit_config(cfg, vocab, args.seed, getattr(args, "no_rad", False),
                           getattr(args, "no_irjs", False), record_attention)
    x_T = None
    if cfg["edit"].get("latent"):
        from .scheduler import LatentState
        x_T = LatentState(io.read_raw(_path(cfg, cfg["edit"]["latent"])), schedule.T)
    window = getattr(args, "window", None) or cfg["edit"].get("window")
    stride = getattr(args, "stride", None) or cfg["edit"].get("stride")
    t0 = time.perf_counter()
    if window:
        result = sliding_window_edit(video, ec, model, schedule, window, stride or window, x_T=x_T)
    else:
        result = edit_video(video, ec, model, schedule, x_T=x_T)
    elapsed = time.perf_counter() - t0
    return video, ec, result, elapsed


def _edit_metrics(cfg: dict, video, ec: EditConfig, edited) -> dict:
    F_, _, H, W = video.shape
    union = union_mask(rasterize_tracks(ec.objects, H, W, F_), num_frames=F_)
    invariant = 1 - union
    ev = cfg.get("eval", {})
    relation = None
    if "relation" in ev:
        r = ev["relation"]
        relation = RelationSpec(r["subject"], r["relation"], r["reference"])
    return metric_report(edited, ec.edited_prompt, video if invariant.any() else None,
                         invariant if invariant.any() else None, relation,
                         det=toy_color_detector(ev.get("tolerance", 0.3)))


def cmd_edit(cfg: dict, args) -> dict:
    video, ec, result, elapsed = _run_edit(cfg, args)
    out = _out_dir(cfg, args)
    io.write_frames(result.video, out)
    result.metrics = _edit_metrics(cfg, video, ec, result.video)
    report = result.report(ec)
    if getattr(args, "window", None) or cfg["edit"].get("window"):
        report["window"] = {"window": getattr(args, "window", None) or cfg["edit"].get("window"),
                            "stride": getattr(args, "stride", None) or cfg["edit"].get("stride")}
    io.dump_json(report, out / "report.json")
    # wall-clock lives apart from the report so reruns stay byte-identical
    io.dump_json({"edit_seconds": elapsed}, out / "timings.json")
    _save_loss_curve(result.losses, out / "loss_curve.png")
    return result.metrics


def cmd_eval(cfg: dict, args) -> dict:
    source = io.read_frames(_path(cfg, cfg["source"]["frames"]))
    ev = cfg.get("eval", {})
    if "edited" in ev:
        edited_dir = _path(cfg, ev["edited"])
    else:
        edited_dir = _out_dir(cfg, args)
    edited = io.read_frames(edited_dir)
    vocab = _vocab(cfg)
    F_, _, H, W = source.shape
    tracks = [BoxTrack.from_dict(d) for d in cfg.get("edit", {}).get("objects", [])]
    if ev.get("invariant", "objects") == "full" or not tracks:
        invariant = np.ones((F_, H, W), dtype=np.uint8)
    else:
        invariant = 1 - union_mask(rasterize_tracks(tracks, H, W, F_), num_frames=F_)
    relation = None
    if "relation" in ev:
        r = ev["relation"]
        relation = RelationSpec(r["subject"], r["relation"], r["reference"])
    prompt = vocab.encode(cfg["edit"]["prompt"]) if "edit" in cfg else None
    metrics = metric_report(edited, prompt, source, invariant, relation,
                            det=toy_color_detector(ev.get("tolerance", 0.3)))
    out = Path(args.out) if args.out else edited_dir
    io.dump_json(metrics, out / "metrics.json")
    return metrics


def peak_inside_fraction(attention_maps: np.ndarray, masks: np.ndarray) -> float:
    """Fraction of frames whose attention maximum falls inside the mask."""
    hits = 0
    for amap, m in zip(attention_maps, masks):
        r, c = np.unravel_index(int(np.argmax(amap)), amap.shape)
        hits += int(m[r, c] > 0)
    return hits / len(attention_maps)


def cmd_vis_attention(cfg: dict, args) -> dict:
    video, ec, result, _ = _run_edit(cfg, args, record_attention=True)
    out = _out_dir(cfg, args)
    vis = cfg.get("vis", {})
    words = vis.get("word_indices") or [tr.word_index for tr in ec.objects]
    every = vis.get("every", 10)
    F_, _, H, W = video.shape
    size = max(64, H)
    last = len(result.attention) - 1
    for step, maps in enumerate(result.attention):
        if step % every and step != last:
            continue
        t = result.losses[step]["t"]
        for j in words:
            for f in range(F_):
                io.write_heatmap(maps[f, j], out / "att" / f"t{t:04d}_w{j:02d}_f{f:02d}.png", size)
    summary = {}
    final = result.attention[last]
    if ec.objects:
        pf = H // final.shape[-2]
        masks = rasterize_tracks(ec.objects, H // pf, W // pf, F_)
        for j in words:
            summary[str(j)] = peak_inside_fraction(final[:, j], masks.for_word(j))
    io.dump_json({"peak_inside_fraction": summary, "final_t": result.losses[last]["t"]},
                 out / "att" / "summary.json")
    return summary


# --------------------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attnedit", description=__doc__.splitlines()[0])
    p.add_argument("--json-errors", action="store_true", help="emit errors as JSON on stderr")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    mk = sub.add_parser("make-dataset", help="synthesize the moving-shapes corpus")
    mk.add_argument("--out", required=True)
    mk.add_argument("--num-videos", type=int, default=128)
    mk.add_argument("--frames", type=int, default=8)
    mk.add_argument("--size", type=int, default=64)
    mk.add_argument("--seed", type=int, default=0)

    for name, helptext in (("train", "train the toy denoiser"),
                           ("invert", "DDIM-invert the source video"),
                           ("edit", "run the guided edit"),
                           ("eval", "score an edited frame directory"),
                           ("vis-attention", "write cross-attention heatmaps")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", required=True)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        if name in ("edit", "vis-attention"):
            sp.add_argument("--window", type=int)
            sp.add_argument("--stride", type=int)
            sp.add_argument("--no-rad", action="store_true")
            sp.add_argument("--no-irjs", action="store_true")
    return p


_COMMANDS = {"train": cmd_train, "invert": cmd_invert, "edit": cmd_edit,
             "eval": cmd_eval, "vis-attention": cmd_vis_attention}


def _fail(args, code: int, kind: str, message: str) -> int:
    if getattr(args, "json_errors", False):
        sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    else:
        sys.stderr.write(f"attnedit: {kind}: {message}\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        if args.command == "make-dataset":
            result = cmd_make_dataset(args.out, args.num_videos, args.frames, args.size, args.seed)
            print(json.dumps({"videos": len(result["videos"])}))
            return EXIT_OK
        cfg = load_run_config(args.config, args.command)
        result = _COMMANDS[args.command](cfg, args)
        print(json.dumps(result, sort_keys=True))
        return EXIT_OK
    except (ConfigError, DegenerateRegionError, UnknownTokenError, ScheduleError) as e:
        return _fail(args, EXIT_CONFIG, "config", str(e))
    except (NumericFailure, NonFiniteError, TrainingDivergedError, RadGradientError) as e:
        return _fail(args, EXIT_NUMERIC, "numeric", str(e))
    except (ValueError, KeyError) as e:
        return _fail(args, EXIT_CONFIG, "config", str(e))
    except OSError as e:
        return _fail(args, EXIT_CONFIG, "io", str(e))


if __name__ == "__main__":
    sys.exit(main())
