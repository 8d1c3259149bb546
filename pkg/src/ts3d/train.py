"""Training loop: seeded data order, augmentation, AdamW with cosine decay,
structured per-step logging, periodic checkpoints, and exact resume.

A checkpoint is three files: parameters (binary container), optimizer state
(same container), and a JSON sidecar holding the step counter, the data RNG
state, and the remaining epoch queue, so a resumed run reproduces the
original loss trajectory bit for bit.
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import ops
from .augment import augment
from .checkpoint import load_arrays, load_model, save_arrays, save_model
from .config import RunConfig, config_from_text
from .dataset import MANIFEST_NAME, load_frame, read_manifest
from .detect import Detection3D
from .kitti_io import ObjectLabel, write_kitti_label
from .model import TS3D, build_anchor_templates
from .optim import AdamW
from .tensor import ConfigError

LAST_CKPT = "ckpt_last"


def checkpoint_paths(out_dir, tag):
    base = os.path.join(out_dir, tag)
    return base + ".ts3d", base + ".opt.ts3d", base + ".state.json"


def save_checkpoint(out_dir, tag, model, opt, step, data_rng, queue):
    params, opt_path, state_path = checkpoint_paths(out_dir, tag)
    save_model(params, model)
    save_arrays(opt_path, opt.state_arrays())
    state = {
        "step": step,
        "rng_state": data_rng.bit_generator.state,
        "queue": list(queue),
    }
    with open(state_path, "w", encoding="utf-8") as fh:
        json.dump(state, fh)


def load_checkpoint(out_dir, tag, model, opt, data_rng):
    params, opt_path, state_path = checkpoint_paths(out_dir, tag)
    load_model(params, model)
    opt.load_state_arrays(load_arrays(opt_path))
    with open(state_path, encoding="utf-8") as fh:
        state = json.load(fh)
    data_rng.bit_generator.state = state["rng_state"]
    return int(state["step"]), list(state["queue"])


def _format_record(step, lr, parts, total):
    return (
        f"step={step} lr={lr:.6e} cls={parts['cls']:.6f} reg={parts['reg']:.6f} "
        f"orient={parts['orient']:.6f} disp={parts['disp']:.6f} total={total:.6f} "
        f"n_pos={parts['n_pos']}"
    )


def train_run(cfg: RunConfig, data_dir, out_dir, resume: bool = False,
              print_every: int = 50, quiet: bool = False,
              stop_after: int | None = None):
    """Train on the dataset's train split; returns the trained model.

    ``stop_after`` interrupts the run at that step (checkpointing as usual)
    without shortening the learning-rate schedule, so it can be resumed."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = read_manifest(os.path.join(data_dir, MANIFEST_NAME))
    train_ids = manifest.splits.get("train", [])
    if not train_ids:
        raise ConfigError(f"dataset at '{data_dir}' has no train split")
    if manifest.width != cfg.width or manifest.height != cfg.height:
        raise ConfigError(
            f"dataset resolution {manifest.width}x{manifest.height} does not match "
            f"configured {cfg.width}x{cfg.height}"
        )

    config_path = os.path.join(out_dir, "config.txt")
    if resume:
        if not os.path.exists(config_path):
            raise ConfigError(f"cannot resume: '{config_path}' not found")
        with open(config_path, encoding="utf-8") as fh:
            previous = config_from_text(fh.read())
        mismatched = cfg.diff(previous)
        if mismatched:
            raise ConfigError(
                "resume configuration mismatch on keys: " + ", ".join(sorted(mismatched))
            )
    else:
        with open(config_path, "w", encoding="utf-8") as fh:
            fh.write(cfg.to_text())

    model = TS3D(cfg, templates=build_anchor_templates(manifest, cfg),
                 rng=np.random.default_rng(cfg.seed))
    opt = AdamW(list(model.parameters()), base_lr=cfg.lr,
                weight_decay=cfg.weight_decay, total_steps=cfg.total_steps)
    data_rng = np.random.default_rng(cfg.seed + 1)
    start_step, queue = 0, []
    if resume:
        start_step, queue = load_checkpoint(out_dir, LAST_CKPT, model, opt, data_rng)

    log_path = os.path.join(out_dir, "metrics.log")
    log = open(log_path, "a" if resume else "w", encoding="utf-8")
    frames_cache: dict = {}
    end_step = cfg.total_steps if stop_after is None else min(stop_after, cfg.total_steps)
    try:
        for step in range(start_step, end_step):
            model.zero_grad()
            acc = {"cls": 0.0, "reg": 0.0, "orient": 0.0, "disp": 0.0, "n_pos": 0}
            total_val = 0.0
            for _ in range(cfg.batch_size):
                if not queue:
                    queue = [train_ids[i] for i in data_rng.permutation(len(train_ids))]
                fid = queue.pop()
                if fid not in frames_cache:
                    frames_cache[fid] = load_frame(data_dir, fid, manifest)
                frame = _clone_frame(frames_cache[fid])
                if cfg.augment:
                    frame = augment(frame, data_rng, cfg.flip_probability)
                loss, parts = model.train_step_loss(frame)
                ops.scale(loss, 1.0 / cfg.batch_size).backward()
                total_val += loss.item() / cfg.batch_size
                for key in ("cls", "reg", "orient", "disp"):
                    acc[key] += parts[key] / cfg.batch_size
                acc["n_pos"] += parts["n_pos"]
            lr = opt.step()
            record = _format_record(step, lr, acc, total_val)
            log.write(record + "\n")
            if not quiet and (step % print_every == 0 or step == cfg.total_steps - 1):
                print(record, flush=True)
            done = step + 1
            if cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                save_checkpoint(out_dir, f"ckpt_{done:06d}", model, opt, done,
                                data_rng, queue)
                save_checkpoint(out_dir, LAST_CKPT, model, opt, done, data_rng, queue)
        save_checkpoint(out_dir, LAST_CKPT, model, opt, cfg.total_steps, data_rng, queue)
    finally:
        log.close()
    return model


def _clone_frame(frame):
    from .dataset import FrameData

    return FrameData(
        frame_id=frame.frame_id, left=frame.left.copy(), right=frame.right.copy(),
        calib=frame.calib, labels=list(frame.labels),
        pseudo_disp=None if frame.pseudo_disp is None else frame.pseudo_disp,
        pseudo_valid=frame.pseudo_valid, pseudo_disp_right=frame.pseudo_disp_right,
        pseudo_valid_right=frame.pseudo_valid_right,
    )


# ---------------------------------------------------------------------------
# inference over a split


def detection_to_label(det: Detection3D, classes) -> ObjectLabel:
    return ObjectLabel(
        type=classes[det.class_id], truncated=0.0, occluded=0, alpha=det.alpha,
        box2d=det.box2d, h=det.h, w=det.w, l=det.l, x=det.x, y=det.y, z=det.z,
        ry=det.ry, score=det.score,
    )


def run_inference(model: TS3D, data_dir, split, out_dir, quiet: bool = True):
    """Write one KITTI-format detection file (with scores) per split frame."""
    manifest = read_manifest(os.path.join(data_dir, MANIFEST_NAME))
    ids = manifest.splits.get(split, [])
    if not ids:
        raise ConfigError(f"dataset has no '{split}' split")
    os.makedirs(out_dir, exist_ok=True)
    classes = list(model.cfg.classes)
    for fid in ids:
        frame = load_frame(data_dir, fid, manifest, with_pseudo=False)
        detections, _ = model.infer(frame)
        labels = [detection_to_label(d, classes) for d in detections]
        write_kitti_label(os.path.join(out_dir, fid + ".txt"), labels)
        if not quiet:
            print(f"{fid}: {len(labels)} detections", flush=True)
    return len(ids)


def load_trained_model(cfg: RunConfig, data_dir, ckpt_path) -> TS3D:
    manifest = read_manifest(os.path.join(data_dir, MANIFEST_NAME))
    model = TS3D(cfg, templates=build_anchor_templates(manifest, cfg),
                 rng=np.random.default_rng(cfg.seed))
    load_model(ckpt_path, model)
    return model
