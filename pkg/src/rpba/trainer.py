"""Desk-scale training loop: deterministic batches, AdamW, CSV logging.

Everything downstream of the seed is a pure function of the config, so two
runs with the same config produce bit-identical checkpoints and logs, and a
run resumed from a checkpoint continues exactly where the original would
have gone.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import data as dat
from . import model as mdl
from .autograd import Tape, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .losses import LossReport, LossWeights, loss_rec, total_from_components
from .optim import AdamWState, adamw_step

__all__ = ["TrainConfig", "TrainResult", "eval_dataset_rec", "parse_config_file", "train"]

CSV_HEADER = "step,total,rec,smooth,cons,mag,learning_rate"


@dataclass
class TrainConfig:
    lr: float = 2e-4
    weight_decay: float = 1e-4
    max_steps: int = 3000
    batch_size: int = 8
    eval_batch_size: int = 1
    crop_rgb: int = 256
    seed: int = 3407
    loss_weights: LossWeights = field(default_factory=LossWeights)
    data_dir: str | None = None      # directory of pgm/meta/png pairs; else synthetic
    synth_count: int = 8
    synth_size: int = 64             # mosaic side of synthetic pairs
    eval_every: int = 50             # full-dataset rec evaluation cadence (0 = never)
    target_rec: float | None = None  # stop early once mean rec drops below this
    checkpoint_every: int = 0        # 0 = only final
    out_dir: str = "run"
    augment: bool = True

    def validate(self) -> None:
        if self.crop_rgb % 2:
            raise ValueError(f"crop_rgb {self.crop_rgb} must be even")
        if (self.crop_rgb // 2) % 8:
            raise ValueError(f"crop_rgb/2 = {self.crop_rgb // 2} must be divisible by 8")
        if self.batch_size < 1 or self.max_steps < 0:
            raise ValueError("batch_size >= 1 and max_steps >= 0 required")
        self.loss_weights.validate()


_CONFIG_FIELDS = {
    "lr": float,
    "weight_decay": float,
    "max_steps": int,
    "batch_size": int,
    "eval_batch_size": int,
    "crop_rgb": int,
    "seed": int,
    "lambda_smooth": float,
    "lambda_cons": float,
    "lambda_mag": float,
    "data_dir": str,
    "synth_count": int,
    "synth_size": int,
    "eval_every": int,
    "target_rec": float,
    "checkpoint_every": int,
    "out_dir": str,
    "augment": lambda s: s.lower() in ("1", "true", "yes"),
}


def parse_config_file(path: str, base: TrainConfig | None = None) -> TrainConfig:
    """Read a plain `key = value` file into a TrainConfig."""
    cfg = base or TrainConfig()
    overrides: dict[str, object] = {}
    lw = replace(cfg.loss_weights)
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in _CONFIG_FIELDS:
                raise ValueError(f"{path}:{lineno}: unknown config key '{key}'")
            parsed = _CONFIG_FIELDS[key](val)
            if key == "lambda_smooth":
                lw.smooth = parsed
            elif key == "lambda_cons":
                lw.cons = parsed
            elif key == "lambda_mag":
                lw.mag = parsed
            else:
                overrides[key] = parsed
    cfg = replace(cfg, loss_weights=lw, **overrides)
    return cfg


@dataclass
class TrainResult:
    checkpoint_path: str
    csv_path: str
    steps_run: int
    final_report: LossReport | None
    final_eval_rec: float | None


def _load_dataset(cfg: TrainConfig) -> dat.Dataset:
    if cfg.data_dir:
        return dat.load_pairs_dir(cfg.data_dir)
    return dat.make_synthetic_dataset(cfg.seed, cfg.synth_count, cfg.synth_size)


def eval_dataset_rec(params: mdl.ModelParams, dataset: dat.Dataset) -> float:
    """Mean reconstruction L1 over full images, tape-free."""
    total = 0.0
    for packed, target in zip(dataset.packed, dataset.targets):
        item = mdl.infer_single(params, packed)
        diff = np.abs(item.fused.data - target)
        total += float(diff.sum()) / (target.shape[1] * target.shape[2])
    return total / len(dataset)


def train_step(
    params: mdl.ModelParams,
    xs: np.ndarray,
    ys: np.ndarray,
    weights: LossWeights,
) -> LossReport:
    """One forward/backward pass; gradients are left in the parameters."""
    params.zero_grad()
    bsz = xs.shape[0]
    with Tape() as tape:
        fwd = mdl.forward_batch(params, Tensor(xs))
        rec = None
        for b in range(bsz):
            item = mdl.forward_item(params, fwd, b)
            r = loss_rec(item.fused, Tensor(ys[b]))
            rec = r if rec is None else rec + r
        rec = rec * (1.0 / bsz)
        total, report = total_from_components(rec, fwd.grids, weights)
        tape.backward(total)
    return report


def _format_row(step: int, rep: LossReport, lr: float) -> str:
    return (
        f"{step},{rep.total:.9g},{rep.rec:.9g},{rep.smooth:.9g},"
        f"{rep.cons:.9g},{rep.mag:.9g},{lr:.9g}"
    )


def train(cfg: TrainConfig, resume_from: str | None = None) -> TrainResult:
    """Run the loop to max_steps (or the early-stop target); returns artifacts.

    ``resume_from`` restores parameters, optimizer moments, step counter and
    RNG state, after which the trajectory is bit-identical to an
    uninterrupted run of the same config.
    """
    cfg.validate()
    os.makedirs(cfg.out_dir, exist_ok=True)
    dataset = _load_dataset(cfg)
    csv_path = os.path.join(cfg.out_dir, "loss_log.csv")
    ckpt_path = os.path.join(cfg.out_dir, "model.rpbc")

    if resume_from:
        params, opt, rng, _ = load_checkpoint(resume_from)
        if opt is None or rng is None:
            raise ValueError(f"{resume_from} lacks optimizer/rng state; cannot resume")
        start_step = opt.step
        csv_mode = "a"
    else:
        params = mdl.init_model(cfg.seed)
        opt = AdamWState.for_params(list(params.named()))
        rng = np.random.default_rng(cfg.seed)
        start_step = 0
        csv_mode = "w"

    named = list(params.named())
    report: LossReport | None = None
    eval_rec: float | None = None
    step = start_step
    with open(csv_path, csv_mode) as log:
        if csv_mode == "w":
            log.write(CSV_HEADER + "\n")
        while step < cfg.max_steps:
            xs, ys = dat.sample_batch(dataset, cfg.batch_size, cfg.crop_rgb, rng, cfg.augment)
            report = train_step(params, xs, ys, cfg.loss_weights)
            step = adamw_step(named, opt, cfg.lr, cfg.weight_decay)
            log.write(_format_row(step, report, cfg.lr) + "\n")
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(
                    os.path.join(cfg.out_dir, f"model_step{step:06d}.rpbc"), params, opt, rng
                )
            if cfg.eval_every and cfg.target_rec is not None and step % cfg.eval_every == 0:
                eval_rec = eval_dataset_rec(params, dataset)
                if eval_rec < cfg.target_rec:
                    break
    save_checkpoint(ckpt_path, params, opt, rng)
    return TrainResult(
        checkpoint_path=ckpt_path,
        csv_path=csv_path,
        steps_run=step - start_step,
        final_report=report,
        final_eval_rec=eval_rec,
    )
