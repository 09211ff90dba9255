"""Training recipe: adaptive-moment updates under cosine learning-rate
decay, global-norm gradient clipping, per-step scheduled sampling
annealed linearly from 1.0 to 0.5, early stopping on validation loss,
and bitwise-resumable checkpoints.

Batches are trained clip by clip (statistics and losses per clip); the
batch loss is the entry-count-weighted mean of per-clip dual-MSE losses,
identical to a masked MSE over the padded batch.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tz
from .config import format_config, parse_config_text
from .data import ClipRecord, augment_hflip, preprocess_clip
from .errors import ConfigError, NonFiniteError
from .model import ModelConfig, SpeechSynthesizer, loss as dual_mse_loss
from .tensor import Tensor

EARLY_STOP_MIN_DELTA = 1e-6


@dataclass
class TrainConfig:
    lr_initial: float = 0.001
    total_steps: int = 1000
    clip_norm: float = 1.0
    tf_start: float = 1.0
    tf_end: float = 0.5
    batch_size: int = 2
    seed: int = 0
    fine_tune: bool = False          # 10x smaller learning rate throughout
    patience: int = 10               # early-stop epochs without improvement
    eval_every_epochs: int = 1
    checkpoint_every: int = 0        # steps; 0 = only final
    augment_flip: float = 0.5        # per-clip horizontal flip probability
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self):
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not (0.0 <= self.tf_end <= self.tf_start <= 1.0):
            raise ConfigError("need 0 <= tf_end <= tf_start <= 1")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        cfg = cls()
        for k, v in d.items():
            if k not in cfg.__dataclass_fields__:
                raise ConfigError(f"unknown train config key {k!r}")
            setattr(cfg, k, v)
        cfg.validate()
        return cfg


def cosine_lr(step: int, cfg: TrainConfig) -> float:
    """lr_initial * 0.5 * (1 + cos(pi * step / total_steps)), clamped to the
    schedule ends outside [0, total_steps]; fine-tune scales by exactly 0.1."""
    s = min(max(step, 0), cfg.total_steps)
    lr = cfg.lr_initial * 0.5 * (1.0 + math.cos(math.pi * s / cfg.total_steps))
    if cfg.fine_tune:
        lr *= 0.1
    return lr


def tf_ratio(step: int, cfg: TrainConfig) -> float:
    """Scheduled-sampling teacher-forcing ratio, linear in steps."""
    frac = min(max(step, 0), cfg.total_steps) / cfg.total_steps
    return cfg.tf_start + (cfg.tf_end - cfg.tf_start) * frac


def clip_gradients(params: dict[str, Tensor], threshold: float = 1.0) -> float:
    """Scale all gradients so the global L2 norm is at most `threshold`;
    returns the pre-clip norm.  Non-finite gradients abort the step."""
    total = 0.0
    for name, p in params.items():
        if p.grad is None:
            continue
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in parameter {name!r}")
        total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > threshold:
        scale = threshold / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_model(cls, model: SpeechSynthesizer) -> "AdamState":
        return cls(step=0,
                   m={k: np.zeros_like(p.data) for k, p in model.params.items()},
                   v={k: np.zeros_like(p.data) for k, p in model.params.items()})


def adam_update(model: SpeechSynthesizer, state: AdamState, lr: float,
                cfg: TrainConfig) -> None:
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, p in model.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)


def batch_loss(model: SpeechSynthesizer, clips: list[tuple[np.ndarray, np.ndarray]],
               ratio: float, ss_rng: np.random.Generator) -> Tensor:
    """Entry-count-weighted mean of per-clip dual-MSE losses (equals the
    masked MSE over the corresponding padded batch)."""
    weighted = []
    total_w = 0.0
    for frames, mel in clips:
        out = model.forward_teacher_forced(frames, mel, tf_ratio=ratio, ss_rng=ss_rng)
        w = float(mel.size)
        weighted.append(tz.scale(dual_mse_loss(out.o_dec, out.o_post, mel), w))
        total_w += w
    total = weighted[0]
    for term in weighted[1:]:
        total = tz.add(total, term)
    return tz.scale(total, 1.0 / total_w)


def train_step(model: SpeechSynthesizer,
               clips: list[tuple[np.ndarray, np.ndarray]],
               adam: AdamState, cfg: TrainConfig, step: int,
               ss_rng: np.random.Generator,
               clip_ids: list[str] | None = None) -> tuple[float, float]:
    """One optimization step; returns (loss value, pre-clip grad norm)."""
    tz.zero_grads(model.params.values())
    total = batch_loss(model, clips, tf_ratio(step, cfg), ss_rng)
    value = float(total.data)
    if not math.isfinite(value):
        ids = ", ".join(clip_ids) if clip_ids else "<unknown>"
        raise NonFiniteError(f"non-finite loss at step {step} on clips [{ids}]")
    tz.backward(total)
    norm = clip_gradients(model.params, cfg.clip_norm)
    adam_update(model, adam, cosine_lr(step, cfg), cfg)
    return value, norm


def early_stop(history: list[float], patience: int) -> bool:
    """True iff the best value has not improved by more than 1e-6 for
    `patience` consecutive epochs."""
    if not history or patience < 1:
        return False
    best = history[0]
    best_idx = 0
    for i, v in enumerate(history[1:], start=1):
        if v < best - EARLY_STOP_MIN_DELTA:
            best = v
            best_idx = i
    return (len(history) - 1 - best_idx) >= patience


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    epoch_order: list[int] = field(default_factory=list)
    epoch_pos: int = 0
    best_val_loss: float = math.inf
    val_history: list[float] = field(default_factory=list)


def save_train_checkpoint(path, model: SpeechSynthesizer, adam: AdamState,
                          tstate: TrainState, tcfg: TrainConfig,
                          rngs: dict[str, np.random.Generator]) -> None:
    entries = model.state_entries()
    for k, m in adam.m.items():
        entries[f"adam.m/{k}"] = m
    for k, v in adam.v.items():
        entries[f"adam.v/{k}"] = v
    meta = {
        "format": "lipsynth-train",
        "config": model.cfg.config_text(),
        "config_hash": model.cfg.config_hash(),
        "train_config": format_config(tcfg.to_dict()),
        "adam_step": adam.step,
        "train_state": json.dumps({
            "step": tstate.step, "epoch": tstate.epoch,
            "epoch_order": tstate.epoch_order, "epoch_pos": tstate.epoch_pos,
            "best_val_loss": tstate.best_val_loss,
            "val_history": tstate.val_history,
        }, sort_keys=True),
        "rng_state": json.dumps(
            {name: gen.bit_generator.state for name, gen in rngs.items()},
            sort_keys=True),
        "model_rng_state": json.dumps(model.rng.bit_generator.state, sort_keys=True),
    }
    tz.save_archive(path, entries, meta)


def load_train_checkpoint(path, override_config: bool = False
                          ) -> tuple[SpeechSynthesizer, AdamState, TrainState,
                                     TrainConfig, dict[str, np.random.Generator]]:
    entries, meta = tz.load_archive(path)
    if meta.get("format") != "lipsynth-train":
        raise ConfigError(f"{path}: not a training checkpoint")
    cfg = ModelConfig.from_dict(parse_config_text(meta["config"]))
    if cfg.config_hash() != meta["config_hash"] and not override_config:
        raise ConfigError(
            f"{path}: model config hash mismatch; pass the override flag to "
            "resume onto a different configuration")
    model = SpeechSynthesizer(cfg)
    model.load_state_entries(entries)
    model.rng.bit_generator.state = json.loads(meta["model_rng_state"])
    adam = AdamState(
        step=int(meta["adam_step"]),
        m={k: entries[f"adam.m/{k}"].astype(cfg.np_dtype) for k in model.params},
        v={k: entries[f"adam.v/{k}"].astype(cfg.np_dtype) for k in model.params})
    ts_raw = json.loads(meta["train_state"])
    tstate = TrainState(**ts_raw)
    tcfg = TrainConfig.from_dict(parse_config_text(meta["train_config"]))
    rngs = {}
    for name, state in json.loads(meta["rng_state"]).items():
        gen = np.random.default_rng(0)
        gen.bit_generator.state = state
        rngs[name] = gen
    return model, adam, tstate, tcfg, rngs


def load_pretrained_params(path, model: SpeechSynthesizer,
                           override_config: bool = False) -> None:
    """Warm-start: copy parameters and buffers from a model or training
    checkpoint into an existing model (fine-tuning entry point)."""
    entries, meta = tz.load_archive(path)
    if meta.get("format") not in ("lipsynth-model", "lipsynth-train"):
        raise ConfigError(f"{path}: not a checkpoint")
    if meta.get("config_hash") != model.cfg.config_hash() and not override_config:
        raise ConfigError(
            f"{path}: checkpoint config differs from the model; pass the "
            "override flag to fine-tune anyway")
    model.load_state_entries(entries)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _rngs_for(tcfg: TrainConfig) -> dict[str, np.random.Generator]:
    root = np.random.SeedSequence(tcfg.seed)
    sampler, sample_draw, augment = root.spawn(3)
    return {
        "sampler": np.random.default_rng(sampler),
        "scheduled_sampling": np.random.default_rng(sample_draw),
        "augment": np.random.default_rng(augment),
    }


def fit(records: list[ClipRecord], model_cfg: ModelConfig, tcfg: TrainConfig,
        out_dir, val_records: list[ClipRecord] | None = None,
        resume: str | None = None, init_from: str | None = None,
        override_config: bool = False, log_name: str = "train_log.jsonl",
        quiet: bool = True) -> tuple[SpeechSynthesizer, Path]:
    """Train on the given clips; writes checkpoints and a line-delimited
    log {step, lr, tf_ratio, train_loss, val_loss, grad_norm} under
    out_dir.  Returns the trained model and the final checkpoint path.
    """
    tcfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / log_name
    final_path = out_dir / "final.ckpt"

    if resume:
        model, adam, tstate, tcfg, rngs = load_train_checkpoint(resume, override_config)
        log_mode = "a"
    else:
        model = SpeechSynthesizer(model_cfg)
        if init_from:
            load_pretrained_params(init_from, model, override_config)
        adam = AdamState.for_model(model)
        tstate = TrainState()
        rngs = _rngs_for(tcfg)
        log_mode = "w"

    train_items = [preprocess_clip(r, model.cfg.input_channels) for r in records]
    clip_ids = [r.id for r in records]
    val_items = ([preprocess_clip(r, model.cfg.input_channels) for r in val_records]
                 if val_records else None)

    model.train()
    stopped_early = False
    with open(log_path, log_mode, encoding="utf-8") as log:
        while tstate.step < tcfg.total_steps and not stopped_early:
            if tstate.epoch_pos >= len(tstate.epoch_order):
                order = list(range(len(train_items)))
                rngs["sampler"].shuffle(order)
                tstate.epoch_order = order
                tstate.epoch_pos = 0

            take = tstate.epoch_order[tstate.epoch_pos:tstate.epoch_pos + tcfg.batch_size]
            tstate.epoch_pos += len(take)
            batch = []
            for idx in take:
                frames, mel = train_items[idx]
                frames = augment_hflip(frames, tcfg.augment_flip, rngs["augment"])
                batch.append((frames, mel))

            value, norm = train_step(model, batch, adam, tcfg, tstate.step,
                                     rngs["scheduled_sampling"],
                                     [clip_ids[i] for i in take])
            record = {"step": tstate.step + 1,
                      "lr": cosine_lr(tstate.step, tcfg),
                      "tf_ratio": tf_ratio(tstate.step, tcfg),
                      "train_loss": value,
                      "val_loss": None,
                      "grad_norm": norm}
            tstate.step += 1

            epoch_done = tstate.epoch_pos >= len(tstate.epoch_order)
            if epoch_done:
                tstate.epoch += 1
                if val_items and tstate.epoch % tcfg.eval_every_epochs == 0:
                    vloss = evaluate_loss(model, val_items)
                    record["val_loss"] = vloss
                    tstate.val_history.append(vloss)
                    tstate.best_val_loss = min(tstate.best_val_loss, vloss)
                    if early_stop(tstate.val_history, tcfg.patience):
                        stopped_early = True
            log.write(json.dumps(record) + "\n")
            if not quiet:
                print(f"step {record['step']}/{tcfg.total_steps} "
                      f"loss {value:.4f} grad {norm:.3f}")

            if tcfg.checkpoint_every and tstate.step % tcfg.checkpoint_every == 0:
                save_train_checkpoint(out_dir / f"step{tstate.step:06d}.ckpt",
                                      model, adam, tstate, tcfg, rngs)

    save_train_checkpoint(final_path, model, adam, tstate, tcfg, rngs)
    return model, final_path


def evaluate_loss(model: SpeechSynthesizer,
                  items: list[tuple[np.ndarray, np.ndarray]]) -> float:
    """Teacher-forced dual-MSE loss in eval mode, weighted like training."""
    was_training = model.training
    model.eval()
    try:
        with tz.no_grad():
            num = den = 0.0
            for frames, mel in items:
                out = model.forward_teacher_forced(frames, mel, tf_ratio=1.0)
                w = float(mel.size)
                num += w * float(dual_mse_loss(out.o_dec, out.o_post, mel).data)
                den += w
        return num / den
    finally:
        if was_training:
            model.train()
