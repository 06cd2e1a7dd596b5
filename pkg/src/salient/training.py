"""Clone training loop: Q weight-shared encoder passes per batch item, a
mirrored decoder pass for every clone, the three-term objective, and
gradient updates with best-checkpoint selection by smoothed loss.

Only clone 1 serves as the equivalence reference, and only clone 1's
features (pooled over batch items and frames) enter the distribution term,
compared against fresh Laplacian draws each step. The decoder term uses all
clones against the shared clean-frame targets.

Training is a pure function of (manifest, seed, configs): batches, prior
draws and initialization all flow through named RNG streams, so two runs
with one seed produce byte-identical checkpoints and loss traces.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import audio
from . import autodiff as ad
from . import corpus as corpus_mod
from . import losses as losses_mod
from .autodiff import Tape
from .corpus import CloneBatch, Manifest, build_clone_batch
from .errors import InvalidRange, NonFiniteLoss, NonFiniteValue
from .losses import LossBreakdown, LossWeights
from .model import (
    EncoderConfig,
    ModelParams,
    decoder_graph,
    encoder_graph,
    init_params,
    param_leaves,
    save_checkpoint,
)
from .seeding import named_stream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    batch_size: int = 64
    clones: int = 32
    optimizer: str = "adam"
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weights: LossWeights = LossWeights()
    seed: int = 0
    eval_every: int = 50
    checkpoint_dir: str = "checkpoints"
    grad_clip: float = 0.0  # 0 disables clipping
    snr_jitter_db: float = corpus_mod.DEFAULT_SNR_JITTER_DB

    def __post_init__(self):
        if self.steps < 1:
            raise InvalidRange(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 2:
            raise InvalidRange(f"batch_size must be >= 2, got {self.batch_size}")
        if self.clones < 2:
            raise InvalidRange(f"clones must be >= 2, got {self.clones}")
        if self.optimizer not in ("adam", "sgd"):
            raise InvalidRange(f"optimizer must be adam or sgd, got {self.optimizer!r}")


@dataclass(frozen=True)
class TrainLogRecord:
    step: int
    d_e: float
    d_mmd: float
    d_d: float
    d_global: float
    wall_ms: float


@dataclass
class TrainResult:
    best_params: ModelParams
    best_step: int
    best_smoothed: float
    records: list
    init_path: Path
    best_path: Path
    final_path: Path
    log_path: Path
    nonfinite_skips: int = 0


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class Sgd:
    def __init__(self, tensors: dict, lr: float):
        self.lr = lr

    def step(self, tensors: dict, grads: dict) -> None:
        for name in sorted(tensors):
            g = grads.get(name)
            if g is not None:
                tensors[name] -= self.lr * g


class Adam:
    def __init__(self, tensors: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in tensors.items()}

    def step(self, tensors: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name in sorted(tensors):
            g = grads.get(name)
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            tensors[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(config: TrainConfig, params: ModelParams):
    if config.optimizer == "sgd":
        return Sgd(params.tensors, config.learning_rate)
    return Adam(
        params.tensors,
        config.learning_rate,
        config.adam_beta1,
        config.adam_beta2,
        config.adam_eps,
    )


# ---------------------------------------------------------------------------
# one training step
# ---------------------------------------------------------------------------

def build_step_graph(tape: Tape, params: ModelParams, batch: CloneBatch, prior: np.ndarray, weights: LossWeights):
    """Assemble the full step graph on `tape`. Returns (leaves, terms) where
    terms = (d_e, d_mmd, d_d, d_global) tensors. Rows are laid out
    clone-major: clone q of all m items occupies rows [q*m, (q+1)*m)."""
    m, q_clones, t_frames, n_bins = batch.clone_inputs.shape
    cfg = params.config

    normalized = ((batch.clone_inputs - params.mean) / params.std).astype(np.float32)
    tgt_norm = ((batch.clean_targets - params.mean) / params.std).astype(np.float32)

    leaves = param_leaves(tape, params)
    xs = [
        tape.constant(np.ascontiguousarray(normalized[:, :, t, :].transpose(1, 0, 2).reshape(q_clones * m, n_bins)))
        for t in range(t_frames)
    ]
    targets_by_t = [tape.constant(np.ascontiguousarray(tgt_norm[:, t, :])) for t in range(t_frames)]

    z_by_t = encoder_graph(leaves, cfg, xs)
    d_e = losses_mod.equivalence_loss_graph(z_by_t, q_clones, m)

    pooled = ad.concat([ad.slice_(z_t, 0, 0, m) for z_t in z_by_t], axis=0)
    prior_t = tape.constant(np.asarray(prior, dtype=np.float32))
    d_mmd = losses_mod.mmd_sq_graph(pooled, prior_t, weights)

    dec_by_t = decoder_graph(leaves, cfg, z_by_t)
    d_d = losses_mod.decoder_loss_graph(dec_by_t, targets_by_t, q_clones, m)

    d_global = ad.add(
        ad.add(d_e, ad.scale(d_mmd, weights.lambda_mmd)),
        ad.scale(d_d, weights.lambda_d),
    )
    return leaves, (d_e, d_mmd, d_d, d_global)


def _apply_step(params: ModelParams, batch: CloneBatch, prior: np.ndarray, weights: LossWeights, optimizer, grad_clip: float) -> LossBreakdown:
    """Forward, backward and one optimizer update. Raises NonFiniteLoss with
    parameters untouched if anything non-finite shows up."""
    tape = Tape(np.float32)
    try:
        leaves, (d_e, d_mmd, d_d, d_global) = build_step_graph(tape, params, batch, prior, weights)
        grads_map = ad.backward(d_global)
    except NonFiniteValue as exc:
        raise NonFiniteLoss(str(exc)) from exc

    grads = {}
    for name, leaf in leaves.items():
        g = grads_map.wrt(leaf)
        if g is not None:
            if not np.all(np.isfinite(g)):
                raise NonFiniteLoss(f"non-finite gradient for {name}")
            grads[name] = g
    if grad_clip > 0.0:
        norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
        if norm > grad_clip:
            grads = {k: g * (grad_clip / norm) for k, g in grads.items()}

    optimizer.step(params.tensors, grads)
    return losses_mod.global_loss(float(d_e.data), float(d_mmd.data), float(d_d.data), weights)


def train_step(params: ModelParams, batch: CloneBatch, config: TrainConfig, optimizer=None, prior: np.ndarray = None) -> tuple:
    """Single-step entry point; train() drives this logic with persistent
    optimizer state. Returns (params, LossBreakdown); params are updated
    in place (the parameter table is materialized exactly once)."""
    if optimizer is None:
        optimizer = make_optimizer(config, params)
    if prior is None:
        m, _, t_frames, _ = batch.clone_inputs.shape
        prior = losses_mod.laplace_prior_sample(
            m * t_frames, params.config.feature_dim, named_stream(config.seed, "prior/0/0")
        )
    breakdown = _apply_step(params, batch, prior, config.weights, optimizer, config.grad_clip)
    return params, breakdown


# ---------------------------------------------------------------------------
# normalization statistics
# ---------------------------------------------------------------------------

def compute_norm_stats(manifest: Manifest, seed: int, fb=None) -> tuple:
    """Global per-bin mean/std over training frames, clean and one noisy
    version of each utterance pooled."""
    fb = fb or audio.default_filterbank()
    rng = named_stream(seed, "norm")
    count = 0
    acc = np.zeros(audio.FRAME_BINS, dtype=np.float64)
    acc_sq = np.zeros(audio.FRAME_BINS, dtype=np.float64)
    for entry in manifest.entries:
        clean = audio.load_wav(entry.clean_path)
        for buf in (clean, corpus_mod._mix_entry_segment(clean.samples.astype(np.float64), entry, rng)):
            frames = audio.frame_matrix(buf, fb)
            count += frames.shape[0]
            acc += frames.sum(axis=0)
            acc_sq += (frames * frames).sum(axis=0)
    if count == 0:
        raise NonFiniteLoss("cannot compute normalization stats from an empty manifest")
    mean = acc / count
    var = np.maximum(acc_sq / count - mean * mean, 0.0)
    std = np.maximum(np.sqrt(var), 1e-6)
    return mean.astype(np.float32), std.astype(np.float32)


# ---------------------------------------------------------------------------
# full loop
# ---------------------------------------------------------------------------

def write_log(path, records) -> None:
    lines = ["step,d_e,d_mmd,d_d,d_global,wall_ms"]
    for r in records:
        lines.append(f"{r.step},{r.d_e!r},{r.d_mmd!r},{r.d_d!r},{r.d_global!r},{r.wall_ms!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def train(manifest: Manifest, model_config: EncoderConfig, config: TrainConfig) -> TrainResult:
    """Run the loop, snapshotting every eval_every steps (and at the final
    step); the returned parameters are the snapshot with the smallest
    moving-average d_global. Writes init/best/final checkpoints plus a CSV
    loss log under config.checkpoint_dir."""
    fb = audio.default_filterbank()
    ckpt_dir = Path(config.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    params = init_params(model_config, config.seed)
    params.mean, params.std = compute_norm_stats(manifest, config.seed, fb)
    init_path = ckpt_dir / "init.ckpt"
    save_checkpoint(params, init_path)

    optimizer = make_optimizer(config, params)
    records: list = []
    snapshots: list = []  # (step, smoothed, tensors copy)
    skips = 0

    for step in range(1, config.steps + 1):
        t0 = time.perf_counter()
        for attempt in range(3):
            batch_rng = named_stream(config.seed, f"batch/{step}/{attempt}")
            batch = build_clone_batch(
                manifest, config.batch_size, config.clones, fb, batch_rng,
                snr_jitter_db=config.snr_jitter_db,
            )
            prior = losses_mod.laplace_prior_sample(
                config.batch_size * corpus_mod.CLONE_FRAMES,
                model_config.feature_dim,
                named_stream(config.seed, f"prior/{step}/{attempt}"),
            )
            try:
                breakdown = _apply_step(params, batch, prior, config.weights, optimizer, config.grad_clip)
                break
            except NonFiniteLoss as exc:
                skips += 1
                log.warning("step %d attempt %d: %s (batch skipped, params unchanged)", step, attempt, exc)
        else:
            raise NonFiniteLoss(f"3 consecutive non-finite batches at step {step}")

        wall_ms = (time.perf_counter() - t0) * 1e3
        records.append(
            TrainLogRecord(
                step=step,
                d_e=breakdown.d_e,
                d_mmd=breakdown.d_mmd,
                d_d=breakdown.d_d,
                d_global=breakdown.d_global,
                wall_ms=wall_ms,
            )
        )
        if step % config.eval_every == 0 or step == config.steps:
            window = records[-min(config.eval_every, len(records)):]
            smoothed = float(np.mean([r.d_global for r in window]))
            if not snapshots or snapshots[-1][0] != step:
                snapshots.append((step, smoothed, {k: v.copy() for k, v in params.tensors.items()}))

    best_step, best_smoothed, best_tensors = min(snapshots, key=lambda s: (s[1], s[0]))
    best_params = ModelParams(
        config=model_config,
        tensors=best_tensors,
        mean=params.mean.copy(),
        std=params.std.copy(),
    )

    best_path = ckpt_dir / "best.ckpt"
    final_path = ckpt_dir / "final.ckpt"
    log_path = ckpt_dir / "train_log.csv"
    save_checkpoint(best_params, best_path)
    save_checkpoint(params, final_path)
    write_log(log_path, records)
    return TrainResult(
        best_params=best_params,
        best_step=best_step,
        best_smoothed=best_smoothed,
        records=records,
        init_path=init_path,
        best_path=best_path,
        final_path=final_path,
        log_path=log_path,
        nonfinite_skips=skips,
    )
