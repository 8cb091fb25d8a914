"""Training loop: batches -> encoder -> contrastive loss -> AdamW.

The temperature is optimized as log(tau) alongside the encoder weights.
The learning rate follows a plateau rule on a 100-step moving average of
the loss. Every step draws its randomness from a generator seeded by
(seed, step), so runs are reproducible and resuming from a checkpoint
retraces the uninterrupted trajectory exactly.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import augment, datapipe, encoder, loss as loss_mod, pairs
from .frontend import VqtConfig, log_magnitude, vqt_values

__all__ = ["TrainConfig", "TrainResult", "train", "resume", "make_triples", "adam_step"]


@dataclass
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 1.5e-3
    plateau_patience: int = 300  # paper-scale runs use 5000
    lr_divisor: float = 5.0
    weight_decay: float = 1e-4
    max_steps: int = 2000
    checkpoint_interval: int = 500
    seed: int = 0
    chunk_duration: float = 7.2
    log_tau_init: float = float(np.log(0.01))
    loss_variant: str = "two_positive"  # or "ntxent" (ablation baseline)
    no_stretch: bool = False
    no_pitch: bool = False
    no_shift: bool = False
    merge_scheme: str = "none"
    smooth_window: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (N=1 has zero loss)")
        if self.lr_divisor <= 1:
            raise ValueError("lr_divisor must be > 1")
        if self.plateau_patience < 1:
            raise ValueError("plateau_patience must be >= 1")


@dataclass
class TrainResult:
    params: encoder.Parameters
    log_tau: float
    loss_log: list  # rows of (step, loss, tau, lr)
    checkpoint_path: Path | None


def make_triples(
    tracks: list,
    n: int,
    rng: np.random.Generator,
    vqt_config: VqtConfig,
    geom: augment.CropGeometry,
    transform_spec: datapipe.TransformSpec,
    chunk_duration: float,
    no_stretch: bool = False,
    no_pitch: bool = False,
    no_shift: bool = False,
):
    """Draw n (ref, A, B) complex views plus their source song ids.

    Only the consumed bin/frame windows of each VQT are computed; the
    result is identical to slicing the full transform.
    """
    h = geom.half_octave
    qb = geom.total_bins
    triples, songs = [], []
    for _ in range(n):
        track = tracks[int(rng.integers(0, len(tracks)))]
        chunk = datapipe.extract_chunk(track, chunk_duration, rng)
        fs = chunk.sample_rate
        x_ref, _ = datapipe.apply_transforms(chunk.x_ref, transform_spec, fs, rng)
        x_a, _ = datapipe.apply_transforms(chunk.x_a, transform_spec, fs, rng)
        x_b, _ = datapipe.apply_transforms(chunk.x_b, transform_spec, fs, rng)

        w = vqt_config.n_frames(x_ref.shape[0])
        p = augment.draw_view_params(
            rng, w, geom, no_stretch=no_stretch, no_pitch=no_pitch, no_shift=no_shift
        )
        lo, hi, positions = augment.ref_frame_window(
            w, p.t, p.ref_time_offset, geom.out_frames
        )
        ref_vals = vqt_values(x_ref, vqt_config, bins=(h, qb - h), frames=(lo, hi))
        ref = augment.interp_frames(ref_vals, positions)
        a = vqt_values(
            x_a,
            vqt_config,
            bins=(p.a_bin_offset, p.a_bin_offset + geom.out_bins),
            frames=(p.a_time_offset, p.a_time_offset + geom.out_frames),
        )
        b = vqt_values(
            x_b,
            vqt_config,
            bins=(p.b_bin_offset, p.b_bin_offset + geom.out_bins),
            frames=(p.b_time_offset, p.b_time_offset + geom.out_frames),
        )
        triples.append((ref, a, b))
        songs.append(chunk.source_song)
    return triples, songs


def adam_step(param, grad, m, v, lr, step, beta1, beta2, eps, weight_decay=0.0):
    """One decoupled-weight-decay Adam update, in place on (param, m, v)."""
    m *= beta1
    m += (1 - beta1) * grad
    v *= beta2
    v += (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1 ** step)
    v_hat = v / (1 - beta2 ** step)
    if weight_decay:
        param -= lr * weight_decay * param
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class _State:
    params: encoder.Parameters
    m_t: np.ndarray
    v_t: np.ndarray
    log_tau: float
    tau_m: float
    tau_v: float
    lr: float
    step: int
    best_smoothed: float
    last_improve_step: int
    recent: list = field(default_factory=list)
    loss_log: list = field(default_factory=list)


def _save_state(path: Path, state: _State, enc_cfg: encoder.EncoderConfig):
    encoder.save_checkpoint(path, state.params, enc_cfg)
    np.savez(
        str(path) + ".state.npz",
        params=state.params.vector,
        m_t=state.m_t,
        v_t=state.v_t,
        log_tau=np.float64(state.log_tau),
        tau_m=np.float64(state.tau_m),
        tau_v=np.float64(state.tau_v),
        lr=np.float64(state.lr),
        step=np.int64(state.step),
        best_smoothed=np.float64(state.best_smoothed),
        last_improve_step=np.int64(state.last_improve_step),
        recent=np.array(state.recent, dtype=np.float64),
    )


def _load_state(path: Path, enc_cfg: encoder.EncoderConfig) -> _State:
    params = encoder.load_checkpoint(path, enc_cfg)
    d = np.load(str(path) + ".state.npz")
    # the sidecar carries full-precision parameters; the checkpoint itself
    # stays f32 per its format
    params = encoder.Parameters(
        vector=d["params"].astype(enc_cfg.dtype), layout=params.layout
    )
    return _State(
        params=params,
        m_t=d["m_t"],
        v_t=d["v_t"],
        log_tau=float(d["log_tau"]),
        tau_m=float(d["tau_m"]),
        tau_v=float(d["tau_v"]),
        lr=float(d["lr"]),
        step=int(d["step"]),
        best_smoothed=float(d["best_smoothed"]),
        last_improve_step=int(d["last_improve_step"]),
        recent=list(d["recent"]),
    )


def train(
    tracks: list,
    config: TrainConfig = TrainConfig(),
    enc_config: encoder.EncoderConfig = encoder.EncoderConfig(),
    vqt_config: VqtConfig | None = None,
    geom: augment.CropGeometry | None = None,
    transform_spec: datapipe.TransformSpec | None = None,
    out_dir: str | Path | None = None,
    state: _State | None = None,
) -> TrainResult:
    """Optimize encoder + log tau on a multi-track corpus.

    Writes ``loss_log.csv`` and periodic checkpoints to ``out_dir`` when
    given. Halts with a diagnostic on non-finite loss.
    """
    if not tracks:
        raise ValueError("empty corpus")
    if vqt_config is None:
        vqt_config = VqtConfig(dtype="float32")
    if geom is None:
        geom = augment.CropGeometry(
            total_bins=vqt_config.n_bins,
            bins_per_octave=vqt_config.bins_per_octave,
        )
    if transform_spec is None:
        transform_spec = datapipe.TransformSpec()
    if config.merge_scheme != "none":
        tracks = [datapipe.merge_stems(t, config.merge_scheme) for t in tracks]

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "train_config.json", "w") as f:
            json.dump(asdict(config), f, indent=1)

    if state is None:
        rng0 = np.random.default_rng((config.seed, 0xC0FFEE))
        params = encoder.init_parameters(enc_config, rng0)
        state = _State(
            params=params,
            m_t=np.zeros_like(params.vector),
            v_t=np.zeros_like(params.vector),
            log_tau=config.log_tau_init,
            tau_m=0.0,
            tau_v=0.0,
            lr=config.learning_rate,
            step=0,
            best_smoothed=np.inf,
            last_improve_step=0,
        )

    vanilla = config.loss_variant == "ntxent"
    while state.step < config.max_steps:
        step = state.step + 1
        rng = np.random.default_rng((config.seed, step))
        triples, songs = make_triples(
            tracks,
            config.batch_size,
            rng,
            vqt_config,
            geom,
            transform_spec,
            config.chunk_duration,
            no_stretch=config.no_stretch,
            no_pitch=config.no_pitch,
            no_shift=config.no_shift,
        )
        batch = pairs.build_batch(triples, songs, vanilla=vanilla)
        views = np.concatenate([log_magnitude(batch.refs), log_magnitude(batch.arts)])
        views = encoder.standardize(views).astype(enc_config.dtype)
        z, cache = encoder.forward(
            views, state.params, enc_config, want_cache=True, check_finite=False
        )
        n = batch.n
        result = loss_mod.loss_from_embeddings(
            z[:n], z[n:], state.log_tau, variant=config.loss_variant
        )
        if not np.isfinite(result.total):
            raise RuntimeError(
                f"non-finite loss at step {step} (seed {config.seed}); "
                f"tau={np.exp(state.log_tau):.3g} lr={state.lr:.3g}"
            )
        grad_params = encoder.backward(
            result.grad_embeddings.astype(enc_config.dtype),
            cache,
            state.params,
            enc_config,
        )
        adam_step(
            state.params.vector,
            grad_params,
            state.m_t,
            state.v_t,
            state.lr,
            step,
            config.beta1,
            config.beta2,
            config.adam_eps,
            weight_decay=config.weight_decay,
        )
        # log tau shares the optimizer but is never weight-decayed
        g = result.grad_log_tau
        state.tau_m = config.beta1 * state.tau_m + (1 - config.beta1) * g
        state.tau_v = config.beta2 * state.tau_v + (1 - config.beta2) * g * g
        m_hat = state.tau_m / (1 - config.beta1 ** step)
        v_hat = state.tau_v / (1 - config.beta2 ** step)
        state.log_tau -= state.lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)

        state.step = step
        state.recent.append(result.total)
        if len(state.recent) > config.smooth_window:
            state.recent.pop(0)
        smoothed = float(np.mean(state.recent))
        if smoothed < state.best_smoothed:
            state.best_smoothed = smoothed
            state.last_improve_step = step
        elif step - state.last_improve_step >= config.plateau_patience:
            state.lr /= config.lr_divisor
            state.last_improve_step = step  # one cut per plateau event
        state.loss_log.append(
            (step, result.total, float(np.exp(state.log_tau)), state.lr)
        )
        if out is not None and (
            step % config.checkpoint_interval == 0 or step == config.max_steps
        ):
            _save_state(out / f"ckpt_{step:06d}.sid", state, enc_config)

    ckpt = None
    if out is not None:
        ckpt = out / "model.sid"
        _save_state(ckpt, state, enc_config)
        with open(out / "loss_log.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "loss", "tau", "lr"])
            writer.writerows(state.loss_log)
    return TrainResult(
        params=state.params,
        log_tau=state.log_tau,
        loss_log=state.loss_log,
        checkpoint_path=ckpt,
    )


def resume(
    checkpoint_path: str | Path,
    tracks: list,
    config: TrainConfig = TrainConfig(),
    enc_config: encoder.EncoderConfig = encoder.EncoderConfig(),
    **kwargs,
) -> TrainResult:
    """Continue training from a checkpoint written by `train`.

    Rejects checkpoints whose magic, version or config digest do not match.
    """
    state = _load_state(Path(checkpoint_path), enc_config)
    return train(tracks, config, enc_config, state=state, **kwargs)
