"""Optimization loop: Adam with warmup, checkpointing, seeded batching.

Training is stateless with respect to randomness: the episode batch for step
s is derived from (seed, stream, s, episode index), so resuming from a
checkpoint replays the exact byte-for-byte trajectory of an uninterrupted
run.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from srwm import autodiff as ad
from srwm.autodiff import NonFiniteError, Tape, Tensor
from srwm.config import TrainConfig, parse_config_text
from srwm.episodes import (
    STREAM_EPISODE,
    STREAM_INIT,
    EpisodeBatch,
    TaskSource,
    sample_episode,
    split_rng,
    stack_episodes,
)
from srwm.model import ConfigError, ModelConfig, init_params, init_state
from srwm.objective import (
    LossWeights,
    _mean_all,
    _query_probs,
    _scan_phase,
    cross_entropy,
    episode_rollout_loss,
    episode_rollout_outputs,
    one_hot,
)
from srwm.tensorio import TensorFormatError, tensor_from_bytes, tensor_to_bytes

METRICS_HEADER = "step,lr,loss,T1,T2,T3,acc_student,acc_teacher"

CHECKPOINT_MAGIC = b"SRWM"
CHECKPOINT_VERSION = 1


class TrainAbort(RuntimeError):
    """Raised when training hits non-finite numbers; names the last good
    checkpoint so the run can be inspected or restarted."""

    def __init__(self, message: str, last_checkpoint: str | None):
        suffix = (
            f" (last good checkpoint: {last_checkpoint})"
            if last_checkpoint
            else " (no checkpoint was written)"
        )
        super().__init__(message + suffix)
        self.last_checkpoint = last_checkpoint


def lr_schedule(step: int, peak: float, warmup: int) -> float:
    """Linear ramp to `peak` over `warmup` steps, then inverse-sqrt decay."""
    if step < 1:
        raise ValueError(f"schedule is defined for step >= 1, got {step}")
    if step <= warmup:
        return peak * step / warmup
    return peak * math.sqrt(warmup / step)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def init_adam(params: dict[str, Tensor]) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(p.data) for k, p in params.items()},
        v={k: np.zeros_like(p.data) for k, p in params.items()},
        step=0,
    )


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, Tensor], AdamState]:
    """Bias-corrected Adam update; returns fresh parameter tensors."""
    t = state.step + 1
    new_params: dict[str, Tensor] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name in sorted(params):
        p, g = params[name], grads[name]
        if g.shape != p.data.shape:
            raise ConfigError(
                f"gradient shape {g.shape} does not match parameter "
                f"'{name}' {p.data.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter '{name}'")
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        new_params[name] = Tensor(p.data - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(m=new_m, v=new_v, step=t)


def clip_gradients(
    grads: dict[str, np.ndarray], max_norm: float
) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients so their global l2 norm is at most max_norm."""
    total = 0.0
    for name in sorted(grads):
        g = grads[name]
        total += float((g * g).sum())
    norm = math.sqrt(total)
    if max_norm <= 0 or norm <= max_norm:
        return grads, norm
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}, norm


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_save(
    path: str | Path,
    params: dict[str, Tensor],
    opt: AdamState,
    config: TrainConfig,
    step: int,
) -> None:
    """Magic, version, config as key=value text, then named tensor records."""
    config_text = config.to_text() + f"step = {step}\n"
    tensors: list[tuple[str, np.ndarray]] = []
    for name in sorted(params):
        tensors.append((f"param.{name}", params[name].data))
    for name in sorted(opt.m):
        tensors.append((f"adam.m.{name}", opt.m[name]))
        tensors.append((f"adam.v.{name}", opt.v[name]))
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    encoded = config_text.encode("utf-8")
    blob += struct.pack("<I", len(encoded))
    blob += encoded
    blob += struct.pack("<I", len(tensors))
    for name, arr in tensors:
        name_bytes = name.encode("utf-8")
        blob += struct.pack("<H", len(name_bytes))
        blob += name_bytes
        blob += tensor_to_bytes(arr)
    Path(path).write_bytes(bytes(blob))


def checkpoint_load(
    path: str | Path,
) -> tuple[dict[str, Tensor], AdamState, TrainConfig, int]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise TensorFormatError(f"{path}: bad checkpoint magic")
    offset = 4
    (version,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    if version != CHECKPOINT_VERSION:
        raise TensorFormatError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    if offset + cfg_len > len(blob):
        raise TensorFormatError(f"{path}: truncated config block")
    config_text = blob[offset : offset + cfg_len].decode("utf-8")
    offset += cfg_len
    step = 0
    config_lines = []
    for line in config_text.splitlines():
        if line.startswith("step ="):
            step = int(line.split("=", 1)[1])
        else:
            config_lines.append(line)
    config = parse_config_text("\n".join(config_lines))
    (count,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    params: dict[str, Tensor] = {}
    opt = AdamState()
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset : offset + name_len].decode("utf-8")
            offset += name_len
            arr, offset = tensor_from_bytes(blob, offset)
            if name.startswith("param."):
                params[name[len("param.") :]] = Tensor(arr)
            elif name.startswith("adam.m."):
                opt.m[name[len("adam.m.") :]] = arr
            elif name.startswith("adam.v."):
                opt.v[name[len("adam.v.") :]] = arr
            else:
                raise TensorFormatError(f"{path}: unknown tensor record '{name}'")
    except (struct.error, TensorFormatError) as err:
        raise TensorFormatError(f"{path}: truncated or corrupt: {err}") from None
    opt.step = step
    return params, opt, config, step


def check_config_compatible(expected: TrainConfig, loaded: TrainConfig) -> None:
    """Architecture and protocol fields must match to resume or evaluate."""
    keys = (
        "n_way", "d_in", "d_model", "heads", "d_ff", "blocks", "precision",
        "merge_projection", "apply_phi_to_input", "ff_activation",
    )
    for key in keys:
        a, b = getattr(expected, key), getattr(loaded, key)
        if a != b:
            raise ConfigError(
                f"checkpoint mismatch on '{key}': expected {a}, found {b}"
            )


# ---------------------------------------------------------------------------
# training loops


def sample_training_batch(
    config: TrainConfig, source: TaskSource, step: int
) -> EpisodeBatch:
    """Batch for one optimizer step; episode i gets its own derived stream."""
    episodes = []
    for i in range(config.batch_size):
        rng = split_rng(config.seed, STREAM_EPISODE, step, i)
        episodes.append(
            sample_episode(
                source,
                config.n_way,
                config.k_shot,
                config.k_prime,
                config.m_queries,
                rng,
            )
        )
    return stack_episodes(episodes)


def format_metrics_row(step: int, lr: float, diag: dict[str, float]) -> str:
    values = [
        str(step),
        repr(float(lr)),
        repr(float(diag["loss"])),
        repr(float(diag["T1"])),
        repr(float(diag["T2"])),
        repr(float(diag["T3"])),
        repr(float(diag["acc_student"])),
        repr(float(diag["acc_teacher"])),
    ]
    return ",".join(values)


@dataclass
class TrainResult:
    checkpoint: Path
    metrics: Path
    steps: int
    final_diag: dict[str, float]


def train(
    config: TrainConfig,
    source: TaskSource,
    out_dir: str | Path,
    resume_from: str | Path | None = None,
    quiet: bool = True,
) -> TrainResult:
    """Run the episodic training loop and write metrics plus checkpoints."""
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mcfg = config.model_config()
    weights = config.loss_weights()

    if resume_from is not None:
        params, opt, loaded_cfg, start_step = checkpoint_load(resume_from)
        check_config_compatible(config, loaded_cfg)
    else:
        params = init_params(mcfg, split_rng(config.seed, STREAM_INIT))
        opt = init_adam(params)
        start_step = 0

    metrics_path = out_dir / "metrics.csv"
    metrics_file = metrics_path.open("w", encoding="utf-8")
    metrics_file.write(METRICS_HEADER + "\n")

    last_checkpoint: str | None = str(resume_from) if resume_from else None
    final_diag: dict[str, float] = {}
    try:
        for step in range(start_step + 1, config.total_steps + 1):
            batch = sample_training_batch(config, source, step)
            try:
                with Tape() as tape:
                    for p in params.values():
                        tape.watch(p)
                    loss, diag = episode_rollout_loss(
                        mcfg, params, batch, weights, config.delayed_labels
                    )
                    grad_map = tape.backward(loss)
                grads = {
                    name: grad_map[p.node_id].data for name, p in params.items()
                }
                grads, _ = clip_gradients(grads, config.clip_norm)
                lr = lr_schedule(step, config.peak_lr, config.warmup_steps)
                params, opt = adam_step(
                    params, grads, opt, lr,
                    config.adam_beta1, config.adam_beta2, config.adam_eps,
                )
            except NonFiniteError as err:
                raise TrainAbort(
                    f"aborted at step {step}: {err}", last_checkpoint
                ) from err
            metrics_file.write(format_metrics_row(step, lr, diag) + "\n")
            final_diag = diag
            if not quiet and (step % 50 == 0 or step == 1):
                print(
                    f"step {step} lr {lr:.3e} loss {diag['loss']:.4f} "
                    f"acc {diag['acc_student']:.3f}"
                )
            if step % config.eval_interval == 0 or step == config.total_steps:
                ckpt = out_dir / f"checkpoint_{step:07d}.srwm"
                checkpoint_save(ckpt, params, opt, config, step)
                last_checkpoint = str(ckpt)
    finally:
        metrics_file.close()

    final = out_dir / "checkpoint_final.srwm"
    checkpoint_save(final, params, opt, config, config.total_steps)
    return TrainResult(
        checkpoint=final,
        metrics=metrics_path,
        steps=config.total_steps,
        final_diag=final_diag,
    )


def train_plain_reference(
    config: TrainConfig, source: TaskSource, out_dir: str | Path
) -> TrainResult:
    """The standard episodic few-shot loop, written out directly.

    No branch bookkeeping, no loss weighting: support scan, query, mean
    cross-entropy, clip, Adam.  Kept as an executable cross-check that the
    configurable trainer with k_prime=0 and weights (1, 0, 0) is exactly
    this loop.
    """
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mcfg = config.model_config()

    params = init_params(mcfg, split_rng(config.seed, STREAM_INIT))
    opt = init_adam(params)
    metrics_path = out_dir / "metrics.csv"
    final_diag: dict[str, float] = {}
    with metrics_path.open("w", encoding="utf-8") as metrics_file:
        metrics_file.write(METRICS_HEADER + "\n")
        for step in range(1, config.total_steps + 1):
            batch = sample_training_batch(config, source, step)
            with Tape() as tape:
                for p in params.values():
                    tape.watch(p)
                state = init_state(mcfg, params, batch.batch)
                state = _scan_phase(
                    mcfg, params, state, batch.support_x, batch.support_y
                )
                probs = _query_probs(mcfg, params, state, batch.query_x)
                target = one_hot(batch.query_y, mcfg.n_classes, mcfg.dtype)
                loss = _mean_all(cross_entropy(Tensor(target), probs))
                grad_map = tape.backward(loss)
            grads = {name: grad_map[p.node_id].data for name, p in params.items()}
            grads, _ = clip_gradients(grads, config.clip_norm)
            lr = lr_schedule(step, config.peak_lr, config.warmup_steps)
            params, opt = adam_step(
                params, grads, opt, lr,
                config.adam_beta1, config.adam_beta2, config.adam_eps,
            )
            labels = target.argmax(axis=-1)
            diag = {
                "loss": float(loss.data),
                "T1": float(loss.data),
                "T2": 0.0,
                "T3": 0.0,
                "acc_student": float(
                    (probs.data.argmax(axis=-1) == labels).mean()
                ),
                "acc_teacher": math.nan,
            }
            metrics_file.write(format_metrics_row(step, lr, diag) + "\n")
            final_diag = diag

    final = out_dir / "checkpoint_final.srwm"
    checkpoint_save(final, params, opt, config, config.total_steps)
    return TrainResult(
        checkpoint=final,
        metrics=metrics_path,
        steps=config.total_steps,
        final_diag=final_diag,
    )


# ---------------------------------------------------------------------------
# gradient checking for the full objective


def gradcheck_full_loss(
    config: TrainConfig, eps: float = 1e-5
) -> float:
    """Finite-difference check of the complete weighted loss.

    The analytic side differentiates the loss as defined (distillation
    target behind stop-gradient).  The numeric side therefore evaluates a
    two-graph variant in which the distillation target is frozen at the
    base parameters while the plain terms follow the live model; central
    differences of that function are the correct derivative of the
    stop-gradient objective.
    """
    config.validate()
    mcfg = config.model_config()
    weights = config.loss_weights()
    if not weights.needs_teacher or config.k_prime == 0:
        raise ConfigError("gradcheck covers the full loss; set k_prime and b2/b3")
    from srwm.episodes import synthetic_split_sources

    train_src, _ = synthetic_split_sources(
        config.train_classes, config.test_classes, config.d_in,
        config.spread, config.data_seed,
    )
    params = init_params(mcfg, split_rng(config.seed, STREAM_INIT))
    batch = sample_training_batch(config, train_src, step=1)

    # analytic gradients of the stop-gradient objective
    with Tape() as tape:
        for p in params.values():
            tape.watch(p)
        loss, _ = episode_rollout_loss(mcfg, params, batch, weights)
        grad_map = tape.backward(loss)
    analytic = {name: grad_map[p.node_id].data for name, p in params.items()}

    # frozen distillation target for the numeric side
    base_outputs = episode_rollout_outputs(mcfg, params, batch)
    frozen_teacher = Tensor(base_outputs.teacher.data.copy())
    target = Tensor(one_hot(batch.query_y, mcfg.n_classes, mcfg.dtype))

    def frozen_loss(p: dict[str, Tensor]) -> Tensor:
        outs = episode_rollout_outputs(mcfg, p, batch)
        total = ad.scale(_mean_all(cross_entropy(target, outs.student)), weights.b1)
        total = ad.add(
            total,
            ad.scale(
                _mean_all(cross_entropy(frozen_teacher, outs.student)), weights.b2
            ),
        )
        total = ad.add(
            total,
            ad.scale(_mean_all(cross_entropy(target, outs.teacher)), weights.b3),
        )
        return total

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        aflat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(frozen_loss(params).data)
            flat[i] = orig - eps
            f_minus = float(frozen_loss(params).data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(aflat[i] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    return worst
