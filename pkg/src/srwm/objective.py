"""Training objective: plain cross-entropy plus the bootstrapped variant.

The bootstrapped loss runs the model twice from a shared post-support
snapshot.  The short branch answers the queries immediately (the student);
the long branch first consumes N*K' extra labelled steps and then answers
the same queries (the teacher).  The total loss is

    b1 * CE(target, student) + b2 * CE(sg(teacher), student)
                             + b3 * CE(target, teacher)

where sg blocks gradients so the student chases the teacher, never the
reverse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from srwm import autodiff as ad
from srwm.autodiff import Tensor
from srwm.episodes import EpisodeBatch, rollout_labels
from srwm.model import (
    BlockState,
    ConfigError,
    ModelConfig,
    ModelState,
    encode_step,
    init_state,
    readout,
    snapshot_state,
    step_blocks,
    unknown_label,
)

LOG_CLAMP = 1e-30


@dataclass(frozen=True)
class LossWeights:
    """Scaling factors of the three loss terms."""

    b1: float = 1.0
    b2: float = 0.0
    b3: float = 0.0

    def validate(self) -> None:
        if self.b1 < 0 or self.b2 < 0 or self.b3 < 0:
            raise ConfigError(f"loss weights must be non-negative, got {self}")
        if self.b1 == 0 and self.b2 == 0 and self.b3 == 0:
            raise ConfigError("at least one loss weight must be positive")

    @property
    def needs_teacher(self) -> bool:
        return self.b2 > 0 or self.b3 > 0


@dataclass
class EpisodeOutputs:
    """Per-query distributions produced by one branched rollout."""

    student: Tensor          # (queries, n_classes) distribution rows
    target: np.ndarray       # (queries, n_classes) one-hot, constant
    teacher: Tensor | None = None

    def validate(self) -> None:
        for name, probs in (("student", self.student), ("teacher", self.teacher)):
            if probs is None:
                continue
            data = probs.data
            if data.shape != self.target.shape:
                raise ConfigError(
                    f"{name} distribution shape {data.shape} does not match "
                    f"target {self.target.shape}"
                )
            if np.any(data < 0) or np.any(np.abs(data.sum(axis=-1) - 1.0) > 1e-9):
                raise ConfigError(f"{name} rows are not distributions")


def cross_entropy(q, p) -> Tensor:
    """-sum_y q(y) log p(y) along the last axis; p is clamped at 1e-30."""
    q = q if isinstance(q, Tensor) else Tensor(q)
    p = p if isinstance(p, Tensor) else Tensor(p)
    if q.data.shape != p.data.shape:
        raise ad.ShapeError(
            f"cross_entropy: shapes {q.data.shape} and {p.data.shape} differ"
        )
    return ad.neg(ad.sum_last(ad.mul(q, ad.log(ad.clamp_min(p, LOG_CLAMP)))))


def _mean_all(t: Tensor) -> Tensor:
    return ad.scale(ad.sum_all(t), 1.0 / t.data.size)


def bootstrapped_loss(
    outputs: EpisodeOutputs, weights: LossWeights
) -> tuple[Tensor, dict[str, float]]:
    """Assemble the weighted three-term loss, averaged over all queries.

    Returns the scalar loss and forward-only diagnostics: the three raw term
    values (zero when a branch is absent) plus both branch accuracies.
    """
    weights.validate()
    outputs.validate()
    if weights.needs_teacher and outputs.teacher is None:
        raise ConfigError(
            "loss weights b2/b3 require a teacher branch; provide a "
            "continuation (k_prime > 0)"
        )
    target = Tensor(outputs.target)
    t1 = _mean_all(cross_entropy(target, outputs.student))
    loss = ad.scale(t1, weights.b1)
    t2 = t3 = None
    if outputs.teacher is not None:
        t2 = _mean_all(
            cross_entropy(ad.stop_gradient(outputs.teacher), outputs.student)
        )
        t3 = _mean_all(cross_entropy(target, outputs.teacher))
        if weights.b2 > 0:
            loss = ad.add(loss, ad.scale(t2, weights.b2))
        if weights.b3 > 0:
            loss = ad.add(loss, ad.scale(t3, weights.b3))

    labels = outputs.target.argmax(axis=-1)
    diag = {
        "T1": float(t1.data),
        "T2": float(t2.data) if t2 is not None else 0.0,
        "T3": float(t3.data) if t3 is not None else 0.0,
        "acc_student": float(
            (outputs.student.data.argmax(axis=-1) == labels).mean()
        ),
        "acc_teacher": (
            float((outputs.teacher.data.argmax(axis=-1) == labels).mean())
            if outputs.teacher is not None
            else math.nan
        ),
    }
    diag["loss"] = float(loss.data)
    return loss, diag


# ---------------------------------------------------------------------------
# branched rollout


def _scan_phase(config, params, state, xs: np.ndarray, labels: np.ndarray):
    """Feed (steps, batch, d_in) inputs with their labels, step by step."""
    dtype = config.dtype
    for t in range(xs.shape[0]):
        enc = encode_step(params, Tensor(xs[t].astype(dtype)), labels[t])
        _, state = step_blocks(config, params, state, enc)
    return state


def _query_probs(config, params, state, query_x: np.ndarray) -> Tensor:
    """Answer all M queries independently from one state.

    The state (batch b) is tiled to m*b rows so each query branches from the
    same snapshot; self-modifications triggered by query steps are discarded.
    """
    m, b, _ = query_x.shape
    unk = np.full(m * b, unknown_label(config.n_classes), dtype=int)
    tiled_blocks = []
    for blk in state.blocks:
        w = ad.tile_leading(blk.w, m)
        shape = (m * b,) + blk.w.data.shape[1:]
        tiled_blocks.append(BlockState(w=ad.reshape(w, shape), t=blk.t))
    tiled = ModelState(blocks=tiled_blocks)
    flat = query_x.reshape(m * b, query_x.shape[-1]).astype(config.dtype)
    enc = encode_step(params, Tensor(flat), unk)
    out, _ = step_blocks(config, params, tiled, enc)
    return ad.softmax(readout(params, out))


def one_hot(labels: np.ndarray, n_classes: int, dtype=np.float64) -> np.ndarray:
    return np.eye(n_classes, dtype=dtype)[labels.reshape(-1)]


def episode_rollout_outputs(
    config: ModelConfig,
    params: dict[str, Tensor],
    batch: EpisodeBatch,
    delayed_labels: bool = False,
) -> EpisodeOutputs:
    """Support scan -> snapshot -> student queries, plus the teacher branch
    (continuation then the same queries) whenever a continuation exists."""
    sup_labels, con_labels = rollout_labels(batch, delayed_labels)
    state = init_state(config, params, batch.batch)
    state = _scan_phase(config, params, state, batch.support_x, sup_labels)
    snap = snapshot_state(state)

    student = _query_probs(config, params, snap, batch.query_x)
    teacher = None
    if batch.cont_x.shape[0] > 0:
        long_state = _scan_phase(config, params, snap, batch.cont_x, con_labels)
        teacher = _query_probs(config, params, long_state, batch.query_x)

    target = one_hot(batch.query_y, config.n_classes, config.dtype)
    return EpisodeOutputs(student=student, target=target, teacher=teacher)


def episode_rollout_loss(
    config: ModelConfig,
    params: dict[str, Tensor],
    batch: EpisodeBatch,
    weights: LossWeights,
    delayed_labels: bool = False,
) -> tuple[Tensor, dict[str, float]]:
    """Branched rollout followed by the weighted loss.  The teacher runs
    whenever a continuation exists, so its diagnostics stay comparable
    across weight settings."""
    weights.validate()
    if weights.needs_teacher and batch.cont_x.shape[0] == 0:
        raise ConfigError(
            "loss weights b2/b3 require continuation steps but k_prime is 0"
        )
    outputs = episode_rollout_outputs(config, params, batch, delayed_labels)
    return bootstrapped_loss(outputs, weights)
