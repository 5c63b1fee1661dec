"""Self-modifying fast-weight layer, block stack, and parameter handling.

The core layer keeps one weight matrix per head.  At every step the matrix
reads its own output/key/query/learning-rate rows from the current input,
then adds a rank-1 correction of itself:

    u_t                  = W_{t-1} x_t            (rows: [out | key | query | lr])
    v_t                  = W_{t-1} phi(q_t)
    vbar_t               = W_{t-1} phi(k_t)
    W_t                  = W_{t-1} + sigmoid(b_t) (v_t - vbar_t) outer phi(k_t)

with phi = softmax.  W_0 is the layer's only trainable parameter set.

All forward passes run strictly one time step at a time so that a branched
rollout (support -> snapshot -> continuation) executes bit-identical numpy
calls to an unbranched replay of the same steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from srwm import autodiff as ad
from srwm.autodiff import Tensor


class ConfigError(ValueError):
    """Raised for invalid architecture or training configuration."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description for the block stack."""

    d_in: int
    d_model: int
    heads: int
    d_ff: int
    blocks: int
    n_classes: int
    merge_projection: bool = True
    apply_phi_to_input: bool = False
    ff_activation: str = "relu"  # or "softplus" for smooth gradient checks
    precision: str = "f64"

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads

    @property
    def rows_per_head(self) -> int:
        # [out (d_head) | key (d_head) | query (d_head) | lr (1)]
        return 3 * self.d_head + 1

    @property
    def dtype(self):
        return ad.DTYPES[self.precision]

    def validate(self) -> None:
        bad = []
        if self.d_in < 1:
            bad.append(f"d_in={self.d_in}")
        if self.d_model < 1:
            bad.append(f"d_model={self.d_model}")
        if self.heads < 1:
            bad.append(f"heads={self.heads}")
        if self.d_model % max(self.heads, 1) != 0:
            bad.append(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.d_ff < 1:
            bad.append(f"d_ff={self.d_ff}")
        if self.blocks < 1:
            bad.append(f"blocks={self.blocks}")
        if self.n_classes < 2:
            bad.append(f"n_classes={self.n_classes}")
        if self.ff_activation not in ("relu", "softplus"):
            bad.append(f"ff_activation={self.ff_activation!r}")
        if self.precision not in ad.DTYPES:
            bad.append(f"precision={self.precision!r}")
        if bad:
            raise ConfigError("invalid model config: " + ", ".join(bad))


# The learning-rate row of each per-head weight matrix starts at this
# constant; sigmoid(-3) ~ 0.047, so early self-modifications are small.
LR_ROW_INIT = -3.0

# Index assigned to the unknown-label token: row n_classes of the label table.
def unknown_label(n_classes: int) -> int:
    return n_classes


def init_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Create all trainable parameters, deterministically from the rng state."""
    config.validate()
    dt = config.dtype
    d, h, dh = config.d_model, config.heads, config.d_head
    rows = config.rows_per_head

    def uniform(shape, bound):
        return Tensor(rng.uniform(-bound, bound, size=shape).astype(dt))

    params: dict[str, Tensor] = {}
    params["input_embed.weight"] = uniform((config.d_in, d), 1.0 / np.sqrt(config.d_in))
    params["input_embed.bias"] = Tensor(np.zeros(d, dtype=dt))

    table = rng.uniform(-1.0, 1.0, size=(config.n_classes + 1, d)) / np.sqrt(d)
    table[config.n_classes] = 0.0  # the unknown-label row starts at zero
    params["label_embed.table"] = Tensor(table.astype(dt))

    for i in range(config.blocks):
        w0 = rng.uniform(-1.0, 1.0, size=(h, rows, dh)) / np.sqrt(dh)
        w0[:, rows - 1, :] = LR_ROW_INIT
        params[f"block{i}.srwm.w0"] = Tensor(w0.astype(dt))
        if config.merge_projection:
            params[f"block{i}.merge.weight"] = uniform((d, d), 1.0 / np.sqrt(d))
        params[f"block{i}.ln1.gain"] = Tensor(np.ones(d, dtype=dt))
        params[f"block{i}.ln1.bias"] = Tensor(np.zeros(d, dtype=dt))
        params[f"block{i}.ln2.gain"] = Tensor(np.ones(d, dtype=dt))
        params[f"block{i}.ln2.bias"] = Tensor(np.zeros(d, dtype=dt))
        params[f"block{i}.ff.w1"] = uniform((d, config.d_ff), 1.0 / np.sqrt(d))
        params[f"block{i}.ff.b1"] = Tensor(np.zeros(config.d_ff, dtype=dt))
        params[f"block{i}.ff.w2"] = uniform((config.d_ff, d), 1.0 / np.sqrt(config.d_ff))
        params[f"block{i}.ff.b2"] = Tensor(np.zeros(d, dtype=dt))

    params["readout.weight"] = uniform((d, config.n_classes), 1.0 / np.sqrt(d))
    params["readout.bias"] = Tensor(np.zeros(config.n_classes, dtype=dt))
    return params


def count_params(params: dict[str, Tensor]) -> int:
    return sum(int(p.data.size) for p in params.values())


def count_params_formula(config: ModelConfig) -> int:
    """Closed-form parameter count; see README for the derivation."""
    d, f, n = config.d_model, config.d_ff, config.n_classes
    dh = config.d_head
    per_block = (
        config.heads * (3 * dh + 1) * dh
        + (d * d if config.merge_projection else 0)
        + 4 * d
        + (d * f + f)
        + (f * d + d)
    )
    return (
        (config.d_in * d + d)
        + (n + 1) * d
        + config.blocks * per_block
        + (d * n + n)
    )


# ---------------------------------------------------------------------------
# layer and block forward


def srwm_step(w: Tensor, x: Tensor, apply_phi_to_input: bool = False):
    """One self-modification step.

    `w` has shape (..., rows, d_head) and `x` shape (..., d_head); leading
    axes (batch, head) are shared.  Returns the output slice of shape
    (..., d_out) and the updated weight matrix.
    """
    rows = w.data.shape[-2]
    dh = w.data.shape[-1]
    d_out = rows - 2 * dh - 1
    if d_out < 1:
        raise ad.ShapeError(
            f"srwm_step: weight with {rows} rows cannot host d_head={dh}"
        )
    if apply_phi_to_input:
        x = ad.softmax(x)
    u = ad.matvec(w, x)
    y = ad.slice_last(u, 0, d_out)
    k = ad.slice_last(u, d_out, d_out + dh)
    q = ad.slice_last(u, d_out + dh, d_out + 2 * dh)
    b = ad.slice_last(u, d_out + 2 * dh, rows)
    pk = ad.softmax(k)
    pq = ad.softmax(q)
    v = ad.matvec(w, pq)
    vbar = ad.matvec(w, pk)
    lr = ad.sigmoid(b)
    delta = ad.mul(ad.sub(v, vbar), ad.repeat_last(lr, rows))
    w_new = ad.add(w, ad.outer(delta, pk))
    return y, w_new


@dataclass
class BlockState:
    """Time-evolved per-head weight matrices of one block."""

    w: Tensor  # shape (batch, heads, rows, d_head)
    t: int = 0


@dataclass
class ModelState:
    blocks: list[BlockState] = field(default_factory=list)

    def memory_bytes(self) -> int:
        return sum(b.w.data.nbytes for b in self.blocks)


def init_state(config: ModelConfig, params: dict[str, Tensor], batch: int) -> ModelState:
    """Broadcast each block's initial weights across a batch of episodes."""
    states = []
    for i in range(config.blocks):
        w0 = params[f"block{i}.srwm.w0"]
        states.append(BlockState(w=ad.tile_leading(w0, batch), t=0))
    return ModelState(blocks=states)


def snapshot_state(state: ModelState) -> ModelState:
    """Independent copy for branching; gradients still flow to the origin."""
    return ModelState(
        blocks=[BlockState(w=ad.copy_tensor(b.w), t=b.t) for b in state.blocks]
    )


def block_forward(
    config: ModelConfig,
    params: dict[str, Tensor],
    index: int,
    state: BlockState,
    x: Tensor,
):
    """One block applied to one step: pre-norm SRWM sublayer, then pre-norm
    feedforward, both with residual connections.  `x` has shape (batch, d)."""
    batch = x.data.shape[0]
    h, dh = config.heads, config.d_head
    p = lambda name: params[f"block{index}.{name}"]

    normed = ad.layer_norm(x, p("ln1.gain"), p("ln1.bias"))
    heads_in = ad.reshape(normed, (batch, h, dh))
    y, w_new = srwm_step(state.w, heads_in, config.apply_phi_to_input)
    merged = ad.reshape(y, (batch, h * (y.data.shape[-1])))
    if config.merge_projection:
        merged = ad.matmul(merged, p("merge.weight"))
    resid = ad.add(x, merged)

    normed2 = ad.layer_norm(resid, p("ln2.gain"), p("ln2.bias"))
    act = ad.softplus if config.ff_activation == "softplus" else ad.relu
    hidden = act(ad.add_rowvec(ad.matmul(normed2, p("ff.w1")), p("ff.b1")))
    ff_out = ad.add_rowvec(ad.matmul(hidden, p("ff.w2")), p("ff.b2"))
    out = ad.add(resid, ff_out)
    return out, BlockState(w=w_new, t=state.t + 1)


def step_blocks(
    config: ModelConfig,
    params: dict[str, Tensor],
    state: ModelState,
    x: Tensor,
):
    """Push one encoded step (batch, d_model) through every block."""
    new_blocks = []
    out = x
    for i, block_state in enumerate(state.blocks):
        out, nb = block_forward(config, params, i, block_state, out)
        new_blocks.append(nb)
    return out, ModelState(blocks=new_blocks)


def readout(params: dict[str, Tensor], x: Tensor) -> Tensor:
    return ad.add_rowvec(
        ad.matmul(x, params["readout.weight"]), params["readout.bias"]
    )


def model_forward(
    config: ModelConfig,
    params: dict[str, Tensor],
    steps: list[Tensor],
    state: ModelState | None = None,
):
    """Process encoded steps left to right.

    Returns the per-step class logits (list of (batch, n_classes) tensors)
    and the final state, which callers may snapshot and branch.
    """
    if not steps:
        raise ValueError("model_forward: empty step sequence")
    if state is None:
        state = init_state(config, params, steps[0].data.shape[0])
    logits = []
    for x in steps:
        out, state = step_blocks(config, params, state, x)
        logits.append(readout(params, out))
    return logits, state


# ---------------------------------------------------------------------------
# step encoding


def encode_step(
    params: dict[str, Tensor], x: Tensor, labels: np.ndarray
) -> Tensor:
    """Encoded step = input embedding of x plus label embedding row.

    `x` has shape (batch, d_in), `labels` is an integer array (batch,); the
    unknown-label token is row n_classes of the table.
    """
    emb = ad.add_rowvec(
        ad.matmul(x, params["input_embed.weight"]), params["input_embed.bias"]
    )
    lab = ad.gather_rows(params["label_embed.table"], labels)
    return ad.add(emb, lab)
