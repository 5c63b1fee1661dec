"""Run configuration: a flat key=value file format plus named presets.

Config files are UTF-8 text, one `key = value` per line; blank lines and
lines starting with '#' are ignored.  Unknown keys are errors so typos fail
fast instead of silently training the wrong thing.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from srwm.model import ConfigError, ModelConfig
from srwm.objective import LossWeights


@dataclass
class TrainConfig:
    # episode protocol
    n_way: int = 5
    k_shot: int = 5
    k_prime: int = 0
    m_queries: int = 1
    # loss weights (the three cross-entropy terms)
    loss_b1: float = 1.0
    loss_b2: float = 0.0
    loss_b3: float = 0.0
    # optimization
    batch_size: int = 16
    total_steps: int = 1000
    peak_lr: float = 3e-4
    warmup_steps: int = 100
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0  # global-norm clip; 0 disables
    seed: int = 0
    eval_interval: int = 500
    # architecture
    blocks: int = 2
    d_model: int = 64
    heads: int = 4
    d_ff: int = 256
    precision: str = "f64"
    merge_projection: bool = True
    apply_phi_to_input: bool = False
    ff_activation: str = "relu"
    delayed_labels: bool = False
    max_unroll: int = 512
    # task source
    source: str = "synthetic"  # synthetic | directory
    d_in: int = 32
    train_classes: int = 200
    test_classes: int = 50
    spread: float = 0.5
    data_seed: int = 7
    data_dir: str = ""
    manifest: str = ""
    pool: int = 1
    # report label for sweeps
    label: str = "default"

    def validate(self) -> None:
        bad = []
        if self.n_way < 2:
            bad.append(f"n_way={self.n_way}")
        if self.k_shot < 1:
            bad.append(f"k_shot={self.k_shot}")
        if self.k_prime < 0:
            bad.append(f"k_prime={self.k_prime}")
        if self.m_queries < 1:
            bad.append(f"m_queries={self.m_queries}")
        if self.batch_size < 1:
            bad.append(f"batch_size={self.batch_size}")
        if self.total_steps < 1:
            bad.append(f"total_steps={self.total_steps}")
        if self.warmup_steps < 1 or self.warmup_steps > self.total_steps:
            bad.append(
                f"warmup_steps={self.warmup_steps} (must be in [1, total_steps])"
            )
        if self.source not in ("synthetic", "directory"):
            bad.append(f"source={self.source!r}")
        if self.source == "directory" and not self.manifest:
            bad.append("manifest required when source=directory")
        needed = self.n_way * (self.k_shot + self.k_prime) + self.m_queries
        if needed > self.max_unroll:
            bad.append(
                f"episode length {needed} exceeds max_unroll={self.max_unroll}"
            )
        if bad:
            raise ConfigError("invalid training config: " + ", ".join(bad))
        self.loss_weights().validate()
        if self.loss_weights().needs_teacher and self.k_prime == 0:
            raise ConfigError(
                "loss_b2/loss_b3 require continuation shots (k_prime > 0)"
            )
        self.model_config().validate()

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            d_in=self.d_in,
            d_model=self.d_model,
            heads=self.heads,
            d_ff=self.d_ff,
            blocks=self.blocks,
            n_classes=self.n_way,
            merge_projection=self.merge_projection,
            apply_phi_to_input=self.apply_phi_to_input,
            ff_activation=self.ff_activation,
            precision=self.precision,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.loss_b1, self.loss_b2, self.loss_b3)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _coerce(name: str, raw: str):
    field = _FIELDS[name]
    if field.type in ("int", int):
        return int(raw)
    if field.type in ("float", float):
        return float(raw)
    if field.type in ("bool", bool):
        low = raw.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"key '{name}': expected a boolean, got {raw!r}")
    return raw.strip()


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    cfg = dataclasses.replace(base) if base else TrainConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key '{key}'")
        try:
            setattr(cfg, key, _coerce(key, raw.strip()))
        except (ValueError, TypeError):
            raise ConfigError(
                f"line {lineno}: cannot parse value {raw.strip()!r} for '{key}'"
            ) from None
    return cfg


def load_config(path: str | Path, base: TrainConfig | None = None) -> TrainConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), base)


def apply_overrides(cfg: TrainConfig, overrides: list[str]) -> TrainConfig:
    """Apply 'key=value' strings on top of a parsed config."""
    text = "\n".join(overrides)
    return parse_config_text(text, cfg)


# Presets span desk-scale verification needs: `micro` is the gradient-check
# configuration, `tiny` trains in seconds, `desk` is the synthetic-benchmark
# workhorse, `full` mirrors the published architecture sizes.
PRESETS: dict[str, dict] = {
    "micro": dict(
        n_way=3, k_shot=2, k_prime=1, m_queries=1,
        loss_b1=1.0, loss_b2=5.0, loss_b3=1.0,
        batch_size=1, total_steps=10, warmup_steps=5,
        blocks=1, d_model=16, heads=2, d_ff=32,
        ff_activation="softplus",
        d_in=8, train_classes=12, test_classes=6, spread=0.4,
        label="micro",
    ),
    "tiny": dict(
        n_way=5, k_shot=2, k_prime=2, m_queries=1,
        loss_b1=1.0, loss_b2=0.0, loss_b3=1.0,
        batch_size=8, total_steps=600, warmup_steps=60, peak_lr=1e-2,
        blocks=1, d_model=32, heads=2, d_ff=64,
        d_in=16, train_classes=60, test_classes=20, spread=0.3,
        eval_interval=300,
        label="tiny",
    ),
    "desk": dict(
        n_way=5, k_shot=5, k_prime=0, m_queries=1,
        loss_b1=1.0, loss_b2=0.0, loss_b3=0.0,
        batch_size=16, total_steps=10_000, warmup_steps=1000, peak_lr=3e-3,
        blocks=2, d_model=64, heads=4, d_ff=256,
        d_in=32, train_classes=200, test_classes=50, spread=0.5,
        eval_interval=2000,
        label="desk",
    ),
    "full": dict(
        n_way=5, k_shot=5, k_prime=10, m_queries=1,
        loss_b1=1.0, loss_b2=5.0, loss_b3=1.0,
        batch_size=16, total_steps=200_000, warmup_steps=4000, peak_lr=1e-4,
        blocks=3, d_model=256, heads=16, d_ff=2048,
        eval_interval=5000,
        label="full",
    ),
}


def make_preset(name: str) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(
            f"unknown preset '{name}'; available: {', '.join(sorted(PRESETS))}"
        )
    return dataclasses.replace(TrainConfig(), **PRESETS[name])
