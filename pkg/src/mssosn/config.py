"""Training configuration and its ``key = value`` text format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import check_scales
from .errors import ContractError, FormatError


@dataclass
class TrainConfig:
    # loss weights: alpha * Omega + L_rel + beta * L_sd + gamma * L_dd
    alpha: float = 1e-3
    beta: float = 0.1
    gamma: float = 0.1
    # power normalisation slope and mean-shift fraction
    sigma: float = -5.0
    beta_shift: float = 0.5
    scales: list[int] = field(default_factory=lambda: [64, 32, 16])
    way: int = 5
    shot: int = 1
    query: int = 15
    episodes: int = 2000
    eval_episodes: int = 300
    eval_query: int = 15
    val_episodes: int = 0
    seed: int = 0
    crossref: bool = False
    same_scale_weight: str = "mean"
    predict: str = "same-scale"
    use_ss: bool = True
    use_sd: bool = True
    use_dd: bool = True
    ssl_detach: bool = False
    lr: float = 1e-3
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    relation_channels: int = 64
    relation_hidden: int = 8
    dd_channels: int = 64
    sd_hidden1: int = 256
    sd_hidden2: int = 64
    split: str = "classes"
    dtype: str = "float64"
    checkpoint_interval: int = 0
    log_interval: int = 100

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ContractError("alpha, beta and gamma must be non-negative")
        self.scales = check_scales(self.scales)
        if self.way < 2:
            raise ContractError(f"way must be >= 2, got {self.way}")
        if self.shot < 1 or self.query < 1 or self.eval_query < 1:
            raise ContractError("shot and query counts must be >= 1")
        if not 0.0 <= self.beta_shift <= 1.0:
            raise ContractError(f"beta_shift {self.beta_shift} outside [0, 1]")
        if self.same_scale_weight not in ("mean", "per_term"):
            raise ContractError(f"same_scale_weight must be mean or per_term, got {self.same_scale_weight!r}")
        if self.predict not in ("same-scale", "grid"):
            raise ContractError(f"predict must be same-scale or grid, got {self.predict!r}")
        if self.split not in ("classes", "images"):
            raise ContractError(f"split must be classes or images, got {self.split!r}")
        if self.dtype not in ("float64", "float32"):
            raise ContractError(f"dtype must be float64 or float32, got {self.dtype!r}")

    @property
    def num_scales(self) -> int:
        return len(self.scales)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, list):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _coerce(name: str, kind, raw: str):
    try:
        if kind in (bool, "bool"):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        if kind in ("list[int]",) or getattr(kind, "__origin__", None) is list:
            return [int(x) for x in raw.replace(" ", "").split(",") if x]
        return raw
    except ValueError:
        raise FormatError(f"config key {name!r}: cannot parse {raw!r}") from None


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse ``key = value`` lines (``#`` comments); unknown keys are errors."""
    kinds = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in kinds:
            raise FormatError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, kinds[key], raw)
    base = base or TrainConfig()
    return base.replace(**values)


def load_config(path) -> TrainConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FormatError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)
