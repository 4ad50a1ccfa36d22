"""Run configuration: dataclasses, defaults, and the sectioned text format.

The config file is a small TOML-style subset, parsed by hand so every
diagnostic (unknown key, bad enum, non-positive numeric) carries a line
number:

    # comment
    [section]
    key = value        # int, float, true/false, or "double-quoted string"

Sections are [model], [train], [data].  Unknown sections or keys are
rejected.  Every desk-scale default lives in the DEFAULTS table below, so an
ablation run overrides exactly the keys it varies.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

SHARING_POLICIES = ("none", "repeated", "decoder_shared", "cls_shared")
MERGE_STRATEGIES = ("average", "product", "majority", "hierarchical", "explicit")
ATTENTION_STRATEGIES = ("hierarchical", "explicit")
PYRAMID_VARIANTS = ("fpn", "fpnt", "none")
MERGE_SPACES = ("prob", "logit")
NORM_PLACEMENTS = ("pre", "post")

DEFAULTS_VERSION = 1

DEFAULTS = {
    "model": {
        "d": 32,
        "n_classes": 6,
        "num_blocks": 6,
        "sharing": "repeated",
        "merge": "average",
        "pyramid": "fpnt",
        "learners_per_scale": 1,
        "merge_space": "prob",
        "norm_placement": "pre",
        # Convention-valued knobs the source design leaves open:
        "heads": 4,
        "mlp_ratio": 4,
        "window": 4,
    },
    "train": {
        "lr": 1e-4,
        "weight_decay": 1e-4,
        "max_iters": 2000,
        "batch_size": 8,
        "crop_size": 64,
        "clip_norm": 3.0,
        "poly_power": 0.9,
        "seed": 0,
        "ensemble_loss_weight": 1.0,
        "eval_interval": 500,
        "backbone_lr_mult": 0.1,
    },
    "data": {
        "source": "synth",
        "count": 512,
        "val_count": 128,
        "size": 64,
        "train_path": "",
        "val_path": "",
    },
}


@dataclass
class ModelConfig:
    d: int = 32
    n_classes: int = 6
    num_blocks: int = 6
    sharing: str = "repeated"
    merge: str = "average"
    pyramid: str = "fpnt"
    learners_per_scale: int = 1
    merge_space: str = "prob"
    norm_placement: str = "pre"
    heads: int = 4
    mlp_ratio: int = 4
    window: int = 4


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    max_iters: int = 2000
    batch_size: int = 8
    crop_size: int = 64
    clip_norm: float = 3.0
    poly_power: float = 0.9
    seed: int = 0
    ensemble_loss_weight: float = 1.0
    eval_interval: int = 500
    backbone_lr_mult: float = 0.1


@dataclass
class DataConfig:
    source: str = "synth"
    count: int = 512
    val_count: int = 128
    size: int = 64
    train_path: str = ""
    val_path: str = ""


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"config error{where}: {message}")


_ENUMS = {
    ("model", "sharing"): SHARING_POLICIES,
    ("model", "merge"): MERGE_STRATEGIES,
    ("model", "pyramid"): PYRAMID_VARIANTS,
    ("model", "merge_space"): MERGE_SPACES,
    ("model", "norm_placement"): NORM_PLACEMENTS,
    ("data", "source"): ("synth", "file"),
}

# Keys allowed to be zero or negative; everything numeric otherwise must be > 0.
_NONPOSITIVE_OK = {("train", "seed"), ("train", "max_iters"), ("data", "count"), ("data", "val_count")}


def _parse_value(raw: str, line: int):
    if raw.startswith('"'):
        if not (raw.endswith('"') and len(raw) >= 2):
            raise ConfigError(f"unterminated string {raw!r}", line)
        return raw[1:-1]
    if raw in ("true", "false"):
        return raw == "true"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"cannot parse value {raw!r}", line) from None


def _coerce(section: str, key: str, value, line: int | None):
    default = DEFAULTS[section][key]
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{section}.{key} expects a string, got {value!r}", line)
        allowed = _ENUMS.get((section, key))
        if allowed and value not in allowed:
            raise ConfigError(f"{section}.{key} must be one of {allowed}, got {value!r}", line)
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{key} expects true/false, got {value!r}", line)
        return value
    if isinstance(value, bool) or isinstance(value, str):
        raise ConfigError(f"{section}.{key} expects a number, got {value!r}", line)
    if isinstance(default, int):
        if float(value) != int(value):
            raise ConfigError(f"{section}.{key} expects an integer, got {value!r}", line)
        value = int(value)
    else:
        value = float(value)
    if value <= 0 and (section, key) not in _NONPOSITIVE_OK:
        raise ConfigError(f"{section}.{key} must be positive, got {value!r}", line)
    return value


def _strip_comment(line: str) -> str:
    out = []
    in_str = False
    for ch in line:
        if ch == '"':
            in_str = not in_str
        if ch == "#" and not in_str:
            break
        out.append(ch)
    return "".join(out).strip()


def parse_config_text(text: str) -> RunConfig:
    values = {s: dict(DEFAULTS[s]) for s in DEFAULTS}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw)
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {line!r}", lineno)
            name = line[1:-1].strip()
            if name not in values:
                raise ConfigError(f"unknown section [{name}]", lineno)
            section = name
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno)
        if section is None:
            raise ConfigError("key outside of any section", lineno)
        key, _, raw_value = line.partition("=")
        key = key.strip()
        raw_value = raw_value.strip()
        if key not in values[section]:
            raise ConfigError(f"unknown key {key!r} in section [{section}]", lineno)
        values[section][key] = _coerce(section, key, _parse_value(raw_value, lineno), lineno)
    cfg = RunConfig(
        model=ModelConfig(**values["model"]),
        train=TrainConfig(**values["train"]),
        data=DataConfig(**values["data"]),
    )
    validate_config(cfg)
    return cfg


def parse_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def validate_config(cfg: RunConfig):
    m = cfg.model
    if m.n_classes < 2:
        raise ConfigError(f"model.n_classes must be at least 2, got {m.n_classes}")
    if m.d < 4:
        raise ConfigError(f"model.d must be at least 4, got {m.d}")
    if m.d % m.heads != 0:
        raise ConfigError(f"model.d ({m.d}) must be divisible by model.heads ({m.heads})")
    if m.merge in ATTENTION_STRATEGIES and m.learners_per_scale != 1:
        raise ConfigError(
            f"merge={m.merge!r} requires exactly 4 learners (learners_per_scale=1), "
            f"got learners_per_scale={m.learners_per_scale}"
        )
    if cfg.data.source == "file" and not cfg.data.train_path:
        raise ConfigError("data.source='file' requires data.train_path")
    if cfg.train.crop_size % 32 != 0:
        raise ConfigError(f"train.crop_size must be divisible by 32, got {cfg.train.crop_size}")
    if cfg.data.source == "synth" and cfg.data.size % 32 != 0:
        raise ConfigError(f"data.size must be divisible by 32, got {cfg.data.size}")


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return f'"{v}"'
    return repr(v)


def format_config(cfg: RunConfig) -> str:
    """Serialize to the same grammar parse_config accepts (echo round-trips)."""
    out = [f"# effective configuration (defaults table v{DEFAULTS_VERSION})"]
    for section, obj in (("model", cfg.model), ("train", cfg.train), ("data", cfg.data)):
        out.append(f"[{section}]")
        for f in fields(obj):
            out.append(f"{f.name} = {_format_value(getattr(obj, f.name))}")
        out.append("")
    return "\n".join(out)


def config_to_dict(cfg: RunConfig) -> dict:
    return {"model": asdict(cfg.model), "train": asdict(cfg.train), "data": asdict(cfg.data)}


def config_from_dict(d: dict) -> RunConfig:
    cfg = RunConfig(
        model=ModelConfig(**d["model"]),
        train=TrainConfig(**d["train"]),
        data=DataConfig(**d["data"]),
    )
    validate_config(cfg)
    return cfg
