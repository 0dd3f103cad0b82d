"""Run configuration: a dataclass tree, key=value config files, presets, hashing.

Config files are plain sectioned key=value text (diffable in experiment logs):

    preset = "desk"
    global_seed = 0

    [data]
    root = "data/toy"
    part_scale = [0.05, 0.14]

    [pan]
    lambda = 1.0

Unknown keys are rejected. The resolved config serializes canonically and its
sha256 hash is embedded in every emitted artifact for provenance.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import re
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class AugConfig:
    flip: bool = True
    jitter: bool = True
    jitter_prob: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    blur: bool = True
    blur_prob: float = 0.5
    blur_sigma: list = field(default_factory=lambda: [0.1, 2.0])


@dataclass
class DataConfig:
    root: str = ""
    image_side: int = 32
    n_parts: int = 6
    part_scale: list = field(default_factory=lambda: [0.05, 0.14])
    global_scale: list = field(default_factory=lambda: [0.14, 1.0])
    split_base: int = 64
    split_val: int = 16
    split_novel: int = 20
    split_seed: int = 0
    on_undecodable: str = "abort"  # abort | skip
    aug: AugConfig = field(default_factory=AugConfig)


@dataclass
class EncoderConfig:
    arch: str = "conv4"
    channels: int = 64
    embed_dim: int = 128
    map_side: int = 4


@dataclass
class PdnConfig:
    temperature: float = 0.2
    momentum: float = 0.999
    queue_capacity: int = 1024
    lr: float = 0.03
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 100
    batch_size: int = 64
    selection_mode: str = "select_best"  # select_best | use_all_parts
    positive_source: str = "momentum"    # momentum | online
    key_batch_stats: bool = True         # momentum twin normalizes keys with batch stats
    checkpoint_every: int = 0            # epochs between checkpoints; 0 = final only


@dataclass
class PanConfig:
    n_a: int = 1024
    epsilon_1shot: float = 0.2
    epsilon_5shot: float = 0.7
    lam: float = 1.0            # config key "lambda"
    cam_mode: str = "c2am"      # c2am | plain | off
    kl_direction: str = "forward"  # forward | reverse
    init_steps: int = 100
    refine_steps: int = 100
    lr: float = 0.001
    weight_decay: float = 1e-3


@dataclass
class EvalConfig:
    way: int = 5
    shot: int = 1
    query_per_class: int = 15
    episodes: int = 600
    pan: bool = False


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pdn: PdnConfig = field(default_factory=PdnConfig)
    pan: PanConfig = field(default_factory=PanConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    global_seed: int = 0
    preset: str = "desk"


# file key -> dataclass attribute, where they differ ("lambda" is reserved)
_KEY_TO_ATTR = {"lambda": "lam"}
_ATTR_TO_KEY = {v: k for k, v in _KEY_TO_ATTR.items()}

PRESETS = {
    "desk": {},
    "paper-mini": {"pdn.lr": 0.015, "pdn.queue_capacity": 1024},
    "paper-tiered": {"pdn.lr": 0.03, "pdn.queue_capacity": 10240},
}

_INT_RE = re.compile(r"^[+-]?\d+$")


def default_config() -> RunConfig:
    return RunConfig()


def _parse_value(text: str):
    text = text.strip()
    if text.startswith("[") and text.endswith("]"):
        inner = text[1:-1].strip()
        if not inner:
            return []
        return [_parse_value(tok) for tok in inner.split(",")]
    if text == "true":
        return True
    if text == "false":
        return False
    if len(text) >= 2 and text[0] == '"' and text[-1] == '"':
        return text[1:-1]
    if _INT_RE.match(text):
        return int(text)
    try:
        return float(text)
    except ValueError:
        return text  # bare string


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return '"' + value + '"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_format_value(v) for v in value) + "]"
    raise ConfigError(f"unserializable config value: {value!r}")


def parse_config_text(text: str) -> dict:
    """Parse sectioned key=value text into a flat {dotted_key: value} dict."""
    out = {}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if not section:
                raise ConfigError(f"line {lineno}: empty section header")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        dotted = f"{section}.{key}" if section else key
        if dotted in out:
            raise ConfigError(f"line {lineno}: duplicate key {dotted}")
        out[dotted] = _parse_value(val)
    return out


def _resolve_node(cfg: RunConfig, path: list[str]):
    node = cfg
    for part in path:
        if not dataclasses.is_dataclass(node) or part not in {f.name for f in fields(node)}:
            raise ConfigError(f"unknown config section: {'.'.join(path)}")
        node = getattr(node, part)
    return node


def set_key(cfg: RunConfig, dotted: str, value) -> None:
    """Assign one dotted key on the config tree, with type checking."""
    parts = dotted.split(".")
    attr = _KEY_TO_ATTR.get(parts[-1], parts[-1])
    node = _resolve_node(cfg, parts[:-1])
    if not dataclasses.is_dataclass(node):
        raise ConfigError(f"unknown config key: {dotted}")
    fmap = {f.name: f for f in fields(node)}
    if attr not in fmap:
        raise ConfigError(f"unknown config key: {dotted}")
    current = getattr(node, attr)
    if dataclasses.is_dataclass(current):
        raise ConfigError(f"{dotted} is a section, not a key")
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{dotted}: expected bool, got {value!r}")
    elif isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{dotted}: expected int, got {value!r}")
    elif isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{dotted}: expected float, got {value!r}")
        value = float(value)
    elif isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"{dotted}: expected string, got {value!r}")
    elif isinstance(current, list):
        if not isinstance(value, list):
            raise ConfigError(f"{dotted}: expected list, got {value!r}")
        value = [float(v) if isinstance(v, (int, float)) else v for v in value]
    setattr(node, attr, value)


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    for key, value in overrides.items():
        set_key(cfg, key, value)
    return cfg


def apply_preset(cfg: RunConfig, name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg.preset = name
    return apply_overrides(cfg, PRESETS[name])


def load_config(path=None, preset=None, seed=None, overrides=None) -> RunConfig:
    """Resolve a config: defaults -> preset -> file -> overrides -> seed."""
    cfg = default_config()
    if preset is not None:
        apply_preset(cfg, preset)
    if path is not None:
        text = Path(path).read_text()
        for key, value in parse_config_text(text).items():
            if key == "preset":
                apply_preset(cfg, value)
            elif key == "global_seed":
                set_key(cfg, key, value)
            else:
                set_key(cfg, key, value)
    if overrides:
        apply_overrides(cfg, overrides)
    if seed is not None:
        cfg.global_seed = int(seed)
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    d, p = cfg.data, cfg.pdn
    if d.n_parts < 1:
        raise ConfigError("data.n_parts must be >= 1")
    for name, rng in (("part_scale", d.part_scale), ("global_scale", d.global_scale)):
        if len(rng) != 2 or not (0.0 < rng[0] <= rng[1] <= 1.0):
            raise ConfigError(f"data.{name} must be [lo, hi] with 0 < lo <= hi <= 1")
    if p.temperature <= 0:
        raise ConfigError("pdn.temperature must be > 0")
    if not (0.0 <= p.momentum <= 1.0):
        raise ConfigError("pdn.momentum must be in [0, 1]")
    if p.selection_mode not in ("select_best", "use_all_parts"):
        raise ConfigError(f"bad pdn.selection_mode {p.selection_mode!r}")
    if p.positive_source not in ("momentum", "online"):
        raise ConfigError(f"bad pdn.positive_source {p.positive_source!r}")
    if cfg.pan.cam_mode not in ("c2am", "plain", "off"):
        raise ConfigError(f"bad pan.cam_mode {cfg.pan.cam_mode!r}")
    if cfg.pan.kl_direction not in ("forward", "reverse"):
        raise ConfigError(f"bad pan.kl_direction {cfg.pan.kl_direction!r}")
    for eps in (cfg.pan.epsilon_1shot, cfg.pan.epsilon_5shot):
        if not (0.0 < eps < 1.0):
            raise ConfigError("pan epsilon values must lie in (0, 1)")


def _flatten(node, prefix: str, out: dict) -> None:
    for f in fields(node):
        value = getattr(node, f.name)
        key = _ATTR_TO_KEY.get(f.name, f.name)
        dotted = f"{prefix}.{key}" if prefix else key
        if dataclasses.is_dataclass(value):
            _flatten(value, dotted, out)
        else:
            out[dotted] = value


def config_to_flat(cfg: RunConfig) -> dict:
    out = {}
    _flatten(cfg, "", out)
    return out


def serialize_config(cfg: RunConfig) -> str:
    """Canonical text form: top-level keys first, then sorted sections."""
    flat = config_to_flat(cfg)
    top = {k: v for k, v in flat.items() if "." not in k}
    sections = {}
    for k, v in flat.items():
        if "." in k:
            sec, _, leaf = k.rpartition(".")
            sections.setdefault(sec, {})[leaf] = v
    lines = []
    for k in sorted(top):
        lines.append(f"{k} = {_format_value(top[k])}")
    for sec in sorted(sections):
        lines.append("")
        lines.append(f"[{sec}]")
        for leaf in sorted(sections[sec]):
            lines.append(f"{leaf} = {_format_value(sections[sec][leaf])}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode()).hexdigest()


def clone_config(cfg: RunConfig) -> RunConfig:
    return copy.deepcopy(cfg)
