"""Experiment configuration: dataclasses, flat text format, presets.

The on-disk format is one `section.key = value` line per field, `#` for
comments.  Lists are comma-separated; the domain sequence is written as
`kind:severity` pairs.  Serialization round-trips exactly.

Presets bundle the toggles for the standard comparison rows:

    source_only           frozen device, nothing uplinked
    pseudo_label          full uplink, distillation only (no alignment, no prompt)
    pseudo_label_vpa      adds the adversarial teacher and the learned prompt
    pseudo_label_vpa_ugs  adds uncertainty-gated sample selection
    full                  adds the uncertainty-weighted EMA on the prompt
    confidence / random / all_uplink
                          full method with the alternative selection rules
    frozen_teacher        full method but the teacher never updates
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace

from .stream import DEFAULT_DOMAINS, DomainSpec, StreamConfig, TaskConfig


class ConfigError(ValueError):
    """Bad configuration file or field value."""


@dataclass(frozen=True)
class ModelConfig:
    student_widths: tuple[int, ...] = (16, 32, 32, 4)
    teacher_widths: tuple[int, ...] = (16, 128, 128, 64, 4)
    disc_widths: tuple[int, ...] = (64, 32, 2)
    dropout_rate: float = 0.1


@dataclass(frozen=True)
class UncertaintyConfig:
    n_passes: int = 10
    threshold: float = 0.008
    aggregate: str = "predicted_class"
    strategy: str = "ugs"
    frac: float = 0.5


@dataclass(frozen=True)
class PromptConfig:
    layout: str = "full_vector"
    prefix_k: int = 4
    alpha: float = 0.999
    lr: float = 0.01
    u_ema: bool = True


@dataclass(frozen=True)
class CloudSideConfig:
    lambda_align: float = 0.1
    lambda_grl: float = 1.0
    pl_threshold: float = 0.8
    sync_interval: int = 10
    lr_teacher: float = 0.01
    lr_student: float = 0.01
    source_size: int = 1024
    pretrain_epochs: int = 30
    pretrain_batch: int = 32
    pretrain_lr: float = 0.01
    teacher_aug_noise: float = 0.5


@dataclass(frozen=True)
class ExperimentConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    uncertainty: UncertaintyConfig = field(default_factory=UncertaintyConfig)
    prompt: PromptConfig = field(default_factory=PromptConfig)
    cloud: CloudSideConfig = field(default_factory=CloudSideConfig)
    transport: str = "inproc"
    tcp_host: str = "127.0.0.1"
    tcp_port: int = 0
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    preset: str = "full"


_SECTIONS = ("task", "stream", "model", "uncertainty", "prompt", "cloud")


def _encode_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float, str)):
        return str(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], DomainSpec):
            return ",".join(f"{d.kind}:{d.severity}" for d in value)
        return ",".join(str(v) for v in value)
    raise ConfigError(f"cannot encode config value {value!r}")


def _decode_value(text: str, declared_type, key: str):
    text = text.strip()
    try:
        if declared_type is bool:
            if text not in ("true", "false"):
                raise ValueError(f"expected true/false, got {text!r}")
            return text == "true"
        if declared_type is int:
            return int(text)
        if declared_type is float:
            return float(text)
        if declared_type is str:
            return text
        if declared_type == tuple[int, ...]:
            return tuple(int(v) for v in text.split(",")) if text else ()
        if declared_type == tuple[DomainSpec, ...]:
            out = []
            for item in text.split(","):
                kind, _, sev = item.partition(":")
                if not sev:
                    raise ValueError(f"domain item {item!r} is not kind:severity")
                out.append(DomainSpec(kind.strip(), float(sev)))
            return tuple(out)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from exc
    raise ConfigError(f"unsupported field type for {key}: {declared_type}")


def to_flat(cfg: ExperimentConfig) -> dict[str, str]:
    """Dotted-key view of every field, ready to print."""
    out: dict[str, str] = {}
    for section in _SECTIONS:
        sub = getattr(cfg, section)
        for f in dataclasses.fields(sub):
            out[f"{section}.{f.name}"] = _encode_value(getattr(sub, f.name))
    for f in dataclasses.fields(cfg):
        if f.name in _SECTIONS:
            continue
        out[f.name] = _encode_value(getattr(cfg, f.name))
    return out


def _field_types() -> dict[str, object]:
    types: dict[str, object] = {}
    defaults = ExperimentConfig()
    for section in _SECTIONS:
        sub = getattr(defaults, section)
        hints = {f.name: f.type for f in dataclasses.fields(sub)}
        for name, hint in hints.items():
            types[f"{section}.{name}"] = hint
    for f in dataclasses.fields(ExperimentConfig):
        if f.name not in _SECTIONS:
            types[f.name] = f.type
    return types


_TYPE_BY_KEY = None


def _resolve_type(hint):
    # dataclass fields store string annotations under `from __future__ import
    # annotations`; map them back to concrete types
    table = {
        "int": int,
        "float": float,
        "str": str,
        "bool": bool,
        "tuple[int, ...]": tuple[int, ...],
        "tuple[DomainSpec, ...]": tuple[DomainSpec, ...],
    }
    if isinstance(hint, str):
        if hint not in table:
            raise ConfigError(f"unsupported annotation {hint!r}")
        return table[hint]
    return hint


def from_flat(flat: dict[str, str]) -> ExperimentConfig:
    global _TYPE_BY_KEY
    if _TYPE_BY_KEY is None:
        _TYPE_BY_KEY = {k: _resolve_type(t) for k, t in _field_types().items()}
    sections = {name: {} for name in _SECTIONS}
    top: dict[str, object] = {}
    for key, raw in flat.items():
        if key not in _TYPE_BY_KEY:
            raise ConfigError(f"unknown config key {key!r}")
        value = _decode_value(raw, _TYPE_BY_KEY[key], key)
        if "." in key:
            section, name = key.split(".", 1)
            sections[section][name] = value
        else:
            top[key] = value
    try:
        return ExperimentConfig(
            task=TaskConfig(**sections["task"]),
            stream=StreamConfig(**sections["stream"]),
            model=ModelConfig(**sections["model"]),
            uncertainty=UncertaintyConfig(**sections["uncertainty"]),
            prompt=PromptConfig(**sections["prompt"]),
            cloud=CloudSideConfig(**sections["cloud"]),
            **top,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def to_text(cfg: ExperimentConfig) -> str:
    lines = [f"{key} = {value}" for key, value in to_flat(cfg).items()]
    return "\n".join(lines) + "\n"


def parse_text(text: str) -> ExperimentConfig:
    flat: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = body.partition("=")
        key = key.strip()
        if key in flat:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        flat[key] = value.strip()
    return from_flat(flat)


def load(path: str) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def save(cfg: ExperimentConfig, path: str):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(to_text(cfg))


# ---------------------------------------------------------------------------
# presets

PRESETS = (
    "source_only",
    "pseudo_label",
    "pseudo_label_vpa",
    "pseudo_label_vpa_ugs",
    "full",
    "confidence",
    "random",
    "all_uplink",
    "frozen_teacher",
)


def apply_preset(cfg: ExperimentConfig, name: str) -> ExperimentConfig:
    """Return cfg with one comparison row's toggles applied.

    The defaults in the dataclasses are the full method; every other preset
    switches parts of it off.
    """
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}, expected one of {PRESETS}")
    cfg = replace(cfg, preset=name)
    if name == "full":
        return cfg
    if name == "source_only":
        # a threshold above the 0.5 score bound selects nothing
        return replace(cfg, uncertainty=replace(cfg.uncertainty, strategy="ugs", threshold=1.0))
    if name == "pseudo_label":
        return replace(
            cfg,
            uncertainty=replace(cfg.uncertainty, strategy="all"),
            cloud=replace(cfg.cloud, lambda_align=0.0),
            prompt=replace(cfg.prompt, lr=0.0, u_ema=False),
        )
    if name == "pseudo_label_vpa":
        return replace(
            cfg,
            uncertainty=replace(cfg.uncertainty, strategy="all"),
            prompt=replace(cfg.prompt, u_ema=False),
        )
    if name == "pseudo_label_vpa_ugs":
        return replace(
            cfg,
            uncertainty=replace(cfg.uncertainty, strategy="ugs"),
            prompt=replace(cfg.prompt, u_ema=False),
        )
    if name == "confidence":
        return replace(cfg, uncertainty=replace(cfg.uncertainty, strategy="confidence"))
    if name == "random":
        return replace(cfg, uncertainty=replace(cfg.uncertainty, strategy="random"))
    if name == "all_uplink":
        return replace(cfg, uncertainty=replace(cfg.uncertainty, strategy="all"))
    if name == "frozen_teacher":
        return replace(cfg, cloud=replace(cfg.cloud, lr_teacher=0.0, lambda_align=0.0))
    raise ConfigError(f"unhandled preset {name!r}")
