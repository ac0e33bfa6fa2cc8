"""Game configuration: presets, the text config format, and hashing.

The on-disk format is line oriented: ``[section]`` headers, ``key =
value`` pairs, ``#`` comment lines, blank lines. Every key belongs to a
fixed section and has a typed validator; unknown keys and out-of-range
values are reported with their line number. An empty file parses to the
full desk preset.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from pathlib import Path

REGIMES = ("successive", "non-successive")
PAPER_K = (1, 3)


@dataclass(frozen=True)
class GameConfig:
    # [game]
    regime: str = "successive"
    k: int = 3
    max_order: int = 3
    validation_count: int = 4
    seed: int = 0
    pi: float = 0.25
    # [patch]
    patch_size: int = 24
    patch_epochs: int = 150
    patch_lr: float = 0.01
    patch_decay_every: int = 50
    patch_batch: int = 8
    patch_scenes: int = 48
    lambda_obj: float = 1.0
    lambda_smooth: float = 0.05
    lambda_validity: float = 10.0
    # [detector]
    variant: str = "wide"
    detector_epochs: int = 60
    detector_lr: float = 3e-3
    weight_decay: float = 1e-4
    detector_batch: int = 16
    detector_scenes: int = 256
    adv_resize_lo: float = 0.75
    adv_resize_hi: float = 0.9
    # [data]
    image_size: int = 128
    eval_scenes: int = 48
    # [eval]
    p_box: float = 0.5
    p_hal: float = 0.5
    eval_resize: float = 0.5

    def __post_init__(self):
        problems = validate_values(self)
        if problems:
            raise ValueError("; ".join(problems))

    def config_hash(self) -> str:
        return hashlib.sha256(serialize_config(self).encode("utf-8")).hexdigest()

    def is_paper_regime(self) -> bool:
        return self.k in PAPER_K


def desk_config(**overrides) -> GameConfig:
    """Laptop-scale defaults (the dataclass defaults)."""
    return replace(GameConfig(), **overrides) if overrides else GameConfig()


def full_config(**overrides) -> GameConfig:
    """Paper-scale preset: 256px patches, 150/100 epoch budgets."""
    cfg = GameConfig(
        patch_size=256,
        patch_epochs=150,
        patch_decay_every=50,
        patch_scenes=500,
        detector_epochs=100,
        detector_scenes=2000,
        image_size=256,
        eval_scenes=500,
    )
    return replace(cfg, **overrides) if overrides else cfg


PRESETS = {"desk": desk_config, "full": full_config}


# ---------------------------------------------------------------------------
# schema


def _prob(name):
    def check(v):
        if not 0.0 <= v <= 1.0:
            return f"{name} must be in [0,1], got {v}"

    return check


def _positive(name):
    def check(v):
        if v <= 0:
            return f"{name} must be positive, got {v}"

    return check


def _at_least(name, lo):
    def check(v):
        if v < lo:
            return f"{name} must be >= {lo}, got {v}"

    return check


def _choice(name, options):
    def check(v):
        if v not in options:
            return f"{name} must be one of {sorted(options)}, got {v!r}"

    return check


def _image_size(v):
    if v < 16 or v % 8 != 0:
        return f"image_size must be a multiple of 8 and >= 16, got {v}"


def _variants():
    from .detector import ARCH_VARIANTS

    return tuple(ARCH_VARIANTS)


# section, key, attribute, type, validator (None = unconstrained)
SCHEMA: list[tuple[str, str, str, type, object]] = [
    ("game", "regime", "regime", str, _choice("regime", REGIMES)),
    ("game", "k", "k", int, _at_least("k", 1)),
    ("game", "max_order", "max_order", int, _at_least("max_order", 1)),
    ("game", "validation_count", "validation_count", int, _at_least("validation_count", 1)),
    ("game", "seed", "seed", int, _at_least("seed", 0)),
    ("game", "pi", "pi", float, _prob("pi")),
    ("patch", "size", "patch_size", int, _at_least("patch size", 4)),
    ("patch", "epochs", "patch_epochs", int, _at_least("patch epochs", 1)),
    ("patch", "lr", "patch_lr", float, _positive("patch lr")),
    ("patch", "decay_every", "patch_decay_every", int, _at_least("patch decay_every", 1)),
    ("patch", "batch", "patch_batch", int, _at_least("patch batch", 1)),
    ("patch", "scenes", "patch_scenes", int, _at_least("patch scenes", 1)),
    ("patch", "lambda_obj", "lambda_obj", float, _positive("lambda_obj")),
    ("patch", "lambda_smooth", "lambda_smooth", float, _at_least("lambda_smooth", 0.0)),
    ("patch", "lambda_validity", "lambda_validity", float, _at_least("lambda_validity", 0.0)),
    ("detector", "variant", "variant", str, None),  # checked against the registry below
    ("detector", "epochs", "detector_epochs", int, _at_least("detector epochs", 1)),
    ("detector", "lr", "detector_lr", float, _positive("detector lr")),
    ("detector", "weight_decay", "weight_decay", float, _at_least("weight_decay", 0.0)),
    ("detector", "batch", "detector_batch", int, _at_least("detector batch", 1)),
    ("detector", "scenes", "detector_scenes", int, _at_least("detector scenes", 1)),
    ("detector", "adv_resize_lo", "adv_resize_lo", float, _positive("adv_resize_lo")),
    ("detector", "adv_resize_hi", "adv_resize_hi", float, _positive("adv_resize_hi")),
    ("data", "image_size", "image_size", int, _image_size),
    ("data", "eval_scenes", "eval_scenes", int, _at_least("eval_scenes", 1)),
    ("eval", "p_box", "p_box", float, _prob("p_box")),
    ("eval", "p_hal", "p_hal", float, _prob("p_hal")),
    ("eval", "resize", "eval_resize", float, _positive("eval resize")),
]

_BY_KEY = {(s, k): (attr, typ, val) for s, k, attr, typ, val in SCHEMA}


def validate_values(cfg: GameConfig) -> list[str]:
    problems = []
    for section, key, attr, typ, validator in SCHEMA:
        v = getattr(cfg, attr)
        if validator is not None:
            msg = validator(v)
            if msg:
                problems.append(msg)
    if cfg.variant not in _variants():
        problems.append(f"variant must be one of {sorted(_variants())}, got {cfg.variant!r}")
    if cfg.adv_resize_lo > cfg.adv_resize_hi:
        problems.append(
            f"adv_resize_lo ({cfg.adv_resize_lo}) must not exceed adv_resize_hi ({cfg.adv_resize_hi})"
        )
    return problems


class ConfigError(ValueError):
    pass


def _parse_value(raw: str, typ: type, where: str):
    raw = raw.strip()
    if typ is int:
        try:
            return int(raw, 0)
        except ValueError:
            raise ConfigError(f"{where}: expected an integer, got {raw!r}") from None
    if typ is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected a number, got {raw!r}") from None
    return raw


def parse_config(text: str, preset: str = "desk") -> GameConfig:
    """Parse the key=value format on top of a preset's defaults."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; options: {sorted(PRESETS)}")
    values: dict[str, object] = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            if not any(s == section for s, *_ in SCHEMA):
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if section is None:
            raise ConfigError(f"line {lineno}: key {key!r} appears before any [section] header")
        if (section, key) not in _BY_KEY:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in section [{section}]")
        attr, typ, validator = _BY_KEY[(section, key)]
        value = _parse_value(raw, typ, f"line {lineno}")
        if validator is not None:
            msg = validator(value)
            if msg:
                raise ConfigError(f"line {lineno}: {msg}")
        values[attr] = value
    try:
        return replace(PRESETS[preset](), **values)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def load_config(path: str | Path, preset: str = "desk") -> GameConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), preset=preset)


def serialize_config(cfg: GameConfig) -> str:
    """Canonical text form; parses back to an equal config."""
    lines = []
    current = None
    for section, key, attr, typ, _ in SCHEMA:
        if section != current:
            if current is not None:
                lines.append("")
            lines.append(f"[{section}]")
            current = section
        v = getattr(cfg, attr)
        lines.append(f"{key} = {v!r}" if isinstance(v, float) else f"{key} = {v}")
    return "\n".join(lines) + "\n"


def save_config(cfg: GameConfig, path: str | Path) -> None:
    Path(path).write_text(serialize_config(cfg), encoding="utf-8")
