"""Experiment configuration and its flat ``key = value`` file format."""

from __future__ import annotations

from dataclasses import dataclass, fields
import typing

from .backbone import BackboneConfig
from .errors import ConfigError
from .prompts import VARIANTS, PromptSettings


@dataclass
class ExperimentConfig:
    # prompt tuning
    variant: str = "dpt"
    shots: int = 16
    n_context: int = 16
    prompt_length: int = 10
    cavpt_length: int = 10
    cavpt_layers: typing.Optional[typing.Tuple[int, ...]] = None
    vpt_layers: typing.Optional[typing.Tuple[int, ...]] = None
    shared_generator: bool = True
    ca_ln_input: str = "o_plus_q"
    alpha: float = 0.3
    beta: float = 0.1
    # schedule
    epochs: int = 100
    epochs_one_shot: int = 60
    warmup_epochs: int = 30
    lr_text: float = 2e-3
    lr_visual: float = 1e-3
    lr_generator: typing.Optional[float] = None
    lr_generator_attn: typing.Optional[float] = None
    lr_head: typing.Optional[float] = None
    fixed_warmup_lr: float = 1e-5
    fixed_warmup_epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    # backbone
    image_size: int = 32
    patch_size: int = 8
    d_visual: int = 64
    d_text: int = 64
    embed_dim: int = 64
    visual_layers: int = 4
    text_layers: int = 2
    heads: int = 4
    max_text_len: int = 20
    temperature: float = 0.01
    backbone_seed: int = 0
    weights: str = ""
    vocab: str = ""
    # data
    data_dir: str = "data"
    out_dir: str = "runs"
    n_classes: int = 4
    samples_per_class: int = 40
    distractor_count: int = 1
    noise_std: float = 0.05
    data_seed: int = 0
    # sweep
    variants: typing.Tuple[str, ...] = ("dpt",)
    shots_list: typing.Tuple[int, ...] = (16,)
    seeds: typing.Tuple[int, ...] = (0,)
    attention_maps: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; valid variants: {', '.join(VARIANTS)}")
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r}; valid variants: {', '.join(VARIANTS)}")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be non-negative")
        if self.warmup_epochs > self.epochs:
            raise ConfigError(f"warmup_epochs {self.warmup_epochs} exceeds epochs {self.epochs}")
        if self.batch_size < 1 or self.shots < 1:
            raise ConfigError("batch_size and shots must be positive")
        if self.ca_ln_input not in ("o_plus_q", "o"):
            raise ConfigError(f"ca_ln_input must be 'o_plus_q' or 'o', got {self.ca_ln_input!r}")

    def group_learning_rates(self):
        """Base rate per parameter group; unset generator rates inherit ``lr_visual``."""
        gen = self.lr_visual if self.lr_generator is None else self.lr_generator
        return {
            "text": self.lr_text,
            "visual": self.lr_visual,
            "generator": gen,
            "generator_attn": gen if self.lr_generator_attn is None else self.lr_generator_attn,
            "head": gen if self.lr_head is None else self.lr_head,
        }

    def epochs_for(self, shots):
        return self.epochs_one_shot if shots == 1 else self.epochs

    def backbone(self, vocab_size):
        return BackboneConfig(
            image_size=self.image_size,
            patch_size=self.patch_size,
            d_visual=self.d_visual,
            d_text=self.d_text,
            embed_dim=self.embed_dim,
            visual_layers=self.visual_layers,
            text_layers=self.text_layers,
            heads=self.heads,
            vocab_size=vocab_size,
            max_text_len=self.max_text_len,
            temperature=self.temperature,
        )

    def prompt_settings(self):
        return PromptSettings(
            variant=self.variant,
            n_context=self.n_context,
            prompt_length=self.prompt_length,
            cavpt_length=self.cavpt_length,
            cavpt_layers=self.cavpt_layers,
            vpt_layers=self.vpt_layers,
            shared_generator=self.shared_generator,
            ca_ln_input=self.ca_ln_input,
        )

    def replace(self, **changes):
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return ExperimentConfig(**values)

    # -- text form ------------------------------------------------------
    def to_text(self):
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text, overrides=None):
        values = parse_key_values(text)
        values.update(overrides or {})
        return cls.from_strings(values)

    @classmethod
    def from_file(cls, path, overrides=None):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read(), overrides)

    @classmethod
    def from_strings(cls, values):
        known = {f.name: f for f in fields(cls)}
        hints = typing.get_type_hints(cls)
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, raw, hints[key])
        return cls(**kwargs)


def parse_key_values(text):
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


def _format(value):
    if value is None:
        return "default"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _coerce(key, raw, hint):
    if not isinstance(raw, str):
        return raw
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    try:
        if origin is typing.Union:
            if raw.strip().lower() in ("default", "none"):
                return None
            return _coerce(key, raw, next(a for a in args if a is not type(None)))
        if origin is tuple:
            item = args[0]
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            return tuple(_coerce(key, p, item) for p in parts)
        if hint is bool:
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return hint(raw)
    except (ValueError, StopIteration) as exc:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r}") from exc
