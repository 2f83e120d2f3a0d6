"""Flat dotted-key configuration files.

One `key = value` assignment per line, full-line comments with '#', no
sections or nesting — diff-friendly and trivially parseable:

    task.kind = keyphrase
    backbone.model_dim = 64
    train.lr = 0.01
    adapt.M = 4

Values stay strings in the parsed mapping; typed accessors convert on
demand and name the offending key when conversion fails.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

from .backbone import BackboneConfig
from .errors import ConfigError
from .training import TrainConfig

TRUE_WORDS = ("true", "yes", "on", "1")
FALSE_WORDS = ("false", "no", "off", "0")


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    entries: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in entries:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        entries[key] = value
    return entries


def load_config_file(path: str) -> Dict[str, str]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config_text(fh.read(), source=path)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e


class ConfigView:
    """Typed access over a flat string mapping; errors name the key."""

    def __init__(self, entries: Dict[str, str]):
        self.entries = dict(entries)
        self._used = set()

    def has(self, key: str) -> bool:
        return key in self.entries

    def _raw(self, key: str, default):
        self._used.add(key)
        if key not in self.entries:
            if default is _REQUIRED:
                raise ConfigError(f"missing required config field {key!r}")
            return default
        return self.entries[key]

    def get_str(self, key: str, default=None, choices=None) -> Optional[str]:
        v = self._raw(key, default)
        if v is default and v is not _REQUIRED:
            if choices and v is not None and v not in choices:
                raise ConfigError(f"{key}: {v!r} not one of {sorted(choices)}")
            return v
        if choices and v not in choices:
            raise ConfigError(f"{key}: {v!r} not one of {sorted(choices)}")
        return v

    def get_int(self, key: str, default=None) -> Optional[int]:
        v = self._raw(key, default)
        if v is default:
            return v
        try:
            return int(v)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {v!r}")

    def get_float(self, key: str, default=None) -> Optional[float]:
        v = self._raw(key, default)
        if v is default:
            return v
        try:
            return float(v)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {v!r}")

    def get_bool(self, key: str, default=None) -> Optional[bool]:
        v = self._raw(key, default)
        if v is default:
            return v
        low = str(v).lower()
        if low in TRUE_WORDS:
            return True
        if low in FALSE_WORDS:
            return False
        raise ConfigError(f"{key}: expected true/false, got {v!r}")

    def get_int_list(self, key: str, default=None) -> Optional[List[int]]:
        v = self._raw(key, default)
        if v is default:
            return v
        try:
            return [int(part) for part in str(v).replace(",", " ").split()]
        except ValueError:
            raise ConfigError(f"{key}: expected integers, got {v!r}")

    def get_str_list(self, key: str, default=None) -> Optional[List[str]]:
        v = self._raw(key, default)
        if v is default:
            return v
        return [part for part in str(v).replace(",", " ").split()]

    def unknown_keys(self, known_prefixes) -> List[str]:
        return [k for k in self.entries
                if not any(k.startswith(p) for p in known_prefixes)]


class _Required:
    def __repr__(self):
        return "<required>"


_REQUIRED = _Required()

INFERENCE_MODES = ("merge", "random_route", "fixed_route", "ensemble")


@dataclass
class RunConfig:
    """Everything one training/evaluation run needs, assembled from a file."""

    task_kind: str                     # majority | parity | keyphrase | tsv
    task_path: Optional[str]           # for tsv tasks
    n_examples: int
    seq_len: int
    n_classes: int
    task_seed: int
    backbone: BackboneConfig
    backbone_seed: int
    train: TrainConfig
    variant: str = "adapter"
    sharing: str = "none"
    insert_attention: bool = False
    lora_alpha: float = 8.0
    module_seed: int = 2
    inference_mode: str = "merge"
    ensemble_T: int = 4
    head_trainable: bool = True
    raw: Dict[str, str] = field(default_factory=dict)

    def validate(self) -> "RunConfig":
        if self.task_kind not in ("majority", "parity", "keyphrase", "tsv"):
            raise ConfigError(f"task.kind: unknown task {self.task_kind!r}")
        if self.task_kind == "tsv" and not self.task_path:
            raise ConfigError("task.path is required when task.kind = tsv")
        if self.variant not in ("adapter", "lora"):
            raise ConfigError(f"adapt.variant: unknown variant {self.variant!r}")
        if self.sharing not in ("none", "project_up"):
            raise ConfigError(f"adapt.sharing: unknown mode {self.sharing!r}")
        if self.inference_mode not in INFERENCE_MODES:
            raise ConfigError(
                f"eval.mode: {self.inference_mode!r} not one of {INFERENCE_MODES}"
            )
        if self.ensemble_T < 1:
            raise ConfigError(f"eval.T must be >= 1, got {self.ensemble_T}")
        self.backbone.validate()
        self.train.validate()
        return self


# Every key run_config_from_entries reads.  Anything else in a config file
# is a typo (a misspelled key would otherwise silently fall back to its
# default), except the runner-level sections handled by the CLI: grid.*
# (ablation axes) and out.* (artifact destinations).
KNOWN_KEYS = frozenset((
    "task.kind", "task.path", "task.examples", "task.vocab_size",
    "task.seq_len", "task.classes", "task.seed",
    "backbone.layers", "backbone.model_dim", "backbone.heads",
    "backbone.ffn_dim", "backbone.seed",
    "train.epochs", "train.batch_size", "train.lr", "train.warmup_fraction",
    "train.weight_decay", "train.consistency", "train.head_trainable",
    "train.seed",
    "adapt.variant", "adapt.M", "adapt.r", "adapt.sharing",
    "adapt.insert_attention", "adapt.lora_alpha", "adapt.seed",
    "eval.mode", "eval.T",
))

RUNNER_PREFIXES = ("grid.", "out.")


def run_config_from_entries(entries: Dict[str, str]) -> RunConfig:
    unknown = sorted(
        k for k in entries
        if k not in KNOWN_KEYS and not k.startswith(RUNNER_PREFIXES)
    )
    if unknown:
        raise ConfigError("unknown config key(s): " + ", ".join(unknown))

    view = ConfigView(entries)

    task_kind = view.get_str("task.kind", _REQUIRED)
    n_classes = view.get_int("task.classes", 4)
    seq_len = view.get_int("task.seq_len", 16)

    backbone = BackboneConfig(
        num_layers=view.get_int("backbone.layers", 2),
        model_dim=view.get_int("backbone.model_dim", 64),
        num_heads=view.get_int("backbone.heads", 4),
        ffn_dim=view.get_int("backbone.ffn_dim", 128),
        vocab_size=view.get_int("task.vocab_size", 64),
        max_seq_len=seq_len,
        num_classes=n_classes,
    )

    train = TrainConfig(
        epochs=view.get_int("train.epochs", 10),
        batch_size=view.get_int("train.batch_size", 32),
        lr=view.get_float("train.lr", 3e-4),
        warmup_fraction=view.get_float("train.warmup_fraction", 0.06),
        weight_decay=view.get_float("train.weight_decay", 0.1),
        M=view.get_int("adapt.M", _REQUIRED),
        r=view.get_int("adapt.r", 8),
        consistency=view.get_bool("train.consistency", True),
        sharing=view.get_str("adapt.sharing", "none") == "project_up",
        seed=view.get_int("train.seed", 0),
    )

    cfg = RunConfig(
        task_kind=task_kind,
        task_path=view.get_str("task.path", None),
        n_examples=view.get_int("task.examples", 4000),
        seq_len=seq_len,
        n_classes=n_classes,
        task_seed=view.get_int("task.seed", 13),
        backbone=backbone,
        backbone_seed=view.get_int("backbone.seed", 1),
        train=train,
        variant=view.get_str("adapt.variant", "adapter"),
        sharing=view.get_str("adapt.sharing", "none"),
        insert_attention=view.get_bool("adapt.insert_attention", False),
        lora_alpha=view.get_float("adapt.lora_alpha", 8.0),
        module_seed=view.get_int("adapt.seed", 2),
        inference_mode=view.get_str("eval.mode", "merge"),
        ensemble_T=view.get_int("eval.T", 4),
        head_trainable=view.get_bool("train.head_trainable", True),
        raw=dict(entries),
    )
    return cfg.validate()


def load_run_config(path: str) -> RunConfig:
    return run_config_from_entries(load_config_file(path))


def effective_entries(run: RunConfig) -> Dict[str, str]:
    """Canonical flat mapping with every effective value spelled out.

    This is what checkpoints echo: parsing it back reproduces the run
    configuration regardless of which keys the original file omitted.
    """
    entries = {
        "task.kind": run.task_kind,
        "task.examples": str(run.n_examples),
        "task.vocab_size": str(run.backbone.vocab_size),
        "task.seq_len": str(run.seq_len),
        "task.classes": str(run.n_classes),
        "task.seed": str(run.task_seed),
        "backbone.layers": str(run.backbone.num_layers),
        "backbone.model_dim": str(run.backbone.model_dim),
        "backbone.heads": str(run.backbone.num_heads),
        "backbone.ffn_dim": str(run.backbone.ffn_dim),
        "backbone.seed": str(run.backbone_seed),
        "train.epochs": str(run.train.epochs),
        "train.batch_size": str(run.train.batch_size),
        "train.lr": repr(run.train.lr),
        "train.warmup_fraction": repr(run.train.warmup_fraction),
        "train.weight_decay": repr(run.train.weight_decay),
        "train.consistency": "true" if run.train.consistency else "false",
        "train.head_trainable": "true" if run.head_trainable else "false",
        "train.seed": str(run.train.seed),
        "adapt.variant": run.variant,
        "adapt.M": str(run.train.M),
        "adapt.r": str(run.train.r),
        "adapt.sharing": run.sharing,
        "adapt.insert_attention": "true" if run.insert_attention else "false",
        "adapt.lora_alpha": repr(run.lora_alpha),
        "adapt.seed": str(run.module_seed),
        "eval.mode": run.inference_mode,
        "eval.T": str(run.ensemble_T),
    }
    if run.task_path:
        entries["task.path"] = run.task_path
    return entries
