"""Structured run configuration: typed INI sections, overrides, stable hashing.

Unknown sections or keys are rejected. Defaults mirror the production recipe
(inference parameters, training hyperparameters, segmentation, generation
caps); desk-scale runs override steps and batch sizes explicitly.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .codec import CodecConfig
from .diffusion import SamplerParams
from .errors import ConfigError
from .model import ModelConfig
from .segment import SegmentationConfig
from .trainloop import TrainConfig

_HEX_INT = "hex_int"

_SCHEMA: dict[str, dict[str, tuple[type | str, object]]] = {
    "run": {
        "seed": (int, 0),
        "deterministic": (bool, True),
        "workers": (int, 1),
    },
    "codec": {
        "dim": (int, 64),
        "bucket_seed": (_HEX_INT, 0x243F6A8885A308D3),
        "sign_seed": (_HEX_INT, 0x13198A2E03707344),
    },
    "segment": {
        "threshold": (float, 0.02),
        "max_len": (int, 256),
    },
    "model": {
        "d_embedding": (int, 64),
        "d_model": (int, 128),
        "n_ctx_layers": (int, 4),
        "n_den_layers": (int, 4),
        "n_heads": (int, 4),
        "max_positions": (int, 128),
        "t_train": (int, 100),
        "cfg_drop_prob": (float, 0.15),
    },
    "diffusion": {
        "offset": (float, 0.008),
    },
    "inference": {
        "steps": (int, 40),
        "sigma_init": (float, 0.6),
        "guidance_scale": (float, 3.0),
        "guidance_rescale": (float, 0.7),
        "epsilon_scaling": (float, 1.00045),
    },
    "train": {
        "pretrain_steps": (int, 250_000),
        "pretrain_lr": (float, 4e-4),
        "pretrain_warmup": (int, 10_000),
        "pretrain_weight_decay": (float, 0.1),
        "pretrain_batch_sentences": (int, 229_376),
        "finetune_steps": (int, 20_000),
        "finetune_lr": (float, 1e-5),
        "finetune_warmup": (int, 0),
        "finetune_weight_decay": (float, 0.01),
        "finetune_batch_instances": (int, 512),
        "checkpoint_every": (int, 500),
        "grad_clip": (float, 1.0),
        "floor_lr": (float, 0.0),
    },
    "eval": {
        "n_docs": (int, 1000),
        "min_sentences": (int, 9),
        "eot_threshold": (float, 0.90),
        "max_sentences_pretrain": (int, 1),
        "max_sentences_instruct": (int, 16),
        "per_lang_cap": (int, 1000),
        "space": (str, "raw"),
    },
    "paths": {
        "corpus": (str, ""),
        "sentinel_table": (str, ""),
        "vocab": (str, ""),
        "normalizer": (str, ""),
        "checkpoint": (str, ""),
        "out_dir": (str, ""),
    },
}

# path keys that must point at existing files when used by a command
_INPUT_PATH_KEYS = ("corpus", "sentinel_table", "vocab", "normalizer", "checkpoint")


def _parse_value(section: str, key: str, raw: str):
    typ, _ = _SCHEMA[section][key]
    text = raw.strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typ == _HEX_INT:
            return int(text, 0)
        return text
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}: {exc}") from exc


@dataclass
class EvalSettings:
    n_docs: int = 1000
    min_sentences: int = 9
    eot_threshold: float = 0.90
    max_sentences_pretrain: int = 1
    max_sentences_instruct: int = 16
    per_lang_cap: int = 1000
    space: str = "raw"


@dataclass
class RunConfig:
    values: dict[str, dict[str, object]] = field(default_factory=dict)

    def get(self, section: str, key: str):
        return self.values[section][key]

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    def codec_config(self) -> CodecConfig:
        v = self.values["codec"]
        return CodecConfig(dim=v["dim"], bucket_seed=v["bucket_seed"], sign_seed=v["sign_seed"])

    def segmentation_config(self) -> SegmentationConfig:
        v = self.values["segment"]
        return SegmentationConfig(threshold=v["threshold"], max_len=v["max_len"])

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.values["model"])

    def sampler_params(self, seed: int | None = None) -> SamplerParams:
        v = self.values["inference"]
        return SamplerParams(
            steps=v["steps"],
            sigma_init=v["sigma_init"],
            guidance_scale=v["guidance_scale"],
            guidance_rescale=v["guidance_rescale"],
            epsilon_scaling=v["epsilon_scaling"],
            seed=self.seed if seed is None else seed,
        )

    def train_config(self, mode: str) -> TrainConfig:
        t = self.values["train"]
        if mode == "pretrain":
            return TrainConfig(
                mode="pretrain",
                steps=t["pretrain_steps"],
                peak_lr=t["pretrain_lr"],
                warmup=t["pretrain_warmup"],
                weight_decay=t["pretrain_weight_decay"],
                batch_budget=t["pretrain_batch_sentences"],
                seed=self.seed,
                floor_lr=t["floor_lr"],
                grad_clip=t["grad_clip"],
                checkpoint_every=t["checkpoint_every"],
                beta2=0.98,
            )
        if mode == "finetune":
            return TrainConfig(
                mode="finetune",
                steps=t["finetune_steps"],
                peak_lr=t["finetune_lr"],
                warmup=t["finetune_warmup"],
                weight_decay=t["finetune_weight_decay"],
                batch_budget=t["finetune_batch_instances"],
                seed=self.seed,
                floor_lr=t["floor_lr"],
                grad_clip=t["grad_clip"],
                checkpoint_every=t["checkpoint_every"],
                beta2=0.999,
            )
        raise ConfigError(f"unknown training mode {mode!r}")

    def eval_settings(self) -> EvalSettings:
        return EvalSettings(**self.values["eval"])

    def path(self, key: str) -> str:
        return self.values["paths"][key]

    def config_hash(self) -> str:
        """Stable hash of everything except file locations."""
        lines = []
        for section in sorted(self.values):
            if section == "paths":
                continue
            for key in sorted(self.values[section]):
                lines.append(f"{section}.{key}={self.values[section][key]!r}")
        return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()[:16]


def default_config() -> RunConfig:
    values = {sec: {k: default for k, (_, default) in keys.items()} for sec, keys in _SCHEMA.items()}
    return RunConfig(values)


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Defaults, then the INI file, then ``section.key=value`` overrides."""
    cfg = default_config()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(p.read_text(encoding="utf-8"), source=str(p))
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from exc
        for section in parser.sections():
            if section not in _SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in _SCHEMA[section]:
                    raise ConfigError(f"unknown config key {section}.{key}")
                cfg.values[section][key] = _parse_value(section, key, raw)
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        target, raw = item.split("=", 1)
        section, key = target.split(".", 1)
        if section not in _SCHEMA or key not in _SCHEMA[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        cfg.values[section][key] = _parse_value(section, key, raw)
    return cfg


def require_input_path(cfg: RunConfig, key: str, flag_value: str | None = None) -> Path:
    """Resolve a required input path from a CLI flag or [paths]; must exist."""
    raw = flag_value
    if not raw and key in _SCHEMA["paths"]:
        raw = cfg.path(key)
    if not raw:
        raise ConfigError(f"paths.{key}: required path not set (flag or config)")
    p = Path(raw)
    if not p.exists():
        raise ConfigError(f"paths.{key}: file not found: {p}")
    return p
