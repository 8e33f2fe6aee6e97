"""Flat ``key = value`` run configuration.

Values are resolved in order: built-in defaults, the config file, environment
variables ``FEATSR_<KEY>`` (key upper-cased), then ``--set key=value``
options. Unknown keys are rejected everywhere.
"""

from __future__ import annotations

import os
from pathlib import Path

from .errors import ConfigError
from .scorenet import ArchDescriptor
from .sde import NoiseSchedule
from .solver import SamplerConfig
from .training import DatasetSource, SyntheticSource, TrainConfig

ENV_PREFIX = "FEATSR_"

# key -> (type, default)
SCHEMA: dict[str, tuple[type, object]] = {
    # noise schedule
    "sigma_min": (float, 0.001),
    "sigma_max": (float, 348.0),
    "T": (float, 1.0),
    # network
    "in_channels": (int, 2),
    "base_channels": (int, 16),
    "levels": (int, 3),
    "embed_dim": (int, 64),
    "feature_dim": (int, 32),
    "patch": (int, 1),
    "skip": (int, 0),
    "init_seed": (int, 0),
    # training
    "steps": (int, 1000),
    "batch_size": (int, 16),
    "learning_rate": (float, 2e-4),
    "ema_decay": (float, 0.999),
    "seed": (int, 0),
    "microbatch": (int, 4),
    "threads": (int, 1),
    "log_every": (int, 10),
    "checkpoint_every": (int, 0),
    "train_source": (str, "synthetic"),
    "max_features": (int, 5),
    "p_drop_features": (float, 0.1),
    "p_drop_lr": (float, 0.0),
    # sampler
    "sampler_steps": (int, 2000),
    "denoise_final": (bool, True),
    "sample_seed": (int, 0),
    "sample_chunk": (int, 200),
    "use_ema": (bool, True),
    # data
    "n_identities": (int, 200),
    "n_images_per_identity": (int, 7),
    "data_seed": (int, 0),
    "scale": (int, 4),
    "image_size": (int, 32),
    "extractor_seed": (int, 0),
    "renormalize": (bool, True),
}


def _convert(key: str, raw: str):
    typ = SCHEMA[key][0]
    s = raw.strip()
    try:
        if typ is bool:
            low = s.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(s)
        if typ is int:
            return int(s, 0)
        return typ(s)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from None


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_text(text: str, origin: str = "<config>") -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected 'key = value'")
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{origin}:{n}: unknown key {key!r}")
        out[key] = _convert(key, val)
    return out


class RunConfig(dict):
    """Resolved configuration: every schema key present with a typed value."""

    @classmethod
    def load(cls, path=None, overrides=(), env=None) -> RunConfig:
        cfg = cls({k: d for k, (_, d) in SCHEMA.items()})
        if path is not None:
            p = Path(path)
            if not p.exists():
                raise ConfigError(f"config file {p} does not exist")
            cfg.update(parse_text(p.read_text(encoding="utf-8"), str(p)))
        env = os.environ if env is None else env
        for name, val in env.items():
            if name.startswith(ENV_PREFIX):
                key = name[len(ENV_PREFIX):]
                match = [k for k in SCHEMA if k.upper() == key.upper()]
                if not match:
                    raise ConfigError(f"environment variable {name}: unknown key")
                cfg[match[0]] = _convert(match[0], val)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            key, val = (p.strip() for p in item.split("=", 1))
            if key not in SCHEMA:
                raise ConfigError(f"--set: unknown key {key!r}")
            cfg[key] = _convert(key, val)
        return cfg

    def dump(self) -> str:
        return "".join(f"{k} = {_format(self[k])}\n" for k in SCHEMA)

    def write(self, directory, name: str = "resolved_config.txt") -> Path:
        path = Path(directory) / name
        path.write_text(self.dump(), encoding="utf-8")
        return path

    # typed views -----------------------------------------------------------

    def schedule(self) -> NoiseSchedule:
        try:
            return NoiseSchedule(self["sigma_min"], self["sigma_max"], self["T"])
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def arch(self) -> ArchDescriptor:
        try:
            return ArchDescriptor(self["in_channels"], self["base_channels"], self["levels"], self["embed_dim"],
                                  self["feature_dim"], self["patch"], self["skip"])
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self["steps"], batch_size=self["batch_size"], learning_rate=self["learning_rate"],
            ema_decay=self["ema_decay"], seed=self["seed"], microbatch=self["microbatch"], threads=self["threads"],
            log_every=self["log_every"], checkpoint_every=self["checkpoint_every"],
        )

    def sampler_config(self) -> SamplerConfig:
        try:
            return SamplerConfig(self["sampler_steps"], self.schedule(), self["denoise_final"])
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def training_source(self, dataset=None):
        kind = self["train_source"]
        if kind == "synthetic":
            return SyntheticSource(self["seed"], self["scale"], self["image_size"], self["extractor_seed"],
                                   self["feature_dim"], self["max_features"], self["p_drop_features"],
                                   self["p_drop_lr"])
        if kind == "dataset":
            if dataset is None:
                raise ConfigError("train_source = dataset needs --dataset")
            return DatasetSource(dataset, self["seed"], self["feature_dim"], self["p_drop_features"],
                                 self["p_drop_lr"])
        raise ConfigError(f"train_source must be 'synthetic' or 'dataset', got {kind!r}")
