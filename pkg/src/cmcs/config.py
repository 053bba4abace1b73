"""INI run configuration with a fixed schema and dotted command-line overrides."""

from __future__ import annotations

import configparser
import hashlib
import json
from pathlib import Path

from .augmentation import AugmentationParams
from .errors import ConfigError
from .evaluation import LINEAR_PROTOCOL, SEMI_PROTOCOL, ProtocolConfig
from .losses import LossWeights
from .training import TrainConfig

# section -> key -> (type, default)
SCHEMA = {
    "data": {
        "manifest": (str, ""),
        "topology": (str, ""),
        "target_frames": (int, 50),
        "center_joint": (int, 1),
        "split_protocol": (str, ""),
        "synth_classes": (int, 4),
        "synth_per_class": (int, 130),
        "synth_subjects": (int, 13),
        "synth_train_subjects": (int, 10),
        "synth_seed": (int, 0),
    },
    "aug": {
        "shear_amplitude": (float, 0.5),
        "padding_ratio": (int, 6),
        "order": (str, "crop_shear"),
    },
    "model": {
        "encoder": (str, "graph_conv"),
        "feature_dim": (int, 128),
        "hidden_dim": (int, 512),
        "out_dim": (int, 128),
        "channel_scale": (float, 0.25),
        "temporal_kernel": (int, 9),
        "use_predictor": (bool, True),
    },
    "train": {
        "batch_size": (int, 128),
        "total_epochs": (int, 30),
        "stage1_epochs": (int, 20),
        "lr": (float, 0.1),
        "momentum": (float, 0.9),
        "weight_decay": (float, 1e-4),
        "tau": (float, 0.996),
        "alpha": (float, 1.0),
        "beta": (float, 1.0),
        "lambda": (float, 1.0),
        "gamma": (float, 10.0),
        "top_k": (int, 2),
        "streams": (str, "joint,motion,bone"),
        "seed": (int, 0),
        "objective": (str, "cmal"),
        "strict_vote": (bool, False),
        "checkpoint_every": (int, 1),
    },
    "eval": {
        "stream": (str, "joint"),
        "knn_k": (int, 20),
        "fraction": (float, 0.1),
        "linear_lr": (float, LINEAR_PROTOCOL.lr),
        "linear_epochs": (int, LINEAR_PROTOCOL.epochs),
        "linear_milestone": (int, LINEAR_PROTOCOL.milestone),
        "semi_lr": (float, SEMI_PROTOCOL.lr),
        "semi_epochs": (int, SEMI_PROTOCOL.epochs),
        "semi_milestone": (int, SEMI_PROTOCOL.milestone),
        "batch_size": (int, 128),
        "seed": (int, 0),
    },
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(section, key, raw):
    typ = SCHEMA[section][key][0]
    text = str(raw).strip()
    try:
        if typ is bool:
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(text)
        return typ(text)
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot parse {text!r} as {typ.__name__}") from None


class RunConfig:
    """Merged, validated view of all config sections."""

    def __init__(self, values):
        self.values = values

    @classmethod
    def defaults(cls):
        return cls({s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()})

    @classmethod
    def load(cls, path=None, overrides=()):
        cfg = cls.defaults()
        if path is not None:
            path = Path(path)
            if not path.is_file():
                raise ConfigError(f"config file not found: {path}")
            parser = configparser.ConfigParser(interpolation=None)
            parser.optionxform = str
            try:
                parser.read_string(path.read_text())
            except configparser.Error as exc:
                raise ConfigError(f"{path}: {exc}") from exc
            for section in parser.sections():
                for key, raw in parser.items(section):
                    cfg.set(section, key, raw)
        for item in overrides:
            cfg.apply_override(item)
        cfg.validate()
        return cfg

    def set(self, section, key, raw):
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        self.values[section][key] = _convert(section, key, raw)

    def apply_override(self, item):
        text = item[2:] if item.startswith("--") else item
        if "=" not in text or "." not in text.split("=", 1)[0]:
            raise ConfigError(f"bad override {item!r}; expected --section.key=value")
        dotted, raw = text.split("=", 1)
        section, key = dotted.split(".", 1)
        self.set(section, key, raw)

    def __getitem__(self, section):
        return self.values[section]

    def validate(self):
        try:
            self.train_config()
            self.aug_params()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        if self["model"]["encoder"] not in ("graph_conv", "recurrent"):
            raise ConfigError(f"model.encoder: unknown encoder {self['model']['encoder']!r}")
        return self

    def to_dict(self):
        return json.loads(json.dumps(self.values))

    @property
    def config_hash(self):
        return hashlib.sha256(json.dumps(self.values, sort_keys=True).encode()).hexdigest()

    def to_ini(self):
        lines = []
        for section, keys in self.values.items():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {str(v).lower() if isinstance(v, bool) else v}" for k, v in keys.items())
            lines.append("")
        return "\n".join(lines)

    def aug_params(self):
        a = self["aug"]
        return AugmentationParams(a["shear_amplitude"], a["padding_ratio"], a["order"], self["train"]["seed"])

    def train_config(self):
        t = self["train"]
        return TrainConfig(
            batch_size=t["batch_size"],
            total_epochs=t["total_epochs"],
            stage1_epochs=t["stage1_epochs"],
            lr=t["lr"],
            momentum=t["momentum"],
            weight_decay=t["weight_decay"],
            tau=t["tau"],
            weights=LossWeights(t["alpha"], t["beta"], t["lambda"], t["gamma"]),
            top_k=t["top_k"],
            streams=tuple(s.strip() for s in t["streams"].split(",") if s.strip()),
            seed=t["seed"],
            objective=t["objective"],
            use_predictor=self["model"]["use_predictor"],
            strict_vote=t["strict_vote"],
            checkpoint_every=t["checkpoint_every"],
            aug=AugmentationParams(self["aug"]["shear_amplitude"], self["aug"]["padding_ratio"],
                                   self["aug"]["order"], t["seed"]),
        )

    def protocol(self, name):
        e = self["eval"]
        if name == "linear":
            return ProtocolConfig(e["linear_lr"], e["linear_epochs"], e["linear_milestone"], 0.1,
                                  e["batch_size"], 0.9, 0.0, e["seed"])
        return ProtocolConfig(e["semi_lr"], e["semi_epochs"], e["semi_milestone"], 0.1,
                              e["batch_size"], 0.9, 1e-4, e["seed"])
