"""Run configuration: one JSON document, schema-checked, hashed into every artifact."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import fields
from pathlib import Path

import jsonschema

from .agent import SemanticSettings
from .learning import TrainConfig
from .policy import PolicyConfig

ENV_BACKEND_URL = "GEM_BACKEND_URL"

_num = {"type": "number"}
_pos_int = {"type": "integer", "minimum": 1}
_nonneg_int = {"type": "integer", "minimum": 0}
_unit = {"type": "number", "minimum": 0, "maximum": 1}
_odd = {"type": "integer", "minimum": 1, "not": {"multipleOf": 2}}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "RunConfig",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "task": {"type": "string", "minLength": 1},
        "variant": {"enum": ["seen", "unseen"]},
        "n_demos": _pos_int,
        "seeds": {
            "type": "object", "additionalProperties": False,
            "properties": {"demos": _nonneg_int, "train": _nonneg_int, "eval": _nonneg_int},
        },
        "train": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "steps": _nonneg_int, "batch_size": _pos_int, "lr": {"type": "number", "exclusiveMinimum": 0},
                "clip_norm": {"type": "number", "exclusiveMinimum": 0}, "augment": {"type": "boolean"},
                "rotations": _pos_int, "max_shift": _unit, "eval_interval": _nonneg_int,
                "early_stop_window": _pos_int, "early_stop_loss": {"type": "number", "minimum": 0},
            },
        },
        "policy": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "n_rot": _pos_int, "n_theta": _pos_int, "max_freq": _nonneg_int, "kernel_size": _odd,
                "crop_size": _odd, "width": _pos_int, "n_blocks": _pos_int, "embed_dim": _pos_int,
                "smooth_sigma": {"type": "number", "exclusiveMinimum": 0}, "in_channels": _pos_int,
                "depth_scale": _num,
            },
        },
        "semantic": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "n_views": _pos_int, "view_patch": _pos_int, "view_stride": _pos_int, "topdown_patch": _pos_int,
                "topdown_stride": _pos_int, "w1": _unit, "w2": _unit, "threshold": {"type": "number", "minimum": -1,
                                                                                    "maximum": 1},
            },
        },
        "backend": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["mock", "remote"]},
                "url": {"type": ["string", "null"]},
                "dim": _pos_int,
                "seed": _nonneg_int,
                "timeout": {"type": "number", "exclusiveMinimum": 0},
            },
            "if": {"properties": {"kind": {"const": "remote"}}, "required": ["kind"]},
            "then": {"required": ["url"], "properties": {"url": {"type": "string"}}},
        },
        "output_dir": {"type": "string", "minLength": 1},
    },
}

# the train seed lives under "seeds", so it is not duplicated in the train block
_TRAIN_KEYS = [f.name for f in fields(TrainConfig) if f.name != "seed"]

DEFAULTS = {
    "task": "put_blocks",
    "variant": "seen",
    "n_demos": 10,
    "seeds": {"demos": 0, "train": 0, "eval": 10000},
    "train": {k: v for k, v in TrainConfig().to_dict().items() if k in _TRAIN_KEYS},
    "policy": PolicyConfig().to_dict(),
    "semantic": {f.name: getattr(SemanticSettings(), f.name) for f in fields(SemanticSettings)},
    "backend": {"kind": "mock", "url": None, "dim": 64, "seed": 0, "timeout": 10.0},
    "output_dir": "runs/default",
}

# fields that say where things go rather than what gets computed
_UNHASHED = (("output_dir",), ("backend", "url"), ("backend", "timeout"))


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else copy.deepcopy(v)
    return out


class RunConfig:
    """Validated view over the JSON document; missing keys take the defaults."""

    def __init__(self, doc: dict | None = None):
        doc = {} if doc is None else doc
        try:
            jsonschema.validate(doc, SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"invalid run config at {where}: {exc.message}") from None
        self.doc = _merge(DEFAULTS, doc)
        # cross-field checks the schema cannot express
        try:
            self.policy_config()
            self.train_config()
        except ValueError as exc:
            raise ConfigError(f"invalid run config: {exc}") from None
        if self.doc["policy"]["embed_dim"] != self.doc["backend"]["dim"]:
            raise ConfigError("policy.embed_dim must equal backend.dim")

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        return cls(doc)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.doc, indent=1, sort_keys=True))

    def __getitem__(self, key):
        return self.doc[key]

    def to_dict(self) -> dict:
        return copy.deepcopy(self.doc)

    def config_hash(self) -> str:
        d = self.to_dict()
        for path in _UNHASHED:
            node = d
            for k in path[:-1]:
                node = node[k]
            node.pop(path[-1], None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def policy_config(self) -> PolicyConfig:
        return PolicyConfig(**self.doc["policy"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.doc["seeds"]["train"], **self.doc["train"])

    def semantic_settings(self) -> SemanticSettings:
        return SemanticSettings(**self.doc["semantic"])

    def backend_url(self) -> str | None:
        return os.environ.get(ENV_BACKEND_URL) or self.doc["backend"]["url"]

    def make_backend(self):
        """Mock backend, or the remote client when a URL is configured or set in the environment."""
        b = self.doc["backend"]
        url = self.backend_url()
        if b["kind"] == "remote" or os.environ.get(ENV_BACKEND_URL):
            from .remote import RemoteEmbedding

            return RemoteEmbedding(url, timeout=b["timeout"])
        from .sim.mock_embedding import MockEmbedding

        return MockEmbedding(dim=b["dim"], seed=b["seed"])
