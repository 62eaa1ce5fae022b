"""Experiment configuration: YAML files, dotted overrides, hashing, stage seeds."""

from __future__ import annotations

import copy
import hashlib
import json
import re
from importlib import resources

import jsonschema
import yaml

from .errors import ConfigError

DEFAULTS = {
    "seed": 0,
    "output_dir": "divlab-out",
    "data_dir": None,
    "workers": 1,
    "data": {
        "class_count": 20,
        "feature_dim": 16,
        "samples_per_class": 60,
        "within_class_noise": 1.0,
        "spreads": [0.5, 1.0, 2.0, 4.0],
        "unions": [[1.0, 1.0], [2.0, 2.0]],
        "controls": [0.0],
        "files": [],
    },
    "probe": {
        "hidden": [64, 64],
        "lr": 0.1,
        "batch_size": 64,
        "min_epochs": 10,
        "max_epochs": 200,
        "target_accuracy": 0.9,
        "meta_class_count": 20,
        "meta_proto_spread": 2.0,
        "meta_samples_per_class": 100,
    },
    "diversity": {
        "num_batches": 25,
        "pairing": "exhaustive",
        "label_mode": "sampled",
        "mc_draws": 8,
        "batch_mode": "episode",
        "random_batch_size": 100,
        "finetune_steps": 100,
        "finetune_lr": 0.01,
    },
    "learners": {
        "grid": ["PT", "FO MAML 5", "FO MAML 10", "HO MAML 5", "HO MAML 10"],
        "pt_inner_steps": 10,
        "inner_lr": 0.1,
        "outer_lr": 1e-3,
        "outer_optimizer": "adam",
        "n_way": 5,
        "k_shot": 5,
        "q_size": 15,
        "meta_batch_size": 4,
        "total_outer_steps": 100,
        "pt_batch_size": 100,
        "hidden": [64, 64],
        "head_init_std": 0.01,
        "checkpoint_every": 25,
        "uncontrolled": False,
    },
    "evaluation": {"num_episodes": 100},
}

class _Loader(yaml.SafeLoader):
    """YAML 1.1 reads ``1e-3`` as a string; accept it as a float."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*\.[0-9_]*(?:[eE][-+]?[0-9]+)?|\.[0-9_]+(?:[eE][-+]?[0-9]+)?"
               r"|[0-9][0-9_]*[eE][-+]?[0-9]+|\.inf|\.nan)$", re.X),
    list("-+0123456789."),
)


def _yaml_load(text):
    return yaml.load(text, Loader=_Loader)


# keys that change where things go or how fast, never what is computed
NON_SEMANTIC = ("output_dir", "data_dir", "workers")


def schema():
    text = resources.files("divlab").joinpath("data/config.schema.json").read_text()
    return json.loads(text)


def _merge(base, update, path=""):
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value, f"{path}{key}.")
        else:
            out[key] = copy.deepcopy(value)
    return out


def set_dotted(tree, dotted, value):
    """Set ``a.b.c = value`` in a nested dict; unknown paths are config errors."""
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"unknown config section {dotted!r}")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[keys[-1]] = value


def parse_override(text):
    """``key.path=value`` with the value parsed as YAML (so 3, 0.5, [1, 2] work)."""
    if "=" not in text:
        raise ConfigError(f"override must look like key.path=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        return key.strip(), _yaml_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value for {key}: {exc}") from exc


def validate(cfg):
    try:
        jsonschema.validate(cfg, schema())
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from exc
    ids = dataset_ids(cfg)
    dup = sorted({i for i in ids if ids.count(i) > 1})
    if dup:
        raise ConfigError(f"duplicate dataset ids: {dup}")
    if not training_ids(cfg):
        raise ConfigError("no datasets to train on")
    return cfg


def load_config(path=None, overrides=()):
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path) as fh:
                user = _yaml_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"config {path} must be a mapping at the top level")
        cfg = _merge(cfg, user)
    for key, value in overrides:
        set_dotted(cfg, key, value)
    return validate(cfg)


def canonical(cfg):
    semantic = {k: v for k, v in cfg.items() if k not in NON_SEMANTIC}
    return json.dumps(semantic, sort_keys=True, separators=(",", ":"))


def config_hash(cfg):
    return hashlib.sha256(canonical(cfg).encode()).hexdigest()[:16]


def subtree_hash(*parts):
    text = json.dumps(parts, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def stage_seed(master, label):
    """Seed for one stage, e.g. ``stage_seed(0, "train:HO MAML 5:spread-1")``."""
    digest = hashlib.sha256(f"{int(master)}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def _num(x):
    return f"{x:g}"


def spread_id(spread):
    return f"spread-{_num(spread)}"


def union_id(spreads):
    return "union-" + "+".join(_num(s) for s in spreads)


def control_id(spread):
    return f"control-{_num(spread)}"


def training_ids(cfg):
    d = cfg["data"]
    return ([spread_id(s) for s in d["spreads"]] + [union_id(u) for u in d["unions"]]
            + [f["dataset_id"] for f in d["files"]])


def dataset_ids(cfg):
    return training_ids(cfg) + [control_id(s) for s in cfg["data"]["controls"]]


def dump(cfg):
    return yaml.safe_dump(cfg, sort_keys=True)
