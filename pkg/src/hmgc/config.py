"""Whole-pipeline configuration: one JSON document with sections for the
taxonomy, plant profile, operating conditions, fault signatures, network
table, compound scaling, and training. Missing sections fall back to the
desk-scale defaults; see README for the full schema."""

from __future__ import annotations

import json
import os

from . import effnet, plantsim, taxonomy
from .errors import ConfigError
from .trainer import TrainConfig

__all__ = [
    "default_config_doc",
    "load_config",
    "write_config",
    "config_taxonomy",
    "config_profile",
    "config_conditions",
    "config_signatures",
    "config_network",
    "config_scaling",
    "config_train",
    "config_duration",
    "config_corpus_seed",
    "config_split_seed",
]


def default_config_doc() -> dict:
    """Desk-scale defaults: 256 parameters (16x16 images), 75 ticks per run,
    16 faults x 3 conditions = 3,600 images, nano network profile."""
    return {
        "taxonomy": taxonomy.default_taxonomy_doc(),
        "profile": {
            "parameter_count": 256,
            "noise_sigma": 0.01,
            "nominal_seed": 7,
        },
        "conditions": plantsim.conditions_to_doc(plantsim.default_conditions()),
        "signatures": {
            "auto": {
                "indices_per_fault": 4,
                "magnitude": 0.5,
                "onset_tick": 0,
                "time_scale": 60.0,
            }
        },
        "network": {"input_resolution": 16},
        "scaling": {
            "alpha": 1.2,
            "beta": 1.1,
            "gamma": 1.15,
            "phi": -3.0,
            "channel_divisor": 8,
        },
        "train": {
            "batch_size": 32,
            "epochs": 16,
            "optimizer": "adam",
            "learning_rate": 1e-3,
            "momentum": 0.9,
            "beta1": 0.9,
            "beta2": 0.999,
            "eps": 1e-8,
            "seed": 0,
            "level_weights": [1.0, 1.0, 1.0],
            "branch_hidden": 128,
            "split_seed": 0,
        },
        "corpus": {"seed": 0, "duration_s": 75},
    }


def load_config(path=None) -> dict:
    """Load a config file, filling absent sections from the defaults."""
    doc = default_config_doc()
    if path is None:
        return doc
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            user = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(user, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    doc.update(user)
    return doc


def write_config(doc: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def config_taxonomy(doc: dict) -> taxonomy.TaxonomyTree:
    return taxonomy.taxonomy_from_doc(doc["taxonomy"])


def config_profile(doc: dict) -> plantsim.PlantProfile:
    return plantsim.profile_from_doc(doc["profile"])


def config_conditions(doc: dict) -> list[plantsim.OperatingCondition]:
    return plantsim.conditions_from_doc(doc["conditions"])


def config_signatures(doc: dict, tree=None, profile=None) -> list[plantsim.FaultSignature]:
    tree = config_taxonomy(doc) if tree is None else tree
    profile = config_profile(doc) if profile is None else profile
    return plantsim.signatures_from_doc(doc["signatures"], tree, profile)


def config_network(doc: dict) -> effnet.NetworkSpec:
    return effnet.network_from_doc(doc["network"])


def config_scaling(doc: dict) -> tuple[effnet.ScalingCoefficients, int]:
    return effnet.coefficients_from_doc(doc["scaling"])


def config_train(doc: dict) -> TrainConfig:
    t = doc["train"]
    try:
        return TrainConfig(
            batch_size=int(t.get("batch_size", 32)),
            epochs=int(t.get("epochs", 16)),
            optimizer=str(t.get("optimizer", "adam")),
            learning_rate=float(t.get("learning_rate", 1e-3)),
            momentum=float(t.get("momentum", 0.9)),
            beta1=float(t.get("beta1", 0.9)),
            beta2=float(t.get("beta2", 0.999)),
            eps=float(t.get("eps", 1e-8)),
            seed=int(t.get("seed", 0)),
            level_weights=tuple(float(w) for w in t.get("level_weights", (1, 1, 1))),
            branch_hidden=(None if t.get("branch_hidden") is None
                           else int(t["branch_hidden"])),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"malformed train section: {exc}") from exc


def config_duration(doc: dict) -> int:
    return int(doc["corpus"].get("duration_s", 75))


def config_corpus_seed(doc: dict) -> int:
    return int(doc["corpus"].get("seed", 0))


def config_split_seed(doc: dict) -> int:
    return int(doc["train"].get("split_seed", 0))
