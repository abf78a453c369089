"""Registry of the built-in scenarios shipped as package data."""

from __future__ import annotations

import json
from importlib import resources
from typing import Mapping

from .scm import EnvironmentFamily, Scm, scm_from_dict

BUILTIN = ("fig2-linear", "fig2-nonlinear", "fig2-action-parents", "trainsize-sweep", "star",
           "irm-b1", "strict-b2", "asm-a2-sweep", "sc-learning", "fig2-classification")


def builtin_names() -> tuple[str, ...]:
    return BUILTIN


def builtin_text(name: str) -> str:
    if name not in BUILTIN:
        raise KeyError(f"no built-in scenario {name!r}; choose from {', '.join(BUILTIN)}")
    return resources.files("pig.scenarios").joinpath(f"{name}.json").read_text(encoding="utf-8")


def builtin_scenario(name: str) -> dict:
    return json.loads(builtin_text(name))


def builtin_model(name: str, params: Mapping[str, float] | None = None) -> tuple[Scm, EnvironmentFamily]:
    """SCM and environment family of a built-in scenario, with optional parameter overrides."""
    d = builtin_scenario(name)
    if "dag" not in d:
        raise KeyError(f"scenario {name!r} defines no model")
    return scm_from_dict(d, params)
