"""Run configuration files and named presets.

A config document is a mapping::

    defaults:   # applied to every scenario (ScenarioConfig fields, nested model/design/comparator)
      n_C: 500
      design: {tau: 0.05}
    scenarios:  # list of partial ScenarioConfig mappings, merged over the defaults
      - name: h0-500-20
        design: {n1: 20}
    fixed_n:    # optional hypothetical one-stage sample size search
      target_power: 0.8
      theta: 0.8473

``preset: <name>`` pulls in a preset document first; everything else in the
file is merged on top of it.
"""

from __future__ import annotations

import copy
import math
from typing import Any

import yaml

from .harness import ESTIMATOR_GRID, ScenarioConfig, ScenarioError

THETA_PLAN = math.log(0.7 / 0.3)
DESK_REPLICATIONS = 10_000
PAPER_REPLICATIONS = 100_000


class ConfigError(ValueError):
    def __init__(self, where: str, message: str):
        super().__init__(f"{where}: {message}")
        self.where = where


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _adaptive_grid(prefix: str, theta: float, sigma: float, tau: float = 0.05, recalc=("planned-effect", "interim-estimate")):
    rows = []
    for mode in recalc:
        tag = "plan" if mode == "planned-effect" else "interim"
        for n_C in (500, 1000):
            for n1 in (20, 25, 30):
                rows.append({
                    "name": f"{prefix}-{tag}-nC{n_C}-n{n1}",
                    "n_C": n_C,
                    "model": {"theta": theta, "sigma": sigma},
                    "design": {"n1": n1, "n2_max": 100 - n1, "M_max": n_C // 100, "tau": tau, "recalc_mode": mode},
                })
    return rows


def _standard_designs():
    rows = []
    for sigma in (0.0, 0.5, 1.0):
        for label, theta in (("h0", 0.0), ("h1", THETA_PLAN)):
            base = {"model": {"theta": theta, "sigma": sigma}}
            rows.append(deep_merge(base, {"name": f"single-arm-{label}-s{sigma:g}",
                                          "comparator": {"kind": "single-arm", "n": 44, "p0": 0.3, "alpha": 0.025}}))
            for analysis in ("z-test", "adjusted-logistic"):
                rows.append(deep_merge(base, {"name": f"rct-{analysis}-{label}-s{sigma:g}",
                                              "comparator": {"kind": "rct", "n_per_arm": 50, "alpha": 0.1, "analysis": analysis}}))
    return rows


def _matching():
    rows = []
    for tau in (0.0, 0.05, 0.1):
        for n_C in (500, 1000):
            for n1 in (20, 25, 30):
                rows.append({
                    "name": f"matching-tau{tau:g}-nC{n_C}-n{n1}",
                    "n_C": n_C,
                    "model": {"theta": THETA_PLAN},
                    "design": {"n1": n1, "n2_max": 100 - n1, "M_max": n_C // 100, "tau": tau},
                })
    return rows


def _misspecified():
    rows = []
    for theta_label, theta in (("or2.15", math.log(2.15)), ("or2.53", math.log(2.53))):
        rows += _adaptive_grid(f"h1-{theta_label}", theta, 0.0)
    return rows


PRESETS: dict[str, dict[str, Any]] = {
    "table2": {"scenarios": _adaptive_grid("h0", 0.0, 0.0),
               "fixed_n": {"target_power": 0.8, "theta": THETA_PLAN, "sigma": 0.0}},
    "table3": {"scenarios": _adaptive_grid("h1", THETA_PLAN, 0.0)},
    "misspecified": {"scenarios": _misspecified()},
    "sigma05": {"scenarios": _adaptive_grid("h1-s0.5", THETA_PLAN, 0.5)},
    "sigma1": {"scenarios": _adaptive_grid("h1-s1", THETA_PLAN, 1.0)},
    "matching": {"scenarios": _matching()},
    "tableA1": {"scenarios": _adaptive_grid("h0-s0.5", 0.0, 0.5)},
    "tableA2": {"scenarios": _adaptive_grid("h0-s1", 0.0, 1.0)},
    "standard_designs": {"scenarios": _standard_designs()},
    "figure3": {"scenarios": [{
        "name": "estimators",
        "n_C": 1000,
        "design": {"n1": 25, "n2_min": 10, "n2_max": 75, "M_max": 10, "theta_stop": -math.inf},
        "theta_grid": list(ESTIMATOR_GRID),
    }]},
}
PRESETS["table6"] = PRESETS["matching"]
PRESETS["estimators"] = PRESETS["figure3"]

# figure 2 is an analytical grid, driven by ``plan``
PLAN_PRESETS = {
    "figure2": {
        "n1_eff": [float(n) for n in range(10, 101, 10)],
        "M": [1, 2, 3, 5, 10],
        "theta": [0.0, THETA_PLAN],
        "theta_stop": math.log(1.3),
        "pi_c": 0.3,
    },
}
PLAN_PRESETS["futility_grid"] = PLAN_PRESETS["figure2"]


def load_document(path: str | None = None, preset: str | None = None) -> dict:
    doc: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            where = f"{path}:{mark.line + 1}" if mark is not None else path
            raise ConfigError(where, f"invalid YAML ({getattr(exc, 'problem', exc)})") from None
        except OSError as exc:
            raise ConfigError(path, str(exc)) from None
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError(path, "top level must be a mapping")
        doc = raw
    name = preset or doc.pop("preset", None)
    doc.pop("preset", None)
    if name is not None:
        if name not in PRESETS:
            raise ConfigError("preset", f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}")
        doc = deep_merge(PRESETS[name], doc)
    unknown = set(doc) - {"defaults", "scenarios", "fixed_n"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown top-level key")
    return doc


def resolve(doc: dict, overrides: dict | None = None) -> list[ScenarioConfig]:
    """Expand a document into validated scenarios; ``overrides`` win over everything."""
    defaults = doc.get("defaults") or {}
    scenarios = doc.get("scenarios")
    if scenarios is None:
        scenarios = [{}]
    if not isinstance(scenarios, list) or not scenarios:
        raise ConfigError("scenarios", "must be a non-empty list")
    out = []
    for k, entry in enumerate(scenarios):
        if not isinstance(entry, dict):
            raise ConfigError(f"scenarios[{k}]", "must be a mapping")
        merged = deep_merge(deep_merge(defaults, entry), overrides or {})
        merged.setdefault("name", f"scenario{k}")
        try:
            out.append(ScenarioConfig.from_dict(merged))
        except ScenarioError as exc:
            raise ConfigError(f"scenarios[{k}].{exc.field}", exc.message) from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"scenarios[{k}]", str(exc)) from None
    return out


def dump_yaml(obj) -> str:
    return yaml.safe_dump(obj, sort_keys=False, default_flow_style=None)
