"""Experiment configuration: YAML in, validated ``ExperimentConfig`` out.

A document has the top-level sections ``kind``, ``seed``, ``problem``,
``grid``, ``monte_carlo``, ``solver``, ``experiment`` and ``output``. Every
section is checked against a schema; missing optional keys are filled with
their defaults so that ``parse_config(emit_config(c)) == c``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import yaml

from .errors import ConfigError

KINDS = ("solve", "field", "lp-verify", "stability", "lq", "oracle", "kp-gate")
FAMILIES = ("example1", "gaussian-linear", "affine", "lq", "polynomial")

REQUIRED = object()

# value kinds: num, int, bool, str, vector (number or list of numbers),
# list (list of numbers), profile (number, nested list or {"times", "values"}),
# terms (mapping of b / sigma / f / phi to lists of monomial rows)
_T0T = {"t0": ("num", 0.0), "T": ("num", 1.0)}
_BLOCKS = ("bx", "by", "bz", "b0", "sx", "sy", "sz", "s0", "fx", "fy", "fz", "f0")

PROBLEM_SCHEMAS = {
    "example1": {"a": ("profile", 1.0), "b": ("profile", 0.0), "c": ("profile", 1.0),
                 **_T0T, "xi": ("num", 1.0), "table_steps": ("int", 4096)},
    "gaussian-linear": {"phi_slope": ("num", 1.0), **_T0T, "xi": ("num", 0.0)},
    "affine": {"n": ("int", 1), "m": ("int", 1), **_T0T, "xi": ("vector", 0.0),
               **{k: ("profile", 0.0) for k in _BLOCKS},
               "H": ("profile", 0.0), "h": ("vector", 0.0)},
    "lq": {"n": ("int", 1), "m_u": ("int", 1),
           **{k: ("profile", 0.0) for k in ("A", "B", "C", "D", "Q", "S")},
           "R": ("profile", 1.0), "H": ("profile", 0.0), "h": ("vector", 0.0),
           **{k: ("profile", 0.0) for k in ("b", "sigma", "q", "rho")},
           **_T0T, "delta_R": ("num", 1e-8), "x0": ("vector", 1.0)},
    "polynomial": {"terms": ("terms", REQUIRED), "L": ("num", 0.0), "K": ("num", 0.0),
                   "L_sigma": ("num", 0.0), **_T0T, "xi": ("num", 0.0)},
}

EXPERIMENT_SCHEMAS = {
    "solve": {"xi": ("vector", None), "compare_oracle": ("bool", True)},
    "field": {},
    "lp-verify": {"p": ("num", 2.0), "xis": ("list", [0.0, 1.0, 2.0, 4.0]),
                  "xi": ("num", 1.0), "gaps": ("list", [0.1, 1.0, 10.0]),
                  "kappa_tolerance": ("num", 0.05)},
    "stability": {"p": ("num", 2.0), "xi": ("num", 1.0), "gaps": ("list", [0.1, 1.0, 10.0]),
                  "kappa_tolerance": ("num", 0.05)},
    "lq": {"n_perturbations": ("int", 20), "epsilon": ("num", 0.1), "n_pieces": ("int", 8),
           "certificate_samples": ("int", 10000)},
    "oracle": {"n_steps_list": ("list", [64, 128, 256]), "reference_steps": ("int", None)},
    "kp-gate": {"p": ("num", REQUIRED), "K_upper": ("num", None), "K_lower": ("num", None),
                "L_sigma": ("num", REQUIRED), "K": ("num", REQUIRED),
                "sqrtC1": ("num", None), "C1": ("num", None), "k": ("int", None)},
}

SECTION_SCHEMAS = {
    "grid": {"n_steps": ("int", 64)},
    "monte_carlo": {"n_paths": ("int", 1000)},
    "solver": {"delta_scale": ("num", 0.25), "picard_tol": ("num", 1e-10),
               "picard_max_iter": ("int", 50), "quadrature_nodes": ("int", 10),
               "contraction_guard": ("num", 0.9), "grid_center": ("vector", 0.0),
               "grid_half_width": ("vector", 4.0), "grid_nodes": ("int", 41)},
    "output": {"dir": ("str", None)},
}

TOP_KEYS = ("kind", "seed", "problem", "grid", "monte_carlo", "solver", "experiment", "output")


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    seed: int
    problem: dict | None = None
    grid: dict = field(default_factory=dict)
    monte_carlo: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    experiment: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return self.grid["n_steps"]

    @property
    def n_paths(self) -> int:
        return self.monte_carlo["n_paths"]

    def to_dict(self) -> dict:
        return asdict(self)

    def with_overrides(self, seed=None, n_paths=None, n_steps=None, out=None) -> ExperimentConfig:
        doc = self.to_dict()
        if seed is not None:
            doc["seed"] = seed
        if n_paths is not None:
            doc["monte_carlo"]["n_paths"] = n_paths
        if n_steps is not None:
            doc["grid"]["n_steps"] = n_steps
        if out is not None:
            doc["output"]["dir"] = str(out)
        return validate_config(doc)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _is_nested_nums(v) -> bool:
    if _is_num(v):
        return True
    return isinstance(v, list) and len(v) > 0 and all(_is_nested_nums(e) for e in v)


def _check_value(kind: str, v, where: str):
    if v is None:
        return None
    ok = {
        "num": _is_num(v),
        "int": isinstance(v, int) and not isinstance(v, bool),
        "bool": isinstance(v, bool),
        "str": isinstance(v, str),
        "vector": _is_num(v) or (isinstance(v, list) and len(v) > 0 and all(map(_is_num, v))),
        "list": isinstance(v, list) and len(v) > 0 and all(map(_is_num, v)),
        "profile": _is_nested_nums(v) or (
            isinstance(v, dict) and set(v) == {"times", "values"}
            and isinstance(v["times"], list) and isinstance(v["values"], list)
            and len(v["times"]) == len(v["values"]) > 0
            and all(map(_is_num, v["times"])) and all(map(_is_nested_nums, v["values"]))),
        "terms": isinstance(v, dict) and set(v) <= {"b", "sigma", "f", "phi"} and all(
            isinstance(rows, list) and all(
                isinstance(r, list) and len(r) == (2 if k == "phi" else 4) and all(map(_is_num, r))
                for r in rows)
            for k, rows in v.items()),
    }[kind]
    if not ok:
        raise ConfigError(f"{where} has the wrong type (expected {kind}): {v!r}")
    if kind == "num":
        return float(v)
    if kind in ("vector", "list") and isinstance(v, list):
        return [float(e) if not isinstance(e, bool) else e for e in v]
    if kind == "vector":
        return float(v)
    return v


def _section(doc, schema: dict, where: str) -> dict:
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    for key in doc:
        if key not in schema:
            raise ConfigError(f"unknown key {key!r} in {where}")
    out = {}
    for key, (kind, default) in schema.items():
        if key in doc and doc[key] is not None:
            out[key] = _check_value(kind, doc[key], f"{where}.{key}")
        elif default is REQUIRED:
            raise ConfigError(f"missing required field {where}.{key}")
        else:
            out[key] = list(default) if isinstance(default, list) else default
    return out


def validate_config(doc) -> ExperimentConfig:
    """Validate a parsed document and fill defaults."""
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a mapping at the top level")
    for key in doc:
        if key not in TOP_KEYS:
            raise ConfigError(f"unknown key {key!r} at top level")
    kind = doc.get("kind")
    if kind is None:
        raise ConfigError("missing required field kind")
    if kind not in KINDS:
        raise ConfigError(f"unknown experiment kind {kind!r}; expected one of {', '.join(KINDS)}")
    seed = doc.get("seed")
    if seed is None:
        raise ConfigError("missing required field seed")
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")

    problem = None
    if doc.get("problem") is not None or kind != "kp-gate":
        pdoc = doc.get("problem")
        if pdoc is None:
            raise ConfigError("missing required field problem")
        if not isinstance(pdoc, dict):
            raise ConfigError("section 'problem' must be a mapping")
        for key in pdoc:
            if key not in ("family", "params"):
                raise ConfigError(f"unknown key {key!r} in problem")
        family = pdoc.get("family")
        if family is None:
            raise ConfigError("missing required field problem.family")
        if family not in FAMILIES:
            raise ConfigError(f"unknown problem family {family!r}")
        if kind == "lq" and family != "lq":
            raise ConfigError("kind 'lq' needs problem.family = lq")
        if kind == "oracle" and family not in ("example1", "gaussian-linear"):
            raise ConfigError("kind 'oracle' needs a family with a closed form")
        problem = {"family": family,
                   "params": _section(pdoc.get("params"), PROBLEM_SCHEMAS[family],
                                      "problem.params")}

    sections = {name: _section(doc.get(name), schema, name)
                for name, schema in SECTION_SCHEMAS.items()}
    experiment = _section(doc.get("experiment"), EXPERIMENT_SCHEMAS[kind], "experiment")

    if sections["monte_carlo"]["n_paths"] < 1:
        raise ConfigError("monte_carlo.n_paths must be at least 1")
    if sections["grid"]["n_steps"] < 1:
        raise ConfigError("grid.n_steps must be at least 1")
    if problem is not None and not problem["params"]["T"] > problem["params"]["t0"]:
        raise ConfigError("problem.params.T must exceed problem.params.t0")
    if kind in ("lp-verify", "stability") and experiment["p"] < 1:
        raise ConfigError("experiment.p must be at least 1")
    if kind == "oracle" and any(n < 1 or n != int(n) for n in experiment["n_steps_list"]):
        raise ConfigError("experiment.n_steps_list must hold positive integers")
    if kind == "oracle":
        experiment["n_steps_list"] = [int(n) for n in experiment["n_steps_list"]]
    return ExperimentConfig(kind=kind, seed=seed, problem=problem, experiment=experiment,
                            **sections)


def parse_config(text: str) -> ExperimentConfig:
    """Parse a YAML document; syntax errors report line and column."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        reason = getattr(exc, "problem", None) or str(exc)
        raise ConfigError(f"malformed configuration{where}: {reason}") from None
    return validate_config(doc)


def emit_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False, default_flow_style=None)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
