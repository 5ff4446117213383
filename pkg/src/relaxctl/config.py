"""JSON experiment configuration: schema, validation and problem construction."""

from __future__ import annotations

import hashlib
import json
import math
from typing import Any

import jsonschema
import numpy as np

from . import builtins
from .core import (
    Coefficients,
    ControlSet,
    Jump,
    Mode,
    Problem,
    RewardSpec,
    StateLattice,
    TimeGrid,
    constant,
    linear_drift,
    table_by_atom,
)

SCHEMA_VERSION = 1

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_posint = {"type": "integer", "minimum": 1}
_nonnegint = {"type": "integer", "minimum": 0}
_vec = {"type": "array", "items": _num, "minItems": 1}
_mat = {"type": "array", "items": _vec, "minItems": 1}
_nested = {"type": "array", "minItems": 1}


def _params(**props) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False}


_BUILTIN_PARAMS = {
    "lq": _params(A=_num, B=_num, sigma=_nonneg, q=_nonneg, r=_pos, p=_nonneg, T=_pos, n_steps=_posint, x0=_num,
                  half_width=_pos, h=_pos, u_max=_pos, n_atoms=_posint),
    "jump-lq": _params(A=_num, B=_num, sigma=_nonneg, q=_nonneg, r=_pos, p=_nonneg, T=_pos, n_steps=_posint, x0=_num,
                       half_width=_pos, h=_pos, u_max=_pos, n_atoms=_posint, jump_rate=_nonneg, jump_size=_num),
    "drift-bang": _params(sigma=_nonneg, T=_pos, n_steps=_posint, x0=_num, half_width=_pos, h=_pos),
    "put-stop": _params(strike=_num, decay=_num, sigma=_pos, T=_pos, n_steps=_posint, x0=_num, half_width=_pos),
    "tie": _params(n_steps=_posint, half_width=_posint),
    "small-random": _params(seed=_nonnegint, n_steps=_posint, n_states={"type": "integer", "minimum": 2},
                            n_atoms=_posint, mode={"enum": [m.value for m in Mode]}, x0_node=_nonnegint,
                            with_jump={"type": "boolean"}),
}

_FIELD = {
    "type": "object",
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["constant", "linear", "table", "lq", "put"]},
        "value": {},
        "A": _mat, "B": _mat, "c": _vec,
        "values": _nested,
        "q": _nonneg, "r": _nonneg, "p": _nonneg,
        "strike": _num, "decay": _num,
    },
    "additionalProperties": False,
}

_CUSTOM = {
    "type": "object",
    "required": ["grid", "lattice", "controls", "drift", "diffusion", "running", "terminal", "x0"],
    "properties": {
        "grid": {"type": "object", "required": ["T", "n_steps"], "additionalProperties": False,
                 "properties": {"t0": _num, "T": _num, "n_steps": _posint}},
        "lattice": {"type": "object", "required": ["lower", "upper", "h"], "additionalProperties": False,
                    "properties": {"lower": _vec, "upper": _vec, "h": {"type": "array", "items": _pos, "minItems": 1}}},
        "controls": {"type": "object", "required": ["atoms"], "additionalProperties": False,
                     "properties": {"atoms": {"type": "array", "minItems": 1}, "labels": {"type": "array",
                                                                                         "items": {"type": "string"}}}},
        "mode": {"enum": [m.value for m in Mode]},
        "x0": _vec,
        "drift": _FIELD,
        "diffusion": _FIELD,
        "jumps": {"type": "array", "items": {"type": "object", "required": ["rate", "z"], "additionalProperties": False,
                                             "properties": {"rate": _FIELD, "z": _vec}}},
        "running": _FIELD,
        "terminal": _FIELD,
        "stopping": _FIELD,
        "name": {"type": "string"},
    },
    "additionalProperties": False,
}

_PROBLEM = {
    "oneOf": [
        {
            "type": "object",
            "required": ["builtin"],
            "properties": {"builtin": {"enum": sorted(builtins.BUILTINS)}, "params": {"type": "object"}},
            "additionalProperties": False,
            "allOf": [
                {"if": {"properties": {"builtin": {"const": name}}}, "then": {"properties": {"params": schema}}}
                for name, schema in _BUILTIN_PARAMS.items()
            ],
        },
        {
            "type": "object",
            "required": ["custom"],
            "properties": {"custom": _CUSTOM},
            "additionalProperties": False,
        },
    ]
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["version", "problem"],
    "properties": {
        "version": {"const": SCHEMA_VERSION},
        "problem": _PROBLEM,
        "out": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
        "n_paths": _posint,
        "policy": {"oneOf": [{"const": "solved"}, _nonnegint]},
        "n_tau": _posint,
        "n_mixtures": _posint,
        "n_sub": {"type": "array", "items": _posint, "minItems": 1},
        "substeps": _posint,
        "young": {"type": "array", "items": {"type": "array", "items": _nonneg, "minItems": 1}, "minItems": 1},
        "n_testfns": _posint,
        "pairs": {"type": "array", "items": {"type": "array", "items": _nonnegint, "minItems": 2, "maxItems": 2}},
        "z_max": _pos,
        "compensator_scale": _num,
        "richardson": {"type": "boolean"},
        "n_rounds": _posint,
        "n_record": _nonnegint,
        "tolerances": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"dpp": _nonneg, "vertex": _nonneg, "tie": _nonneg, "compare_rel": _nonneg,
                           "z_band": _pos},
        },
    },
    "additionalProperties": False,
}

DEFAULTS = {
    "out": "out",
    "seed": 0,
    "n_paths": 1000,
    "policy": "solved",
    "n_tau": 20,
    "n_mixtures": 100,
    "n_sub": [2, 4, 8, 16, 32],
    "substeps": 1,
    "n_testfns": 8,
    "z_max": 4.0,
    "compensator_scale": 1.0,
    "richardson": True,
    "n_rounds": 64,
    "n_record": 10,
    "tolerances": {"dpp": 1e-10, "vertex": 1e-12, "tie": 1e-10, "compare_rel": 0.02, "z_band": 3.0},
}


class ConfigError(ValueError):
    """Schema violation; ``path`` is the dotted location of the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def _path(err) -> str:
    parts = ["config"] + [f"[{p}]" if isinstance(p, int) else p for p in err.absolute_path]
    return ".".join(parts).replace(".[", "[")


def validate(cfg: Any) -> dict:
    """Validate against the schema and fill defaults; raises ConfigError naming the field."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: (len(list(e.absolute_path)), list(map(str, e.absolute_path))))
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        # oneOf failures hide the useful leaf; descend to the deepest context error
        while err.context:
            err = max(err.context, key=lambda e: len(list(e.absolute_path)))
        raise ConfigError(_path(err), err.message)
    out = json.loads(json.dumps(DEFAULTS))
    for k, v in cfg.items():
        if k == "tolerances":
            out[k].update(v)
        else:
            out[k] = v
    return out


def load(path: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"not valid JSON: {exc}") from None
    return cfg


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _field(spec: dict, where: str, lattice: StateLattice, atoms: np.ndarray, shape: tuple, role: str):
    kind = spec["kind"]
    if kind == "constant":
        if "value" not in spec:
            raise ConfigError(where, "constant needs 'value'")
        value = np.asarray(spec["value"], dtype=float)
        if role == "drift":
            return constant(np.broadcast_to(value, shape), shape)
        if role == "diffusion":
            return constant(np.broadcast_to(value, shape), shape)
        if role == "rate":
            return constant(float(value), ())
        if role == "running":
            return lambda t, x, u, c=float(value): np.full(len(x), c)
        if role == "terminal":
            return lambda x, c=float(value): np.full(len(x), c)
        if role == "stopping":
            return lambda t, x, c=float(value): np.full(len(x), c)
    if kind == "linear" and role == "drift":
        if "A" not in spec or "B" not in spec:
            raise ConfigError(where, "linear drift needs 'A' and 'B'")
        return linear_drift(spec["A"], spec["B"], spec.get("c"))
    if kind == "table":
        if "values" not in spec:
            raise ConfigError(where, "table needs 'values'")
        vals = np.asarray(spec["values"], dtype=float)
        N, K = lattice.n_nodes, len(atoms)
        if role in ("drift", "diffusion", "rate", "running"):
            want = (N, K) + shape
            if vals.shape != want:
                raise ConfigError(where + ".values", f"shape {vals.shape} != expected {want} (node, atom, ...)")
            return table_by_atom(lattice, atoms, vals)
        if role == "terminal":
            if vals.shape != (N,):
                raise ConfigError(where + ".values", f"shape {vals.shape} != expected ({N},)")
            return lambda x: vals[lattice.nearest(x)]
        if role == "stopping":
            return vals  # resolved against the grid by the caller
    if kind == "lq" and role in ("running", "terminal"):
        q, r, p = float(spec.get("q", 1.0)), float(spec.get("r", 1.0)), float(spec.get("p", 1.0))
        if role == "running":
            return lambda t, x, u: -(q * np.sum(x ** 2, axis=1) + r * np.sum(u ** 2, axis=1))
        return lambda x: -p * np.sum(x ** 2, axis=1)
    if kind == "put" and role == "stopping":
        strike, decay = float(spec.get("strike", 0.0)), float(spec.get("decay", 0.0))
        return lambda t, x: (1.0 - decay * t) * np.maximum(strike - x[:, 0], 0.0)
    raise ConfigError(where + ".kind", f"kind {kind!r} is not available for {role}")


def _custom(spec: dict) -> Problem:
    g = spec["grid"]
    grid = TimeGrid(float(g.get("t0", 0.0)), float(g["T"]), int(g["n_steps"]))
    lat_s = spec["lattice"]
    lattice = StateLattice(tuple(lat_s["lower"]), tuple(lat_s["upper"]), tuple(lat_s["h"]))
    d = lattice.dim
    atoms_raw = np.asarray(spec["controls"]["atoms"], dtype=float)
    labels = spec["controls"].get("labels")
    controls = ControlSet(atoms_raw, tuple(labels) if labels else None)
    atoms = controls.atoms
    base = "config.problem.custom"
    drift = _field(spec["drift"], f"{base}.drift", lattice, atoms, (d,), "drift")
    diffusion = _field(spec["diffusion"], f"{base}.diffusion", lattice, atoms, (d, d), "diffusion")
    jumps = []
    for j, js in enumerate(spec.get("jumps", [])):
        if len(js["z"]) != d:
            raise ConfigError(f"{base}.jumps[{j}].z", f"length {len(js['z'])} != state dimension {d}")
        jumps.append(Jump(_field(js["rate"], f"{base}.jumps[{j}].rate", lattice, atoms, (), "rate"), js["z"]))
    running = _field(spec["running"], f"{base}.running", lattice, atoms, (), "running")
    terminal = _field(spec["terminal"], f"{base}.terminal", lattice, atoms, (), "terminal")
    stopping = None
    if "stopping" in spec:
        stopping = _field(spec["stopping"], f"{base}.stopping", lattice, atoms, (), "stopping")
        if isinstance(stopping, np.ndarray):
            table = stopping
            if table.shape != (grid.n_steps + 1, lattice.n_nodes):
                raise ConfigError(f"{base}.stopping.values",
                                  f"shape {table.shape} != expected ({grid.n_steps + 1}, {lattice.n_nodes})")

            def stopping(t, x, table=table):
                i = int(round((t - grid.t0) / grid.dt))
                return table[i, lattice.nearest(x)]
    mode = Mode(spec.get("mode", "control-only"))
    if mode != Mode.CONTROL and stopping is None:
        raise ConfigError(f"{base}.stopping", f"mode {mode.value!r} needs a stopping reward")
    if len(spec["x0"]) != d:
        raise ConfigError(f"{base}.x0", f"length {len(spec['x0'])} != state dimension {d}")
    # every coefficient kind above is time independent
    coeffs = Coefficients(drift, diffusion, tuple(jumps), time_homogeneous=True)
    rewards = RewardSpec(running, terminal, stopping)
    return Problem(grid, lattice, controls, coeffs, rewards, mode, tuple(spec["x0"]), spec.get("name", "custom"))


def build_problem(cfg: dict) -> Problem:
    spec = cfg["problem"]
    try:
        if "builtin" in spec:
            return builtins.make(spec["builtin"], **spec.get("params", {}))
        return _custom(spec["custom"])
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError("config.problem", str(exc)) from None


def fmt(x) -> str:
    """17-significant-digit float text; integers and non-floats pass through ``str``."""
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return f"{x:.17g}"
    return str(x)


def dumps(obj, indent: int = 2, _level: int = 0) -> str:
    """Deterministic JSON with floats at 17 significant digits; non-finite floats become null."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}" for k, v in sorted(obj.items())]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        return "[\n" + ",\n".join(pad + dumps(v, indent, _level + 1) for v in seq) + "\n" + end + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return fmt(obj) if math.isfinite(obj) else "null"
    if obj is None:
        return "null"
    return json.dumps(str(obj))
