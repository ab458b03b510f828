"""Run configuration: schema, parsing, serialization and presets.

Configurations are JSON objects (the only widely standard key-value
format with nesting in the stdlib).  :func:`parse_config` validates
against the schema below, fills defaults and reports errors with the
dotted path of the offending entry.  :func:`serialize` writes a config
back to canonical JSON such that ``parse_config(serialize(c)) == c``.

Schema (defaults in brackets, * marks required keys)::

    mode*               "micro_fracture" | "macro_fracture"
    macro*
      geometry*         "notched_square" | "cooks_membrane"
      side              plate edge length, notched_square only [500.0]
      elements*         [n] or [n_x, n_y] element counts
    rve*
      side*             unit cell edge length
      elements*         elements per side
      inclusion_radius* radius of the centered circular inclusion
      bc*               "voigt" | "linear_displacement" | "periodic"
    materials*
      matrix*           {alpha, beta, lambda_vol, g_c, length_scale}
      inclusion*        same keys
      macro             {g_c, length_scale}; required in macro_fracture
    load*
      kind*             "displacement_ramp" | "traction_ramp"
      increment*        load factor increment per step
      steps*            number of steps, >= 0
      target_boundary*  "bottom" | "top" | "left" | "right"
      traction          [t_x, t_y] per unit load factor [0, 0]
    freeze_threshold    fluctuation freeze level in (0, 1), or null [null]
    split_mode          "principal" | "isochoric" ["principal"]
    tolerances
      staggered         relative residual tolerance [1e-6]
      micro             cell Newton tolerance [1e-8]
      max_outer         staggered sweep cap [50]
      max_bisect        step bisection cap [4]
    output
      directory         run output directory ["fe2frac-out"]
      snapshot_cadence  steps between snapshots, 0 disables [1]
      rve_dump          list of cell selectors, subset of
                        ["max-deformation", "max-phase"] [[]]
    seed                RNG seed for randomized self checks [0]
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from .constitutive import MaterialParams
from .errors import ConfigError
from .macro import LoadProgram

GEOMETRIES = ("notched_square", "cooks_membrane")
RUN_MODES = ("micro_fracture", "macro_fracture")
BC_MODES = ("voigt", "linear_displacement", "periodic")
SPLIT_MODES = ("principal", "isochoric")
BOUNDARIES = ("bottom", "top", "left", "right")
LOAD_KINDS = ("displacement_ramp", "traction_ramp")
RVE_SELECTORS = ("max-deformation", "max-phase")

_REQUIRED_TOP = ("mode", "macro", "rve", "materials", "load")


@dataclass
class RunConfig:
    """Validated parameters of one two-scale simulation run."""

    mode: str
    macro_geometry: str
    macro_side: float
    macro_elements: tuple
    rve_side: float
    rve_elements: int
    rve_inclusion_radius: float
    rve_bc: str
    matrix: MaterialParams
    inclusion: MaterialParams
    macro_g_c: float | None
    macro_length_scale: float | None
    load: LoadProgram
    traction: tuple
    freeze_threshold: float | None
    split_mode: str
    tol_staggered: float
    tol_micro: float
    max_outer: int
    max_bisect: int
    output_dir: str
    snapshot_cadence: int
    rve_dump: tuple
    seed: int


class _Node:
    """Dict wrapper tracking the dotted path and consumed keys."""

    def __init__(self, data, path=""):
        if not isinstance(data, dict):
            raise ConfigError(f"{path or 'config'}: expected an object")
        self.data = data
        self.path = path
        self.seen = set()

    def _at(self, key):
        return f"{self.path}.{key}" if self.path else key

    def take(self, key, required=True, default=None):
        self.seen.add(key)
        if key not in self.data:
            if required:
                raise ConfigError(f"{self._at(key)}: missing required key")
            return default
        return self.data[key]

    def child(self, key, required=True):
        raw = self.take(key, required=required, default=None)
        if raw is None and not required:
            return None
        return _Node(raw if raw is not None else {}, self._at(key))

    def finish(self):
        unknown = sorted(set(self.data) - self.seen)
        if unknown:
            raise ConfigError(
                f"{self._at(unknown[0])}: unknown key"
                + (f" (and {len(unknown) - 1} more)" if len(unknown) > 1
                   else ""))


def _number(node, key, *, required=True, default=None, positive=False,
            nonnegative=False):
    raw = node.take(key, required=required, default=default)
    path = node._at(key)
    if not isinstance(raw, (int, float)) or isinstance(raw, bool):
        raise ConfigError(f"{path}: expected a number")
    val = float(raw)
    if val != val or val in (float("inf"), float("-inf")):
        raise ConfigError(f"{path}: must be finite")
    if positive and val <= 0.0:
        raise ConfigError(f"{path}: must be positive")
    if nonnegative and val < 0.0:
        raise ConfigError(f"{path}: must be non-negative")
    return val


def _integer(node, key, *, required=True, default=None, minimum=None):
    raw = node.take(key, required=required, default=default)
    path = node._at(key)
    if not isinstance(raw, int) or isinstance(raw, bool):
        raise ConfigError(f"{path}: expected an integer")
    if minimum is not None and raw < minimum:
        raise ConfigError(f"{path}: must be >= {minimum}")
    return raw


def _choice(node, key, options, *, required=True, default=None):
    raw = node.take(key, required=required, default=default)
    if raw not in options:
        raise ConfigError(
            f"{node._at(key)}: expected one of {', '.join(options)}")
    return raw


def _string(node, key, *, required=True, default=None):
    raw = node.take(key, required=required, default=default)
    if not isinstance(raw, str) or not raw:
        raise ConfigError(f"{node._at(key)}: expected a non-empty string")
    return raw


def _material(node, key):
    sub = node.child(key)
    params = MaterialParams(
        alpha=_number(sub, "alpha", positive=True),
        beta=_number(sub, "beta", positive=True),
        lambda_vol=_number(sub, "lambda_vol", positive=True),
        g_c=_number(sub, "g_c", positive=True),
        length_scale=_number(sub, "length_scale", positive=True))
    sub.finish()
    return params


def parse_config(text: str) -> RunConfig:
    """Parse and validate a JSON run configuration.

    Raises
    ------
    ConfigError
        On malformed JSON, missing or unknown keys, or out-of-range
        values; the message names the dotted path of the entry.
    """
    try:
        data = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON ({exc})") from None
    if not data:
        raise ConfigError(
            "config: empty configuration; required keys are "
            + ", ".join(_REQUIRED_TOP))
    root = _Node(data)

    mode = _choice(root, "mode", RUN_MODES)

    macro = root.child("macro")
    geometry = _choice(macro, "geometry", GEOMETRIES)
    if geometry == "notched_square":
        side = _number(macro, "side", required=False, default=500.0,
                       positive=True)
    else:
        # Cook geometry is fixed by its corner points
        if "side" in macro.data:
            raise ConfigError(
                "macro.side: not applicable to cooks_membrane")
        side = 0.0
    raw_elems = macro.take("elements")
    if not isinstance(raw_elems, list) or not raw_elems \
            or len(raw_elems) > 2 \
            or any(not isinstance(v, int) or isinstance(v, bool) or v < 1
                   for v in raw_elems):
        raise ConfigError(
            "macro.elements: expected [n] or [n_x, n_y] positive counts")
    elements = tuple(raw_elems) if len(raw_elems) == 2 \
        else (raw_elems[0], raw_elems[0])
    if geometry == "notched_square":
        if elements[0] != elements[1]:
            raise ConfigError(
                "macro.elements: notched_square needs equal counts")
        if elements[0] % 2:
            raise ConfigError(
                "macro.elements: notched_square needs an even count")
    macro.finish()

    rve = root.child("rve")
    rve_side = _number(rve, "side", positive=True)
    rve_elements = _integer(rve, "elements", minimum=2)
    radius = _number(rve, "inclusion_radius", positive=True)
    if radius >= rve_side / 2.0:
        raise ConfigError(
            "rve.inclusion_radius: must be smaller than side/2")
    rve_bc = _choice(rve, "bc", BC_MODES)
    rve.finish()

    mats = root.child("materials")
    matrix = _material(mats, "matrix")
    inclusion = _material(mats, "inclusion")
    macro_mat = mats.child("macro", required=False)
    if mode == "macro_fracture" and macro_mat is None:
        raise ConfigError(
            "materials.macro: required in macro_fracture mode")
    macro_g_c = macro_length_scale = None
    if macro_mat is not None:
        macro_g_c = _number(macro_mat, "g_c", positive=True)
        macro_length_scale = _number(macro_mat, "length_scale",
                                     positive=True)
        macro_mat.finish()
    mats.finish()

    load = root.child("load")
    kind = _choice(load, "kind", LOAD_KINDS)
    increment = _number(load, "increment")
    steps = _integer(load, "steps", minimum=0)
    target = _choice(load, "target_boundary", BOUNDARIES)
    raw_tr = load.take("traction", required=False, default=[0.0, 0.0])
    if not isinstance(raw_tr, list) or len(raw_tr) != 2 \
            or any(not isinstance(v, (int, float)) or isinstance(v, bool)
                   for v in raw_tr):
        raise ConfigError("load.traction: expected [t_x, t_y]")
    traction = (float(raw_tr[0]), float(raw_tr[1]))
    if kind == "traction_ramp" and traction == (0.0, 0.0):
        raise ConfigError("load.traction: traction_ramp needs a nonzero "
                          "traction")
    load.finish()
    try:
        program = LoadProgram(kind, increment, steps, target)
    except ValueError as exc:
        raise ConfigError(f"load: {exc}") from None

    raw_freeze = root.take("freeze_threshold", required=False, default=None)
    freeze = None
    if raw_freeze is not None:
        if not isinstance(raw_freeze, (int, float)) \
                or isinstance(raw_freeze, bool):
            raise ConfigError("freeze_threshold: expected a number or null")
        freeze = float(raw_freeze)
        if not 0.0 < freeze < 1.0:
            raise ConfigError("freeze_threshold: must lie in (0, 1)")
        if mode != "macro_fracture":
            raise ConfigError(
                "freeze_threshold: only meaningful in macro_fracture mode")

    split_mode = _choice(root, "split_mode", SPLIT_MODES, required=False,
                         default="principal")

    tols = root.child("tolerances", required=False)
    if tols is None:
        tols = _Node({}, "tolerances")
    tol_staggered = _number(tols, "staggered", required=False,
                            default=1e-6, positive=True)
    tol_micro = _number(tols, "micro", required=False, default=1e-8,
                        positive=True)
    max_outer = _integer(tols, "max_outer", required=False, default=50,
                         minimum=1)
    max_bisect = _integer(tols, "max_bisect", required=False, default=4,
                          minimum=0)
    tols.finish()

    out = root.child("output", required=False)
    if out is None:
        out = _Node({}, "output")
    output_dir = _string(out, "directory", required=False,
                         default="fe2frac-out")
    cadence = _integer(out, "snapshot_cadence", required=False, default=1,
                       minimum=0)
    raw_dump = out.take("rve_dump", required=False, default=[])
    if not isinstance(raw_dump, list) \
            or any(v not in RVE_SELECTORS for v in raw_dump) \
            or len(set(raw_dump)) != len(raw_dump):
        raise ConfigError(
            "output.rve_dump: expected a list of distinct selectors from "
            + ", ".join(RVE_SELECTORS))
    out.finish()

    seed = _integer(root, "seed", required=False, default=0, minimum=0)
    root.finish()

    return RunConfig(
        mode=mode, macro_geometry=geometry, macro_side=side,
        macro_elements=elements, rve_side=rve_side,
        rve_elements=rve_elements, rve_inclusion_radius=radius,
        rve_bc=rve_bc, matrix=matrix, inclusion=inclusion,
        macro_g_c=macro_g_c, macro_length_scale=macro_length_scale,
        load=program, traction=traction, freeze_threshold=freeze,
        split_mode=split_mode, tol_staggered=tol_staggered,
        tol_micro=tol_micro, max_outer=max_outer, max_bisect=max_bisect,
        output_dir=output_dir, snapshot_cadence=cadence,
        rve_dump=tuple(raw_dump), seed=seed)


def _material_dict(params: MaterialParams) -> dict:
    return {name: getattr(params, name)
            for name in ("alpha", "beta", "lambda_vol", "g_c",
                         "length_scale")}


def serialize(config: RunConfig) -> str:
    """Canonical JSON text of a config; inverse of :func:`parse_config`."""
    macro = {"geometry": config.macro_geometry,
             "elements": list(config.macro_elements)}
    if config.macro_geometry == "notched_square":
        macro["side"] = config.macro_side
    materials = {"matrix": _material_dict(config.matrix),
                 "inclusion": _material_dict(config.inclusion)}
    if config.macro_g_c is not None:
        materials["macro"] = {"g_c": config.macro_g_c,
                              "length_scale": config.macro_length_scale}
    data = {
        "mode": config.mode,
        "macro": macro,
        "rve": {"side": config.rve_side,
                "elements": config.rve_elements,
                "inclusion_radius": config.rve_inclusion_radius,
                "bc": config.rve_bc},
        "materials": materials,
        "load": {"kind": config.load.kind,
                 "increment": config.load.increment,
                 "steps": config.load.steps,
                 "target_boundary": config.load.target_boundary,
                 "traction": list(config.traction)},
        "freeze_threshold": config.freeze_threshold,
        "split_mode": config.split_mode,
        "tolerances": {"staggered": config.tol_staggered,
                       "micro": config.tol_micro,
                       "max_outer": config.max_outer,
                       "max_bisect": config.max_bisect},
        "output": {"directory": config.output_dir,
                   "snapshot_cadence": config.snapshot_cadence,
                   "rve_dump": list(config.rve_dump)},
        "seed": config.seed,
    }
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def replace(config: RunConfig, **changes) -> RunConfig:
    """Validated copy with fields changed (round-trips the update)."""
    return parse_config(serialize(dataclasses.replace(config, **changes)))


# -- presets --------------------------------------------------------------

# two-material unit cell shared by all benchmark runs: 5 mm cell with a
# centered circular inclusion, matrix ten times stiffer and twice as
# tough as the inclusion
_CELL_SIDE = 5.0
_CELL_RADIUS = 0.9375
_MATRIX = {"alpha": 25.64e3, "beta": 12.82e3, "lambda_vol": 57.69e3,
           "g_c": 2.5e4, "length_scale": 0.15625}
_INCLUSION = {"alpha": 2.56e3, "beta": 1.28e3, "lambda_vol": 5.77e3,
              "g_c": 1.25e4, "length_scale": 0.15625}


def _preset_data(name: str) -> dict:
    shear_load = {"kind": "displacement_ramp", "increment": 0.1,
                  "steps": 366, "target_boundary": "top"}
    rve_full = {"side": _CELL_SIDE, "elements": 64,
                "inclusion_radius": _CELL_RADIUS, "bc": "periodic"}
    rve_desk = {"side": _CELL_SIDE, "elements": 8,
                "inclusion_radius": _CELL_RADIUS, "bc": "periodic"}
    if name == "shear_micro":
        return {
            "mode": "micro_fracture",
            "macro": {"geometry": "notched_square", "side": 500.0,
                      "elements": [128]},
            "rve": rve_full,
            "materials": {"matrix": dict(_MATRIX),
                          "inclusion": dict(_INCLUSION)},
            "load": dict(shear_load),
            "output": {"directory": "out-shear-micro"},
        }
    if name == "shear_macro":
        return {
            "mode": "macro_fracture",
            "macro": {"geometry": "notched_square", "side": 500.0,
                      "elements": [128]},
            "rve": rve_full,
            "materials": {"matrix": dict(_MATRIX),
                          "inclusion": dict(_INCLUSION),
                          "macro": {"g_c": 2.5e4, "length_scale": 1.5625}},
            "load": dict(shear_load, steps=320),
            "freeze_threshold": 0.6,
            "output": {"directory": "out-shear-macro"},
        }
    if name == "cooks_micro":
        return {
            "mode": "micro_fracture",
            "macro": {"geometry": "cooks_membrane", "elements": [32, 16]},
            "rve": rve_full,
            "materials": {"matrix": dict(_MATRIX),
                          "inclusion": dict(_INCLUSION)},
            "load": {"kind": "traction_ramp", "increment": 1.0,
                     "steps": 128, "target_boundary": "right",
                     "traction": [-30.0, 40.0]},
            "output": {"directory": "out-cooks-micro"},
        }
    # desk-scale variants: reduced meshes and step counts that finish in
    # minutes; length scales rescaled to twice the coarse element size
    if name == "shear_micro_desk":
        data = _preset_data("shear_micro")
        data["macro"]["elements"] = [16]
        data["rve"] = rve_desk
        mat_l = 2.0 * _CELL_SIDE / 8
        data["materials"]["matrix"]["length_scale"] = mat_l
        data["materials"]["inclusion"]["length_scale"] = mat_l
        data["load"].update(increment=1.0, steps=20)
        data["output"] = {"directory": "out-shear-micro-desk"}
        return data
    if name == "shear_macro_desk":
        data = _preset_data("shear_macro")
        data["macro"]["elements"] = [16]
        data["rve"] = rve_desk
        data["materials"]["macro"]["length_scale"] = 62.5
        data["load"].update(increment=1.0, steps=20)
        data["output"] = {"directory": "out-shear-macro-desk"}
        return data
    if name == "cooks_micro_desk":
        data = _preset_data("cooks_micro")
        data["macro"]["elements"] = [12, 6]
        data["rve"] = rve_desk
        mat_l = 2.0 * _CELL_SIDE / 8
        data["materials"]["matrix"]["length_scale"] = mat_l
        data["materials"]["inclusion"]["length_scale"] = mat_l
        data["load"].update(steps=16)
        data["output"] = {"directory": "out-cooks-micro-desk"}
        return data
    raise ConfigError(f"config: unknown preset {name!r}; available: "
                      + ", ".join(PRESETS))


PRESETS = ("shear_micro", "shear_macro", "cooks_micro",
           "shear_micro_desk", "shear_macro_desk", "cooks_micro_desk")


def preset(name: str) -> RunConfig:
    """Named benchmark configuration; see :data:`PRESETS`."""
    return parse_config(json.dumps(_preset_data(name)))
