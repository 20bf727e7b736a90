"""Run configuration: INI files with one section per concern.

Layout::

    [scenario]   n_cavs, rate, v0_min, v0_max, seed, mode, n_obs,
                 obs_noise, gt_c1, gt_c2, entry_margin
    [safety]     t_h, gamma, varphi, v_min, v_max, u_min, u_max, p_z,
                 P_e, P_f, P_g
    [output]     out_dir, sample_period
    [path:<id>]  length, weight, conflicts = <cid>@<distance>, ...

Validation collects every problem and reports the file line where possible.
"""

from __future__ import annotations

import configparser
import io
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .coordination import IntersectionLayout, PathGeometry, SafetyConfig
from .errors import ConfigError, DomainError
from .sim import GroundTruthDeviation, ScenarioConfig
from .trajectory import MotionLimits
from .uncertainty import Levels, VP_MIN_Z

SCENARIO_KEYS = {
    "n_cavs": int, "rate": float, "v0_min": float, "v0_max": float, "seed": int,
    "mode": str, "n_obs": int, "obs_noise": float, "gt_c1": float, "gt_c2": float,
    "entry_margin": float,
}
SAFETY_KEYS = {
    "t_h": float, "gamma": float, "varphi": float, "v_min": float, "v_max": float,
    "u_min": float, "u_max": float, "p_z": float, "P_e": float, "P_f": float, "P_g": float,
}
OUTPUT_KEYS = {"out_dir": str, "sample_period": float}
PATH_KEYS = {"length": float, "weight": float, "conflicts": str}
SCENARIO_DEFAULTS = {
    "n_cavs": "24", "rate": "3600", "v0_min": "12", "v0_max": "14", "seed": "0",
    "mode": "robust", "n_obs": "50", "obs_noise": "0.005", "gt_c1": "0.012",
    "gt_c2": "1.5", "entry_margin": "1.0",
}
OUTPUT_DEFAULTS = {"out_dir": "out", "sample_period": "0.1"}
MODES = ("deterministic", "robust")


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioConfig
    out_dir: Path
    sample_period: float
    raw: dict

    def to_ini(self) -> str:
        return dump_ini(self.raw)


def default_config_text() -> str:
    return resources.files("robocoord").joinpath("default.ini").read_text()


def _line_index(text):
    """Map (section, key) -> line number, and section -> header line."""
    where, section = {}, None
    for n, line in enumerate(text.splitlines(), start=1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            where[(section, None)] = n
            continue
        m = re.match(r"\s*([^=:#;\s][^=:]*?)\s*[=:]", line)
        if m and section is not None:
            where[(section, m.group(1).strip())] = n
    return where


def _parser():
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keys are case-sensitive (P_e)
    return cp


def parse_text(text: str, source: str = "<config>", overrides: dict | None = None) -> RunConfig:
    cp = _parser()
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError([f"{source}: {exc}".replace("\n", " ")]) from None
    lines = _line_index(text)
    problems = []

    def loc(section, key=None):
        n = lines.get((section, key)) or lines.get((section, None))
        return f"{source}:{n}" if n else source

    raw = {}
    for name, keys, defaults in (("scenario", SCENARIO_KEYS, SCENARIO_DEFAULTS),
                                 ("safety", SAFETY_KEYS, {}),
                                 ("output", OUTPUT_KEYS, OUTPUT_DEFAULTS)):
        sec = dict(cp[name]) if cp.has_section(name) else {}
        if not cp.has_section(name) and not defaults:
            problems.append(f"{source}: missing section [{name}]")
        for key in sec:
            if key not in keys:
                problems.append(f"{loc(name, key)}: unknown key '{key}' in [{name}]")
        vals = {}
        for key, typ in keys.items():
            if key in sec:
                vals[key] = sec[key]
            elif key in defaults:
                vals[key] = defaults[key]
            elif cp.has_section(name):
                problems.append(f"{loc(name)}: missing required key '{key}' in [{name}]")
        raw[name] = vals

    for key, value in (overrides or {}).items():
        section, _, k = key.rpartition(".")
        raw.setdefault(section, {})[k] = str(value)

    paths = [s for s in cp.sections() if s.startswith("path:")]
    for s in cp.sections():
        if s not in ("scenario", "safety", "output") and not s.startswith("path:"):
            problems.append(f"{loc(s)}: unknown section [{s}]")
    if not paths:
        problems.append(f"{source}: no [path:<id>] sections")
    for s in paths:
        sec = dict(cp[s])
        for key in sec:
            if key not in PATH_KEYS:
                problems.append(f"{loc(s, key)}: unknown key '{key}' in [{s}]")
        if "length" not in sec:
            problems.append(f"{loc(s)}: missing required key 'length' in [{s}]")
        raw[s] = {k: v for k, v in sec.items() if k in PATH_KEYS}

    typed = {}
    for name, keys in (("scenario", SCENARIO_KEYS), ("safety", SAFETY_KEYS), ("output", OUTPUT_KEYS)):
        typed[name] = {}
        for key, value in raw.get(name, {}).items():
            typ = keys.get(key)
            if typ is None:
                problems.append(f"{source}: unknown override '{name}.{key}'")
                continue
            try:
                typed[name][key] = typ(value)
            except ValueError:
                problems.append(f"{loc(name, key)}: '{key}' must be {typ.__name__}, got {value!r}")
    if problems:
        raise ConfigError(problems)

    sc, sf, out = typed["scenario"], typed["safety"], typed["output"]

    def need(cond, section, key, msg):
        if not cond:
            problems.append(f"{loc(section, key)}: {msg}")

    need(sc["mode"] in MODES, "scenario", "mode", f"mode must be one of {MODES}")
    need(sc["n_cavs"] >= 1, "scenario", "n_cavs", "n_cavs must be >= 1")
    need(sc["rate"] > 0, "scenario", "rate", "rate must be positive")
    need(0 < sc["v0_min"] <= sc["v0_max"], "scenario", "v0_min", "need 0 < v0_min <= v0_max")
    need(sc["n_obs"] >= 2, "scenario", "n_obs", "n_obs must be >= 2")
    need(sc["obs_noise"] >= 0, "scenario", "obs_noise", "obs_noise must be >= 0")
    need(sc["entry_margin"] >= 0, "scenario", "entry_margin", "entry_margin must be >= 0")
    need(sc["gt_c1"] >= 0 and sc["gt_c2"] > 0, "scenario", "gt_c1", "need gt_c1 >= 0 and gt_c2 > 0")
    for key in ("t_h", "gamma", "varphi", "p_z"):
        need(sf[key] > 0, "safety", key, f"{key} must be positive")
    need(sf["u_min"] < 0 < sf["u_max"], "safety", "u_min", "need u_min < 0 < u_max")
    need(0 < sf["v_min"] < sf["v_max"], "safety", "v_min", "need 0 < v_min < v_max")
    need(sf["v_min"] <= sc["v0_min"] and sc["v0_max"] <= sf["v_max"], "scenario", "v0_min",
         "entry speeds must lie inside [v_min, v_max]")
    for key in ("P_e", "P_f", "P_g"):
        need(0 < sf[key] < 1, "safety", key, f"{key} must lie in (0, 1)")
    if 0 < sf["P_g"] < 1:
        need((4.0 / (9.0 * (1.0 - sf["P_g"]))) ** 0.5 > VP_MIN_Z, "safety", "P_g",
             "P_g must exceed 5/6 for the Vysochanskii-Petunin bound")
    need(out["sample_period"] > 0, "output", "sample_period", "sample_period must be positive")

    geoms, weights = {}, {}
    for s in paths:
        pid = s.split(":", 1)[1].strip()
        sec = raw[s]
        try:
            length = float(sec["length"])
            weight = float(sec.get("weight", "1"))
            conflicts = _parse_conflicts(sec.get("conflicts", ""))
        except ValueError as exc:
            problems.append(f"{loc(s)}: {exc}")
            continue
        need(weight > 0, s, "weight", "weight must be positive")
        need(sf["p_z"] < length, s, "length", f"p_z={sf['p_z']} must be below the path length {length}")
        try:
            geoms[pid] = PathGeometry(pid, length, tuple(sorted(conflicts, key=lambda c: c[1])))
        except DomainError as exc:
            problems.append(f"{loc(s, 'conflicts')}: {exc}")
        weights[pid] = weight
    if problems:
        raise ConfigError(problems)
    try:
        layout = IntersectionLayout(geoms)
    except DomainError as exc:
        raise ConfigError([f"{source}: {exc}"]) from None

    safety = SafetyConfig(
        t_h=sf["t_h"], gamma=sf["gamma"], varphi=sf["varphi"],
        limits=MotionLimits(sf["u_min"], sf["u_max"], sf["v_min"], sf["v_max"]),
        p_z=sf["p_z"], levels=Levels(sf["P_e"], sf["P_f"], sf["P_g"]),
    )
    scenario = ScenarioConfig(
        safety=safety, layout=layout, n_cavs=sc["n_cavs"], rate=sc["rate"],
        path_weights=weights, v0_range=(sc["v0_min"], sc["v0_max"]), seed=sc["seed"],
        mode=sc["mode"], n_obs=sc["n_obs"], obs_noise=sc["obs_noise"],
        ground_truth=GroundTruthDeviation(sc["gt_c1"], sc["gt_c2"]),
        entry_margin=sc["entry_margin"], sample_period=out["sample_period"],
    )
    return RunConfig(scenario, Path(out["out_dir"]), out["sample_period"], raw)


def _parse_conflicts(text):
    out = []
    for item in filter(None, (x.strip() for x in text.split(","))):
        cid, sep, dist = item.partition("@")
        if not sep or not cid.strip():
            raise ValueError(f"conflict entry {item!r} must look like <id>@<distance>")
        out.append((cid.strip(), float(dist)))
    return out


def load(path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([f"{path}: {exc.strerror}"]) from None
    return parse_text(text, str(path), overrides)


def dump_ini(raw: dict) -> str:
    """Normalized INI text; parsing it again gives the same config."""
    cp = _parser()
    order = ["scenario", "safety", "output"] + sorted(k for k in raw if k.startswith("path:"))
    for name in order:
        if name in raw:
            cp[name] = {k: str(v) for k, v in raw[name].items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
