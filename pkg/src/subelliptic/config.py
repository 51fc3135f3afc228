"""Frame files and run configurations: sectioned ``key = value`` text.

Frame file::

    [frame]
    kind = Metivier
    n = 1
    m = 1
    [J]
    j1 = 0, 1, -1, 0

Run configuration (every key may also be given as a command-line flag, which wins)::

    [run]
    command = ubound
    frame = h1
    family = Mixed
    out = results
    [params]
    p = 4
    q = 2
"""

from __future__ import annotations

import configparser
import hashlib
import json
import os
import re
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import frames
from .errors import ParseError, RangeError, UnknownKey

COMMANDS = ("norm-check", "sample", "ibp", "ubound", "hardy", "spi-fit", "certificate", "spectrum")

BUILTIN_FRAMES = {
    "h1": frames.heisenberg,
    "heisenberg": frames.heisenberg,
    "quaternionic": frames.quaternionic,
}

# section -> key -> parser
_STR, _INT, _FLOAT = str, int, float


def _floats(text):
    return tuple(float(v) for v in str(text).replace(";", ",").split(",") if v.strip())


def _flag(text):
    if isinstance(text, bool):
        return text
    val = str(text).strip().lower()
    if val not in ("true", "false", "1", "0", "yes", "no"):
        raise ValueError(val)
    return val in ("true", "1", "yes")


def _ints(text):
    return tuple(int(v) for v in str(text).split(",") if v.strip())


SCHEMA = {
    "run": {"command": _STR, "frame": _STR, "family": _STR, "out": _STR, "samples": _STR, "seed": _INT,
            "threads": _INT, "operator": _STR, "variant": _STR, "potential": _STR, "dump": _flag},
    "params": {"p": _FLOAT, "q": _FLOAT, "r": _FLOAT, "gamma": _FLOAT, "zeta": _FLOAT, "eps": _FLOAT,
               "eps_grid": _floats, "tol": _FLOAT, "n": _INT, "grid": _ints, "box": _floats, "k": _INT,
               "points": _INT},
}


def _parser():
    cp = configparser.ConfigParser(strict=True, interpolation=None, delimiters=("=",),
                                   comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
    cp.optionxform = str  # keys are case sensitive
    return cp


def _locate(text, needle):
    for i, line in enumerate(text.splitlines(), 1):
        col = line.find(needle)
        if col >= 0:
            return i, col + 1
    return 0, 0


def read_sections(text, source="<string>"):
    """Parse sectioned key = value text; errors carry line and column."""
    cp = _parser()
    try:
        cp.read_string(text, source=source)
    except configparser.DuplicateOptionError as exc:
        raise ParseError(f"{source}:{exc.lineno}:1: duplicate key {exc.option!r} in section [{exc.section}]") from exc
    except configparser.DuplicateSectionError as exc:
        raise ParseError(f"{source}:{exc.lineno}:1: duplicate section [{exc.section}]") from exc
    except configparser.MissingSectionHeaderError as exc:
        raise ParseError(f"{source}:{exc.lineno}:1: key outside any [section]") from exc
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else 0
        raise ParseError(f"{source}:{line}:1: expected 'key = value'") from exc
    return {s: dict(cp.items(s)) for s in cp.sections()}


# ---------------------------------------------------------------------------
# frame files


def parse_frame(text, source="<frame>") -> frames.FrameSpec:
    sections = read_sections(text, source)
    if "frame" not in sections:
        raise ParseError(f"{source}:1:1: missing [frame] section")
    fr = sections["frame"]
    allowed = {"kind", "n", "m", "gamma", "zeta"}
    for key in fr:
        if key not in allowed:
            line, col = _locate(text, key)
            raise UnknownKey(f"{source}:{line}:{col}: unknown frame key {key!r}")
    for name in sections:
        if name not in ("frame", "J"):
            raise UnknownKey(f"unknown section [{name}] in {source}")
    try:
        kind = frames.Kind.parse(fr["kind"])
        n = int(fr["n"])
        m = int(fr["m"]) if "m" in fr else None
        gamma = float(fr["gamma"]) if "gamma" in fr else None
        zeta = float(fr["zeta"]) if "zeta" in fr else None
    except KeyError as exc:
        raise ParseError(f"{source}: missing frame key {exc.args[0]!r}") from exc
    except ValueError as exc:
        raise ParseError(f"{source}: {exc}") from exc
    J = None
    if kind is frames.Kind.METIVIER:
        rows = sections.get("J", {})
        if m is None:
            raise ParseError(f"{source}: Metivier frames need m")
        J = []
        for k in range(1, m + 1):
            key = f"j{k}"
            if key not in rows:
                raise ParseError(f"{source}: missing J matrix {key!r} in [J]")
            vals = _floats(rows[key])
            if len(vals) != (2 * n) ** 2:
                line, col = _locate(text, key)
                raise ParseError(f"{source}:{line}:{col}: {key} needs {(2 * n) ** 2} entries, got {len(vals)}")
            J.append(np.reshape(vals, (2 * n, 2 * n)))
        extra = set(rows) - {f"j{k}" for k in range(1, m + 1)}
        if extra:
            raise UnknownKey(f"{source}: unexpected J keys {sorted(extra)}")
    return frames.build_frame(kind, n, m, J=J, gamma=gamma, zeta=zeta)


def format_frame(frame: frames.FrameSpec) -> str:
    """Inverse of parse_frame."""
    d = frame.describe()
    lines = ["[frame]", f"kind = {d['kind']}", f"n = {d['n']}", f"m = {d['m']}"]
    for key in ("gamma", "zeta"):
        if key in d:
            lines.append(f"{key} = {d[key]!r}")
    if frame.J is not None:
        lines.append("[J]")
        for k, mat in enumerate(frame.J, 1):
            lines.append(f"j{k} = " + ", ".join(repr(float(v)) for v in np.ravel(mat)))
    return "\n".join(lines) + "\n"


def load_frame(ref) -> frames.FrameSpec:
    """A frame from a file path or a builtin name (h1, quaternionic, grushin:<gamma>, hg:<zeta>)."""
    if isinstance(ref, frames.FrameSpec):
        return ref
    ref = str(ref)
    if os.path.exists(ref):
        with open(ref, encoding="utf-8") as fh:
            return parse_frame(fh.read(), ref)
    key = ref.lower()
    if key in BUILTIN_FRAMES:
        return BUILTIN_FRAMES[key]()
    match = re.fullmatch(r"(grushin|hg):([0-9.eE+-]+)", key)
    if match:
        val = float(match.group(2))
        return frames.grushin(1, 1, val) if match.group(1) == "grushin" else frames.heisenberg_greiner(1, val)
    raise ParseError(f"frame {ref!r} is neither a file nor a builtin name")


def resolve_frame(cfg) -> frames.FrameSpec:
    """The frame of a run: a file, a builtin name, or bare grushin / hg with gamma / zeta params."""
    key = str(cfg.frame).lower()
    if key == "grushin" and not os.path.exists(cfg.frame):
        return frames.grushin(1, 1, cfg.params.get("gamma", 1.0))
    if key == "hg" and not os.path.exists(cfg.frame):
        return frames.heisenberg_greiner(1, cfg.params.get("zeta", 1.0))
    return load_frame(cfg.frame)


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    command: str
    frame: str = "h1"
    family: Optional[str] = None
    out: str = "results"
    samples: Optional[str] = None
    seed: int = 0
    threads: int = 1
    operator: str = "both"
    variant: str = "dimfree"
    potential: str = "log"
    dump: bool = False
    params: dict = field(default_factory=dict)

    def canonical(self) -> dict:
        """Everything that determines the payload (not the output directory or thread count)."""
        d = asdict(self)
        d.pop("out")
        d.pop("threads")
        d.pop("dump")
        d["frame_digest"] = resolve_frame(self).digest()
        d["params"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(self.params.items())}
        return d

    def digest(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def get(self, key, default=None):
        return self.params.get(key, default)


def _convert(section, key, value, source):
    try:
        kind = SCHEMA[section][key]
    except KeyError:
        raise UnknownKey(f"{source}: unknown key {key!r} in section [{section}]") from None
    if value is None:
        return None
    if isinstance(value, (tuple, list)):
        value = ",".join(map(str, value))
    try:
        return kind(value)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{source}: bad value for {key!r}: {value!r}") from exc


def build_config(file_values: dict, overrides: dict, source="<flags>") -> RunConfig:
    """Merge file sections with flag overrides (flags win) and validate."""
    merged = {"run": {}, "params": {}}
    for section, values in file_values.items():
        if section not in SCHEMA:
            raise UnknownKey(f"{source}: unknown section [{section}]")
        for key, value in values.items():
            merged[section][key] = _convert(section, key, value, source)
    for key, value in overrides.items():
        if value is None:
            continue
        section = "run" if key in SCHEMA["run"] else "params" if key in SCHEMA["params"] else None
        if section is None:
            raise UnknownKey(f"unknown option {key!r}")
        merged[section][key] = _convert(section, key, value, "<flags>")
    run = merged["run"]
    if "command" not in run:
        raise ParseError(f"{source}: no command given")
    cfg = RunConfig(params=merged["params"], **run)
    validate(cfg)
    return cfg


def load_config(path=None, overrides=None) -> RunConfig:
    """Read a config file (optional) and apply flag overrides."""
    values = {}
    source = "<flags>"
    if path:
        if not os.path.exists(path):
            raise ParseError(f"config file {path!r} does not exist")
        with open(path, encoding="utf-8") as fh:
            values = read_sections(fh.read(), path)
        source = path
    return build_config(values, overrides or {}, source)


def _range(ok, msg):
    if not ok:
        raise RangeError(msg)


def validate(cfg: RunConfig):
    """Checks that need no computation: command, paths and parameter ranges."""
    _range(cfg.command in COMMANDS, f"unknown command {cfg.command!r}; expected one of {', '.join(COMMANDS)}")
    if cfg.samples is not None and not os.path.exists(cfg.samples):
        raise ParseError(f"samples file {cfg.samples!r} does not exist")
    frame = resolve_frame(cfg)
    prm = cfg.params
    p, q = prm.get("p"), prm.get("q")
    _range(cfg.threads >= 1, "threads must be >= 1")
    if cfg.command != "norm-check":
        _range(p is not None, "parameter p is required")
    if p is not None:
        if frame.kind is frames.Kind.METIVIER:
            _range(p > 2, f"need p > 2 on Metivier frames, got p = {p:g}")
        elif frame.kind is frames.Kind.GRUSHIN:
            _range(p > frame.gamma + 1, f"need p > gamma + 1 = {frame.gamma + 1:g}, got p = {p:g}")
        else:
            _range(p > 2 * frame.zeta, f"need p > 2 zeta = {2 * frame.zeta:g}, got p = {p:g}")
    if q is not None:
        _range(1 < q <= 2, f"need 1 < q <= 2, got q = {q:g}")
    for key in ("eps", "tol"):
        if prm.get(key) is not None:
            _range(prm[key] > 0, f"{key} must be positive")
    if prm.get("eps_grid") is not None:
        _range(len(prm["eps_grid"]) > 0 and all(e > 0 for e in prm["eps_grid"]), "eps grid must be positive")
    if prm.get("grid") is not None:
        _range(len(prm["grid"]) == 3 and min(prm["grid"]) >= 8, "grid needs three sizes >= 8")
    if prm.get("k") is not None:
        _range(prm["k"] >= 1, "k must be >= 1")
    if cfg.command == "spectrum":
        _range(frame.kind is frames.Kind.METIVIER and frame.D == 3, "spectrum is only available on H^1")
        _range(cfg.operator in ("schrodinger", "dirichlet", "both"), "operator must be schrodinger, dirichlet or both")
    if cfg.command == "hardy":
        _range(cfg.variant in ("dimfree", "general"), "variant must be dimfree or general")
        _range(cfg.potential in ("log", "power"), "potential must be log or power")
    return cfg
