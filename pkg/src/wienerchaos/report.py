"""Experiment configuration and report records used by the command line tool."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

__all__ = ["ExperimentConfig", "ExperimentReport", "load_config", "rows_to_csv", "to_json_safe"]

COMMANDS = (
    "hermite",
    "chaos",
    "norm",
    "smoothing",
    "index",
    "kv-kernel",
    "scale-speed",
    "holder",
    "density-holder",
    "bessel-kernel",
    "ito-verify",
    "local-time-mc",
)

_FLOAT_TUPLES = ("x", "z", "a", "eps", "p", "window")


@dataclass(frozen=True)
class ExperimentConfig:
    """All inputs of one run; ``None`` means "use the subcommand default".

    The canonical text form is one ``key=value`` line per set field, in the
    declaration order below, with floats written by ``repr``.  Tuples are
    comma separated; Hoelder pairs are written ``y:z``.
    """

    command: str
    model: str | None = None
    dist: str | None = None
    case: str | None = None
    J: str | None = None
    s: float | None = None
    beta: float | None = None
    lam: float | None = None
    t: float | None = None
    T: float | None = None
    y: float | None = None
    x0: float | None = None
    n: int | None = None
    N: int | None = None
    M: int | None = None
    K: int | None = None
    m: int | None = None
    seed: int | None = None
    eps: tuple | None = None
    x: tuple | None = None
    z: tuple | None = None
    a: tuple | None = None
    p: tuple | None = None
    window: tuple | None = None
    pairs: tuple | None = None
    out: str | None = None
    format: str | None = None

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ValueError(f"unknown subcommand {self.command!r}")
        if self.format not in (None, "csv", "json"):
            raise ValueError(f"format must be csv or json, got {self.format!r}")
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, str) and (v != v.strip() or v.splitlines() != [v]):
                raise ValueError(f"{f.name} must be a nonempty single-line string without edge spaces")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if f.name == "pairs":
                v = [list(p) for p in v]
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            lines.append(f"{f.name}={_format_value(f.name, v)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        return cls.from_mapping(_parse_key_values(text))

    @classmethod
    def from_mapping(cls, values: dict) -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        if "command" not in values:
            raise ValueError("config needs a command")
        kw = {k: _coerce(k, v) for k, v in values.items() if v is not None}
        return cls(**kw)

    def merged(self, **overrides) -> "ExperimentConfig":
        """Copy with the non-``None`` overrides applied."""
        current = {f.name: getattr(self, f.name) for f in fields(self)}
        current.update({k: _coerce(k, v) for k, v in overrides.items() if v is not None})
        return ExperimentConfig(**current)


_INTS = ("n", "N", "M", "K", "m", "seed")
_FLOATS = ("s", "beta", "lam", "t", "T", "y", "x0")


def _format_value(name: str, v) -> str:
    if name == "pairs":
        return ",".join(f"{_num(a)}:{_num(b)}" for a, b in v)
    if isinstance(v, tuple):
        return ",".join(_num(e) for e in v)
    if isinstance(v, float):
        return _num(v)
    return str(v)


def _num(v) -> str:
    return repr(float(v)) if not isinstance(v, int) else str(v)


def _coerce(name: str, v):
    """Convert text, lists or numbers to the declared field type."""
    if name in _INTS:
        if isinstance(v, str):
            v = float(v) if any(c in v for c in ".eE") else int(v)
        if isinstance(v, bool) or not (isinstance(v, int) or float(v).is_integer()):
            raise ValueError(f"{name} must be an integer, got {v!r}")
        return int(v)
    if name in _FLOATS:
        return float(v)
    if name in _FLOAT_TUPLES:
        if isinstance(v, str):
            v = [e for e in v.split(",") if e.strip()]
        elif not isinstance(v, (list, tuple)):
            v = [v]
        return tuple(float(e) for e in v)
    if name == "pairs":
        if isinstance(v, str):
            v = [item.split(":") for item in v.split(",") if item.strip()]
        out = []
        for item in v:
            if len(item) != 2:
                raise ValueError(f"pairs must be y:z items, got {item!r}")
            out.append((float(item[0]), float(item[1])))
        return tuple(out)
    return str(v)


def load_config(path: str) -> dict:
    """Read a JSON object or a canonical ``key=value`` file.

    Returns the raw mapping; the caller merges it with command line flags.
    """
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ValueError(f"cannot read config {path!r}: {exc}") from None
    if path.endswith(".json"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValueError(f"invalid JSON config {path!r}: {exc}") from None
        if not isinstance(data, dict):
            raise ValueError("JSON config must be an object")
        return data
    return _parse_key_values(text)


def _parse_key_values(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line without '=': {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        values[key] = val
    return values


def to_json_safe(obj):
    """Recursively convert numpy scalars, tuples and non-finite floats for JSON."""
    if isinstance(obj, dict):
        return {str(k): to_json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_json_safe(v) for v in obj]
    if hasattr(obj, "tolist") and not isinstance(obj, (str, bytes)):
        return to_json_safe(obj.tolist())
    if isinstance(obj, bool) or obj is None or isinstance(obj, (int, str)):
        return obj
    if isinstance(obj, float):
        if math.isfinite(obj):
            return obj
        return "nan" if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    return str(obj)


def rows_to_csv(rows: list[dict]) -> str:
    """CSV with the keys of the first row as header; floats via ``repr``."""
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


@dataclass
class ExperimentReport:
    """Record of one run.

    ``outputs`` maps operation names to results, ``table`` holds the rows of
    the CSV form and ``provenance`` the seed, truncations and tolerances.
    ``gates`` maps each verification gate to its outcome.
    """

    config: ExperimentConfig
    version: str
    outputs: dict = field(default_factory=dict)
    table: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    gates: dict = field(default_factory=dict)
    wall_time_s: float = 0.0

    @property
    def failed_gates(self) -> list[str]:
        return [name for name, ok in self.gates.items() if not ok]

    def to_dict(self) -> dict:
        return to_json_safe({
            "tool": "wienerchaos",
            "version": self.version,
            "config": self.config.to_dict(),
            "outputs": self.outputs,
            "provenance": self.provenance,
            "gates": self.gates,
            "wall_time_s": self.wall_time_s,
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        return rows_to_csv(self.table)
