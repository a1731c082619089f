"""Experiment configuration: flat ``key = value`` text or JSON with the same keys.

Every key has a type and a default (see ``docs/config.md``).  Parse failures
raise ``ConfigError`` naming the file, line and key.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

DESIGNS = ("example1", "example2", "overid_case1", "overid_case2", "custom-csv")
MODEL_KINDS = ("linear", "iv", "qif", "mean_overid")


class ConfigError(ValueError):
    """Invalid configuration (bad key, bad value or inconsistent settings)."""


def _floats(text):
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).replace(",", " ").split())


def _ints(text):
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).replace(",", " ").split())


def _bool(text):
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text):
    if text is None or str(text).strip().lower() in ("", "none", "auto"):
        return None
    return float(text)


@dataclass
class ExperimentConfig:
    design: str = "example1"
    n: int = 100
    p: int = 40
    r: Optional[int] = None  # derived from the design when omitted
    reps: int = 1
    levels: tuple = (0.90, 0.95, 0.99)
    coords: tuple = (0,)
    # tuning: "ebic" grid search or "fixed" (pi, nu); multipliers scale sqrt(log p / n)
    tuning: str = "ebic"
    pi: Optional[float] = None
    nu: Optional[float] = None
    pi_mult: float = 0.5
    nu_mult: float = 0.5
    ebic_size: int = 4
    ebic_gamma: float = 0.5
    ebic_criterion: str = "selected"
    p1: str = "scad"
    p2: str = "l1"
    tau: Optional[float] = None
    auto_relax: bool = True
    two_rows: bool = False
    plugin: str = "pel"  # "pel" or "bc" (bias-corrected)
    calibration: str = "chi2"
    contour: bool = False  # joint region of the first two or three coords on a grid
    grid: int = 41
    test_mode: str = "Rn"  # "Rn", "all" or "both"
    alpha: float = 0.05
    M: int = 10_000
    a: float = 1.0
    seed: int = 20240101
    out: str = "results"
    data: Optional[str] = None
    layout: str = "flat"
    model: str = "linear"

    def __post_init__(self):
        self.validate()

    @property
    def r_value(self) -> int:
        if self.r is not None:
            return self.r
        if self.design == "example2" or self.model == "qif":
            return 2 * self.p
        if self.design.startswith("overid") or self.model == "mean_overid":
            return self.p + 1
        return self.p

    def validate(self) -> None:
        def bad(key, why):
            raise ConfigError(f"{key}: {why}")

        if self.design not in DESIGNS:
            bad("design", f"must be one of {DESIGNS}, got {self.design!r}")
        if self.model not in MODEL_KINDS:
            bad("model", f"must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.reps < 1:
            bad("reps", "must be >= 1")
        if self.n < 2:
            bad("n", "must be >= 2")
        if self.p < 1:
            bad("p", "must be >= 1")
        if self.design == "example1" and self.p < 10:
            bad("p", "example1 needs p >= 10")
        if self.design == "example2" and self.p < 5:
            bad("p", "example2 needs p >= 5")
        if self.design == "overid_case2" and not 0 < self.a < 1:
            bad("a", "overid_case2 needs a in (0, 1)")
        if self.design == "custom-csv" and not self.data:
            bad("data", "custom-csv needs a data path")
        if not self.levels or any(not 0 < v < 1 for v in self.levels):
            bad("levels", "every level must lie in (0, 1)")
        if not 0 < self.alpha < 1:
            bad("alpha", "must lie in (0, 1)")
        if self.tuning not in ("ebic", "fixed"):
            bad("tuning", "must be 'ebic' or 'fixed'")
        if self.plugin not in ("pel", "bc"):
            bad("plugin", "must be 'pel' or 'bc'")
        if self.test_mode not in ("Rn", "all", "both"):
            bad("test_mode", "must be 'Rn', 'all' or 'both'")
        if self.contour and not 2 <= len(self.coords) <= 3:
            bad("contour", "needs 2 or 3 coords")
        if self.grid < 3:
            bad("grid", "must be >= 3")
        if self.calibration not in ("chi2", "normal"):
            bad("calibration", "must be 'chi2' or 'normal'")
        if self.layout not in ("flat", "long"):
            bad("layout", "must be 'flat' or 'long'")
        if self.ebic_criterion not in ("selected", "all"):
            bad("ebic_criterion", "must be 'selected' or 'all'")
        if self.M < 1000:
            bad("M", "must be >= 1000")
        if any(not 0 <= k < self.p for k in self.coords):
            bad("coords", f"indices must lie in 0..{self.p - 1}")
        for key in ("pi", "nu", "tau"):
            v = getattr(self, key)
            if v is not None and (not math.isfinite(v) or v < 0):
                bad(key, "must be a nonnegative number")

    def tuning_values(self, n: int, p: int, r: int) -> tuple:
        """Fixed ``(pi, nu)``: explicit values, else multipliers of ``sqrt(log p / n)``, ``sqrt(log r / n)``."""
        pi = self.pi if self.pi is not None else self.pi_mult * math.sqrt(math.log(max(p, 2)) / n)
        nu = self.nu if self.nu is not None else self.nu_mult * math.sqrt(math.log(max(r, 2)) / n)
        return pi, nu

    def to_dict(self) -> dict:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out

    def hash(self) -> str:
        """Hash of every setting except the output directory."""
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


_CONVERTERS = {
    "levels": _floats,
    "coords": _ints,
    "auto_relax": _bool,
    "two_rows": _bool,
    "contour": _bool,
    "pi": _opt_float,
    "nu": _opt_float,
    "tau": _opt_float,
    "r": lambda v: None if v is None or str(v).strip().lower() in ("", "none", "auto") else int(v),
}


def _convert(key: str, value, where: str):
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    if key not in types:
        raise ConfigError(f"{where}: unknown key {key!r}")
    try:
        if key in _CONVERTERS:
            return _CONVERTERS[key](value)
        default = ExperimentConfig.__dataclass_fields__[key].default
        if isinstance(default, bool):
            return _bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(f"not an integer: {value!r}")
            return int(value)
        if isinstance(default, float):
            return float(value)
        return None if value is None else str(value).strip()
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: key {key!r}: {err}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines (``#`` comments) or a JSON object into typed values."""
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{source}: invalid JSON at line {err.lineno}: {err.msg}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{source}: JSON config must be an object")
        return {k: _convert(k, v, f"{source}: {k}") for k, v in raw.items()}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = (part.strip() for part in body.split("=", 1))
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = _convert(key, value, f"{source}:{lineno}")
    return values


def load_config(path=None, **overrides) -> ExperimentConfig:
    """Read a config file (or start from defaults) and apply non-None overrides."""
    values = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err.strerror}") from None
        values = parse_config_text(text, str(path))
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig(**values)
    except TypeError as err:
        raise ConfigError(str(err)) from None
