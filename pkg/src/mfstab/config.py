"""Experiment configuration files.

Grammar (INI, read with :mod:`configparser`)::

    # comment                  ; also a comment
    [section]
    key = value

Sections and keys (all optional unless marked; defaults in brackets):

    [potential]   alpha (required), amplitude [1.0], image_shells [1],
                  taper_radius [0.5 | none], cutoff [0.5]
    [gibbs]       beta (required), n (required), burn_in_sweeps [10000],
                  thin_sweeps [1], initial_step [0.1], max_step [0.5],
                  target_acceptance [0.3]
    [shift]       kind = none | gaussian | compact | energy_sphere [gaussian],
                  sigma [1.0], delta_m [1.0], r_max [auto], radial [uniform]
    [theorem]     epsilon [min(1 - alpha/3, 0.5)], a [2 alpha/3 + 0.1], L [auto]
    [integrator]  dt [1e-3], t_end [1.0], n_observations [20],
                  min_pair_distance_floor [1e-5], energy_drift_tolerance [1e-3],
                  max_halvings [3], cell_list [false]
    [monte_carlo] samples [200], seed [0], tau [0.0], proof_terms [true]
    [checks]      marginal_samples [20000], marginal_thin_sweeps [5],
                  marginal_bins [8], shift_states [200], energy_sphere_draws [1000],
                  partition_points [16]
    [output]      directory [results], formats [csv, json, svg]
    [sweep]       dotted keys with comma-separated lists, e.g.
                  gibbs.n = 16, 32, 64, 128

Numbers accept any Python float/int literal; booleans accept
true/false/yes/no/1/0.  Unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import itertools
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

from .dynamics import IntegratorConfig
from .gibbs import ChainConfig, GibbsParams
from .metrics import TheoremParams
from .potential import PotentialSpec
from .shifts import CompactVelocity, EnergySphere, GaussianVelocity, NoShift


class ConfigError(ValueError):
    pass


_INT, _FLOAT, _BOOL, _STR, _OPTFLOAT, _OPTINT = "int", "float", "bool", "str", "float?", "int?"

SCHEMA = {
    "potential": {"alpha": _FLOAT, "amplitude": _FLOAT, "image_shells": _INT,
                  "taper_radius": _OPTFLOAT, "cutoff": _FLOAT},
    "gibbs": {"beta": _FLOAT, "n": _INT, "burn_in_sweeps": _INT, "thin_sweeps": _INT,
              "initial_step": _FLOAT, "max_step": _FLOAT, "target_acceptance": _FLOAT},
    "shift": {"kind": _STR, "sigma": _FLOAT, "delta_m": _FLOAT, "r_max": _OPTFLOAT,
              "radial": _STR},
    "theorem": {"epsilon": _OPTFLOAT, "a": _OPTFLOAT, "l": _OPTINT},
    "integrator": {"dt": _FLOAT, "t_end": _FLOAT, "n_observations": _INT,
                   "min_pair_distance_floor": _FLOAT, "energy_drift_tolerance": _FLOAT,
                   "max_halvings": _INT, "cell_list": _BOOL},
    "monte_carlo": {"samples": _INT, "seed": _INT, "tau": _FLOAT, "proof_terms": _BOOL},
    "checks": {"marginal_samples": _INT, "marginal_thin_sweeps": _INT, "marginal_bins": _INT,
               "shift_states": _INT, "energy_sphere_draws": _INT, "partition_points": _INT},
    "output": {"directory": _STR, "formats": _STR},
}
REQUIRED = {("potential", "alpha"), ("gibbs", "beta"), ("gibbs", "n")}

_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^\s*([^=:#;\s\[][^=:]*?)\s*[=:]")


def _line_index(text: str):
    where = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        m = _SECTION_RE.match(line)
        if m:
            section = m.group(1).strip().lower()
            where.setdefault((section, None), lineno)
            continue
        m = _KEY_RE.match(line)
        if m and section is not None:
            where[(section, m.group(1).strip().lower())] = lineno
    return where


def _convert(kind, raw):
    raw = raw.strip()
    if kind in (_OPTFLOAT, _OPTINT) and raw.lower() in ("none", "auto", ""):
        return None
    if kind in (_FLOAT, _OPTFLOAT):
        v = float(raw)
        if not math.isfinite(v):
            raise ValueError("must be finite")
        return v
    if kind in (_INT, _OPTINT):
        v = int(raw, 0)
        return v
    if kind == _BOOL:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError("not a boolean")
    return raw


@dataclass
class RunConfig:
    values: dict  # section -> key -> typed value (explicitly given keys only)
    sweep: dict = field(default_factory=dict)  # "section.key" -> list of values
    source: str = "<string>"
    text: str = ""
    lines: dict = field(default_factory=dict, repr=False)

    # -- construction -----------------------------------------------------

    @classmethod
    def from_text(cls, text: str, source: str = "<string>") -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}") from None
        lines = _line_index(text)
        values, sweep = {}, {}
        for section in parser.sections():
            sec = section.lower()
            if sec == "sweep":
                for key, raw in parser.items(section):
                    sweep[key] = cls._sweep_values(key, raw, source, lines)
                continue
            if sec not in SCHEMA:
                raise ConfigError(f"{source}:{lines.get((sec, None), '?')}: unknown section [{section}]")
            values[sec] = {}
            for key, raw in parser.items(section):
                kind = SCHEMA[sec].get(key)
                where = f"{source}:{lines.get((sec, key), '?')}"
                if kind is None:
                    raise ConfigError(f"{where}: unknown key '{key}' in [{sec}]")
                try:
                    values[sec][key] = _convert(kind, raw)
                except ValueError as exc:
                    raise ConfigError(f"{where}: [{sec}] {key} = {raw!r}: expected {kind} ({exc})") from None
        cfg = cls(values, sweep, source, text, lines)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read ({exc.strerror})") from None
        return cls.from_text(text, str(p))

    @staticmethod
    def _sweep_values(key, raw, source, lines):
        where = f"{source}:{lines.get(('sweep', key), '?')}"
        sec, _, name = key.partition(".")
        kind = SCHEMA.get(sec, {}).get(name)
        if kind is None:
            raise ConfigError(f"{where}: sweep key '{key}' is not a known section.key")
        try:
            return [_convert(kind, item) for item in raw.split(",")]
        except ValueError as exc:
            raise ConfigError(f"{where}: sweep {key} = {raw!r}: expected list of {kind} ({exc})") from None

    # -- access -------------------------------------------------------------

    def get(self, section, key, default=None):
        return self.values.get(section, {}).get(key, default)

    def where(self, section, key=None):
        line = self.lines.get((section, key)) or self.lines.get((section, None), "?")
        return f"{self.source}:{line}"

    def with_overrides(self, overrides: dict) -> "RunConfig":
        """Copy with dotted-key overrides applied and revalidated."""
        values = {s: dict(v) for s, v in self.values.items()}
        for dotted, v in overrides.items():
            sec, _, key = dotted.partition(".")
            values.setdefault(sec, {})[key] = v
        cfg = RunConfig(values, {}, self.source, self.text, self.lines)
        cfg.validate()
        return cfg

    def _build(self, section, key, fn):
        try:
            return fn()
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{self.where(section, key)}: [{section}] {exc}") from None

    def validate(self):
        for sec, key in REQUIRED:
            if self.get(sec, key) is None and f"{sec}.{key}" not in self.sweep:
                raise ConfigError(f"{self.source}: missing required [{sec}] {key}")
        if self.sweep:
            # each cell is validated when it is instantiated
            for cell in self.sweep_cells():
                cell.validate()
            return
        self.potential()
        self.gibbs()
        self.chain()
        self.shift()
        self.theorem()
        self.integrator()
        m = self.get("monte_carlo", "samples", 200)
        if m < 2:
            raise ConfigError(f"{self.where('monte_carlo', 'samples')}: samples must be >= 2")
        if self.get("monte_carlo", "tau", 0.0) < 0.0:
            raise ConfigError(f"{self.where('monte_carlo', 'tau')}: tau must be >= 0")
        formats = self.formats()
        bad = formats - {"csv", "json", "svg"}
        if bad:
            raise ConfigError(f"{self.where('output', 'formats')}: unknown formats {sorted(bad)}")

    # -- typed views ----------------------------------------------------------

    def potential(self) -> PotentialSpec:
        alpha = self.get("potential", "alpha")

        def build():
            if not 0.0 < alpha < 2.0:
                raise ValueError(f"alpha = {alpha} violates 0 < alpha < 2 (the growth theorem requires alpha < 2)")
            return PotentialSpec.build(
                alpha,
                amplitude=self.get("potential", "amplitude", 1.0),
                image_shells=self.get("potential", "image_shells", 1),
                taper_radius=self.get("potential", "taper_radius", 0.5),
                cutoff=self.get("potential", "cutoff", 0.5),
            )
        return self._build("potential", "alpha", build)

    def gibbs(self, spec=None) -> GibbsParams:
        spec = spec or self.potential()
        return self._build("gibbs", "beta", lambda: GibbsParams(
            self.get("gibbs", "beta"), self.get("gibbs", "n"), spec))

    def chain(self) -> ChainConfig:
        g = self.values.get("gibbs", {})
        keys = ("burn_in_sweeps", "thin_sweeps", "initial_step", "max_step", "target_acceptance")
        return self._build("gibbs", "burn_in_sweeps",
                           lambda: ChainConfig(**{k: g[k] for k in keys if k in g}))

    def shift(self):
        kind = self.get("shift", "kind", "gaussian").lower()

        def build():
            if kind == "none":
                return NoShift()
            if kind == "gaussian":
                return GaussianVelocity(self.get("shift", "sigma", 1.0))
            if kind == "compact":
                return CompactVelocity(self.get("shift", "delta_m", 1.0))
            if kind == "energy_sphere":
                return EnergySphere(self.get("shift", "r_max"), self.get("shift", "radial", "uniform"))
            raise ValueError(f"unknown shift kind '{kind}'")
        return self._build("shift", "kind", build)

    def theorem(self) -> TheoremParams:
        alpha = self.get("potential", "alpha")
        return self._build("theorem", "a", lambda: TheoremParams(
            alpha, self.get("theorem", "epsilon"), self.get("theorem", "a"), self.get("theorem", "l")))

    def integrator(self) -> IntegratorConfig:
        return self._build("integrator", "dt",
                           lambda: IntegratorConfig(**self.values.get("integrator", {})))

    def formats(self) -> set:
        raw = self.get("output", "formats", "csv, json, svg")
        return {f.strip().lower() for f in raw.split(",") if f.strip()}

    def sweep_cells(self):
        keys = sorted(self.sweep)
        for combo in itertools.product(*(self.sweep[k] for k in keys)):
            yield self.with_overrides(dict(zip(keys, combo)))

    # -- digests ----------------------------------------------------------------

    def normalized(self) -> dict:
        return {"values": self.values, "sweep": self.sweep}

    def digest(self) -> str:
        """SHA-256 of the canonical JSON of the parsed values."""
        blob = json.dumps(self.normalized(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def input_digest(self) -> str:
        """Git blob id of the raw configuration text."""
        data = self.text.encode()
        return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def describe(cfg: RunConfig) -> dict:
    """Resolved parameters, including defaults, for the JSON summary."""
    spec = cfg.potential()
    out = {
        "potential": spec.to_dict(),
        "gibbs": {"beta": cfg.get("gibbs", "beta"), "n": cfg.get("gibbs", "n"),
                  **dataclasses.asdict(cfg.chain())},
        "shift": {"kind": cfg.shift().kind, **dataclasses.asdict(cfg.shift())},
        "integrator": dataclasses.asdict(cfg.integrator()),
        "monte_carlo": {"samples": cfg.get("monte_carlo", "samples", 200),
                        "seed": cfg.get("monte_carlo", "seed", 0),
                        "tau": cfg.get("monte_carlo", "tau", 0.0)},
    }
    return out
