"""Experiment configuration: TOML files with nested tables, validated into an immutable record.

Example::

    [state]
    kind = "gibbs"          # gibbs | product | fcs
    preset = "tfim"
    params = { J = 1.0, h = 1.0 }
    beta = 0.5
    buffer = 2

    [generators]
    list = ["x", { word = "z", site = 0 }]

    [grid]
    T = [0.5, 1.0, 1.5]
    N = [2, 3, 4, 5]

    [tolerances]
    tail = 1e-8

    [run]
    seed = 0
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli

from .algebra import word
from .dynamics import MAX_WINDOW_DIM, PRESETS, Interaction
from .errors import ConfigError
from .states import FCSSpec, FCSState, GibbsState, ProductState

__all__ = ["ExperimentConfig", "load_config", "DEFAULT_TOLERANCES"]

DEFAULT_TOLERANCES = {
    "tail": 1e-8,        # t and sigma series
    "clt_tail": 1e-6,    # CLT predictions
    "clt_slack": 0.0,    # allowed increase of the sup-error between consecutive N
    "kms": 1e-8,
    "evolve": 1e-6,
    "unitality": 1e-12,
    "min_r2": 0.95,
}

_STATE_KINDS = ("gibbs", "product", "fcs")


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


@dataclass(frozen=True)
class ExperimentConfig:
    """Parsed and validated experiment description.

    ``raw`` keeps the normalized document; ``hash`` is the SHA-256 of its
    canonical JSON form (the source path is not part of it).
    """

    raw: dict
    state: dict
    generators: tuple
    grid: dict
    tolerances: dict
    seed: int = 0
    workers: int = 1
    out: str = "qfluct-out"
    max_window_dim: int = MAX_WINDOW_DIM
    base_dir: str = "."
    extra: dict = field(default_factory=dict)

    @property
    def hash(self) -> str:
        return hashlib.sha256(_canonical(self.raw).encode()).hexdigest()

    @classmethod
    def from_dict(cls, doc: dict, base_dir: str = ".") -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("configuration must be a table")
        doc = copy.deepcopy(doc)
        state = doc.get("state", {"kind": "product", "density": "tracial"})
        if not isinstance(state, dict):
            raise ConfigError("[state] must be a table")
        kind = state.setdefault("kind", "product")
        if kind not in _STATE_KINDS:
            raise ConfigError(f"state.kind must be one of {_STATE_KINDS}, got {kind!r}")
        if kind == "gibbs":
            beta = state.get("beta")
            if not isinstance(beta, (int, float)) or beta < 0:
                raise ConfigError("gibbs state needs a nonnegative beta")
            if "preset" not in state and "terms" not in state:
                raise ConfigError("gibbs state needs an interaction preset or terms")
            if "preset" in state and state["preset"] not in PRESETS:
                raise ConfigError(f"unknown interaction preset {state['preset']!r}; "
                                  f"choose from {sorted(PRESETS)}")

        gens = doc.get("generators", {}).get("list", ["z"])
        if not isinstance(gens, list) or not gens:
            raise ConfigError("generators.list must be a nonempty array")
        for g in gens:
            if not isinstance(g, (str, dict)):
                raise ConfigError(f"bad generator entry {g!r}")

        grid = dict(doc.get("grid", {}))
        for key in ("N", "buffers", "separations"):
            if key in grid:
                v = grid[key]
                if not isinstance(v, list) or not all(isinstance(x, int) for x in v):
                    raise ConfigError(f"grid.{key} must be an array of integers")
                if any(b <= a for a, b in zip(v, v[1:])):
                    raise ConfigError(f"grid.{key} must be increasing")
        for key in ("T", "t"):
            if key in grid and not all(isinstance(x, (int, float)) for x in grid[key]):
                raise ConfigError(f"grid.{key} must be an array of numbers")

        tol = dict(DEFAULT_TOLERANCES)
        tol.update(doc.get("tolerances", {}))
        for k, v in tol.items():
            if not isinstance(v, (int, float)):
                raise ConfigError(f"tolerance {k} must be a number")
            if k != "clt_slack" and v <= 0:
                raise ConfigError(f"tolerance {k} must be positive")
        if tol["clt_slack"] < 0:
            raise ConfigError("tolerance clt_slack must be nonnegative")

        run = doc.get("run", {})
        seed = run.get("seed", 0)
        workers = run.get("workers", 1)
        mwd = run.get("max_window_dim", MAX_WINDOW_DIM)
        if not isinstance(seed, int) or not isinstance(workers, int) or workers < 1:
            raise ConfigError("run.seed must be an integer and run.workers a positive integer")
        if not isinstance(mwd, int) or mwd < 2:
            raise ConfigError("run.max_window_dim must be an integer >= 2")
        doc.update({"state": state, "grid": grid, "tolerances": tol,
                    "generators": {"list": gens},
                    # workers only changes scheduling, so it stays out of the hashed record
                    "run": {"seed": seed, "max_window_dim": mwd}})
        extra = {k: v for k, v in doc.items()
                 if k not in ("state", "generators", "grid", "tolerances", "run")}
        return cls(doc, state, tuple(gens), grid, tol, seed, workers,
                   str(run.get("out", "qfluct-out")), mwd, str(base_dir), extra)

    def replace(self, **overrides) -> "ExperimentConfig":
        """Copy with ``seed``, ``workers``, ``out`` or ``max_window_dim`` overridden."""
        out = overrides.pop("out", None)
        workers = overrides.pop("workers", None)
        doc = copy.deepcopy(self.raw)
        run = doc.setdefault("run", {})
        run.update({k: v for k, v in overrides.items() if v is not None})
        run["workers"] = self.workers if workers is None else workers
        cfg = ExperimentConfig.from_dict(doc, self.base_dir)
        return dataclasses.replace(cfg, out=str(out if out is not None else self.out))

    # builders ------------------------------------------------------------------

    def interaction(self) -> Interaction:
        s = self.state
        if "terms" in s:
            try:
                terms = [(float(c), str(w)) for c, w in s["terms"]]
            except (TypeError, ValueError) as exc:
                raise ConfigError("state.terms must be [[coeff, word], ...]") from exc
            return Interaction.from_words(terms, d=s.get("d", 2), name=s.get("name", "custom"))
        try:
            return PRESETS[s["preset"]](**s.get("params", {}))
        except TypeError as exc:
            raise ConfigError(f"bad parameters for preset {s['preset']!r}: {exc}") from exc

    def dynamics(self) -> Interaction:
        """Interaction generating the time evolution: the Gibbs one, else ``[dynamics]`` (default tfim)."""
        if self.state["kind"] == "gibbs":
            return self.interaction()
        dyn = self.extra.get("dynamics", {"preset": "tfim"})
        if dyn.get("preset", "tfim") not in PRESETS:
            raise ConfigError(f"unknown interaction preset {dyn.get('preset')!r}")
        try:
            return PRESETS[dyn.get("preset", "tfim")](**dyn.get("params", {}))
        except TypeError as exc:
            raise ConfigError(f"bad dynamics parameters: {exc}") from exc

    def build_state(self):
        s = self.state
        kind = s["kind"]
        if kind == "gibbs":
            window = s.get("window")
            return GibbsState(self.interaction(), float(s["beta"]), window=window,
                              buffer=int(s.get("buffer", 2)), max_window_dim=self.max_window_dim)
        if kind == "product":
            dens = s.get("density", "tracial")
            if isinstance(dens, str):
                builders = {"tracial": ProductState.tracial, "z_up": ProductState.z_up}
                if dens not in builders:
                    raise ConfigError(f"unknown product density {dens!r}")
                return builders[dens]()
            if isinstance(dens, dict) and "probs" in dens:
                return ProductState.diagonal(dens["probs"])
            if isinstance(dens, dict) and "bloch" in dens:
                return ProductState.bloch(*dens["bloch"])
            raise ConfigError("product density must be 'tracial', 'z_up', {probs=[...]} or {bloch=[x,y,z]}")
        return FCSState(self.fcs_spec())

    def fcs_spec(self) -> FCSSpec:
        s = self.state
        if "path" in s:
            p = Path(s["path"])
            if not p.is_absolute():
                p = Path(self.base_dir) / p
            if not p.exists():
                raise ConfigError(f"FCS spec file {p} not found")
            return FCSSpec.from_json(p)
        preset = s.get("preset", "classical_chain")
        if preset == "classical_chain":
            return FCSSpec.classical_chain(s.get("P", s.get("p", 0.25)))
        if preset == "aklt":
            return FCSSpec.aklt()
        if preset == "periodic":
            return FCSSpec.periodic()
        if preset == "random":
            return FCSSpec.random(int(s.get("bond_dim", 2)), int(s.get("site_dim", 2)),
                                  seed=s.get("seed", self.seed))
        raise ConfigError(f"unknown FCS preset {preset!r}")

    def site_dim(self) -> int:
        kind = self.state["kind"]
        if kind == "gibbs":
            return self.interaction().d
        if kind == "fcs":
            return self.fcs_spec().site_dim
        return 2

    def build_generators(self, entries=None) -> list:
        """Operators for ``entries`` (default: the configured generator list)."""
        d = self.site_dim()
        out = []
        for g in (self.generators if entries is None else entries):
            if isinstance(g, str):
                g = {"word": g}
            try:
                op = word(g["word"], site=int(g.get("site", 0)), d=d, coeff=float(g.get("coeff", 1.0)))
            except (KeyError, ValueError) as exc:
                raise ConfigError(f"bad generator {g!r}: {exc}") from exc
            if not op.is_hermitian(1e-12):
                raise ConfigError(f"generator {g!r} is not self-adjoint")
            out.append(op)
        return out

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        doc = tomli.loads(p.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {p} not found") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {p}: {exc}") from exc
    return ExperimentConfig.from_dict(doc, str(p.parent))
