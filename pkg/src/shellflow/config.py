"""Experiment configuration: TOML files validated with pydantic.

A config has tables [model], [noise], [experiment], [numerics], [output]
and an optional [params] table with experiment-specific settings.  Command
line flags and ``--override key=value`` entries patch dotted paths before
validation.
"""

import copy
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .noise import NoiseConfig
from .shell import ConfigError, ModelConfig

EXPERIMENTS = (
    "simulate", "energy", "exp-moment", "tangent", "malliavin-ibp", "control", "e-property",
    "avg-bounded", "concentrate", "occupation", "stability", "finite-markov",
)


class InvalidConfig(ValueError):
    """Raised with a field-path message; maps to exit code 64."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Strict):
    nu: float = 1.0
    k0: float = 2.0
    a: float = 1.0
    b: float = -0.5
    variant: Literal["GOY", "Sabra"] = "GOY"
    N: int = 16

    @field_validator("k0")
    @classmethod
    def _k0(cls, v):
        if not v > 1:
            raise ValueError("k0 must exceed 1")
        return v

    @field_validator("nu")
    @classmethod
    def _nu(cls, v):
        if not v > 0:
            raise ValueError("nu must be positive")
        return v

    @field_validator("N")
    @classmethod
    def _N(cls, v):
        if v < 4:
            raise ValueError("N must be at least 4")
        return v


class NoiseSection(_Strict):
    q: float | None = 0.3
    n_active: int | None = 4
    q_diag: list[float] | None = None

    @model_validator(mode="after")
    def _shape(self):
        if self.q_diag is None and (self.q is None or self.n_active is None):
            raise ValueError("give either q_diag or both q and n_active")
        if self.n_active is not None and self.n_active < 0:
            raise ValueError("n_active must be non-negative")
        return self


class ExperimentSection(_Strict):
    name: Literal[EXPERIMENTS] = "simulate"  # type: ignore[valid-type]


class NumericsSection(_Strict):
    dt: float | None = None
    T: float = 1.0
    burn_in: float | None = None
    M: int = 1000
    seed: int | None = None

    @field_validator("dt")
    @classmethod
    def _dt(cls, v):
        if v is not None and not v > 0:
            raise ValueError("dt must be positive")
        return v

    @field_validator("T")
    @classmethod
    def _T(cls, v):
        if not v > 0:
            raise ValueError("T must be positive")
        return v

    @field_validator("M")
    @classmethod
    def _M(cls, v):
        if v < 1:
            raise ValueError("M must be positive")
        return v

    @field_validator("seed")
    @classmethod
    def _seed(cls, v):
        if v is not None and not 0 <= v < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        return v


class OutputSection(_Strict):
    dir: str = "shellflow-out"
    formats: list[Literal["json", "csv"]] = Field(default_factory=lambda: ["json", "csv"])


class ExperimentConfig(_Strict):
    model: ModelSection = Field(default_factory=ModelSection)
    noise: NoiseSection = Field(default_factory=NoiseSection)
    experiment: ExperimentSection = Field(default_factory=ExperimentSection)
    numerics: NumericsSection = Field(default_factory=NumericsSection)
    output: OutputSection = Field(default_factory=OutputSection)
    params: dict = Field(default_factory=dict)

    @model_validator(mode="after")
    def _cross(self):
        if self.numerics.seed is None:
            raise ValueError("numerics.seed is required (no wall-clock seeding)")
        nz = self.noise
        if nz.q_diag is not None and len(nz.q_diag) > self.model.N:
            raise ValueError("noise.q_diag is longer than model.N")
        if nz.q_diag is None and nz.n_active > self.model.N:
            raise ValueError("noise.n_active exceeds model.N")
        if self.numerics.burn_in is not None and self.numerics.burn_in >= self.numerics.T:
            raise ValueError("numerics.burn_in must be smaller than numerics.T")
        return self

    # resolved objects ------------------------------------------------------

    def model_config_obj(self) -> ModelConfig:
        m = self.model
        return ModelConfig(m.nu, m.k0, m.a, m.b, m.variant, m.N)

    def noise_config_obj(self) -> NoiseConfig:
        nz = self.noise
        N = self.model.N
        if nz.q_diag is not None:
            q = list(nz.q_diag) + [0.0] * (N - len(nz.q_diag))
            return NoiseConfig(tuple(q))
        return NoiseConfig.low_modes(nz.q, nz.n_active, N)

    def dt(self) -> float:
        return self.numerics.dt if self.numerics.dt is not None else self.model_config_obj().default_dt()

    def resolved(self) -> dict:
        d = self.model_dump(mode="json")
        d["numerics"]["dt"] = self.dt()
        return d


def _format_errors(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        msg = e["msg"]
        if msg.startswith("Value error, "):
            msg = msg[len("Value error, ") :]
        lines.append(f"{loc}: {msg}")
    return "\n".join(lines)


def parse_value(text: str):
    """A TOML scalar or array; bare words fall back to strings."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def set_dotted(d: dict, path: str, value):
    keys = path.split(".")
    cur = d
    for k in keys[:-1]:
        nxt = cur.setdefault(k, {})
        if not isinstance(nxt, dict):
            raise InvalidConfig(f"{path}: {k} is not a table")
        cur = nxt
    cur[keys[-1]] = value


def load_raw(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise InvalidConfig(f"{path}: file not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise InvalidConfig(f"{path}: unparseable: {exc}") from None


def build_config(raw: dict, overrides: dict | None = None) -> ExperimentConfig:
    raw = copy.deepcopy(raw)
    for k, v in (overrides or {}).items():
        set_dotted(raw, k, v)
    try:
        cfg = ExperimentConfig.model_validate(raw)
        cfg.model_config_obj()
        cfg.noise_config_obj()
    except ValidationError as err:
        raise InvalidConfig(_format_errors(err)) from None
    except ConfigError as err:
        raise InvalidConfig(str(err)) from None
    return cfg


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    return build_config(load_raw(path), overrides)


def parse_state(spec, N: int) -> np.ndarray:
    """State from a list of reals, a list of [re, im] pairs, or {"e": n, "scale": s}."""
    out = np.zeros(N, dtype=complex)
    if spec is None:
        return out
    if isinstance(spec, dict):
        n = int(spec.get("e", 1))
        out[n - 1] = complex(spec.get("scale", 1.0))
        return out
    vals = list(spec)
    if len(vals) > N:
        raise InvalidConfig(f"state has {len(vals)} modes but N = {N}")
    for i, v in enumerate(vals):
        if isinstance(v, (list, tuple)):
            out[i] = complex(float(v[0]), float(v[1]))
        else:
            out[i] = float(v)
    return out
