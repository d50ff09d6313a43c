"""Run configuration: a YAML key-value tree validated in one pass."""
from __future__ import annotations

from pathlib import Path
from typing import Annotated, List, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .pde_fom import make_problem_1d, make_problem_2d
from .uq_mc import Normal, ParameterDistribution, Uniform

METHODS = ("fom", "space-rom", "space-rom-rrf", "st-rom")

PROBLEM_DEFAULTS = {
    "1d": {"mesh": [255], "dt": 0.001, "T": 1.0},
    "2d": {"mesh": [63, 63], "dt": 0.005, "T": 2.5},
}
DISTRIBUTION_DEFAULTS = {
    "1d": [
        {"name": "c", "type": "normal", "mean": 1.0, "std": 0.15},
        {"name": "nu", "type": "uniform", "lo": 0.01, "hi": 0.02},
    ],
    "2d": [
        {"name": "b", "type": "normal", "mean": 0.5, "std": 0.1},
        {"name": "sigma", "type": "uniform", "lo": 0.003, "hi": 0.005},
        {"name": "nu", "type": "uniform", "lo": 0.9, "hi": 1.1},
    ],
}
DESK_PRESET = {"problem": "1d", "mesh": [63], "dt": 0.01, "T": 1.0}
DESK_SAMPLES = [10, 100, 1000]


class ConfigError(ValueError):
    """Configuration problems, one ``"field.path: message"`` entry per violation."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class MarginalConfig(_Strict):
    name: str = ""
    type: Literal["normal", "uniform"]
    mean: Optional[float] = None
    std: Optional[float] = None
    lo: Optional[float] = None
    hi: Optional[float] = None

    @model_validator(mode="after")
    def _check(self):
        if self.type == "normal":
            if self.mean is None or self.std is None:
                raise ValueError("normal marginal needs mean and std")
            if self.lo is not None or self.hi is not None:
                raise ValueError("normal marginal takes mean and std only")
            if not self.std > 0:
                raise ValueError("std must be positive")
        else:
            if self.lo is None or self.hi is None:
                raise ValueError("uniform marginal needs lo and hi")
            if self.mean is not None or self.std is not None:
                raise ValueError("uniform marginal takes lo and hi only")
            if not self.lo < self.hi:
                raise ValueError("lo must be smaller than hi")
        return self

    def build(self):
        if self.type == "normal":
            return Normal(self.mean, self.std, self.name)
        return Uniform(self.lo, self.hi, self.name)


class MCConfig(_Strict):
    kind: Literal["mc"] = "mc"
    n_samples: List[Annotated[int, Field(ge=0)]] = [100, 1000, 10000]
    seed: int = 1
    repetitions: Annotated[int, Field(ge=1)] = 5


class SGConfig(_Strict):
    kind: Literal["sg"] = "sg"
    degrees: List[Annotated[int, Field(ge=0, le=12)]] = [0, 1, 2, 3, 4, 5]
    nodes_per_axis: Optional[Annotated[int, Field(ge=1)]] = None


class ReferenceConfig(_Strict):
    path: str = "reference_moments.npz"
    n_samples: Annotated[int, Field(ge=2)] = 100_000
    seed: int = 987_654_321


class RunConfig(_Strict):
    problem: Literal["1d", "2d"] = "1d"
    mesh: List[Annotated[int, Field(ge=2)]]
    dt: Annotated[float, Field(gt=0)]
    T: Annotated[float, Field(gt=0)]
    source: float = 1.0
    distribution: List[MarginalConfig]
    n_train: Annotated[int, Field(ge=1)] = 20
    train_seed: int = 0
    e_tol: Annotated[float, Field(gt=0, le=1)] = 0.999999
    rrf_k_hat: Optional[Annotated[int, Field(ge=1)]] = None
    rrf_seed: int = 0
    method: Literal["fom", "space-rom", "space-rom-rrf", "st-rom"] = "st-rom"
    propagation: Union[MCConfig, SGConfig] = Field(default_factory=MCConfig, discriminator="kind")
    reference: ReferenceConfig = Field(default_factory=ReferenceConfig)
    error_field: Literal["final", "spacetime"] = "final"
    workers: Annotated[int, Field(ge=1)] = 1
    output: str = "results"

    @model_validator(mode="before")
    @classmethod
    def _fill_problem_defaults(cls, data):
        if not isinstance(data, dict):
            return data
        data = dict(data)
        problem = data.get("problem", "1d")
        if problem in PROBLEM_DEFAULTS:
            for key, value in PROBLEM_DEFAULTS[problem].items():
                data.setdefault(key, value)
            data.setdefault("distribution", DISTRIBUTION_DEFAULTS[problem])
            if problem == "2d":
                data.setdefault("rrf_k_hat", 20)
        return data

    @field_validator("mesh")
    @classmethod
    def _mesh_len(cls, v):
        if len(v) not in (1, 2):
            raise ValueError("mesh takes one (1d) or two (2d) node counts")
        return v

    def consistency_errors(self):
        errs = []
        dim = 1 if self.problem == "1d" else 2
        if len(self.mesh) != dim:
            errs.append(f"mesh: {self.problem} problem needs {dim} node count(s)")
        if self.problem == "2d" and min(self.mesh) < 3:
            errs.append("mesh: 2d problem needs at least 3 nodes per axis")
        n_params = 2 if self.problem == "1d" else 3
        if len(self.distribution) != n_params:
            errs.append(f"distribution: {self.problem} problem has {n_params} parameters")
        n_t = round(self.T / self.dt)
        if n_t < 1 or abs(n_t * self.dt - self.T) > 1e-9 * max(1.0, self.T):
            errs.append("T: must be an integer multiple of dt")
        if self.method == "space-rom-rrf" and self.rrf_k_hat is None:
            errs.append("rrf_k_hat: required for method space-rom-rrf")
        return errs

    @property
    def n_t(self):
        return int(round(self.T / self.dt))

    def build_problem(self):
        if self.problem == "1d":
            return make_problem_1d(self.mesh[0], self.dt, self.T, self.source)
        return make_problem_2d(self.mesh[0], self.mesh[1], self.dt, self.T, self.source)

    def build_distribution(self):
        return ParameterDistribution(tuple(m.build() for m in self.distribution))

    def to_dict(self):
        return self.model_dump(mode="json")

    def replace(self, **changes):
        data = self.to_dict()
        data.update(changes)
        return validate_config(data)


def _format_errors(exc):
    out = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        msg = err["msg"]
        if err["type"] == "extra_forbidden":
            msg = f"unknown key {err['loc'][-1]!r}"
        out.append(f"{loc}: {msg}")
    return out


def validate_config(data, desk=False):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(["<root>: configuration must be a mapping"])
    if desk:
        data = apply_desk_preset(data)
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None
    errs = cfg.consistency_errors()
    if errs:
        raise ConfigError(errs)
    return cfg


def apply_desk_preset(data):
    """Shrink to the desk-scale 1D problem (N_s=63, N_t=100, up to 10^3 samples)."""
    data = dict(data)
    data.update(DESK_PRESET)
    data.pop("distribution", None)
    prop = dict(data.get("propagation") or {})
    prop.setdefault("kind", "mc")
    if prop.get("kind", "mc") == "mc":
        prop["n_samples"] = DESK_SAMPLES
    data["propagation"] = prop
    return data


def parse_config(path, desk=False):
    """Load and validate a YAML config; a results manifest is accepted too."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError([f"<file>: no such config file {str(path)!r}"])
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError([f"<file>: not valid YAML ({exc})"]) from None
    if isinstance(data, dict) and data.get("kind") == "strom-manifest":
        data = data.get("config")
    return validate_config(data, desk=desk)
