"""Experiment configuration: JSON in, validated dataclass out, and back."""

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources

import jsonschema
import numpy as np

from ..geometry import make_problem
from ..noise import make_noise, parse_gamma
from ..schedules import RegularityTriple, ScheduleParams
from ..sgd import DEFAULT_HORIZONS, SimulationSpec


class ConfigError(ValueError):
    pass


DEFAULT_TOLERANCES = {
    "frobenius": 0.15,
    "ks_alpha": 0.01,
    "tangential_energy": 0.10,
    "f_gap_mean": 0.15,
    "f_gap_variance": 0.30,
    "drift_ratio": 3.0,
    "slope": 0.10,
    "rho_ratio": 0.20,
    "xi_frobenius": 0.10,
    "check_limit": 0.01,
    "uniform_bound": 0.05,
}

DEFAULT_LINEAR_ORACLE = {
    "cases": [
        {"H": [[-2.0]], "gamma_theta": [[1.0]]},
        {"H": [[-1.0, 0.3], [0.3, -2.0]], "gamma_theta": [[1.0, 0.0], [0.0, 1.0]]},
    ],
    "draws": 5000,
    "n": 100000,
    "limit_l": 1000,
    "limit_n": 1000000,
    "uniform_ns": [10000, 100000, 1000000],
}


def _schema():
    text = resources.files(__package__).joinpath("config.schema.json").read_text()
    return json.loads(text)


@dataclass
class ExperimentConfig:
    problem: dict = field(default_factory=lambda: {"kind": "flat_quadratic",
                                                   "params": {"A": [[1.0, 0.0], [0.0, 2.0]]}})
    schedule: ScheduleParams = field(default_factory=ScheduleParams)
    regularity: RegularityTriple = field(default_factory=RegularityTriple)
    noise: dict = field(default_factory=lambda: {"kind": "gaussian_iid", "gamma": "identity"})
    replications: int = 2000
    seed: int = 12345
    horizons: tuple = DEFAULT_HORIZONS
    initial_distance: float = 0.1
    tube: dict = field(default_factory=lambda: {"check_from": None, "max_excluded_fraction": 0.05})
    out: str = None
    tolerances: dict = field(default_factory=lambda: dict(DEFAULT_TOLERANCES))
    rho_sweep: dict = field(default_factory=lambda: {"rhos": [0.0, 0.5, 1.0]})
    rate: dict = field(default_factory=lambda: {"gammas": [0.75, 0.8, 0.9]})
    linear_oracle: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_LINEAR_ORACLE))

    def __post_init__(self):
        self.horizons = tuple(int(h) for h in self.horizons)
        self.problem = {"kind": self.problem["kind"], "params": dict(self.problem.get("params", {}))}
        self.noise = {"kind": "gaussian_iid", "gamma": "identity", **self.noise}
        self.tube = {"check_from": None, "max_excluded_fraction": 0.05, **self.tube}
        self.tolerances = {**DEFAULT_TOLERANCES, **self.tolerances}
        self.rho_sweep = {"rhos": [0.0, 0.5, 1.0], **self.rho_sweep}
        self.rate = {"gammas": [0.75, 0.8, 0.9], **self.rate}
        self.linear_oracle = {**copy.deepcopy(DEFAULT_LINEAR_ORACLE), **self.linear_oracle}

    # serialization ---------------------------------------------------------

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["schedule"] = dataclasses.asdict(self.schedule)
        d["regularity"] = dataclasses.asdict(self.regularity)
        d["horizons"] = list(self.horizons)
        return copy.deepcopy(d)

    @classmethod
    def from_dict(cls, d):
        try:
            jsonschema.validate(d, _schema())
        except jsonschema.ValidationError as e:
            path = "/".join(str(p) for p in e.absolute_path) or "<root>"
            raise ConfigError(f"config invalid at {path}: {e.message}") from None
        d = copy.deepcopy(d)
        try:
            if "schedule" in d:
                d["schedule"] = ScheduleParams(**d["schedule"])
            if "regularity" in d:
                d["regularity"] = RegularityTriple(**d["regularity"])
            return cls(**d)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text):
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.loads(fh.read())

    def digest(self):
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    # object construction -------------------------------------------------

    def build_problem(self):
        params = dict(self.problem["params"])
        if "A" in params:
            params["A"] = np.asarray(params["A"], dtype=float)
        try:
            return make_problem(self.problem["kind"], **params)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def build_noise(self, prob):
        try:
            G = parse_gamma(self.noise["gamma"], prob.dim)
            return make_noise(self.noise["kind"], G, prob.foot_distance)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def build_spec(self, schedule=None):
        prob = self.build_problem()
        try:
            return SimulationSpec(
                problem=prob,
                params=schedule or self.schedule,
                noise=self.build_noise(prob),
                horizons=self.horizons,
                initial_distance=self.initial_distance,
                check_from=self.tube["check_from"],
            )
        except ValueError as e:
            raise ConfigError(str(e)) from None
