"""Experiment configuration in INI form (stdlib configparser)."""
from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass, field

from .errors import ConfigError
from .kernels import ProblemParams
from .spectral import Grid

DIALECT = "INI (Python configparser, sections with key = value)"

DEFAULT_INI = """\
[problem]
d = 2
s = 0.5
sigma = 0.1
beta = 0.86
zeta = 0.5
n_particles = 256

[grid]
half_length = 8.0
n = 128

[nonlinearity]
m = 1.0
table =

[initial]
name = gaussian
variance = 0.25

[run]
horizon = 0.5
dt = 0.002
seed = 12345
replicas = 8
order = 2
which = macro
drift_mode = shared
snapshot_times = 0.0, 0.5

[schedule]
n_values = 256, 512, 1024, 2048
eps = 1.0
c1 = 1.0
exact_check = true

[sweep]
betas = 1.0, 0.5, 0.25, 0.125
zeta_fixed = 0.001
zetas = 1.0, 0.5, 0.25, 0.125
beta_fixed = 0.001
zeta_s = 0.75
zeta_half_length = 16.0
zeta_n = 256

[continuation]
sigmas = 0.2, 0.1, 0.05, 0.025
"""


def _floats(text: str) -> list:
    return [float(x) for x in text.replace(";", ",").split(",") if x.strip()]


@dataclass
class ExperimentConfig:
    problem: ProblemParams
    half_length: float
    n_grid: int
    m_pow: float
    f_table: str
    initial: str
    initial_kw: dict
    horizon: float
    dt: float
    seed: int
    replicas: int
    order: int
    which: str
    drift_mode: str
    snapshot_times: list
    n_values: list
    eps: float
    c1: float
    exact_check: bool
    betas: list
    zeta_fixed: float
    zetas: list
    beta_fixed: float
    zeta_s: float
    zeta_half_length: float
    zeta_n: int
    sigmas: list
    source_text: str = field(default="", repr=False)

    @property
    def grid(self) -> Grid:
        return Grid(self.problem.d, self.half_length, self.n_grid)

    @property
    def nsteps(self) -> int:
        return int(round(self.horizon / self.dt))

    def validate(self) -> "ExperimentConfig":
        try:
            self.grid
        except ValueError as exc:
            raise ConfigError(f"grid: {exc}") from exc
        if not self.dt > 0 or not self.horizon > 0:
            raise ConfigError("run: dt and horizon must be positive")
        if not math.isclose(self.nsteps * self.dt, self.horizon, rel_tol=1e-9):
            raise ConfigError("run: horizon must be an integer multiple of dt")
        if self.replicas < 1:
            raise ConfigError("run: replicas must be >= 1")
        if self.order not in (1, 2):
            raise ConfigError("run: order must be 1 or 2")
        if self.which not in ("macro", "intermediate", "limit"):
            raise ConfigError("run: which must be macro, intermediate or limit")
        if self.drift_mode not in ("shared", "exact"):
            raise ConfigError("run: drift_mode must be shared or exact")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("run: seed must be an unsigned 64-bit integer")
        if self.m_pow < 1:
            raise ConfigError("nonlinearity: m must be >= 1")
        if any(not x > 0 for x in self.betas + self.zetas + self.sigmas):
            raise ConfigError("sweep/continuation: values must be positive")
        if any(b >= a for a, b in zip(self.sigmas, self.sigmas[1:])):
            raise ConfigError("continuation: sigmas must be strictly decreasing")
        if any(n < 3 for n in self.n_values):
            raise ConfigError("schedule: N values must be >= 3")
        return self


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.read_string(DEFAULT_INI)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse configuration: {exc}") from exc
    try:
        pr = cp["problem"]
        problem = ProblemParams(
            d=pr.getint("d"),
            s=pr.getfloat("s"),
            sigma=pr.getfloat("sigma"),
            beta=pr.getfloat("beta"),
            zeta=pr.getfloat("zeta"),
            n_particles=pr.getint("n_particles"),
        )
        ini = cp["initial"]
        kw = {k: float(v) for k, v in ini.items() if k != "name"}
        run, sch, sw = cp["run"], cp["schedule"], cp["sweep"]
        cfg = ExperimentConfig(
            problem=problem,
            half_length=cp["grid"].getfloat("half_length"),
            n_grid=cp["grid"].getint("n"),
            m_pow=cp["nonlinearity"].getfloat("m"),
            f_table=cp["nonlinearity"].get("table", "").strip(),
            initial=ini.get("name").strip(),
            initial_kw=kw,
            horizon=run.getfloat("horizon"),
            dt=run.getfloat("dt"),
            seed=run.getint("seed"),
            replicas=run.getint("replicas"),
            order=run.getint("order"),
            which=run.get("which").strip(),
            drift_mode=run.get("drift_mode").strip(),
            snapshot_times=_floats(run.get("snapshot_times")),
            n_values=[int(x) for x in _floats(sch.get("n_values"))],
            eps=sch.getfloat("eps"),
            c1=sch.getfloat("c1"),
            exact_check=sch.getboolean("exact_check"),
            betas=_floats(sw.get("betas")),
            zeta_fixed=sw.getfloat("zeta_fixed"),
            zetas=_floats(sw.get("zetas")),
            beta_fixed=sw.getfloat("beta_fixed"),
            zeta_s=sw.getfloat("zeta_s"),
            zeta_half_length=sw.getfloat("zeta_half_length"),
            zeta_n=sw.getint("zeta_n"),
            sigmas=_floats(cp["continuation"].get("sigmas")),
        )
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"invalid configuration value: {exc}") from exc
    buf = io.StringIO()
    cp.write(buf)
    cfg.source_text = buf.getvalue()
    return cfg.validate()


def load_config(path=None) -> ExperimentConfig:
    if path is None:
        return parse_config("")
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc}") from exc


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    text = cfg.source_text
    cp = configparser.ConfigParser()
    cp.read_string(text)
    cp["run"]["seed"] = str(seed)
    buf = io.StringIO()
    cp.write(buf)
    return parse_config(buf.getvalue())
