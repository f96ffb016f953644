"""Experiment configuration: a flat INI file with one section per concern.

Example::

    [problem]
    kind = quadratic        ; quadratic | quartic | adv-hpt
    n = 50
    m = 50
    t = 50
    spec_seed = 0
    csv =                   ; CSV path, adv-hpt only

    [engine]
    kind = NFD              ; H | NFD | AD
    fd_eps = 0.1
    cg_tol = 1e-8
    cg_max_iters = auto
    neumann_q = 30
    c0 = auto               ; auto-calibrated at the initial point
    c1 = auto

    [mode]
    kind = deterministic    ; deterministic | stochastic
    std_grad = 0.0
    std_hess = 0.0

    [schedule]
    kind = decaying         ; decaying | theorem
    alpha_bar = 0.3
    beta_bar = 0.2
    gamma_bar = 0.1

    [budget]
    ul_iters = 200
    j0 = 1
    k0 = 1
    adaptive = true
    ul_threshold = 1e-2
    ml_threshold = 1e-1

    [run]
    repetitions = 10
    base_seed = 1234
    output_dir = out
    reduction = trilevel    ; trilevel | without-ul | without-ll
    minibatch = 64
    noise_test_std = 5.0
    noise_test_realizations = 100
"""

import configparser
import io
import warnings
from dataclasses import dataclass, field, fields
from typing import Optional

PROBLEMS = ("quadratic", "quartic", "adv-hpt")
ENGINES = ("H", "NFD", "AD")
MODES = ("deterministic", "stochastic")
SCHEDULES = ("decaying", "theorem")
REDUCTIONS = ("trilevel", "without-ul", "without-ll")


@dataclass
class ExperimentConfig:
    # [problem]
    problem: str = "quadratic"
    n: int = 50
    m: int = 50
    t: int = 50
    spec_seed: int = 0
    csv: Optional[str] = None
    # [engine]
    engine: str = "NFD"
    fd_eps: float = 0.1
    cg_tol: float = 1e-8
    cg_max_iters: Optional[int] = None
    neumann_q: int = 30
    c0: Optional[float] = None
    c1: Optional[float] = None
    # [mode]
    mode: str = "deterministic"
    std_grad: float = 0.0
    std_hess: float = 0.0
    # [schedule]
    schedule: str = "decaying"
    alpha_bar: float = 0.3
    beta_bar: float = 0.2
    gamma_bar: float = 0.1
    # [budget]
    ul_iters: int = 200
    j0: int = 1
    k0: int = 1
    adaptive: bool = True
    ul_threshold: float = 1e-2
    ml_threshold: float = 1e-1
    # [run]
    repetitions: int = 10
    base_seed: int = 1234
    output_dir: str = "out"
    reduction: str = "trilevel"
    minibatch: int = 64
    noise_test_std: float = 5.0
    noise_test_realizations: int = 100

    def validate(self) -> "ExperimentConfig":
        if self.problem not in PROBLEMS:
            raise ValueError(f"problem must be one of {PROBLEMS}, got {self.problem!r}")
        if self.engine not in ENGINES:
            raise ValueError(f"engine must be one of {ENGINES}, got {self.engine!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"reduction must be one of {REDUCTIONS}, got {self.reduction!r}")
        if self.repetitions < 1:
            raise ValueError("repetitions must be at least 1")
        if self.problem == "adv-hpt" and not self.csv:
            raise ValueError("adv-hpt requires a csv path")
        if self.mode == "stochastic" and self.engine == "H" and self.std_hess > 0.1:
            # degradation, not failure: warn and continue
            warnings.warn(
                "H engine with Hessian noise above 0.1 is known to degrade badly",
                stacklevel=2,
            )
        return self


_SECTIONS = {
    "problem": ["problem", "n", "m", "t", "spec_seed", "csv"],
    "engine": ["engine", "fd_eps", "cg_tol", "cg_max_iters", "neumann_q", "c0", "c1"],
    "mode": ["mode", "std_grad", "std_hess"],
    "schedule": ["schedule", "alpha_bar", "beta_bar", "gamma_bar"],
    "budget": ["ul_iters", "j0", "k0", "adaptive", "ul_threshold", "ml_threshold"],
    "run": [
        "repetitions", "base_seed", "output_dir", "reduction", "minibatch",
        "noise_test_std", "noise_test_realizations",
    ],
}
# key used inside the file for the section-defining field
_FILE_KEY = {"problem": "kind", "engine": "kind", "mode": "kind", "schedule": "kind"}


def to_ini(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser()
    for section, names in _SECTIONS.items():
        parser[section] = {}
        for name in names:
            value = getattr(cfg, name)
            key = _FILE_KEY.get(name, name)
            if value is None:
                parser[section][key] = "auto" if name in ("cg_max_iters", "c0", "c1") else ""
            elif isinstance(value, bool):
                parser[section][key] = "true" if value else "false"
            else:
                parser[section][key] = str(value)
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def save_config(cfg: ExperimentConfig, path):
    with open(path, "w") as fh:
        fh.write(to_ini(cfg))


def _parse_value(field_type, raw: str, name: str):
    raw = raw.strip()
    if raw.lower() in ("", "auto", "none"):
        return None
    if field_type is bool:
        return raw.lower() in ("1", "true", "yes", "on")
    return field_type(raw)


def from_ini(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    parser.read_string(text)
    cfg = ExperimentConfig()
    types = {f.name: f for f in fields(ExperimentConfig)}
    for section, names in _SECTIONS.items():
        if not parser.has_section(section):
            continue
        for name in names:
            key = _FILE_KEY.get(name, name)
            if not parser.has_option(section, key):
                continue
            raw = parser.get(section, key)
            current = getattr(cfg, name)
            if name in ("csv", "c0", "c1", "cg_max_iters"):
                base = {"csv": str, "c0": float, "c1": float, "cg_max_iters": int}[name]
                value = _parse_value(base, raw, name)
            elif isinstance(current, bool):
                value = _parse_value(bool, raw, name)
            elif isinstance(current, int):
                value = _parse_value(int, raw, name)
            elif isinstance(current, float):
                value = _parse_value(float, raw, name)
            else:
                value = raw.strip()
            setattr(cfg, name, value)
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return from_ini(fh.read())
