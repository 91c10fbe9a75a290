"""Training configuration and seed sub-streams."""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .errors import ConfigError

PSEUDO_MODES = ("nonlinear", "linear", "fixed", "none")
GAMMA_MODES = ("dynamic", "fixed")
LAMBDA_MODES = ("standard", "literal")
REG_FORMS = ("printed", "gram")
SIM_FORMS = ("cosine", "rawdot")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 96
    maxepoch: int = 100
    beta: float = 0.01
    delta: float = 2.0
    tau_h0: float = 0.9
    tau_l0: float = 0.5
    lambda_mode: str = "standard"
    p_drop: float = 0.5
    l2_weight: float = 1e-5
    rho: float = 0.99
    eps_opt: float = 1e-8
    seed: int = 0
    # ablations
    no_discriminator: bool = False
    no_target_pairwise: bool = False
    no_source_pairwise: bool = False
    no_prototypes: bool = False
    pseudo_mode: str = "nonlinear"
    gamma_mode: str = "dynamic"
    reg_form: str = "printed"
    sim_form: str = "cosine"

    def __post_init__(self):
        if self.maxepoch < 0:
            raise ConfigError("maxepoch must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.beta < 0 or self.delta < 0 or self.l2_weight < 0:
            raise ConfigError("beta, delta and l2_weight must be >= 0")
        if not 0.0 <= self.tau_l0 <= self.tau_h0 <= 1.0:
            raise ConfigError(
                f"need 0 <= tau_l0 <= tau_h0 <= 1, got {self.tau_l0}, {self.tau_h0}")
        if not 0.0 <= self.p_drop < 1.0:
            raise ConfigError("p_drop must lie in [0, 1)")
        if not 0.0 <= self.rho < 1.0:
            raise ConfigError("rho must lie in [0, 1)")
        for name, allowed in (("pseudo_mode", PSEUDO_MODES), ("gamma_mode", GAMMA_MODES),
                              ("lambda_mode", LAMBDA_MODES), ("reg_form", REG_FORMS),
                              ("sim_form", SIM_FORMS)):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}")

    def with_(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        return cls(**{k: coerce(cls, k, v) for k, v in d.items()})


def coerce(cls, name, value):
    """Convert a text value to the type of dataclass field ``name``."""
    default = next(f.default for f in fields(cls) if f.name == name)
    if not isinstance(value, str):
        return value
    try:
        if isinstance(default, bool):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {value!r}") from None
    return value.strip()


# Named presets for the ablation rows.
ABLATIONS = {
    "full": {},
    "source_only": {"no_discriminator": True, "no_target_pairwise": True},
    "no_pairwise": {"no_source_pairwise": True, "no_target_pairwise": True},
    "no_target_pairwise": {"no_target_pairwise": True},
    "no_prototypes": {"no_prototypes": True},
    "no_thresholding": {"pseudo_mode": "none"},
    "fixed_pseudo": {"pseudo_mode": "fixed"},
    "linear_pseudo": {"pseudo_mode": "linear"},
    "fixed_gamma": {"gamma_mode": "fixed"},
}


def substream(seed, name):
    """Independent generator for one named consumer of randomness."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])
    return np.random.default_rng(ss)


def substream_seed(seed, name):
    return int(substream(seed, name).integers(0, 2**31 - 1))
