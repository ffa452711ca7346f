"""Run configuration: ``key = value`` sections read with :mod:`configparser`."""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class SystemSection:
    name: str = "pendulum"
    m: float = 1.0
    l: float = 1.0
    G: float = 9.8
    beta: float = 0.1
    u_max: float = 2.0
    dt: float = 0.01
    q_theta: float = 10.0
    q_omega: float = 1.0
    r: float = 1.0
    omega_max: float = 12.0
    dim: int = 2


@dataclass
class DataSection:
    n_traj: int = 1280
    horizon: int = 1000
    tau: int = 50
    split_ratio: float = 0.8
    omega_range: float = 4.0


@dataclass
class TrainSection:
    latent_dim: int = 2
    hidden: str = "32,32"
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda4: float = 0.3
    c: float = 10.0
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 500
    l4: str = "off"
    restarts: int = 5
    fraction: float = 1.0
    normalization: str = "axis"
    lr_schedule: str = "constant"


@dataclass
class GridSection:
    k: str = "6"


@dataclass
class MorseSection:
    compositions: int = 5
    lipschitz: str = "auto"
    lipschitz_mult: float = 1.0
    lipschitz_samples: int = 4
    method: str = "ball"


@dataclass
class EvalSection:
    seeds: int = 3
    axis: str = "fraction"


@dataclass
class DirectSection:
    # explicit breakpoints per axis, ';' separated axes; empty -> uniform grid
    breaks: str = "-3,-2,-0.5,0.5,2,3;-2,-1.25,1.25,2"
    k: str = ""
    tau: int = 1
    method: str = "box"
    lipschitz: float = 1.0


@dataclass
class RunSection:
    seed: int = 0
    workers: int = 1


@dataclass
class Config:
    system: SystemSection = field(default_factory=SystemSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    grid: GridSection = field(default_factory=GridSection)
    morse: MorseSection = field(default_factory=MorseSection)
    eval: EvalSection = field(default_factory=EvalSection)
    direct: DirectSection = field(default_factory=DirectSection)
    run: RunSection = field(default_factory=RunSection)

    def sections(self):
        return [(f.name, getattr(self, f.name)) for f in dataclasses.fields(self)]

    def set(self, section: str, key: str, value) -> None:
        sec = getattr(self, section, None)
        if sec is None or not dataclasses.is_dataclass(sec):
            raise ConfigError(f"unknown section [{section}]")
        types = {f.name: f.type for f in dataclasses.fields(sec)}
        if key not in types:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        setattr(sec, key, _coerce(types[key], value, f"{section}.{key}"))

    def to_text(self) -> str:
        parser = configparser.ConfigParser()
        parser.optionxform = str
        for name, sec in self.sections():
            parser[name] = {k: _fmt(v) for k, v in dataclasses.asdict(sec).items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    def validate(self) -> None:
        if self.system.name not in ("pendulum", "bistable"):
            raise ConfigError(f"unknown system {self.system.name!r}")
        if self.train.l4 not in ("on", "off"):
            raise ConfigError("train.l4 must be 'on' or 'off'")
        if self.train.normalization not in ("axis", "global"):
            raise ConfigError("train.normalization must be 'axis' or 'global'")
        if self.train.lr_schedule not in ("constant", "cosine"):
            raise ConfigError("train.lr_schedule must be 'constant' or 'cosine'")
        if self.morse.method not in ("ball", "box"):
            raise ConfigError("morse.method must be 'ball' or 'box'")
        if not 0 < self.train.fraction <= 1:
            raise ConfigError("train.fraction must lie in (0, 1]")
        if self.morse.lipschitz != "auto":
            try:
                if float(self.morse.lipschitz) <= 0:
                    raise ValueError
            except ValueError:
                raise ConfigError("morse.lipschitz must be 'auto' or a positive number") from None
        if self.morse.lipschitz_mult <= 0:
            raise ConfigError("morse.lipschitz_mult must be positive")
        if self.data.horizon % self.data.tau:
            raise ConfigError("data.horizon must be a multiple of data.tau")
        self.grid_k()
        self.hidden()

    def grid_k(self) -> list[int]:
        try:
            k = [int(v) for v in self.grid.k.split(",")]
        except ValueError:
            raise ConfigError(f"bad grid.k {self.grid.k!r}") from None
        if len(k) == 1:
            k = k * self.train.latent_dim
        if len(k) != self.train.latent_dim:
            raise ConfigError("grid.k needs one entry or one per latent dimension")
        return k

    def hidden(self) -> tuple[int, ...]:
        try:
            return tuple(int(v) for v in self.train.hidden.split(","))
        except ValueError:
            raise ConfigError(f"bad train.hidden {self.train.hidden!r}") from None


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(typ, value, where):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: cannot read {value!r} as {typ}") from None


def preset(name: str) -> Config:
    """Defaults for the named benchmark system."""
    cfg = Config()
    if name == "pendulum":
        # more torque and a 0.2 s step: near upright the LQR transient is then
        # resolved by several pairs instead of jumping to rest in one
        cfg.system.u_max = 4.0
        cfg.data.horizon = 400
        cfg.data.tau = 20
        cfg.train.epochs = 3000
        cfg.train.lr_schedule = "cosine"
        # the global difference-quotient bound is dominated by the separatrix
        # and makes every cell reach both attractors; a long composition with
        # a small inflation separates the basins
        cfg.morse.compositions = 40
        cfg.morse.lipschitz = "0.5"
        return cfg
    if name == "bistable":
        cfg.system.name = "bistable"
        cfg.system.dim = 12
        # many short trajectories: long ones sit at the fixed points and say
        # little about the separatrix
        cfg.data.n_traj = 12500
        cfg.data.horizon = 4
        cfg.data.tau = 1
        cfg.train.epochs = 150
        cfg.train.l4 = "on"
        cfg.train.normalization = "global"
        cfg.morse.compositions = 1
        # the estimate peaks on the separatrix (about 7 against a median
        # below 1) and often merges the two basins; a fixed inflation does not
        cfg.morse.lipschitz = "3"
        return cfg
    raise ConfigError(f"unknown preset {name!r}")


def load_config(path=None, text: str | None = None) -> Config:
    """Read a config file; the ``[system] name`` selects the preset it overrides."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    try:
        if path is not None:
            with open(path) as fh:
                parser.read_file(fh)
        elif text is not None:
            parser.read_string(text)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    name = parser.get("system", "name", fallback="pendulum")
    cfg = preset(name)
    for section in parser.sections():
        for key, value in parser.items(section):
            cfg.set(section, key, value)
    cfg.validate()
    return cfg
