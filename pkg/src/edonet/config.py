"""Run configuration: simulator constants, grid, seeds and hyperparameters.

The text form is one ``key = value`` per line, ``#`` starts a comment.
Simulator keys carry a ``sim.`` prefix. The canonical form lists every key
sorted, and the config hash is the SHA-256 of that form.
"""

from dataclasses import dataclass, field, fields, replace
import hashlib

import numpy as np

from .clothsim import SimConfig


class ConfigError(ValueError):
    pass


GRIDS = ("desk", "full")


@dataclass(frozen=True)
class RunConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    grid: str = "desk"
    seed: int = 0
    split_seed: int = 0
    # model
    latent: int = 32
    hidden: int = 32
    steps: int = 4
    T: int = 5
    union_sum: bool = False
    os_weight: float = 1.0
    # optimisation
    epochs: int = 300
    batch: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # evaluation heads
    decode_hidden: int = 64
    decode_layers: int = 3
    decode_epochs: int = 2000
    inverse_epochs: int = 300
    transfer_epochs: int = 300
    jobs: int = 1

    def grid_values(self):
        return grid_values(self.grid)

    def to_text(self):
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in sorted(self.items()))

    def items(self):
        out = {}
        for f in fields(self):
            if f.name == "sim":
                for g in fields(self.sim):
                    out[f"sim.{g.name}"] = getattr(self.sim, g.name)
            else:
                out[f.name] = getattr(self, f.name)
        return out.items()

    def hash(self):
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def gen_hash(self):
        """Digest of the keys that determine the generated dataset."""
        keys = {k: v for k, v in self.items() if k.startswith("sim.") or k in ("grid", "seed")}
        text = "".join(f"{k} = {_fmt(v)}\n" for k, v in sorted(keys.items()))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def with_updates(self, **kw):
        sim_kw = {k[4:]: v for k, v in kw.items() if k.startswith("sim.")}
        top = {k: v for k, v in kw.items() if not k.startswith("sim.")}
        return replace(self, sim=replace(self.sim, **sim_kw), **top)


def grid_values(name):
    """Stiffness and bending values of a parameter grid."""
    if name == "desk":
        return np.linspace(10.0, 46.0, 5), np.linspace(0.01, 5.01, 5)
    if name == "full":
        return 10.0 + 3.0 * np.arange(13), 0.01 + 0.5 * np.arange(11)
    raise ConfigError(f"unknown grid {name!r}; choose from {', '.join(GRIDS)}")


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _convert(name, text, typ):
    try:
        if typ is bool:
            low = text.lower()
            if low not in ("true", "false"):
                raise ValueError(text)
            return low == "true"
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {name}: {text!r}") from None


def _types():
    types = {f"sim.{f.name}": f.type for f in fields(SimConfig)}
    types.update({f.name: f.type for f in fields(RunConfig) if f.name != "sim"})
    lookup = {"int": int, "float": float, "bool": bool, "str": str}
    return {k: lookup.get(t, t) if isinstance(t, str) else t for k, t in types.items()}


def parse_config(text, base=None):
    types = _types()
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        updates[key] = _convert(key, value, types[key])
    cfg = (base or RunConfig()).with_updates(**updates)
    grid_values(cfg.grid)
    return cfg


def load_config(path):
    if path is None:
        return RunConfig()
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
