"""JSON system files.

A system file looks like::

    {
      "name": "zeilinger3",
      "A": [[...]], "B": [[...]],
      "X": {"F": [[...]], "g": [...]},      # or {"lo": [...], "hi": [...]}
      "U": {...}, "D": {...},
      "S": {...},                           # optional; computed when absent
      "horizon": 5, "c1": 1.0, "c2": 1.0, "seed": 0,
      "reference_policy": {"W": [[...]], "w": [...]}   # optional
    }
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .mpc import CondensedMpc, LinearSystem
from .polytope import Polytope, rci_iterate


def polytope_from_spec(d) -> Polytope:
    if "F" in d:
        return Polytope(d["F"], d["g"])
    if "lo" in d and "hi" in d:
        return Polytope.box(d["lo"], d["hi"])
    raise ValueError("polytope needs either F/g or lo/hi")


@dataclass
class SystemConfig:
    A: list
    B: list
    X: dict
    U: dict
    D: dict
    S: dict | None = None
    horizon: int = 5
    c1: float = 1.0
    c2: float = 1.0
    seed: int = 0
    name: str = "system"
    reference_policy: dict | None = None
    extra: dict = field(default_factory=dict)

    _keys = ("name", "A", "B", "X", "U", "D", "S", "horizon", "c1", "c2", "seed", "reference_policy")

    @classmethod
    def from_dict(cls, d: dict) -> SystemConfig:
        missing = [k for k in ("A", "B", "X", "U", "D") if k not in d]
        if missing:
            raise ValueError(f"system file is missing {', '.join(missing)}")
        known = {k: d[k] for k in cls._keys if k in d}
        extra = {k: v for k, v in d.items() if k not in cls._keys}
        return cls(**known, extra=extra)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self._keys if getattr(self, k) is not None}
        out.update(self.extra)
        return out

    def system(self, rci_max_iter: int = 50) -> LinearSystem:
        X = polytope_from_spec(self.X)
        U = polytope_from_spec(self.U)
        D = polytope_from_spec(self.D)
        if self.S is not None:
            S = polytope_from_spec(self.S)
        else:
            S = rci_iterate(X, U, D, self.A, self.B, max_iter=rci_max_iter).polytope
        return LinearSystem(np.array(self.A, float), np.array(self.B, float), X, U, D, S)

    def mpc(self, sys: LinearSystem | None = None) -> CondensedMpc:
        return CondensedMpc(sys if sys is not None else self.system(), self.horizon, self.c1, self.c2)


def load_config(path) -> SystemConfig:
    with open(path) as f:
        return SystemConfig.from_dict(json.load(f))


def save_config(cfg: SystemConfig, path):
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")


def bundled_path(name: str = "zeilinger3") -> Path:
    return Path(str(resources.files("gaugempc") / "data" / f"{name}.json"))


def load_bundled(name: str = "zeilinger3") -> SystemConfig:
    return load_config(bundled_path(name))
