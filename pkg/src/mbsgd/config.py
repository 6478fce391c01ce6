"""Experiment configuration: a flat key-value format with dotted paths.

The file format is one `section.key = value` assignment per line, with
`#` comments and blank lines ignored. Every key has a declared type and
default; parsing validates names and values and serialization writes the
canonical form, so parse(serialize(parse(text))) == parse(text).

The MBSGD_SEED environment variable, when set, supplies the default seeds
(data=S, init=S+1, shuffle=S+2); explicit seeds.* keys always win.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

from .collectives import ALGORITHMS, Topology
from .data import Dataset, make_synthetic
from .engine import (
    MODE_ACCUMULATED,
    MODE_DISTRIBUTED,
    PITFALLS,
    Engine,
    EngineConfig,
    Seeds,
)
from .models import CROSS_ENTROPY, SUM_OUTPUT, ModelSpec
from .solver import SolverConfig


class ConfigError(ValueError):
    pass


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_int_list(raw: str) -> tuple:
    raw = raw.strip()
    if not raw:
        return ()
    return tuple(int(part) for part in raw.split(","))


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_PARSERS = {
    "int": int,
    "float": float,
    "bool": _parse_bool,
    "str": lambda s: s.strip(),
    "int_list": _parse_int_list,
}


def _default_seed() -> int:
    return int(os.environ.get("MBSGD_SEED", "1"))


# key -> (type, default factory)
SCHEMA = {
    "dataset.n_samples": ("int", lambda: 512),
    "dataset.dim": ("int", lambda: 8),
    "dataset.classes": ("int", lambda: 2),
    "dataset.separation": ("float", lambda: 3.0),
    "dataset.eval_samples": ("int", lambda: 128),
    "model.hidden": ("int_list", lambda: (16,)),
    "model.bn": ("bool", lambda: False),
    "model.residual_blocks": ("int", lambda: 0),
    "model.loss": ("str", lambda: CROSS_ENTROPY),
    "model.gamma_last_init": ("float", lambda: 0.0),
    "solver.base_lr": ("float", lambda: 0.1),
    "solver.ref_kn": ("int", lambda: 256),
    "solver.momentum": ("float", lambda: 0.9),
    "solver.weight_decay": ("float", lambda: 0.0001),
    "solver.milestones": ("int_list", lambda: (30, 60, 80)),
    "solver.decay_factor": ("float", lambda: 0.1),
    "solver.warmup": ("str", lambda: "none"),
    "solver.warmup_epochs": ("int", lambda: 5),
    "solver.scaling": ("str", lambda: "linear"),
    "solver.momentum_form": ("str", lambda: "reference"),
    "solver.momentum_correction": ("bool", lambda: True),
    "engine.k": ("int", lambda: 8),
    "engine.n": ("int", lambda: 4),
    "engine.servers": ("int", lambda: 2),
    "engine.gpus_per_server": ("int", lambda: 4),
    "engine.algo": ("str", lambda: "ring"),
    "engine.mode": ("str", lambda: MODE_DISTRIBUTED),
    "engine.pipeline_window": ("int", lambda: 1),
    "engine.epochs": ("int", lambda: 5),
    "engine.debug_checksums": ("bool", lambda: True),
    "engine.pitfall": ("str", lambda: "none"),
    "seeds.data": ("int", _default_seed),
    "seeds.init": ("int", lambda: _default_seed() + 1),
    "seeds.shuffle": ("int", lambda: _default_seed() + 2),
    "output.path": ("str", lambda: "train.csv"),
}


@dataclass
class ExperimentConfig:
    """Validated flat config; `values` maps every schema key to a typed value."""

    values: dict

    @classmethod
    def defaults(cls) -> "ExperimentConfig":
        return cls({key: make() for key, (_, make) in SCHEMA.items()})

    @classmethod
    def parse(cls, text: str) -> "ExperimentConfig":
        cfg = cls.defaults()
        for lineno, line in enumerate(text.splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"line {lineno}: expected 'section.key = value': {line!r}")
            key, _, raw = stripped.partition("=")
            cfg.set(key.strip(), raw.strip())
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.parse(fh.read())

    def set(self, key: str, raw: str) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key: {key!r}")
        kind, _ = SCHEMA[key]
        try:
            self.values[key] = _PARSERS[kind](raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc

    def serialize(self) -> str:
        lines = []
        section = None
        for key in SCHEMA:
            this_section = key.split(".")[0]
            if this_section != section:
                if section is not None:
                    lines.append("")
                section = this_section
            lines.append(f"{key} = {_fmt(self.values[key])}")
        return "\n".join(lines) + "\n"

    def comment_lines(self) -> list:
        """Effective values for provenance comments in output CSVs."""
        return [f"{key} = {_fmt(self.values[key])}" for key in SCHEMA]

    def validate(self) -> None:
        v = self.values
        try:
            if v["engine.mode"] == MODE_DISTRIBUTED:
                if v["engine.k"] != v["engine.servers"] * v["engine.gpus_per_server"]:
                    raise ConfigError(
                        "engine.k: must equal engine.servers * engine.gpus_per_server "
                        f"({v['engine.k']} != {v['engine.servers']}*{v['engine.gpus_per_server']})"
                    )
            if v["engine.algo"] not in ALGORITHMS:
                raise ConfigError(f"engine.algo: unknown algorithm {v['engine.algo']!r}")
            if v["engine.pitfall"] not in PITFALLS:
                raise ConfigError(f"engine.pitfall: unknown pitfall {v['engine.pitfall']!r}")
            if v["model.loss"] not in (CROSS_ENTROPY, SUM_OUTPUT):
                raise ConfigError(f"model.loss: unknown loss {v['model.loss']!r}")
            if v["dataset.n_samples"] < v["engine.k"]:
                raise ConfigError("dataset.n_samples: must be >= engine.k")
            self.solver_config()  # SolverConfig validates its own fields
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"solver.*: {exc}") from exc

    def solver_config(self) -> SolverConfig:
        v = self.values
        return SolverConfig(
            base_lr=v["solver.base_lr"],
            ref_kn=v["solver.ref_kn"],
            momentum=v["solver.momentum"],
            weight_decay=v["solver.weight_decay"],
            milestones=v["solver.milestones"],
            decay_factor=v["solver.decay_factor"],
            warmup=v["solver.warmup"],
            warmup_epochs=v["solver.warmup_epochs"],
            scaling=v["solver.scaling"],
            momentum_form=v["solver.momentum_form"],
            momentum_correction=v["solver.momentum_correction"],
        )

    def engine_config(self) -> EngineConfig:
        v = self.values
        mode = v["engine.mode"]
        if mode == MODE_ACCUMULATED:
            topology = Topology(1, 1)
        else:
            topology = Topology(v["engine.servers"], v["engine.gpus_per_server"])
        return EngineConfig(
            k=v["engine.k"],
            n=v["engine.n"],
            topology=topology,
            algo=v["engine.algo"],
            mode=mode,
            pipeline_window=v["engine.pipeline_window"],
            epochs=v["engine.epochs"],
            debug_checksums=v["engine.debug_checksums"],
            pitfall=v["engine.pitfall"],
        )

    def model_spec(self) -> ModelSpec:
        v = self.values
        return ModelSpec(
            input_dim=v["dataset.dim"],
            classes=v["dataset.classes"],
            hidden=v["model.hidden"],
            bn=v["model.bn"],
            residual_blocks=v["model.residual_blocks"],
            loss=v["model.loss"],
        )

    def seeds(self) -> Seeds:
        v = self.values
        return Seeds(data=v["seeds.data"], init=v["seeds.init"], shuffle=v["seeds.shuffle"])

    def datasets(self) -> tuple[Dataset, Dataset]:
        v = self.values
        train = make_synthetic(
            v["seeds.data"],
            v["dataset.n_samples"],
            v["dataset.dim"],
            v["dataset.classes"],
            v["dataset.separation"],
        )
        eval_set = make_synthetic(
            v["seeds.data"] + 1,
            v["dataset.eval_samples"],
            v["dataset.dim"],
            v["dataset.classes"],
            v["dataset.separation"],
        )
        return train, eval_set

    def build_engine(self) -> Engine:
        train, eval_set = self.datasets()
        return Engine(
            dataset=train,
            eval_dataset=eval_set,
            model_spec=self.model_spec(),
            solver_config=self.solver_config(),
            engine_config=self.engine_config(),
            seeds=self.seeds(),
            gamma_last_init=self.values["model.gamma_last_init"],
        )
