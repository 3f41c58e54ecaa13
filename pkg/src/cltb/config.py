"""Experiment configuration: a strict sectioned key-value file.

Unknown sections or keys are hard errors so a misspelled hyperparameter can
never silently fall back to a default. Values are typed; "auto" selects the
documented derived value where a key supports it. Per-strategy training
defaults fill in anything the file leaves out.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field

from .attacks import ATTACK_METHODS, AttackSpec
from .benchmarks import info as benchmark_info
from .defenses import DEFENSE_MODES, DefenseConfig
from .seeding import derive_seed
from .strategies import STRATEGIES, StrategyConfig


class ConfigError(ValueError):
    pass


# (type, default) per key; None default means required, "auto" means derived
_SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "experiment": {
        "benchmark": ("str", None),
        "strategy": ("str", None),
        "output_dir": ("str", None),
        "master_seed": ("int", 2),
    },
    "data": {
        "root": ("str", ""),
        "class_order": ("str", "canonical"),
        "class_order_seed": ("int", 0),
    },
    "training": {
        "epochs": ("int", "auto"),
        "batch_size": ("int", 64),
        "lr": ("float", "auto"),
        "lr_stage_decay": ("float", "auto"),
        "momentum": ("float", 0.9),
        "weight_decay": ("float", "auto"),
        "buffer_capacity": ("int", "auto"),
        "distill_temperature": ("float", 1.0),
        "contrastive_temperature": ("float", 0.1),
        "gdumb_epochs": ("int", 100),
        "nme_classifier": ("bool", False),
    },
    "attacks": {
        "methods": ("strlist", ["fgsm", "pgd"]),
        "epsilon": ("float", "auto"),
        "iterations": ("int", "auto"),
        "step_size": ("optfloat", None),
        "random_start": ("bool", False),
        "square_queries": ("int", 1000),
    },
    "defense": {
        "mode": ("str", "none"),
        "inner_epsilon": ("optfloat", None),
        "inner_iterations": ("int", 7),
        "inner_step_size": ("optfloat", None),
        "boundary_capacity": ("int", 200),
        "mixup_alpha": ("float", 1.0),
        "distill_weight": ("float", 1.0),
        "kd_temperature": ("float", 2.0),
        "flatness_weight": ("float", 0.01),
    },
    "metrics": {
        "lipschitz_samples": ("int", 0),
        "hessian_iterations": ("int", 100),
        "hessian_tolerance": ("float", 1e-6),
        "similarity_attack": ("str", "pgd"),
    },
}

# hyperparameters that reproduce the benchmark trends; anything a config file
# sets explicitly wins
_TRAINING_DEFAULTS = {
    "split-mnist": {
        "icarl": dict(epochs=10, lr=0.03, lr_stage_decay=0.7, weight_decay=0.0,
                      buffer_capacity=200),
        "gdumb": dict(epochs=1, lr=0.03, lr_stage_decay=1.0, weight_decay=0.01,
                      buffer_capacity=200),
        "er-ace": dict(epochs=1, lr=0.05, lr_stage_decay=1.0, weight_decay=0.0,
                       buffer_capacity=200),
        "er-aml": dict(epochs=1, lr=0.02, lr_stage_decay=1.0, weight_decay=0.01,
                       buffer_capacity=200),
    },
    "split-cifar100": {
        "icarl": dict(epochs=2, lr=0.03, lr_stage_decay=0.8, weight_decay=0.0,
                      buffer_capacity=2000),
        "gdumb": dict(epochs=1, lr=0.03, lr_stage_decay=1.0, weight_decay=0.01,
                      buffer_capacity=2000),
        "er-ace": dict(epochs=1, lr=0.05, lr_stage_decay=1.0, weight_decay=0.0,
                       buffer_capacity=2000),
        "er-aml": dict(epochs=1, lr=0.02, lr_stage_decay=1.0, weight_decay=0.01,
                       buffer_capacity=2000),
    },
}


@dataclass
class ExperimentConfig:
    benchmark: str
    output_dir: str
    master_seed: int
    data_root: str
    class_order: str
    class_order_seed: int
    strategy: StrategyConfig
    attack_methods: list[str]
    epsilon: float
    iterations: int
    step_size: float | None
    random_start: bool
    square_queries: int
    defense: DefenseConfig
    lipschitz_samples: int
    hessian_iterations: int
    hessian_tolerance: float
    similarity_attack: str
    raw: dict[str, dict[str, str]] = field(default_factory=dict)

    def attack_spec(self, method: str) -> AttackSpec:
        return AttackSpec(
            method=method, epsilon=self.epsilon, iterations=self.iterations,
            step_size=self.step_size, random_start=self.random_start,
            query_budget=self.square_queries,
            seed=derive_seed(self.master_seed, "attack"))

    def attack_specs(self) -> list[AttackSpec]:
        return [self.attack_spec(m) for m in self.attack_methods]


def _parse_value(section: str, key: str, kind: str, raw: str):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "optfloat":
            return None if raw == "auto" else float(raw)
        if kind == "bool":
            if raw.lower() in ("true", "yes", "1", "on"):
                return True
            if raw.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind == "strlist":
            return [part.strip() for part in raw.split(",") if part.strip()]
        return raw
    except ValueError:
        raise ConfigError(
            f"[{section}] {key}: cannot parse {raw!r} as {kind}") from None


def parse_config_text(text: str, path: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=path)
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from None

    values: dict[str, dict[str, object]] = {}
    raw_echo: dict[str, dict[str, str]] = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"{path}: unknown section [{section}]")
        values[section] = {}
        raw_echo[section] = {}
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{path}: unknown key [{section}] {key}")
            kind, _default = _SCHEMA[section][key]
            values[section][key] = _parse_value(section, key, kind, raw)
            raw_echo[section][key] = raw.strip()

    def get(section: str, key: str):
        if section in values and key in values[section]:
            return values[section][key]
        kind, default = _SCHEMA[section][key]
        if default is None and kind != "optfloat":
            raise ConfigError(f"{path}: missing required key [{section}] {key}")
        return default

    benchmark = get("experiment", "benchmark")
    bench = benchmark_info(benchmark)  # validates the name
    strategy_name = get("experiment", "strategy")
    if strategy_name not in STRATEGIES:
        raise ConfigError(
            f"{path}: unknown strategy {strategy_name!r} "
            f"(expected one of {', '.join(STRATEGIES)})")

    defaults = _TRAINING_DEFAULTS[benchmark][strategy_name]

    def train_value(key: str):
        v = get("training", key)
        if v == "auto":
            if key in defaults:
                return defaults[key]
            raise ConfigError(f"{path}: [training] {key} has no default")
        return v

    master_seed = get("experiment", "master_seed")
    strategy = StrategyConfig(
        strategy=strategy_name,
        epochs=train_value("epochs"),
        batch_size=get("training", "batch_size"),
        lr=train_value("lr"),
        lr_stage_decay=train_value("lr_stage_decay"),
        momentum=get("training", "momentum"),
        weight_decay=train_value("weight_decay"),
        buffer_capacity=train_value("buffer_capacity"),
        distill_temperature=get("training", "distill_temperature"),
        contrastive_temperature=get("training", "contrastive_temperature"),
        gdumb_epochs=get("training", "gdumb_epochs"),
        nme_classifier=get("training", "nme_classifier"),
        seed=master_seed,
    )

    methods = get("attacks", "methods")
    for m in methods:
        if m not in ATTACK_METHODS:
            raise ConfigError(f"{path}: unknown attack method {m!r}")
    epsilon = get("attacks", "epsilon")
    epsilon = bench.default_epsilon if epsilon == "auto" else epsilon
    iterations = get("attacks", "iterations")
    iterations = bench.default_iterations if iterations == "auto" else iterations

    mode = get("defense", "mode")
    if mode not in DEFENSE_MODES:
        raise ConfigError(f"{path}: unknown defense mode {mode!r}")
    inner_eps = get("defense", "inner_epsilon")
    defense = DefenseConfig(
        mode=mode,
        inner_epsilon=epsilon if inner_eps is None else inner_eps,
        inner_iterations=get("defense", "inner_iterations"),
        inner_step_size=get("defense", "inner_step_size"),
        boundary_capacity=get("defense", "boundary_capacity"),
        mixup_alpha=get("defense", "mixup_alpha"),
        distill_weight=get("defense", "distill_weight"),
        kd_temperature=get("defense", "kd_temperature"),
        flatness_weight=get("defense", "flatness_weight"),
    )

    return ExperimentConfig(
        benchmark=benchmark,
        output_dir=get("experiment", "output_dir"),
        master_seed=master_seed,
        data_root=get("data", "root"),
        class_order=get("data", "class_order"),
        class_order_seed=get("data", "class_order_seed"),
        strategy=strategy,
        attack_methods=methods,
        epsilon=epsilon,
        iterations=iterations,
        step_size=get("attacks", "step_size"),
        random_start=get("attacks", "random_start"),
        square_queries=get("attacks", "square_queries"),
        defense=defense,
        lipschitz_samples=get("metrics", "lipschitz_samples"),
        hessian_iterations=get("metrics", "hessian_iterations"),
        hessian_tolerance=get("metrics", "hessian_tolerance"),
        similarity_attack=get("metrics", "similarity_attack"),
        raw=raw_echo,
    )


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config_text(text, path)


def config_digest(path: str) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()
