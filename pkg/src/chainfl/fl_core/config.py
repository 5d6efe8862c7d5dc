"""Task configuration: ``global_args`` / ``train_args`` / ``algorithm``.

Config files are YAML (JSON is accepted too, being a subset).  Validation
errors carry the dotted field path and, when the file is available, the line
it was found on (or the line of the enclosing section for a missing field).
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

ALGORITHMS = ("fedavg", "fedprox")
MODELS = ("linear", "mlp_1hidden")
OPTIMIZERS = ("sgd",)
PARTITIONS = ("iid", "dirichlet")


class ConfigError(ValueError):
    def __init__(self, field: str, message: str, line: int | None = None):
        self.field = field
        self.line = line
        where = f"line {line}: " if line else ""
        super().__init__(f"{where}{field}: {message}")


@dataclass
class WatermarkArgs:
    enabled: bool = True
    k: int = 32
    gamma: float = 0.1
    # "lambda" in config files
    lam: float = 0.5
    slice_length: int = 512
    slice_offset: int | None = None  # None: start of the final linear layer
    max_steps: int = 500
    owner: str | None = None  # client_id; None: the first client
    model_id: str | None = None


@dataclass
class GlobalArgs:
    model: str
    dataset: str
    client_number: int
    communication_rounds: int
    seed: int
    hidden_units: int = 256
    n_samples: int = 2000
    n_features: int = 20
    n_classes: int = 2
    separation: float = 4.0
    test_fraction: float = 0.2
    data_path: str | None = None
    partition: str = "iid"
    alpha: float = 0.5
    incentive_budget: int = 1000
    workers: int = 1


@dataclass
class TrainArgs:
    learning_rate: float = 0.05
    optimizer: str = "sgd"
    weight_decay: float = 0.0
    local_epochs: int = 1
    batch_size: int = 32
    mu: float = 0.0
    watermark: WatermarkArgs = field(default_factory=WatermarkArgs)


@dataclass
class TaskConfig:
    global_args: GlobalArgs
    train_args: TrainArgs
    algorithm: str = "fedavg"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train_args"]["watermark"]["lambda"] = d["train_args"]["watermark"].pop("lam")
        return d


DEFAULT_BENCHMARK: dict[str, Any] = {
    "global_args": {
        "model": "mlp_1hidden",
        "dataset": "blobs",
        "client_number": 10,
        "communication_rounds": 5,
        "seed": 2024,
    },
    "train_args": {
        "learning_rate": 0.05,
        "optimizer": "sgd",
        "weight_decay": 0.0,
        "local_epochs": 1,
        "batch_size": 32,
        "mu": 0.0,
        "watermark": {"enabled": True, "k": 32, "gamma": 0.1, "lambda": 0.5},
    },
    "algorithm": "fedavg",
}


def _line_index(text: str) -> dict[tuple[str, ...], int]:
    """Map key paths to 1-based line numbers using the YAML node tree."""
    out: dict[tuple[str, ...], int] = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return out

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                key = path + (str(k.value),)
                out[key] = k.start_mark.line + 1
                walk(v, key)

    walk(root, ())
    return out


class _Reader:
    def __init__(self, lines: dict[tuple[str, ...], int]):
        self.lines = lines

    def line(self, path: tuple[str, ...]) -> int | None:
        while path:
            if path in self.lines:
                return self.lines[path]
            path = path[:-1]
        return None

    def fail(self, path: tuple[str, ...], message: str):
        raise ConfigError(".".join(path), message, self.line(path))

    def section(self, raw: Any, path: tuple[str, ...]) -> dict:
        if not isinstance(raw, dict):
            self.fail(path, "must be a mapping")
        return raw

    def get(self, sec: dict, path: tuple[str, ...], kind: str, default: Any = ..., *,
            choices: tuple | None = None, minimum: float | None = None,
            positive: bool = False) -> Any:
        name = path[-1]
        if name not in sec:
            if default is ...:
                self.fail(path, "required field is missing")
            return default
        value = sec[name]
        if value is None and default is None:
            return None
        if kind == "int":
            if isinstance(value, bool) or not isinstance(value, int):
                self.fail(path, f"must be an integer, got {value!r}")
        elif kind == "float":
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                self.fail(path, f"must be a number, got {value!r}")
            value = float(value)
            if not math.isfinite(value):
                self.fail(path, "must be finite")
        elif kind == "bool":
            if not isinstance(value, bool):
                self.fail(path, f"must be true or false, got {value!r}")
        elif kind == "str":
            if not isinstance(value, str):
                self.fail(path, f"must be a string, got {value!r}")
            value = value.lower() if choices else value
        if choices is not None and value not in choices:
            self.fail(path, f"must be one of {', '.join(choices)}; got {value!r}")
        if positive and not value > 0:
            self.fail(path, f"must be positive, got {value!r}")
        if minimum is not None and value < minimum:
            self.fail(path, f"must be >= {minimum}, got {value!r}")
        return value


def parse_config(raw: Any, text: str | None = None) -> TaskConfig:
    """Validate a decoded config document into a :class:`TaskConfig`."""
    r = _Reader(_line_index(text) if text else {})
    top = r.section(raw, ("<document>",))
    for name in ("global_args", "train_args"):
        if name not in top:
            r.fail((name,), "required section is missing")
    for name in top:
        if name not in ("global_args", "train_args", "algorithm"):
            r.fail((str(name),), "unknown section")

    g = r.section(top["global_args"], ("global_args",))
    G = ("global_args",)
    ga = GlobalArgs(
        model=r.get(g, G + ("model",), "str", choices=MODELS),
        dataset=r.get(g, G + ("dataset",), "str").lower(),
        client_number=r.get(g, G + ("client_number",), "int", minimum=1),
        communication_rounds=r.get(g, G + ("communication_rounds",), "int", minimum=1),
        seed=r.get(g, G + ("seed",), "int", minimum=0),
        hidden_units=r.get(g, G + ("hidden_units",), "int", 256, minimum=1),
        n_samples=r.get(g, G + ("n_samples",), "int", 2000, minimum=1),
        n_features=r.get(g, G + ("n_features",), "int", 20, minimum=1),
        n_classes=r.get(g, G + ("n_classes",), "int", 2, minimum=2),
        separation=r.get(g, G + ("separation",), "float", 4.0, minimum=0.0),
        test_fraction=r.get(g, G + ("test_fraction",), "float", 0.2, minimum=0.0),
        data_path=r.get(g, G + ("data_path",), "str", None),
        partition=r.get(g, G + ("partition",), "str", "iid", choices=PARTITIONS),
        alpha=r.get(g, G + ("alpha",), "float", 0.5, positive=True),
        incentive_budget=r.get(g, G + ("incentive_budget",), "int", 1000, minimum=1),
        workers=r.get(g, G + ("workers",), "int", 1, minimum=1),
    )
    if ga.seed >= 1 << 64:
        r.fail(G + ("seed",), "must fit in 64 unsigned bits")
    if ga.test_fraction >= 1.0:
        r.fail(G + ("test_fraction",), "must be below 1")

    t = r.section(top["train_args"], ("train_args",))
    T = ("train_args",)
    w = r.section(t.get("watermark", {}) or {}, T + ("watermark",))
    W = T + ("watermark",)
    wa = WatermarkArgs(
        enabled=r.get(w, W + ("enabled",), "bool", True),
        k=r.get(w, W + ("k",), "int", 32, minimum=1),
        gamma=r.get(w, W + ("gamma",), "float", 0.1, positive=True),
        lam=r.get(w, W + ("lambda",), "float", 0.5, minimum=0.0),
        slice_length=r.get(w, W + ("slice_length",), "int", 512, minimum=1),
        slice_offset=r.get(w, W + ("slice_offset",), "int", None, minimum=0),
        max_steps=r.get(w, W + ("max_steps",), "int", 500, minimum=1),
        owner=r.get(w, W + ("owner",), "str", None),
        model_id=r.get(w, W + ("model_id",), "str", None),
    )
    if wa.k > wa.slice_length:
        r.fail(W + ("k",), f"must not exceed slice_length ({wa.slice_length})")
    ta = TrainArgs(
        learning_rate=r.get(t, T + ("learning_rate",), "float", 0.05, positive=True),
        optimizer=r.get(t, T + ("optimizer",), "str", "sgd", choices=OPTIMIZERS),
        weight_decay=r.get(t, T + ("weight_decay",), "float", 0.0, minimum=0.0),
        local_epochs=r.get(t, T + ("local_epochs",), "int", 1, minimum=1),
        batch_size=r.get(t, T + ("batch_size",), "int", 32, minimum=1),
        mu=r.get(t, T + ("mu",), "float", 0.0, minimum=0.0),
        watermark=wa,
    )
    algorithm = r.get(top, ("algorithm",), "str", "fedavg", choices=ALGORITHMS)
    return TaskConfig(ga, ta, algorithm)


def load_config(path) -> TaskConfig:
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError("<document>", f"not valid YAML: {exc}",
                          mark.line + 1 if mark else None) from exc
    return parse_config(raw, text)


def default_config(overrides: dict[str, Any] | None = None) -> TaskConfig:
    """The default benchmark, with dotted-path overrides like ``{"train_args.mu": 1.0}``."""
    raw = copy.deepcopy(DEFAULT_BENCHMARK)
    for dotted, value in (overrides or {}).items():
        *parents, leaf = dotted.split(".")
        node = raw
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return parse_config(raw)
