"""Run configuration: a YAML key-value tree mapped onto dataclasses.

Unknown keys are rejected with the file position of the offending key.
Defaults follow the published hyperparameter table per task and layer kind;
values given in the file always win.  Environment variables may override data
and output paths only (``TEMPO_SNN_SHD_DIR``, ``TEMPO_SNN_CACHE_DIR``,
``TEMPO_SNN_OUT_DIR``).
"""

from __future__ import annotations

import copy
import dataclasses
import io
import os
from dataclasses import dataclass, field
from typing import Optional

import yaml

from .datasets import MtsXorConfig
from .training import LOSS_KINDS, OptimSpec

TASKS = ("mtsxor", "shd", "ssc", "custom-cache")


class ConfigError(ValueError):
    pass


@dataclass
class NetworkConfig:
    n_hidden: int = 2
    hidden_size: int = 10
    layer_kind: str = "dense"
    tau_out: float = 0.2
    init_gain: float = 1.0
    init_scaling: str = "tau"


@dataclass
class HierarchyConfig:
    shape: str = "linear"
    tau_mu: float = 0.3
    delta_tau: float = 0.0
    steepness: float = 0.5
    centering: float = 0.5
    mean_kernel: int = 5
    delta_ker: int = 0
    mean_dilation: int = 5
    delta_dil: int = 0


@dataclass
class OptimConfig(OptimSpec):
    loss: str = "max_over_windows"


@dataclass
class DataConfig:
    mtsxor: MtsXorConfig = field(default_factory=MtsXorConfig)
    n_train: int = 8192
    n_test: int = 1024
    valid_frac: float = 0.2
    test_as_valid: bool = False
    augment: bool = False
    dt: float = 0.01
    T: int = 100
    shd_dir: Optional[str] = None
    cache_train: Optional[str] = None
    cache_test: Optional[str] = None


@dataclass
class GradcheckConfig:
    n_nets: int = 20
    T: int = 10
    batch: int = 2
    n_inputs: int = 4
    hidden_size: int = 8
    n_hidden: int = 2
    n_outputs: int = 3
    epsilon: float = 1e-5
    tol_weights: float = 1e-5
    tol_tau: float = 1e-4
    reference_beta: float = 0.5
    edge_delta: float = 1e-3
    train_tau: bool = True
    layer_kinds: list = field(default_factory=lambda: ["dense", "conv"])
    losses: list = field(default_factory=lambda: ["sum_softmax", "max_over_windows"])


@dataclass
class RunConfig:
    task: str = "mtsxor"
    seed: int = 0
    n_trials: int = 1
    out_dir: str = "runs/default"
    network: NetworkConfig = field(default_factory=NetworkConfig)
    hierarchy: HierarchyConfig = field(default_factory=HierarchyConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)
    sweep: dict = field(default_factory=dict)
    baseline: dict = field(default_factory=dict)

    def validate(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.optim.loss not in LOSS_KINDS:
            raise ConfigError(f"optim.loss must be one of {LOSS_KINDS}")
        if self.network.layer_kind not in ("dense", "conv"):
            raise ConfigError("network.layer_kind must be 'dense' or 'conv'")
        if self.network.init_scaling not in ("tau", "none"):
            raise ConfigError("network.init_scaling must be 'tau' or 'none'")
        if self.n_trials < 1:
            raise ConfigError("n_trials must be >= 1")
        if self.task in ("shd", "ssc") and self.optim.loss == "max_over_windows":
            raise ConfigError(f"task {self.task!r} has no label windows; use sum_softmax")
        if len(self.sweep) > 2:
            raise ConfigError("a sweep may vary at most two keys")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)


# Published per-task hyperparameters; applied before the user's file.
TASK_DEFAULTS = {
    ("mtsxor", "dense"): {"optim": {"batch_size": 512, "epochs": 60, "dropout_p": 0.1,
                                    "loss": "max_over_windows"},
                          "hierarchy": {"tau_mu": 0.3}},
    ("shd", "dense"): {"optim": {"batch_size": 256, "epochs": 60, "dropout_p": 0.1,
                                 "loss": "sum_softmax"},
                       "hierarchy": {"tau_mu": 0.2}, "network": {"hidden_size": 32}},
    ("shd", "conv"): {"optim": {"batch_size": 256, "epochs": 100, "dropout_p": 0.4,
                                "loss": "sum_softmax", "l2_coeff": 1e-4},
                      "hierarchy": {"tau_mu": 0.2}, "network": {"hidden_size": 128}},
}
TASK_DEFAULTS[("ssc", "dense")] = TASK_DEFAULTS[("shd", "dense")]
TASK_DEFAULTS[("ssc", "conv")] = TASK_DEFAULTS[("shd", "conv")]
TASK_DEFAULTS[("custom-cache", "dense")] = {"optim": {"loss": "sum_softmax"}}
TASK_DEFAULTS[("custom-cache", "conv")] = {"optim": {"loss": "sum_softmax"}}


def _mark(node):
    m = node.start_mark
    return f"{m.name}:{m.line + 1}:{m.column + 1}"


def _node_to_py(node):
    """Plain python value of a YAML node, keeping key nodes for error marks."""
    if isinstance(node, yaml.MappingNode):
        return {k.value: (k, _node_to_py(v)) for k, v in node.value}
    if isinstance(node, yaml.SequenceNode):
        return [_strip(_node_to_py(v)) for v in node.value]
    return yaml.safe_load(yaml.serialize(node))


def _strip(value):
    if isinstance(value, dict):
        return {k: _strip(v[1]) for k, v in value.items()}
    return value


def _apply(obj, tree, path, marks=True):
    """Set fields of dataclass ``obj`` from ``tree``; rejects unknown keys."""
    names = {f.name: f for f in dataclasses.fields(obj)}
    for key, entry in tree.items():
        knode, value = entry if marks else (None, entry)
        where = f"{_mark(knode)}: " if knode is not None else ""
        if key not in names:
            raise ConfigError(f"{where}unknown key {'.'.join(path + [key])!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}{'.'.join(path + [key])} must be a mapping")
            if isinstance(current, MtsXorConfig):
                kwargs = dataclasses.asdict(current)
                plain = _strip(value) if marks else value
                for k in plain:
                    if k not in kwargs:
                        raise ConfigError(f"{where}unknown key "
                                          f"{'.'.join(path + [key, k])!r}")
                types = {g.name: g.type for g in dataclasses.fields(MtsXorConfig)}
                for k, v in plain.items():
                    kwargs[k] = _cast(types[k], v, ".".join(path + [key, k]))
                try:
                    setattr(obj, key, MtsXorConfig(**kwargs))
                except ValueError as e:
                    raise ConfigError(f"{where}{e}") from e
            else:
                _apply(current, value, path + [key], marks)
        else:
            setattr(obj, key, _strip(value) if marks else value)


def _cast(type_name, v, name):
    try:
        if v is None:
            return v
        if type_name == "float":
            return float(v)
        if type_name == "int":
            if isinstance(v, bool) or (isinstance(v, float) and not v.is_integer()):
                raise ValueError(f"{v!r} is not an integer")
            return int(v)
        if type_name == "bool" and not isinstance(v, bool):
            raise ValueError(f"{v!r} is not a boolean")
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{name}: {e}") from e
    return v


def _coerce(cfg):
    """Cast scalar fields to their declared types (YAML reads 1e-5 as a string)."""
    def walk(obj, path):
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            name = ".".join(path + [f.name])
            if isinstance(v, MtsXorConfig):
                kwargs = {g.name: _cast(g.type, getattr(v, g.name), f"{name}.{g.name}")
                          for g in dataclasses.fields(v)}
                try:
                    setattr(obj, f.name, MtsXorConfig(**kwargs))
                except ValueError as e:
                    raise ConfigError(f"{name}: {e}") from e
            elif dataclasses.is_dataclass(v):
                walk(v, path + [f.name])
            else:
                setattr(obj, f.name, _cast(f.type, v, name))
    walk(cfg, [])
    try:
        cfg.optim.__post_init__()
    except ValueError as e:
        raise ConfigError(f"optim: {e}") from e
    return cfg


def _defaults(task, kind):
    cfg = RunConfig()
    cfg.task = task
    cfg.network.layer_kind = kind
    _apply(cfg, TASK_DEFAULTS.get((task, kind), {}), [], marks=False)
    return cfg


def parse_config(text: str, name: str = "<config>") -> RunConfig:
    try:
        stream = io.StringIO(text)
        stream.name = name  # the YAML reader reports positions against this name
        node = yaml.compose(stream, Loader=yaml.SafeLoader)
    except yaml.MarkedYAMLError as e:
        m = e.problem_mark
        pos = f"{name}:{m.line + 1}:{m.column + 1}" if m else name
        raise ConfigError(f"{pos}: {e.problem}") from e
    if node is None:
        tree = {}
    elif not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{name}: top level must be a mapping")
    else:
        tree = _node_to_py(node)
    plain = _strip(tree)
    task = plain.get("task", "mtsxor")
    kind = (plain.get("network") or {}).get("layer_kind", "dense")
    cfg = _defaults(task, kind)
    _apply(cfg, tree, [])
    _env_overrides(cfg)
    return _coerce(cfg).validate()


def load_config(path) -> RunConfig:
    with open(path) as f:
        text = f.read()
    return parse_config(text, str(path))


def _env_overrides(cfg):
    if os.environ.get("TEMPO_SNN_SHD_DIR"):
        cfg.data.shd_dir = os.environ["TEMPO_SNN_SHD_DIR"]
    if os.environ.get("TEMPO_SNN_CACHE_DIR"):
        d = os.environ["TEMPO_SNN_CACHE_DIR"]
        cfg.data.cache_train = os.path.join(d, "train.tsnc")
        cfg.data.cache_test = os.path.join(d, "test.tsnc")
    if os.environ.get("TEMPO_SNN_OUT_DIR"):
        cfg.out_dir = os.environ["TEMPO_SNN_OUT_DIR"]


def set_keys(cfg: RunConfig, assignments: dict) -> RunConfig:
    """Copy of ``cfg`` with dotted keys replaced, validated once at the end."""
    cfg = copy.deepcopy(cfg)
    for dotted, value in assignments.items():
        tree = value
        for p in reversed(dotted.split(".")):
            tree = {p: tree}
        _apply(cfg, tree, [], marks=False)
    return _coerce(cfg).validate()


def set_key(cfg: RunConfig, dotted: str, value) -> RunConfig:
    return set_keys(cfg, {dotted: value})


def parse_value(text: str):
    return yaml.safe_load(text)


def config_from_dict(d: dict) -> RunConfig:
    """Inverse of ``RunConfig.to_dict`` (checkpoints store the config this way)."""
    d = copy.deepcopy(d)
    cfg = _defaults(d.get("task", "mtsxor"), (d.get("network") or {}).get("layer_kind", "dense"))
    _apply(cfg, d, [], marks=False)
    return _coerce(cfg).validate()
