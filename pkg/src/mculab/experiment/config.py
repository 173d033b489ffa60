"""Experiment configuration: sectioned key=value files layered over committed defaults.

A config file looks like::

    [experiment]
    setting = met
    methods = ga, gd
    seeds = 1, 2

    [unlearn]
    optimizer = adam

    [unlearn.gd]        ; per-method overrides
    lr = 0.0001

Files are read on top of ``fixtures/default.cfg``; unknown sections or
keys are rejected so typos do not silently fall back to defaults.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources

from ..curves import CURVE_KINDS, WEIGHTINGS
from ..data import SplitDataset, load_idx, make_blobs, make_moons, split_forget_retain
from ..errors import ConfigError
from ..mcu_eval import STATISTICS, ZRF_REFERENCES
from ..nn.model import ACTIVATIONS, Arch
from ..optim import KINDS
from ..training import TrainSchedule
from ..unlearn import METHODS, UnlearnConfig

SETTINGS = (
    "rand", "rand_cl", "rand_so", "cl_non_cl", "fo_so",
    "met", "met_cl", "met_so", "met_cl_non_cl", "met_fo_so",
)

# (curriculum, second_order) flags for endpoint 1 and endpoint 2
_ROW = {
    "": ((False, False), (False, False)),
    "cl": ((True, False), (True, False)),
    "so": ((False, True), (False, True)),
    "cl_non_cl": ((True, False), (False, False)),
    "fo_so": ((False, False), (False, True)),
}


def modifiers(setting: str):
    if setting not in SETTINGS:
        raise ConfigError(f"setting must be one of {SETTINGS}, got {setting!r}")
    if setting in ("rand", "met"):
        return _ROW[""]
    tail = setting.split("_", 1)[1] if setting.startswith(("rand_", "met_")) else setting
    return _ROW[tail]


def is_met(setting: str) -> bool:
    return setting.startswith("met")


@dataclass(frozen=True)
class DataSpec:
    kind: str = "moons"
    n: int = 400
    noise: float = 0.1
    nuisance_dims: int = 0
    nuisance_scale: float = 1.0
    classes: int = 3
    spread: float = 0.5
    images: str = ""
    labels: str = ""
    limit: int = 0
    forget_fraction: float = 0.02
    test_fraction: float = 0.2
    seed: int = 0

    def build(self) -> SplitDataset:
        if self.kind == "moons":
            ds = make_moons(self.n, self.noise, self.seed, self.nuisance_dims, self.nuisance_scale)
        elif self.kind == "blobs":
            ds = make_blobs(self.n, self.classes, self.spread, self.seed)
        elif self.kind == "idx":
            if not self.images or not self.labels:
                raise ConfigError("idx data needs both images and labels paths")
            ds = load_idx(self.images, self.labels, self.limit or None)
        else:
            raise ConfigError(f"data kind must be moons, blobs or idx, got {self.kind!r}")
        return split_forget_retain(ds, self.forget_fraction, self.test_fraction, self.seed)


@dataclass(frozen=True)
class ModelSpec:
    hidden: tuple = (16, 16)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    def arch(self, ds: SplitDataset) -> Arch:
        return Arch((ds.n_features, *self.hidden, ds.classes), self.activation)


@dataclass(frozen=True)
class BaseSpec:
    epochs: int = 200
    batch_size: int = 32
    optimizer: str = "adam"
    lr: float = 0.01
    accuracy_floor: float = 0.97
    seed: int = 0

    def schedule(self) -> TrainSchedule:
        return TrainSchedule(self.epochs, self.batch_size, self.optimizer, self.lr, self.accuracy_floor)


@dataclass(frozen=True)
class UnlearnSpec:
    """Shared unlearning knobs; ``overrides`` holds per-method ``(method, key, value)`` triples."""

    epochs: int = 20
    batch_size: int = 32
    optimizer: str = "adam"
    lr: float | None = None
    so_lr: float = 0.01
    curriculum: str = "ascending"
    salun_fraction: float = 0.5
    bt_weight: float = 1.0
    bt_forget_sign: int = 1
    npo_beta: float = 0.1
    npo_retain: bool = True
    rl_retain_fraction: float = 1.0
    gd_forget_weight: float = 1.0
    divergence_factor: float = 50.0
    hessian_probes: int = 1
    overrides: tuple = ()

    def config(self, method: str, seed: int, curriculum: bool = False, second_order: bool = False) -> UnlearnConfig:
        """The UnlearnConfig for one endpoint; SO forces ``so_diag`` at ``so_lr``."""
        values = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("so_lr", "curriculum", "overrides")}
        for m, key, value in self.overrides:
            if m == method:
                values[key] = value
        values["curriculum"] = self.curriculum if curriculum else None
        if second_order:
            values["optimizer"] = "so_diag"
            values["lr"] = self.so_lr
        return UnlearnConfig(method=method, seed=seed, **values)


@dataclass(frozen=True)
class CurveSettings:
    kinds: tuple = ("linear", "bezier")
    steps: int = 500
    lr: float | None = None
    optimizer: str | None = None
    weighting: str = "uniform"
    seed: int = 0

    def __post_init__(self):
        bad = [k for k in self.kinds if k not in CURVE_KINDS]
        if bad or not self.kinds:
            raise ConfigError(f"curve kinds must be a non-empty subset of {CURVE_KINDS}, got {self.kinds}")
        if self.weighting not in WEIGHTINGS:
            raise ConfigError(f"weighting must be one of {WEIGHTINGS}, got {self.weighting!r}")
        if self.optimizer is not None and self.optimizer not in KINDS:
            raise ConfigError(f"curve optimizer must be one of {KINDS}, got {self.optimizer!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    setting: str = "rand"
    methods: tuple = ("gd",)
    seeds: tuple = (1, 2)
    retrain_seed: int = 1000
    reference_seed: int = 2000
    n_points: int = 16
    tau: float = 0.05
    fq_threshold: float = 0.05
    zrf_reference: str = "random"
    fq_statistic: str = "xent"
    data: DataSpec = field(default_factory=DataSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    base: BaseSpec = field(default_factory=BaseSpec)
    unlearn: UnlearnSpec = field(default_factory=UnlearnSpec)
    curve: CurveSettings = field(default_factory=CurveSettings)

    def __post_init__(self):
        modifiers(self.setting)
        if any(m not in METHODS for m in self.methods):
            raise ConfigError(f"methods must come from {METHODS}, got {self.methods}")
        if len(self.seeds) != 2:
            raise ConfigError(f"seeds must be a pair, got {self.seeds}")
        if is_met(self.setting):
            if len(self.methods) != 2 or self.methods[0] == self.methods[1]:
                raise ConfigError(f"setting {self.setting} needs two distinct methods, got {self.methods}")
        else:
            if len(self.methods) != 1:
                raise ConfigError(f"setting {self.setting} takes exactly one method, got {self.methods}")
            if self.seeds[0] == self.seeds[1]:
                raise ConfigError(f"setting {self.setting} needs two distinct seeds, got {self.seeds}")
        if self.n_points < 2:
            raise ConfigError(f"n_points must be >= 2, got {self.n_points}")
        if not self.tau >= 0:
            raise ConfigError(f"tau must be >= 0, got {self.tau}")
        if not 0.0 < self.fq_threshold < 1.0:
            raise ConfigError(f"fq_threshold must lie in (0, 1), got {self.fq_threshold}")
        if self.zrf_reference not in ZRF_REFERENCES:
            raise ConfigError(f"zrf_reference must be one of {ZRF_REFERENCES}, got {self.zrf_reference!r}")
        if self.fq_statistic not in STATISTICS:
            raise ConfigError(f"fq_statistic must be one of {STATISTICS}, got {self.fq_statistic!r}")

    def endpoint_configs(self) -> tuple[UnlearnConfig, UnlearnConfig]:
        """Endpoint configs per the setting's modifier matrix.

        Rand-family endpoints share the method and differ in seed; Met-family
        endpoints share the first seed and differ in method.
        """
        (cl1, so1), (cl2, so2) = modifiers(self.setting)
        if is_met(self.setting):
            m1, m2 = self.methods
            s1 = s2 = self.seeds[0]
        else:
            m1 = m2 = self.methods[0]
            s1, s2 = self.seeds
        return self.unlearn.config(m1, s1, cl1, so1), self.unlearn.config(m2, s2, cl2, so2)

    def curve_config(self) -> UnlearnConfig:
        """The midpoint objective: the first endpoint's (row) method and optimizer."""
        return self.endpoint_configs()[0]

    def as_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return stable_hash(self.as_dict())


def stable_hash(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# ---- parsing ---------------------------------------------------------------

_SECTIONS = {"data": DataSpec, "model": ModelSpec, "base": BaseSpec, "unlearn": UnlearnSpec, "curve": CurveSettings}
_TOP = ("setting", "methods", "seeds", "retrain_seed", "reference_seed")
_PROTOCOL = ("n_points", "tau", "fq_threshold", "zrf_reference", "fq_statistic")
_UNLEARN_CFG_KEYS = {f.name for f in fields(UnlearnConfig)} - {"method", "seed", "curriculum"}


def _split_list(text: str) -> list[str]:
    return [part.strip() for part in text.replace(";", ",").split(",") if part.strip()]


def _coerce(annotation, raw: str, where: str):
    text = raw.strip()
    ann = str(annotation)
    try:
        if text == "" or text.lower() == "none":
            if "None" in ann:
                return None
            if "str" in ann:
                return ""
            raise ValueError("empty value")
        if ann.startswith("tuple"):
            items = _split_list(text)
            return tuple(int(x) if x.lstrip("-").isdigit() else x for x in items)
        if "bool" in ann:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if "float" in ann:
            return float(text)
        if "int" in ann:
            return int(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} ({exc})") from None


def _field_types(cls) -> dict:
    return {f.name: f.type for f in fields(cls)}


def _parser() -> configparser.ConfigParser:
    return configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"), empty_lines_in_values=False)


def default_config_text() -> str:
    return resources.files("mculab.fixtures").joinpath("default.cfg").read_text()


def fixture_path(name: str):
    return resources.files("mculab.fixtures").joinpath(name)


def parse_config(*texts: str, overrides: dict | None = None) -> ExperimentConfig:
    """Build a config from layered file contents (later texts win) and flat overrides.

    ``overrides`` maps ``"section.key"`` (or a top-level key) to a raw string.
    """
    parser = _parser()
    for i, text in enumerate(texts):
        try:
            parser.read_string(text, source=f"<config {i}>")
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from None
    for dotted, raw in (overrides or {}).items():
        section, _, key = dotted.rpartition(".")
        section = section or ("protocol" if key in _PROTOCOL else "experiment")
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, str(raw))
    return _from_parser(parser)


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    texts = [default_config_text()]
    if path is not None:
        try:
            with open(path) as fh:
                texts.append(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(*texts, overrides=overrides)


def _from_parser(parser: configparser.ConfigParser) -> ExperimentConfig:
    top: dict = {}
    parts: dict = {name: {} for name in _SECTIONS}
    method_overrides = []
    exp_types = _field_types(ExperimentConfig)
    for section in parser.sections():
        items = parser.items(section)
        if section in ("experiment", "protocol"):
            allowed = _TOP if section == "experiment" else _PROTOCOL
            for key, raw in items:
                if key not in allowed:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                top[key] = _coerce(exp_types[key], raw, f"[{section}] {key}")
        elif section in _SECTIONS:
            types = _field_types(_SECTIONS[section])
            for key, raw in items:
                if key not in types or key == "overrides":
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                parts[section][key] = _coerce(types[key], raw, f"[{section}] {key}")
        elif section.startswith("unlearn."):
            method = section.split(".", 1)[1]
            if method not in METHODS:
                raise ConfigError(f"unknown method section [{section}]")
            types = _field_types(UnlearnConfig)
            for key, raw in items:
                if key not in _UNLEARN_CFG_KEYS:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                method_overrides.append((method, key, _coerce(types[key], raw, f"[{section}] {key}")))
        else:
            raise ConfigError(f"unknown config section [{section}]")
    if "methods" in top:
        top["methods"] = tuple(str(m) for m in top["methods"])
    if "hidden" in parts["model"]:
        parts["model"]["hidden"] = tuple(int(h) for h in parts["model"]["hidden"])
    if "kinds" in parts["curve"]:
        parts["curve"]["kinds"] = tuple(str(k) for k in parts["curve"]["kinds"])
    unlearn = UnlearnSpec(**parts["unlearn"], overrides=tuple(method_overrides))
    built = {name: cls(**parts[name]) for name, cls in _SECTIONS.items() if name != "unlearn"}
    try:
        return ExperimentConfig(**top, unlearn=unlearn, **built)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def render_config(cfg: ExperimentConfig) -> str:
    """Serialize a config back to the file format (round-trips through :func:`parse_config`)."""
    lines = ["[experiment]"]
    lines.append(f"setting = {cfg.setting}")
    lines.append(f"methods = {', '.join(cfg.methods)}")
    lines.append(f"seeds = {cfg.seeds[0]}, {cfg.seeds[1]}")
    lines.append(f"retrain_seed = {cfg.retrain_seed}")
    lines.append(f"reference_seed = {cfg.reference_seed}")
    lines.append("")
    lines.append("[protocol]")
    for key in _PROTOCOL:
        lines.append(f"{key} = {_fmt(getattr(cfg, key))}")
    overrides = ()
    for name in _SECTIONS:
        part = getattr(cfg, name)
        lines.append("")
        lines.append(f"[{name}]")
        for f in fields(part):
            if f.name == "overrides":
                overrides = part.overrides
                continue
            lines.append(f"{f.name} = {_fmt(getattr(part, f.name))}")
    by_method: dict = {}
    for method, key, value in overrides:
        by_method.setdefault(method, []).append(f"{key} = {_fmt(value)}")
    for method, rows in by_method.items():
        lines.append("")
        lines.append(f"[unlearn.{method}]")
        lines.extend(rows)
    return "\n".join(lines) + "\n"


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def with_overrides(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    return replace(cfg, **changes)
