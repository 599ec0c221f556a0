"""Run configuration: one JSON document with dotted-key overrides."""

from dataclasses import asdict, dataclass, field, fields, is_dataclass
import json

from .evalsuite import FTSettings
from .jointmodel import LossWeights, TrainConfig
from .phantom import PhantomSpec
from .registration import RegOperatorConfig
from .strain import LMA_THRESHOLD_MS


@dataclass
class EvalSettings:
    threshold_ms: float = LMA_THRESHOLD_MS
    split: str = "test"


@dataclass
class RenderSettings:
    slice_z_mm: tuple = (0.0, 10.0, 20.0, 30.0)
    angular_samples: int = 128
    z_samples: int = 16
    pixel_spacing_mm: float = 1.5


@dataclass
class PlotSettings:
    width_in: float = 6.0
    height_in: float = 4.0
    dpi: int = 100


@dataclass
class RunConfig:
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    reg: RegOperatorConfig = field(default_factory=RegOperatorConfig)
    ft: FTSettings = field(default_factory=FTSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    render: RenderSettings = field(default_factory=RenderSettings)
    plot: PlotSettings = field(default_factory=PlotSettings)
    dataset: str = ""
    checkpoint: str = ""
    out: str = "runs"

    def validate(self):
        self.phantom.validate()
        self.loss.validate(self.phantom.n_sectors, self.phantom.t_dense)
        self.train.validate()
        self.reg.validate()
        if self.ft.iters < 0 or not (self.ft.step > 0 and self.ft.sigma > 0):
            raise ValueError("ft needs iters >= 0 and positive step and sigma")
        if len(self.render.slice_z_mm) < 2:
            raise ValueError("render.slice_z_mm needs at least two slices")
        if min(self.plot.width_in, self.plot.height_in, self.plot.dpi) <= 0:
            raise ValueError("plot size and dpi must be positive")
        return self

    def to_dict(self):
        d = asdict(self)
        d["phantom"] = self.phantom.to_dict()
        d["render"]["slice_z_mm"] = list(self.render.slice_z_mm)
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            value = d[f.name]
            sub = f.default_factory() if callable(f.default_factory) else None
            if is_dataclass(sub):
                kwargs[f.name] = _build(type(sub), value, f.name)
            else:
                kwargs[f.name] = value
        return cls(**kwargs)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(fh.read())


def _build(klass, value, prefix):
    if not isinstance(value, dict):
        raise ValueError(f"config section {prefix!r} must be an object")
    known = {f.name for f in fields(klass)}
    unknown = set(value) - known
    if unknown:
        raise ValueError(f"unknown keys in {prefix!r}: {sorted(unknown)}")
    value = {k: tuple(v) if isinstance(v, list) else v for k, v in value.items()}
    return klass(**value)


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply ``section.key=value`` strings; values are parsed as JSON, else kept as text."""
    d = cfg.to_dict()
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ValueError(f"override {item!r} is not of the form key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = d
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ValueError(f"unknown config section in override {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ValueError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return RunConfig.from_dict(d)
