"""Run configuration: one JSON document validated before any compute."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Optional

import jsonschema

from .model import CascadeConfig, UnitConfig
from .training import DataConfig, TrainConfig


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(message)
        self.path = path


_num = {"type": "number"}
_int = {"type": "integer"}
_bool = {"type": "boolean"}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


UNIT_SCHEMA = _obj(
    {
        "channels": {"type": "integer", "minimum": 1},
        "patch": {"type": "integer", "minimum": 1},
        "state_dim": {"type": "integer", "minimum": 1},
        "reduction": {"type": "integer", "minimum": 1},
        "n_shared": {"type": "integer", "minimum": 0},
        "n_routed": {"type": "integer", "minimum": 0},
        "expert_hidden": {"type": ["integer", "null"], "minimum": 1},
        "use_sflap": _bool,
        "use_lsgp": _bool,
        "use_moe": _bool,
        "use_scan": _bool,
    }
)

SCHEMA = _obj(
    {
        "mask": _obj(
            {
                "kind": {"enum": ["equispaced", "random", "radial"]},
                "height": {"type": "integer", "minimum": 32},
                "width": {"type": "integer", "minimum": 32},
                "af": {"type": "number", "minimum": 1},
                "center_fraction": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                "spokes": {"type": ["integer", "null"], "minimum": 1},
                "seed": _int,
            }
        ),
        "coils": _obj(
            {
                "count": {"type": "integer", "minimum": 1},
                "noise_sigma": {"type": "number", "minimum": 0},
                "seed": _int,
            }
        ),
        "model": _obj(
            {
                "groups": {"type": "integer", "minimum": 1},
                "units_per_group": {"type": "integer", "minimum": 0},
                "dc_lambda_init": {"type": "number", "minimum": 0},
                "dc_mode": {"enum": ["soft", "hard"]},
                "learn_lambda": _bool,
                "share_weights": _bool,
                "use_network": _bool,
                "unit": UNIT_SCHEMA,
            }
        ),
        "train": _obj(
            {
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "steps": {"type": "integer", "minimum": 0},
                "warmup_steps": {"type": "integer", "minimum": 0},
                "lambda_bal": {"type": "number", "minimum": 0},
                "seed": _int,
                "batch_size": {"type": "integer", "minimum": 1},
                "weight_decay": {"type": "number", "minimum": 0},
                "betas": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
                "checkpoint_every": {"type": "integer", "minimum": 1},
                "eval_count": {"type": "integer", "minimum": 1},
                "dtype": {"enum": ["float32", "float64"]},
            }
        ),
        "io": _obj(
            {
                "out_dir": {"type": "string"},
                "acquisition_dir": {"type": ["string", "null"]},
                "checkpoint": {"type": ["string", "null"]},
                "features": {"type": ["string", "null"]},
                "run_id": {"type": "string"},
            }
        ),
        "ablate": _obj(
            {
                "patch_depth": {
                    "type": "array",
                    "items": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2, "maxItems": 2},
                },
            }
        ),
    }
)


@dataclass
class MaskSection:
    kind: str = "equispaced"
    height: int = 64
    width: int = 64
    af: float = 4.0
    center_fraction: Optional[float] = None
    spokes: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        self.af = float(self.af)


@dataclass
class CoilSection:
    count: int = 4
    noise_sigma: float = 0.0
    seed: int = 0


@dataclass
class IOSection:
    out_dir: str = "runs/default"
    acquisition_dir: Optional[str] = None
    checkpoint: Optional[str] = None
    features: Optional[str] = None
    run_id: str = "run"


@dataclass
class AblateSection:
    patch_depth: list = field(default_factory=lambda: [[2, 1], [1, 1], [4, 1]])


@dataclass
class RunConfig:
    mask: MaskSection = field(default_factory=MaskSection)
    coils: CoilSection = field(default_factory=CoilSection)
    model: CascadeConfig = field(default_factory=lambda: CascadeConfig(groups=1, units_per_group=2))
    train: TrainConfig = field(default_factory=TrainConfig)
    io: IOSection = field(default_factory=IOSection)
    ablate: AblateSection = field(default_factory=AblateSection)

    def __post_init__(self):
        self.model.lambda_bal = self.train.lambda_bal

    def data(self) -> DataConfig:
        m = self.mask
        return DataConfig(
            m.height, m.width, m.kind, m.af, m.center_fraction, m.spokes, m.seed, self.coils.count, self.coils.noise_sigma
        )

    def model_dict(self) -> dict:
        d = asdict(self.model)
        d.pop("lambda_bal")
        return d

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"].pop("lambda_bal")
        d["train"]["betas"] = list(self.train.betas)
        return d


def _pointer(path) -> str:
    return "/" + "/".join(str(p) for p in path)


def validate(doc: Any) -> None:
    """Raise :class:`ConfigError` naming the JSON pointer of the first offending key."""
    validator = jsonschema.Draft7Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if not errors:
        return
    err = errors[0]
    path = list(err.absolute_path)
    if err.validator == "additionalProperties":
        allowed = set(err.schema.get("properties", {}))
        extra = sorted(set(err.instance) - allowed)
        path = path + extra[:1]
    raise ConfigError(_pointer(path), err.message)


def _section(cls, d: dict):
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in d.items() if k in names})


def from_dict(doc: dict) -> RunConfig:
    validate(doc)
    model_doc = dict(doc.get("model", {}))
    unit = UnitConfig(**model_doc.pop("unit", {}))
    defaults = RunConfig().model
    base = {f.name: getattr(defaults, f.name) for f in fields(CascadeConfig) if f.name not in ("unit", "lambda_bal")}
    base.update(model_doc)
    train_doc = dict(doc.get("train", {}))
    if "betas" in train_doc:
        train_doc["betas"] = tuple(train_doc["betas"])
    try:
        return RunConfig(
            mask=_section(MaskSection, doc.get("mask", {})),
            coils=_section(CoilSection, doc.get("coils", {})),
            model=CascadeConfig(unit=unit, **base),
            train=_section(TrainConfig, train_doc),
            io=_section(IOSection, doc.get("io", {})),
            ablate=_section(AblateSection, doc.get("ablate", {})),
        )
    except ValueError as exc:
        raise ConfigError("/model", str(exc)) from exc


def load(path) -> RunConfig:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("/", f"invalid JSON: {exc}") from exc
    return from_dict(doc)
