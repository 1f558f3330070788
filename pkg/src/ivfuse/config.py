"""Run configuration: one JSON document describing model, training plans,
loss weights, paths and ablation settings.

Validation is strict. Unknown keys and wrongly typed values are rejected
before any work starts, and :meth:`RunConfig.to_dict` echoes every resolved
default so the file written next to outputs fully describes the run.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import pydantic.dataclasses as pdc
from pydantic import ConfigDict, ValidationError

from .errors import ConfigError
from .losses import LossWeights
from .model import ModelConfig
from .training import TrainPlan

PLAN_TARGETS = {"mae": "encoder_mae", "decoder": "decoder", "cfm": "cfm", "mfm": "mfm"}
FUSION_INITS = ("xavier", "identity", "mean")


@dataclass
class Paths:
    data_root: str = "data"
    checkpoint_dir: str = "checkpoints"
    output_dir: str = "outputs"


@dataclass
class AblationConfig:
    steps: int = 50
    align_steps: int = 25
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    probe_pairs: int = 10

    def __post_init__(self):
        if not 0 <= self.align_steps <= self.steps:
            raise ConfigError("ablation needs 0 <= align_steps <= steps")
        if not self.seeds or self.probe_pairs < 1:
            raise ConfigError("ablation needs at least one seed and one probe pair")


def _default_plans() -> dict[str, TrainPlan]:
    return {
        "mae": TrainPlan(target="encoder_mae", total_steps=0, align_steps=0),
        "decoder": TrainPlan(target="decoder", total_steps=500, align_steps=0),
        "cfm": TrainPlan(target="cfm", total_steps=100, align_steps=20),
        "mfm": TrainPlan(target="mfm", total_steps=100, align_steps=20),
    }


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    fusion_init: str = "xavier"
    loss: LossWeights = field(default_factory=LossWeights)
    plans: dict[str, TrainPlan] = field(default_factory=_default_plans)
    paths: Paths = field(default_factory=Paths)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def __post_init__(self):
        problems = []
        if self.fusion_init not in FUSION_INITS:
            problems.append(f"fusion_init must be one of {FUSION_INITS}, got {self.fusion_init!r}")
        if set(self.plans) != set(PLAN_TARGETS):
            problems.append(f"plans must have exactly the keys {sorted(PLAN_TARGETS)}")
        for key, plan in self.plans.items():
            if PLAN_TARGETS.get(key, plan.target) != plan.target:
                problems.append(f"plans.{key}.target must be {PLAN_TARGETS[key]!r}, got {plan.target!r}")
            if plan.crop is not None and plan.crop % self.model.patch:
                problems.append(f"plans.{key}.crop {plan.crop} is not a multiple of patch {self.model.patch}")
        if problems:
            raise ConfigError("; ".join(problems))

    @classmethod
    def desk(cls, **overrides) -> "RunConfig":
        """Settings tuned for a 64x64 synthetic corpus on one CPU core."""
        guided = dict(lr=2e-3, betas=(0.8, 0.95), batch=4)
        plans = {
            "mae": TrainPlan(target="encoder_mae", total_steps=0, align_steps=0, lr=1.5e-3, betas=(0.9, 0.95), batch=16),
            "decoder": TrainPlan(target="decoder", total_steps=500, align_steps=0, lr=3e-3, betas=(0.9, 0.95), batch=16),
            "cfm": TrainPlan(target="cfm", total_steps=100, align_steps=20, **guided),
            "mfm": TrainPlan(target="mfm", total_steps=100, align_steps=20, **guided),
        }
        return cls(**{"plans": plans, **overrides})

    def plan(self, key: str, **overrides) -> TrainPlan:
        """A copy of one plan with its seed offset by the run seed."""
        plan = replace(self.plans[key], **overrides)
        if "seed" not in overrides:
            plan = replace(plan, seed=plan.seed + self.seed)
        return plan

    def to_dict(self) -> dict:
        d = asdict(self)
        for p in d["plans"].values():
            p["betas"] = list(p["betas"])
        return d

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


# ---------------------------------------------------------------------------
# strict parsing

_STRICT = ConfigDict(extra="forbid", strict=True)


def _validator(cls):
    return pdc.dataclass(cls, config=_STRICT, frozen=cls.__dataclass_params__.frozen)


_SECTIONS = {
    "model": _validator(ModelConfig),
    "loss": _validator(LossWeights),
    "paths": _validator(Paths),
    "ablation": _validator(AblationConfig),
}
_PLAN = _validator(TrainPlan)
_TOP = {f.name for f in fields(RunConfig)}


def _section(cls, checker, raw, where):
    try:
        checked = checker(**raw)
    except ValidationError as exc:
        msgs = [".".join([where, *map(str, e["loc"])]) + f": {e['msg']}" for e in exc.errors()]
        raise ConfigError("; ".join(msgs)) from None
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    return cls(**{f.name: getattr(checked, f.name) for f in fields(cls)})


def from_dict(raw: dict, base: RunConfig | None = None) -> RunConfig:
    """Validate ``raw`` and merge it over ``base`` (default: ``RunConfig()``).

    Sections are merged key by key, so a config file only needs the values it
    changes.
    """
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - _TOP
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    base = base or RunConfig()
    out = {}
    for name, cls in (("model", ModelConfig), ("loss", LossWeights), ("paths", Paths), ("ablation", AblationConfig)):
        section = raw.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"{name}: expected an object, got {type(section).__name__}")
        cur = asdict(getattr(base, name))
        cur.update(section)
        out[name] = _section(cls, _SECTIONS[name], cur, name)
    plans_raw = raw.get("plans", {})
    if not isinstance(plans_raw, dict):
        raise ConfigError("plans: expected an object")
    extra_plans = set(plans_raw) - set(PLAN_TARGETS)
    if extra_plans:
        raise ConfigError(f"unknown plans: {', '.join(sorted(extra_plans))}")
    plans = {}
    for key in PLAN_TARGETS:
        section = plans_raw.get(key, {})
        if not isinstance(section, dict):
            raise ConfigError(f"plans.{key}: expected an object")
        cur = asdict(base.plans[key])
        cur.update(section)
        if isinstance(cur["betas"], list):
            cur["betas"] = tuple(cur["betas"])
        plans[key] = _section(TrainPlan, _PLAN, cur, f"plans.{key}")
    for key in ("seed", "fusion_init"):
        val = raw.get(key, getattr(base, key))
        want = int if key == "seed" else str
        if type(val) is not want:
            raise ConfigError(f"{key}: expected {want.__name__}, got {type(val).__name__}")
        out[key] = val
    return RunConfig(plans=plans, **out)


def load_config(path=None, preset: str = "desk") -> RunConfig:
    """Read a JSON config over a preset ('desk' or 'default')."""
    presets = {"desk": RunConfig.desk, "default": RunConfig}
    if preset not in presets:
        raise ConfigError(f"unknown preset {preset!r}")
    base = presets[preset]()
    if path is None:
        return base
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(raw, base)
