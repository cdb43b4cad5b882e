"""JSON run configuration: training stages, synthetic data and protocol options."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data import SynthSpec
from .errors import ConfigurationError
from .experiments import ExperimentConfig
from .training import TrainConfig


@dataclass
class ProtocolConfig:
    seed: int = 0
    test_fraction: float = 0.2
    folds: int = 5
    ablation: bool = False
    ablation_epochs: int = 4

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigurationError("test_fraction must lie in (0, 1)")
        if self.folds < 1:
            raise ConfigurationError("folds must be >= 1")


def _stage1_default():
    return ExperimentConfig().stage1


def _stage2_default():
    return ExperimentConfig().stage2


@dataclass
class RunConfig:
    stage1: TrainConfig = field(default_factory=_stage1_default)
    stage2: TrainConfig = field(default_factory=_stage2_default)
    synth: SynthSpec = field(default_factory=SynthSpec)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)

    @classmethod
    def from_dict(cls, raw):
        if not isinstance(raw, dict):
            raise ConfigurationError("configuration must be a JSON object")
        sections = {f.name: f for f in fields(cls)}
        # echoed configs carry an informational record of the command that wrote them
        raw = {k: v for k, v in raw.items() if k != "invocation"}
        unknown = set(raw) - set(sections)
        if unknown:
            raise ConfigurationError(f"unknown configuration section(s): {', '.join(sorted(unknown))}")
        base = cls()
        kwargs = {}
        for name, values in raw.items():
            kwargs[name] = _merge(getattr(base, name), values, name)
        cfg = replace(base, **kwargs)
        if cfg.stage1.stage != 1 or cfg.stage2.stage != 2:
            raise ConfigurationError("stage1/stage2 sections cannot change their stage")
        cfg.synth.validate()
        return cfg

    @classmethod
    def load(cls, path):
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(raw)

    def override(self, assignments):
        """Apply ``section.key=value`` strings; values are parsed as JSON when possible."""
        raw = self.to_dict()
        for item in assignments:
            key, sep, text = item.partition("=")
            section, dot, name = key.partition(".")
            if not sep or not dot:
                raise ConfigurationError(f"override {item!r} is not section.key=value")
            try:
                value = json.loads(text)
            except json.JSONDecodeError:
                value = text
            if section not in raw:
                raise ConfigurationError(f"unknown configuration section {section!r}")
            raw[section][name] = value
        return RunConfig.from_dict(raw)

    def to_dict(self):
        return {f.name: asdict(getattr(self, f.name)) for f in fields(self)}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def experiment(self):
        p = self.protocol
        return ExperimentConfig(stage1=self.stage1, stage2=self.stage2, test_fraction=p.test_fraction,
                                ablation=p.ablation, ablation_epochs=p.ablation_epochs)


def _merge(default, values, section):
    if not isinstance(values, dict):
        raise ConfigurationError(f"section {section!r} must be an object")
    known = {f.name: f for f in fields(default)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigurationError(
            f"unknown key(s) in {section!r}: {', '.join(sorted(unknown))}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        return replace(default, **values)
    except TypeError as exc:
        raise ConfigurationError(f"section {section!r}: {exc}") from None
