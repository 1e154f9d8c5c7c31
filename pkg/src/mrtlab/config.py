"""Line-oriented ``key = value`` run configuration.

Sections mirror the package's config dataclasses. Unknown sections and
keys are errors. Values are coerced to the type of the field default.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .corpus import CorpusSpec
from .errors import MissingArtifact, ValidationError
from .metrics import BiasSpec, LmSpec, PseudoSpec, TrainSpec
from .model import ModelConfig
from .mrt import MleConfig, MrtConfig
from .probe import ProbeConfig, SuffixConfig

SECTIONS = {
    "corpus": CorpusSpec,
    "model": ModelConfig,
    "mle": MleConfig,
    "lm": LmSpec,
    "pseudo": PseudoSpec,
    "bias": BiasSpec,
    "learned": TrainSpec,
    "mrt": MrtConfig,
    "probe": ProbeConfig,
    "suffix": SuffixConfig,
}
# model vocab sizes come from the corpus
DERIVED = {"model": ("src_vocab", "tgt_vocab")}


def _coerce(section: str, key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(x.strip() for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ValidationError(f"{section}.{key}", f"cannot parse {raw!r} as {type(default).__name__}") from None


def _default(f: dataclasses.Field):
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return None


@dataclass
class Config:
    values: dict = field(default_factory=lambda: {name: {} for name in SECTIONS})

    @classmethod
    def from_text(cls, text: str) -> "Config":
        cp = configparser.ConfigParser(interpolation=None, strict=True)
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ValidationError("config", str(exc).splitlines()[0]) from None
        cfg = cls()
        for section in cp.sections():
            for key, raw in cp.items(section):
                cfg.set(section, key, raw)
        return cfg

    @classmethod
    def load(cls, path) -> "Config":
        path = Path(path)
        if not path.exists():
            raise MissingArtifact(f"config file {path} not found")
        return cls.from_text(path.read_text())

    def set(self, section: str, key: str, raw) -> None:
        if section not in SECTIONS:
            raise ValidationError(section, f"unknown config section {section!r}; known: {', '.join(SECTIONS)}")
        known = {f.name: f for f in fields(SECTIONS[section])}
        if key not in known or key in DERIVED.get(section, ()):
            raise ValidationError(f"{section}.{key}", f"unknown config key {section}.{key}")
        default = _default(known[key])
        self.values[section][key] = _coerce(section, key, raw, default) if isinstance(raw, str) else raw

    def override(self, assignment: str) -> None:
        """Apply ``section.key=value``."""
        if "=" not in assignment or "." not in assignment.split("=", 1)[0]:
            raise ValidationError("set", f"expected section.key=value, got {assignment!r}")
        lhs, value = assignment.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        self.set(section, key.strip(), value)

    def build(self, section: str, **extra):
        obj = SECTIONS[section](**{**self.values[section], **extra})
        if hasattr(obj, "validate") and section != "model":
            obj.validate()
        return obj

    def resolved(self) -> dict:
        """Every section with defaults filled in, as plain JSON types."""
        out = {}
        for name, cls in SECTIONS.items():
            d = {f.name: _default(f) for f in fields(cls) if f.name not in DERIVED.get(name, ())}
            d.update(self.values[name])
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        return out

    def to_text(self) -> str:
        lines = []
        for name, d in self.resolved().items():
            lines.append(f"[{name}]")
            for k, v in d.items():
                lines.append(f"{k} = {','.join(map(str, v)) if isinstance(v, list) else v}")
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_resolved(cls, d: dict) -> "Config":
        cfg = cls()
        for section, kv in d.items():
            for k, v in kv.items():
                cfg.set(section, k, tuple(v) if isinstance(v, list) else v)
        return cfg


    def lab_spec(self, seed: int = 0):
        from .pipeline import LabSpec
        return LabSpec(corpus=self.build("corpus"), model=self.build("model"), mle=self.build("mle"),
                       lm=self.build("lm"), pseudo=self.build("pseudo"), bias=self.build("bias"),
                       learned=self.build("learned"), seed=seed)
