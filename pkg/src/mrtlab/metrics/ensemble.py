from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import MetricError, MissingArtifact, ValidationError
from .base import Metric, MetricId


@dataclass(frozen=True)
class EnsembleSpec:
    members: tuple  # ((metric name, weight), ...)

    def __post_init__(self):
        members = tuple((str(n), float(w)) for n, w in self.members)
        object.__setattr__(self, "members", members)
        if len(members) < 2:
            raise ValidationError("members", "an ensemble needs at least two members")
        if len({n for n, _ in members}) != len(members):
            raise ValidationError("members", "duplicate ensemble member")
        if any(not math.isfinite(w) or w < 0 for _, w in members):
            raise ValidationError("weight", "ensemble weights must be finite and >= 0")
        if abs(sum(w for _, w in members) - 1.0) > 1e-9:
            raise ValidationError("weight", f"ensemble weights must sum to 1, got {sum(w for _, w in members)}")

    @classmethod
    def equal(cls, names) -> "EnsembleSpec":
        names = list(names)
        return cls(tuple((n, 1.0 / len(names)) for n in names))

    def to_json(self) -> str:
        return json.dumps({"members": [{"metric": n, "weight": w} for n, w in self.members]}, indent=1) + "\n"

    @classmethod
    def load(cls, path) -> "EnsembleSpec":
        path = Path(path)
        if not path.exists():
            raise MissingArtifact(f"ensemble spec {path} not found")
        try:
            doc = json.loads(path.read_text())
            return cls(tuple((m["metric"], m["weight"]) for m in doc["members"]))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ValidationError("members", f"malformed ensemble spec {path}: {exc}") from exc

    def label(self) -> str:
        return "+".join(f"{n}*{w:g}" for n, w in self.members)


class Ensemble(Metric):
    """Weighted mean of member metrics' normalized scores.

    A member that raises makes the whole ensemble raise.
    """

    def __init__(self, spec: EnsembleSpec, members: "OrderedDict[str, Metric]", name: str | None = None):
        self.spec = spec
        self.members = [(members[n], w) for n, w in spec.members]
        self.name = name or f"ensemble({spec.label()})"
        self.metric_id = MetricId("ensemble", spec.label())
        forms = {m.input_form for m, _ in self.members}
        self.input_form = "src_ref" if forms & {"src", "src_ref"} else "ref"

    def raw_batch(self, hyps, refs, srcs=None) -> np.ndarray:
        self._check(hyps, refs, srcs)
        total = np.zeros(len(hyps))
        for metric, w in self.members:
            total = total + w * metric.normalized_batch(hyps, refs, srcs)
        return total


class MetricSuite:
    """Ordered registry of named metrics; the order fixes report columns."""

    def __init__(self, metrics=()):
        self._m: OrderedDict[str, Metric] = OrderedDict()
        for m in metrics:
            self.register(m)

    def register(self, metric: Metric) -> None:
        if metric.name in self._m:
            raise MetricError(f"metric {metric.name!r} registered twice")
        if any(m.metric_id == metric.metric_id for m in self._m.values()):
            raise MetricError(f"metric id {metric.metric_id} registered twice")
        self._m[metric.name] = metric

    def names(self) -> list:
        return list(self._m)

    def __iter__(self):
        return iter(self._m.values())

    def __len__(self):
        return len(self._m)

    def __contains__(self, name):
        return name in self._m

    def get(self, name: str) -> Metric:
        if name.startswith("ensemble:"):
            return self.ensemble(EnsembleSpec.load(name.split(":", 1)[1]))
        if name not in self._m:
            raise MetricError(f"unknown metric {name!r}; registered: {', '.join(self._m)}")
        return self._m[name]

    def ensemble(self, spec: EnsembleSpec, name: str | None = None) -> Ensemble:
        for n, _ in spec.members:
            self.get(n)
        return Ensemble(spec, self._m, name)

    def score_all(self, hyps, refs, srcs=None) -> "OrderedDict[str, np.ndarray]":
        """Normalized per-sentence scores for every registered metric."""
        return OrderedDict((m.name, m.normalized_batch(hyps, refs, srcs)) for m in self)
