"""Run configuration: one JSON document, validated before anything runs."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from ..errors import InvalidParams, ValidationError
from ..market import ModelParams, Payoff

KINDS = (
    "price-discrete",
    "dual-bound",
    "limit-hjb",
    "limit-mc",
    "insider-value",
    "lemma43-decay",
    "convergence",
    "acceptance",
)

MODEL_KEYS = {"n", "s", "sigma_lo", "sigma_hi", "lambda_cost", "lookahead", "grid_k"}


def payoff_from_spec(spec: Any) -> Payoff:
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ValidationError(f"payoff spec needs a 'kind', got {spec!r}")
    kind = spec["kind"]
    if kind == "call":
        return Payoff.call(float(spec.get("strike", 0.0)))
    if kind == "lookback_max":
        return Payoff.lookback_max()
    if kind == "constant":
        return Payoff.constant(float(spec.get("value", 0.0)))
    if kind == "terminal_quadratic":
        return Payoff.terminal_quadratic(payoff_from_spec(spec["base"]), float(spec.get("alpha", 0.0)))
    raise ValidationError(f"unknown payoff kind {kind!r}")


def model_from_spec(spec: dict, **overrides) -> ModelParams:
    unknown = set(spec) - MODEL_KEYS
    if unknown:
        raise ValidationError(f"unknown model fields {sorted(unknown)}")
    merged = {**{"n": 1}, **spec, **overrides}
    return ModelParams(**merged)


def options_hash(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str
    name: str
    model: dict
    payoff: dict
    options: dict

    @property
    def hash(self) -> str:
        return options_hash({"kind": self.kind, "model": self.model, "payoff": self.payoff, "options": self.options})


@dataclass(frozen=True)
class RunConfig:
    experiments: tuple
    seed: int = 0
    out: str = "results"
    threads: int = 1
    raw: dict = field(default_factory=dict, compare=False)

    def echo(self) -> dict:
        return {**self.raw, "seed": self.seed, "out": self.out, "threads": self.threads}


def _experiment(entry: dict, defaults: dict, index: int) -> ExperimentSpec:
    if not isinstance(entry, dict):
        raise ValidationError(f"experiment #{index} must be an object")
    kind = entry.get("kind", defaults.get("kind"))
    if kind not in KINDS:
        raise ValidationError(f"experiment #{index}: unknown kind {kind!r}; choose from {', '.join(KINDS)}")
    model = {**defaults.get("model", {}), **entry.get("model", {})}
    payoff = entry.get("payoff", defaults.get("payoff", {"kind": "call", "strike": model.get("s", 0.0)}))
    opts = {**defaults.get("options", {}), **entry.get("options", {})}
    spec = ExperimentSpec(kind, entry.get("name", f"{kind}-{index}"), model, payoff, opts)
    # validate eagerly so nothing runs on a bad config
    if kind != "acceptance":
        model_from_spec(model) if model else None
        payoff_from_spec(payoff)
    return spec


def load_config(data: dict, kind: Optional[str] = None, seed: Optional[int] = None,
                out: Optional[str] = None, threads: Optional[int] = None) -> RunConfig:
    """Build a :class:`RunConfig`; ``kind`` (the CLI subcommand) fills in missing kinds.

    A document either lists ``experiments`` or describes a single one at top
    level.  CLI values override ``seed``, ``out`` and ``threads``.
    """
    if not isinstance(data, dict):
        raise ValidationError("configuration must be a JSON object")
    defaults = {k: data[k] for k in ("model", "payoff", "options") if k in data}
    if kind is not None:
        defaults["kind"] = kind
    elif "kind" in data:
        defaults["kind"] = data["kind"]
    if "experiments" in data:
        entries = data["experiments"]
        if not isinstance(entries, list):
            raise ValidationError("'experiments' must be a list")
    else:
        entries = [{}]
    specs = tuple(_experiment(e, defaults, i) for i, e in enumerate(entries))
    if kind is not None:
        bad = [s.name for s in specs if s.kind != kind]
        if bad:
            raise ValidationError(f"experiments {bad} do not match subcommand {kind}")
    seed = int(data.get("seed", 0) if seed is None else seed)
    if not 0 <= seed < 2**64:
        raise InvalidParams("seed must be an unsigned 64-bit integer")
    threads = int(data.get("threads", 1) if threads is None else threads)
    if threads < 1:
        raise InvalidParams("threads must be >= 1")
    return RunConfig(specs, seed, str(data.get("out", "results") if out is None else out), threads, raw=data)


def read_config(path: str, **kw) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc
    return load_config(data, **kw)
