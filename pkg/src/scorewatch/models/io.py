"""Model-spec and data serialization (JSON specs, CSV or JSON observations)."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from ..errors import ConfigError, DataError
from .arma import ArmaModel
from .base import ModelProgram, ObservationSequence
from .hmm import HmmModel, default_sigmas
from .linear import LinearModel, MlpModel
from .topic import TopicModel

SPEC_KEYS = ("kind", "dim", "params", "known_prefix")


def program_from_spec(spec: dict) -> ModelProgram:
    """Build a program from a ``{"kind", "dim", "params", "known_prefix"}`` mapping."""
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError('model spec must be an object with a "kind" field')
    unknown = set(spec) - set(SPEC_KEYS)
    if unknown:
        raise ConfigError(f"unknown model-spec fields: {sorted(unknown)}")
    kind = spec["kind"]
    params = dict(spec.get("params") or {})
    dim = spec.get("dim")
    try:
        if kind == "linear":
            if dim is None:
                raise ConfigError('linear model spec needs "dim"')
            prog = LinearModel(int(dim), float(params.get("sigma", 1.0)),
                               bool(params.get("monitor_sigma", False)))
        elif kind == "mlp":
            prog = MlpModel(int(params["r"]), float(params.get("sigma", 1.0)))
        elif kind == "arma":
            prog = ArmaModel(int(params["r"]), int(params["q"]), float(params.get("sigma", 0.1)))
        elif kind == "hmm":
            n = int(params["N"])
            sig = params.get("sigmas", default_sigmas(n).tolist())
            init = params.get("initial", [1.0 / n] * n)
            prog = HmmModel(n, tuple(sig), tuple(init))
        elif kind == "topic":
            prog = TopicModel(int(params["N"]), tuple(params["state_map"]))
        else:
            raise ConfigError(f"unknown model kind {kind!r}")
    except KeyError as exc:
        raise ConfigError(f"{kind} model spec is missing params.{exc.args[0]}") from None
    if dim is not None and int(dim) != prog.to_json()["dim"]:
        raise ConfigError(f"spec dim={dim} does not match the {kind} model (dim={prog.dim})")
    return prog


def spec_to_json(program: ModelProgram, known_prefix=None) -> dict:
    out = program.to_json()
    out["known_prefix"] = None if known_prefix is None else [float(x) for x in known_prefix]
    return out


def load_model_spec(path) -> tuple[ModelProgram, np.ndarray | None]:
    """Read a JSON model spec; returns the program and the known prefix (if any)."""
    try:
        spec = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read model spec {path}: {exc}") from None
    prefix = spec.get("known_prefix")
    return program_from_spec(spec), None if prefix is None else np.asarray(prefix, dtype=float)


def load_data(path, prefix=None) -> ObservationSequence:
    """Observations from CSV (header row; response first, covariates after) or JSON.

    A JSON file holds ``{"values": [...], "covariates": [[...]], "prefix": [...]}``;
    ``prefix`` given here overrides the file's.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read data file {path}: {exc}") from None
    if path.suffix.lower() == ".json":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(obj, dict) or "values" not in obj:
            raise DataError(f'{path}: expected an object with a "values" array')
        cov = obj.get("covariates")
        pre = obj.get("prefix") if prefix is None else prefix
        return ObservationSequence(np.asarray(obj["values"], dtype=float),
                                   None if cov is None else np.asarray(cov, dtype=float),
                                   None if pre is None else np.asarray(pre, dtype=float))
    rows = list(csv.reader(text.splitlines()))
    if len(rows) < 2:
        raise DataError(f"{path}: CSV needs a header row and at least one observation")
    width = len(rows[0])
    try:
        table = np.array([[float(x) for x in row] for row in rows[1:] if row], dtype=float)
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric entry ({exc})") from None
    if table.ndim != 2 or table.shape[1] != width:
        raise DataError(f"{path}: every row must have {width} columns")
    cov = table[:, 1:] if width > 1 else None
    return ObservationSequence(table[:, 0], cov, prefix)


def save_data(path, data: ObservationSequence) -> None:
    """Write observations as CSV (``y``, ``x1..xm``) or JSON depending on the suffix."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        obj = {"values": data.values.tolist(),
               "covariates": None if data.covariates is None else data.covariates.tolist(),
               "prefix": None if data.prefix is None else data.prefix.tolist()}
        path.write_text(json.dumps(obj), encoding="utf-8")
        return
    m = 0 if data.covariates is None else data.covariates.shape[1]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["y"] + [f"x{i + 1}" for i in range(m)])
        for i in range(data.n):
            row = [repr(float(data.values[i]))]
            if m:
                row += [repr(float(v)) for v in data.covariates[i]]
            writer.writerow(row)
