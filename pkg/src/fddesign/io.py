"""Config, dataset and manifest serialization."""
from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .sem import (
    BlockMatrix,
    CoarsenedDataset,
    ConfigError,
    CostFunction,
    CostSpec,
    Dims,
    ErrorModel,
    FrontDoorModel,
    FullDataset,
    NoiseBlock,
    QuadraticMediatorSpec,
    ShapeError,
    Stage,
    _digest,
)

VERSION = "0.1.0"


# ---------------------------------------------------------------------------
# model config


def costs_from_dict(d: dict) -> CostSpec:
    try:
        return CostSpec(
            c0=float(d["c0"]),
            c1=CostFunction(d["c1"]["kind"], float(d["c1"]["a"])),
            c2=CostFunction(d["c2"]["kind"], float(d["c2"]["a"])),
        )
    except KeyError as e:
        raise ConfigError(f"costs: missing field {e.args[0]!r}") from None


def _noise_from_dict(d: dict, name: str) -> NoiseBlock:
    try:
        return NoiseBlock(
            family=d["family"],
            matrix=np.array(d["matrix"], dtype=float),
            df=d.get("df"),
            matrix_is_covariance=bool(d.get("matrix_is_covariance", False)),
            name=name,
        )
    except KeyError as e:
        raise ConfigError(f"errors.{name}: missing field {e.args[0]!r}") from None


def model_from_dict(d: dict) -> FrontDoorModel:
    """Build a :class:`FrontDoorModel` from a parsed config document."""
    for key in ("dims", "beta", "errors", "costs"):
        if key not in d:
            raise ConfigError(f"config is missing the {key!r} section")
    try:
        dims = Dims(int(d["dims"]["d_C"]), int(d["dims"]["d_M"]))
        b = d["beta"]
        blocks = BlockMatrix(b["tC"], b["MC"], b["Mt"], b["rC"], b["rM"])
        e = d["errors"]
        errors = ErrorModel(
            C=_noise_from_dict(e["C"], "Sigma_C"),
            tr=_noise_from_dict(e["tr"], "Sigma_tr"),
            M=_noise_from_dict(e["M"], "Sigma_M"),
        )
    except KeyError as exc:
        raise ConfigError(f"config is missing field {exc.args[0]!r}") from None
    try:
        blocks.check(dims)
    except ShapeError as exc:
        raise ConfigError(f"beta: {exc}") from None
    if errors.C.dim != dims.d_C or errors.M.dim != dims.d_M:
        raise ConfigError("error covariance sizes do not match dims")
    quad = None
    if d.get("quadratic_mediator") is not None:
        q = d["quadratic_mediator"]
        quad = QuadraticMediatorSpec(q["linear"], q["quadratic"])
    return FrontDoorModel(blocks, errors, costs_from_dict(d["costs"]), quadratic=quad)


def load_config(path) -> tuple:
    """Parse a model config file; returns ``(model, raw_bytes)``.

    JSON syntax errors are reported with line and column.
    """
    raw = Path(path).read_bytes()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno}, column {e.colno}: {e.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return model_from_dict(doc), raw


def dump_config(model: FrontDoorModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=2) + "\n")


def config_digest(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


# ---------------------------------------------------------------------------
# datasets


def _header(dims: Dims) -> list:
    return (["delta"] + [f"xC_{i + 1}" for i in range(dims.d_C)] + ["xt"]
            + [f"xM_{i + 1}" for i in range(dims.d_M)] + ["xr"])


def write_dataset(data, path) -> None:
    """Write a full or coarsened dataset as CSV, floats in round-trip ``repr``."""
    if isinstance(data, FullDataset):
        data = data.as_coarsened()
    dims = data.dims
    has_M = data.has_M
    full = data.is_full
    m_row = np.cumsum(has_M) - 1
    r_row = np.cumsum(full) - 1
    blank_M = [""] * dims.d_M
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_header(dims))
        for i in range(data.n):
            row = [Stage(int(data.stage[i])).token]
            row += [repr(float(v)) for v in data.x_C[i]]
            row.append(repr(float(data.x_t[i])))
            row += [repr(float(v)) for v in data.x_M[m_row[i]]] if has_M[i] else blank_M
            row.append(repr(float(data.x_r[r_row[i]])) if full[i] else "")
            w.writerow(row)


def read_dataset(path) -> CoarsenedDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigError(f"{path}: empty file")
    head = rows[0]
    d_C = sum(h.startswith("xC_") for h in head)
    d_M = sum(h.startswith("xM_") for h in head)
    if d_C == 0 or d_M == 0 or head != _header(Dims(d_C, d_M)):
        raise ConfigError(f"{path}: unexpected header {','.join(head)}")
    n = len(rows) - 1
    stage = np.empty(n, dtype=np.int8)
    x_C = np.empty((n, d_C))
    x_t = np.empty(n)
    x_M, x_r = [], []
    for i, row in enumerate(rows[1:]):
        line = i + 2
        if len(row) != len(head):
            raise ConfigError(f"{path}: line {line}: expected {len(head)} fields, got {len(row)}")
        try:
            s = Stage.from_token(row[0])
            stage[i] = int(s)
            x_C[i] = [float(v) for v in row[1:1 + d_C]]
            x_t[i] = float(row[1 + d_C])
            m = row[2 + d_C:2 + d_C + d_M]
            r = row[-1]
        except ValueError as e:
            raise ConfigError(f"{path}: line {line}: {e}") from None
        want_M, want_r = s >= Stage.TWO, s == Stage.FULL
        filled = [v != "" for v in m]
        if (want_M and not all(filled)) or (not want_M and any(filled)):
            raise ConfigError(f"{path}: line {line}: mediator fields inconsistent with delta={row[0]}")
        if want_r != (r != ""):
            raise ConfigError(f"{path}: line {line}: response field inconsistent with delta={row[0]}")
        try:
            if want_M:
                x_M.append([float(v) for v in m])
            if want_r:
                x_r.append(float(r))
        except ValueError as e:
            raise ConfigError(f"{path}: line {line}: {e}") from None
    return CoarsenedDataset(
        stage=stage, x_C=x_C, x_t=x_t,
        x_M=np.array(x_M, dtype=float).reshape(-1, d_M), x_r=np.array(x_r, dtype=float),
    )


def as_full(data: CoarsenedDataset) -> FullDataset:
    if not np.all(data.is_full):
        raise ConfigError("dataset contains coarsened records; full data expected")
    return FullDataset(data.x_C, data.x_t, data.x_M, data.x_r)


# ---------------------------------------------------------------------------
# manifests


@dataclass
class RunManifest:
    command: str
    config_digest: str
    root_seed: int | None
    tool_version: str = VERSION
    started: str = ""
    finished: str = ""
    outputs: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def manifest_path(path) -> Path:
    return Path(str(path) + ".manifest.json")


def write_manifest(manifest: RunManifest, path) -> Path:
    out = manifest_path(path)
    out.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    return out


def read_manifest(path) -> dict:
    p = manifest_path(path)
    if not p.exists():
        return {}
    return json.loads(p.read_text())


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno}, column {e.colno}: {e.msg}") from None


def object_digest(obj) -> str:
    return _digest(obj)


def thread_count() -> int:
    """Worker bound from ``FD_THREADS`` (default: CPU count)."""
    raw = os.environ.get("FD_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        n = os.cpu_count() or 1
    return max(1, n)
