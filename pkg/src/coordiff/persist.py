"""Checkpoint, dataset and metrics files.

Binary layout (all little-endian)::

    magic    8 bytes   b"COORDIFF"
    version  uint16
    kind     uint16    1 = score model, 2 = dataset, 3 = cost model
    hlen     uint32    length of the JSON header
    header   hlen bytes, UTF-8 JSON; "arrays" lists name/dtype/shape in payload order
    payload  raw array bytes
    crc32    uint32    over everything above

Metrics are JSON lines: a schema line, one line per table, and an end line
carrying the record count and a CRC32 of the table lines.
"""

import json
import struct
import zlib
from dataclasses import fields

import numpy as np

from .diffusion import GaussianScore, NoiseSchedule
from .exceptions import ChecksumError, PersistenceError, TruncatedFileError, VersionMismatchError

MAGIC = b"COORDIFF"
VERSION = 1
KIND_MODEL, KIND_DATASET, KIND_COST_MODEL = 1, 2, 3
_PREFIX = struct.Struct("<8sHHI")
_CRC = struct.Struct("<I")
METRICS_SCHEMA = "coordiff.metrics"


def _write(path, kind, header, arrays):
    specs, blobs = [], []
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in ("|", "<", "=") else arr.dtype
        arr = arr.astype(dt.str.replace("=", "<"), copy=False)
        specs.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = dict(header, arrays=specs)
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = _PREFIX.pack(MAGIC, VERSION, kind, len(hbytes)) + hbytes + b"".join(blobs)
    with open(path, "wb") as fh:
        fh.write(body + _CRC.pack(zlib.crc32(body)))


def _read(path, kind=None):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _PREFIX.size:
        if not MAGIC.startswith(data[:8]):
            raise VersionMismatchError(f"{path}: not a coordiff file")
        raise TruncatedFileError(f"{path}: file ends inside the header")
    magic, version, file_kind, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise VersionMismatchError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, this build reads {VERSION}")
    end_header = _PREFIX.size + hlen
    if len(data) < end_header + _CRC.size:
        raise TruncatedFileError(f"{path}: file ends inside the header")
    try:
        header = json.loads(data[_PREFIX.size:end_header].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ChecksumError(f"{path}: unreadable header ({exc})") from exc
    need = sum(np.dtype(s["dtype"]).itemsize * int(np.prod(s["shape"], dtype=np.int64))
               for s in header.get("arrays", []))
    if len(data) < end_header + need + _CRC.size:
        raise TruncatedFileError(f"{path}: payload is {len(data) - end_header - _CRC.size} bytes, expected {need}")
    if len(data) > end_header + need + _CRC.size:
        raise ChecksumError(f"{path}: trailing bytes after payload")
    body = data[:-_CRC.size]
    (crc,) = _CRC.unpack_from(data, len(body))
    if zlib.crc32(body) != crc:
        raise ChecksumError(f"{path}: checksum mismatch")
    if kind is not None and file_kind != kind:
        raise PersistenceError(f"{path}: holds kind {file_kind}, expected {kind}")
    arrays, off = {}, end_header
    for s in header.get("arrays", []):
        dt = np.dtype(s["dtype"])
        n = int(np.prod(s["shape"], dtype=np.int64))
        arrays[s["name"]] = np.frombuffer(data, dtype=dt, count=n, offset=off).reshape(s["shape"]).copy()
        off += dt.itemsize * n
    return file_kind, header, arrays


def read_header(path):
    """Kind and JSON header of a checkpoint or dataset file (payload is checksummed too)."""
    kind, header, _ = _read(path)
    return kind, header


# ---------------------------------------------------------------- models


def _schedule_dict(s):
    return None if s is None else {f.name: getattr(s, f.name) for f in fields(s)}


def _model_record(model, prefix, arrays):
    from .score_net import ScoreMLP

    if model is None:
        return None
    if isinstance(model, GaussianScore):
        arrays += [(prefix + "mean", model.mean), (prefix + "var", model.var)]
        return {"type": "gaussian"}
    if not isinstance(model, ScoreMLP):
        raise PersistenceError(f"cannot serialize a {type(model).__name__}")
    model._check_fitted()
    params = {k: v for k, v in model.get_params(deep=False).items() if k not in ("base", "schedule")}
    params["hidden_sizes"] = list(params["hidden_sizes"])
    arrays.append((prefix + "params", model.params_))
    return {"type": "score_mlp", "params": params, "schedule": _schedule_dict(model.schedule),
            "fitted_schedule": _schedule_dict(model.schedule_), "action_width": model.n_features_in_,
            "cond_dim": model.cond_dim_, "sigma_data": model.sigma_data_,
            "base": _model_record(model.base, prefix + "base.", arrays)}


def _model_from_record(rec, prefix, arrays):
    from .score_net import ScoreMLP

    if rec is None:
        return None
    if rec["type"] == "gaussian":
        return GaussianScore(arrays[prefix + "mean"], arrays[prefix + "var"])
    p = dict(rec["params"])
    p["hidden_sizes"] = tuple(p["hidden_sizes"])
    sched = NoiseSchedule(**rec["schedule"]) if rec["schedule"] else None
    base = _model_from_record(rec["base"], prefix + "base.", arrays)
    model = ScoreMLP.from_params(arrays[prefix + "params"], rec["action_width"], rec["cond_dim"],
                                 rec["sigma_data"], schedule=sched, base=base, **p)
    model.schedule_ = NoiseSchedule(**rec["fitted_schedule"])
    return model


def save_model(model, path, method="pretrained"):
    """Write a (possibly residual) score model with a method tag."""
    arrays = []
    rec = _model_record(model, "", arrays)
    _write(path, KIND_MODEL, {"model": rec, "method": method}, arrays)


def load_model(path, return_method=False):
    _, header, arrays = _read(path, KIND_MODEL)
    model = _model_from_record(header["model"], "", arrays)
    return (model, header.get("method")) if return_method else model


def save_cost_model(model, path):
    from .baselines import NoiseCondCostModel

    if not isinstance(model, NoiseCondCostModel):
        raise PersistenceError("expected a NoiseCondCostModel")
    model._check_fitted()
    params = model.get_params(deep=False)
    params["hidden_sizes"] = list(params["hidden_sizes"])
    sched = params.pop("schedule")
    header = {"params": params, "schedule": _schedule_dict(sched), "fitted_schedule": _schedule_dict(model.schedule_),
              "width": model.n_features_in_, "cond_dim": model.cond_dim_, "sigma_data": model.sigma_data_,
              "y_mean": model.y_mean_, "y_scale": model.y_scale_, "method": "cost-model"}
    _write(path, KIND_COST_MODEL, header, [("params", model.params_)])


def load_cost_model(path):
    from .baselines import NoiseCondCostModel
    from .mlp import MLP

    _, h, arrays = _read(path, KIND_COST_MODEL)
    p = dict(h["params"])
    p["hidden_sizes"] = tuple(p["hidden_sizes"])
    m = NoiseCondCostModel(schedule=NoiseSchedule(**h["schedule"]) if h["schedule"] else None, **p)
    m.n_features_in_, m.cond_dim_, m.sigma_data_ = h["width"], h["cond_dim"], h["sigma_data"]
    m.y_mean_, m.y_scale_ = h["y_mean"], h["y_scale"]
    m.schedule_ = NoiseSchedule(**h["fitted_schedule"])
    m.mlp_ = MLP([m.n_features_in_ + 1 + 2 * m.n_time_freqs + m.cond_dim_, *m.hidden_sizes, 1], m.activation)
    m.params_ = arrays["params"]
    return m


# ---------------------------------------------------------------- datasets


def save_dataset(ds, path):
    arrays = [("states", ds.states), ("actions", ds.actions)]
    if ds.roles is not None:
        arrays.append(("roles", ds.roles))
    header = {"chunk_length": ds.chunk_length, "action_dim": ds.action_dim, "control_rate": ds.control_rate,
              "agent_id": ds.agent_id, "meta": ds.meta, "records": len(ds)}
    _write(path, KIND_DATASET, header, arrays)


def load_dataset(path):
    from .score_net import DemoDataset

    _, h, a = _read(path, KIND_DATASET)
    return DemoDataset(a["states"], a["actions"], chunk_length=h["chunk_length"], action_dim=h["action_dim"],
                       control_rate=h["control_rate"], agent_id=h["agent_id"], roles=a.get("roles"),
                       meta=h["meta"])


# ---------------------------------------------------------------- metrics


def save_metrics(tables, path):
    """JSON lines: schema line, one object per :class:`MetricsTable`, end line with count and CRC32."""
    lines = [json.dumps(t.to_dict(), sort_keys=True) for t in tables]
    crc = zlib.crc32("\n".join(lines).encode("utf-8"))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"schema": METRICS_SCHEMA, "version": VERSION}) + "\n")
        for line in lines:
            fh.write(line + "\n")
        fh.write(json.dumps({"end": len(lines), "crc32": crc}) + "\n")


def load_metrics(path):
    from .harness import MetricsTable

    with open(path, "r", encoding="utf-8") as fh:
        raw = fh.read().splitlines()
    try:
        head = json.loads(raw[0]) if raw else {}
    except json.JSONDecodeError as exc:
        raise VersionMismatchError(f"{path}: not a metrics file") from exc
    if head.get("schema") != METRICS_SCHEMA or head.get("version") != VERSION:
        raise VersionMismatchError(f"{path}: schema {head.get('schema')!r} version {head.get('version')!r}")
    try:
        tail = json.loads(raw[-1])
    except json.JSONDecodeError:
        tail = {}
    if "end" not in tail:
        raise TruncatedFileError(f"{path}: missing end record")
    lines = raw[1:-1]
    if len(lines) != tail["end"] or zlib.crc32("\n".join(lines).encode("utf-8")) != tail["crc32"]:
        raise ChecksumError(f"{path}: metrics records do not match their checksum")
    return [MetricsTable(**json.loads(line)) for line in lines]


def save_trace(trace, path):
    """Episode trace as JSON lines, one world state per executed step."""
    with open(path, "w", encoding="utf-8") as fh:
        for k, s in enumerate(trace):
            fh.write(json.dumps(dict(step=k, **s.to_dict())) + "\n")


def load_trace(path):
    from .env import WorldState

    with open(path, "r", encoding="utf-8") as fh:
        return [WorldState.from_dict(json.loads(line)) for line in fh if line.strip()]
