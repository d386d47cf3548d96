"""On-disk formats.

Containers (models, checkpoints, datasets) are ``.npz`` archives holding one
``__header__`` entry (UTF-8 JSON stored as uint8) plus named dense arrays in
row-major order. CSV outputs start with a ``# schema: <name> v<version>`` line
followed by a column header.
"""
from __future__ import annotations

import csv
import io
import json
import os
from pathlib import Path

import numpy as np

CONTAINER_VERSION = 1
CSV_VERSION = 1


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def save_container(path, header: dict, arrays: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    head = dict(header)
    head.setdefault("container_version", CONTAINER_VERSION)
    blob = np.frombuffer(json.dumps(head, sort_keys=True, default=_json_default).encode(), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        np.savez(f, __header__=blob, **{k: np.ascontiguousarray(v) for k, v in arrays.items()})
    os.replace(tmp, path)
    return path


def load_container(path):
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        arrays = {k: z[k] for k in z.files if k != "__header__"}
    if header.get("container_version", 0) > CONTAINER_VERSION:
        raise ValueError(f"container version {header['container_version']} is newer than supported")
    return header, arrays


# ---------------------------------------------------------------- CSV
def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, schema: str, columns, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    buf.write(f"# schema: {schema} v{CSV_VERSION}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    path.write_text(buf.getvalue())
    return path


def read_csv(path):
    """Returns (schema or None, columns, float array of rows)."""
    lines = Path(path).read_text().splitlines()
    schema = None
    if lines and lines[0].startswith("#"):
        schema = lines[0].split(":", 1)[1].strip() if ":" in lines[0] else lines[0][1:].strip()
        lines = lines[1:]
    lines = [ln for ln in lines if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: no header row")
    reader = csv.reader(lines)
    columns = next(reader)
    data = [[float(x) for x in row] for row in reader]
    arr = np.array(data, dtype=np.float64).reshape(len(data), len(columns))
    return schema, columns, arr


def read_observation_csv(path):
    """Observation series: header of dimension names, one row per time step."""
    _, columns, arr = read_csv(path)
    if arr.shape[0] == 0:
        raise ValueError(f"{path}: no observations")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{path}: non-finite observation values")
    return columns, arr


def write_observation_csv(path, y, names=None):
    y = np.atleast_2d(y)
    names = names or [f"y{j}" for j in range(y.shape[1])]
    return write_csv(path, "observations", names, y.tolist())


# ---------------------------------------------------------------- datasets
def save_dataset(path, ds):
    header = {
        "format": "fluid-dataset",
        "spec": ds.spec.to_dict(),
        "seed": ds.seed,
        "n_train": ds.train.n,
        "n_test": 0 if ds.test is None else ds.test.n,
        "T": ds.train.T,
        "d_u": ds.train.u.shape[-1],
        "d_y": ds.train.y.shape[-1],
        "meta": ds.meta,
    }
    arrays = {
        "train_u": ds.train.u, "train_y": ds.train.y,
        "u_mean": ds.u_stats.mean, "u_std": ds.u_stats.std,
        "y_mean": ds.y_stats.mean, "y_std": ds.y_stats.std,
    }
    if ds.test is not None:
        arrays["test_u"] = ds.test.u
        arrays["test_y"] = ds.test.y
    return save_container(path, header, arrays)


def load_dataset(path):
    from .ssm import Dataset, Standardizer, Trajectories, spec_from_dict

    header, a = load_container(path)
    if header.get("format") != "fluid-dataset":
        raise ValueError(f"{path} is not a dataset container")
    test = Trajectories(a["test_u"], a["test_y"]) if "test_u" in a else None
    return Dataset(spec_from_dict(header["spec"]), Trajectories(a["train_u"], a["train_y"]), test,
                   Standardizer(a["u_mean"], a["u_std"]), Standardizer(a["y_mean"], a["y_std"]),
                   header.get("seed", 0), header.get("meta", {}))
