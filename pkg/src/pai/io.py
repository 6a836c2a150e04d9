"""Columnar-text persistence for run artifacts.

All floats are written with shortest round-trip repr so files are
byte-stable across reruns and reload to bit-identical arrays.
"""

from __future__ import annotations

import json
import hashlib
from pathlib import Path

import numpy as np

from .gp import GPSurrogate, TrainingSet, surrogate_from_record, surrogate_to_record
from .models import Dataset
from .sampling import SampleSet


def _fmt(x) -> str:
    return repr(float(x))


def _header_lines(meta: dict) -> list[str]:
    return [f"# {k}={v}" for k, v in meta.items()]


def _read_meta(lines) -> dict:
    meta = {}
    for line in lines:
        if not line.startswith("#"):
            break
        body = line[1:].strip()
        if "=" in body:
            k, v = body.split("=", 1)
            meta[k.strip()] = v.strip()
    return meta


def write_sample_set(path, ss: SampleSet) -> None:
    rows = [
        "\t".join([str(int(c))] + [_fmt(v) for v in p] + [_fmt(lp)])
        for c, p, lp in zip(ss.chain_ids, ss.points, ss.log_densities)
    ]
    header = _header_lines({"columns": "chain_id\ttheta...\tlog_density", "dim": ss.dim})
    Path(path).write_text("\n".join(header + rows) + "\n")


def read_sample_set(path) -> SampleSet:
    lines = Path(path).read_text().splitlines()
    data = [ln.split("\t") for ln in lines if ln and not ln.startswith("#")]
    chain = np.array([int(r[0]) for r in data])
    pts = np.array([[float(v) for v in r[1:-1]] for r in data])
    lp = np.array([float(r[-1]) for r in data])
    return SampleSet(pts, lp, chain)


def write_points(path, points: np.ndarray, meta: dict | None = None) -> None:
    points = np.atleast_2d(points)
    header = _header_lines({"dim": points.shape[1], **(meta or {})})
    rows = ["\t".join(_fmt(v) for v in p) for p in points]
    Path(path).write_text("\n".join(header + rows) + "\n")


def read_points(path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    rows = [[float(v) for v in ln.split("\t")] for ln in lines if ln and not ln.startswith("#")]
    return np.asarray(rows, dtype=float)


def write_training_set(path, train: TrainingSet) -> None:
    header = _header_lines({"columns": "theta...\ttarget", "dim": train.dim})
    rows = [
        "\t".join([_fmt(v) for v in p] + [_fmt(t)])
        for p, t in zip(train.inputs, train.targets)
    ]
    Path(path).write_text("\n".join(header + rows) + "\n")


def read_training_set(path) -> TrainingSet:
    arr = read_points(path)
    return TrainingSet(arr[:, :-1], arr[:, -1])


def write_dataset(path, data: Dataset) -> None:
    header = _header_lines(
        {
            "model": data.model,
            "n": len(data),
            "seed": data.seed,
            "theta_true": ",".join(_fmt(v) for v in np.atleast_1d(data.theta_true)),
        }
    )
    rows = [_fmt(v) for v in data.values]
    Path(path).write_text("\n".join(header + rows) + "\n")


def read_dataset(path) -> Dataset:
    lines = Path(path).read_text().splitlines()
    meta = _read_meta(lines)
    values = np.array([float(ln) for ln in lines if ln and not ln.startswith("#")])
    if meta["model"] == "rare_categorical":
        values = values.astype(int)
    return Dataset(
        model=meta["model"],
        values=values,
        seed=int(meta["seed"]),
        theta_true=np.array([float(v) for v in meta["theta_true"].split(",")]),
    )


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def write_surrogate(path, g: GPSurrogate) -> None:
    write_json(path, surrogate_to_record(g))


def read_surrogate(path) -> GPSurrogate:
    return surrogate_from_record(read_json(path))


def sample_set_hash(ss: SampleSet) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ss.points).tobytes())
    h.update(np.ascontiguousarray(ss.log_densities).tobytes())
    return h.hexdigest()
