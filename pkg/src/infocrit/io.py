"""Reading and writing pointwise log-likelihoods, datasets, draws and reports.

Layouts
-------
Pointwise log-likelihood, long: header ``draw,chain,j,loglik``, one row per
(draw, cluster); ``j`` and ``draw`` are 0-based.
Pointwise log-likelihood, wide: header ``j1,...,jJ``, one row per draw.
External draws (CmdStan style): any parameter columns plus
``log_lik.1,...,log_lik.J``; an optional ``chain`` or ``chain__`` column
carries the chain id. Lines starting with ``#`` are skipped.
FA dataset: wide ``y1,...,yn``, one row per cluster.
GMM dataset: long ``cluster,occasion,t,y``.
"""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from infocrit.criteria import CriteriaReport, PointwiseLogLik
from infocrit.errors import NumericInputError, UsageError
from infocrit.models import Dataset


def atomic_write_text(path, text: str) -> None:
    """Write through a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _clean_floats(obj):
    # JSON has no inf/nan; write them as strings so files stay standard
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    if isinstance(obj, dict):
        return {k: _clean_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean_floats(v) for v in obj]
    return obj


def dumps_json(obj) -> str:
    plain = json.loads(json.dumps(obj, default=_json_default))
    return json.dumps(_clean_floats(plain), indent=2, sort_keys=True) + "\n"


def write_json(path, obj) -> None:
    atomic_write_text(path, dumps_json(obj))


def read_json(path):
    """Parse JSON written by :func:`write_json`, turning "inf"/"nan" back into floats."""
    with open(path) as fh:
        return _restore_floats(json.load(fh))


def _read_rows(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
    reader = csv.reader(lines)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise UsageError(f"{path}: empty file") from None
    return header, [row for row in reader if row]


def _to_float(text: str, where: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise NumericInputError(f"{where}: not a number: {text!r}") from None


# pointwise log-likelihood ----------------------------------------------------


def read_loglik_csv(path) -> PointwiseLogLik:
    """Read a pointwise matrix in either the long or the wide layout."""
    header, rows = _read_rows(path)
    if header == ["draw", "chain", "j", "loglik"]:
        draws, chains, js, vals = [], [], [], []
        for n, row in enumerate(rows, start=2):
            if len(row) != 4:
                raise UsageError(f"{path}:{n}: expected 4 fields")
            draws.append(int(row[0]))
            chains.append(int(row[1]))
            js.append(int(row[2]))
            vals.append(_to_float(row[3], f"{path}:{n}"))
        draws, chains, js = np.array(draws), np.array(chains), np.array(js)
        s, j = draws.max() + 1, js.max() + 1
        if len(vals) != s * j:
            raise UsageError(f"{path}: expected {s * j} rows for {s} draws x {j} clusters, got {len(vals)}")
        values = np.full((s, j), np.nan)
        values[draws, js] = vals
        chain_index = np.zeros(s, dtype=int)
        chain_index[draws] = chains
        if np.isnan(values).any():
            raise UsageError(f"{path}: missing (draw, j) cells")
        return PointwiseLogLik(values, chain_index=chain_index)
    if header and all(h.startswith("j") and h[1:].isdigit() for h in header):
        values = np.array([[_to_float(x, str(path)) for x in row] for row in rows])
        if values.ndim != 2 or values.shape[1] != len(header):
            raise UsageError(f"{path}: ragged rows")
        return PointwiseLogLik(values)
    raise UsageError(f"{path}: header must be 'draw,chain,j,loglik' or 'j1,...,jJ'")


def write_loglik_csv(path, ll: PointwiseLogLik, layout: str = "long") -> None:
    v = ll.values
    s, j = v.shape
    lines = []
    if layout == "long":
        chains = ll.chain_index if ll.chain_index is not None else np.zeros(s, dtype=int)
        lines.append("draw,chain,j,loglik")
        for d in range(s):
            lines.extend(f"{d},{int(chains[d])},{c},{float(v[d, c])!r}" for c in range(j))
    elif layout == "wide":
        lines.append(",".join(f"j{c + 1}" for c in range(j)))
        lines.extend(",".join(repr(float(x)) for x in row) for row in v)
    else:
        raise UsageError(f"unknown layout {layout!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_cmdstan_draws(path) -> tuple[PointwiseLogLik, dict[str, np.ndarray]]:
    """Pointwise matrix and parameter columns from an external draws file."""
    header, rows = _read_rows(path)
    ll_cols = [(i, h) for i, h in enumerate(header) if h.startswith("log_lik.")]
    if not ll_cols:
        raise UsageError(f"{path}: no log_lik.1..log_lik.J columns")
    try:
        order = sorted(ll_cols, key=lambda c: int(c[1].split(".", 1)[1]))
    except ValueError:
        raise UsageError(f"{path}: malformed log_lik column name") from None
    expected = [f"log_lik.{k}" for k in range(1, len(order) + 1)]
    if [h for _, h in order] != expected:
        raise UsageError(f"{path}: log_lik columns must be numbered 1..J without gaps")
    data = np.array([[_to_float(x, str(path)) for x in row] for row in rows])
    if data.ndim != 2 or data.shape[1] != len(header):
        raise UsageError(f"{path}: ragged rows")
    values = data[:, [i for i, _ in order]]
    chain_col = next((i for i, h in enumerate(header) if h in ("chain", "chain__")), None)
    chain_index = data[:, chain_col].astype(int) if chain_col is not None else None
    params = {h: data[:, i] for i, h in enumerate(header) if not h.startswith("log_lik.") and i != chain_col}
    return PointwiseLogLik(values, chain_index=chain_index), params


# datasets --------------------------------------------------------------------


def write_dataset(path, data: Dataset) -> None:
    """Dataset CSV plus a ``.json`` sidecar with its metadata."""
    path = Path(path)
    if data.design == "fa":
        y = data.y
        lines = [",".join(f"y{i + 1}" for i in range(y.shape[1]))]
        lines.extend(",".join(repr(float(v)) for v in row) for row in y)
    else:
        lines = ["cluster,occasion,t,y"]
        for j, (yj, tj) in enumerate(zip(data.y, data.times)):
            lines.extend(f"{j},{o},{float(t)!r},{float(v)!r}" for o, (t, v) in enumerate(zip(tj, yj)))
    atomic_write_text(path, "\n".join(lines) + "\n")
    write_json(path.with_suffix(".json"), {"design": data.design, "meta": data.meta})


def read_dataset(path) -> Dataset:
    path = Path(path)
    sidecar = path.with_suffix(".json")
    meta = read_json(sidecar).get("meta", {}) if sidecar.exists() else {}
    header, rows = _read_rows(path)
    if header == ["cluster", "occasion", "t", "y"]:
        clusters: dict[int, list[tuple[int, float, float]]] = {}
        for n, row in enumerate(rows, start=2):
            if len(row) != 4:
                raise UsageError(f"{path}:{n}: expected 4 fields")
            clusters.setdefault(int(row[0]), []).append(
                (int(row[1]), _to_float(row[2], f"{path}:{n}"), _to_float(row[3], f"{path}:{n}"))
            )
        ids = sorted(clusters)
        if ids != list(range(len(ids))):
            raise UsageError(f"{path}: cluster ids must be 0..J-1")
        ys, ts = [], []
        for j in ids:
            obs = sorted(clusters[j])
            ts.append(np.array([o[1] for o in obs]))
            ys.append(np.array([o[2] for o in obs]))
        return Dataset("gmm", tuple(ys), times=tuple(ts), meta=meta)
    if header and all(h.startswith("y") for h in header):
        y = np.array([[_to_float(x, str(path)) for x in row] for row in rows])
        return Dataset("fa", y, meta=meta)
    raise UsageError(f"{path}: header must be 'y1,...,yn' or 'cluster,occasion,t,y'")


# parameter draws and reports -------------------------------------------------


def write_draws_csv(path, chains) -> None:
    """Constrained parameter draws, one row per (chain, draw)."""
    names = list(chains.param_names)
    lines = [",".join(["chain", "draw", "log_posterior", *names])]
    for c in range(chains.n_chains):
        for s in range(chains.n_draws):
            vals = ",".join(repr(float(v)) for v in chains.constrained[c, s])
            lines.append(f"{c},{s},{float(chains.log_posterior[c, s])!r},{vals}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_report_json(path, report: CriteriaReport) -> None:
    write_json(path, report.to_dict())


def read_report_json(path) -> CriteriaReport:
    return CriteriaReport.from_dict(read_json(path))


def _restore_floats(obj):
    if isinstance(obj, str) and obj in ("inf", "-inf", "nan"):
        return float(obj)
    if isinstance(obj, dict):
        return {k: _restore_floats(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_restore_floats(v) for v in obj]
    return obj


def write_table_csv(path, rows: list[dict]) -> None:
    """Plain CSV from a list of same-keyed dicts."""
    if not rows:
        atomic_write_text(path, "")
        return
    keys = list(rows[0])
    lines = [",".join(keys)]
    for r in rows:
        lines.append(",".join("" if r.get(k) is None else str(r.get(k)) for k in keys))
    atomic_write_text(path, "\n".join(lines) + "\n")
