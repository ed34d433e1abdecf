"""Simulation designs end to end: generate, fit, score, diagnose, report.

A run is described by a JSON-compatible config::

    {
      "design": "fa" | "gmm",
      "conditions": [...],            # FA: {"c", "sigma2", "J"} dicts; GMM: names
      "replicates": 20,               # or [first, stop)
      "master_seed": 20250101,
      "k_values": [1, 2, 3, 4],       # GMM only
      "sampler": {"chains": 4, "warmup": ..., "iters": ..., "thin": ..., "init_search": ...},
      "out_dir": "out",
      "workers": 1
    }

Results land in ``<out_dir>/<design>/<condition>/<replicate>/result.json`` and
are listed in ``<out_dir>/<design>/manifest.json``. A rerun skips every
replicate already in the manifest unless ``force`` is set.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from infocrit.criteria import PDIC_NEGATIVE, CriteriaReport, compute_all, deviance_from_pointwise, dic_family, waic
from infocrit.diagnostics import WITHIN_CHAIN_SUSPECT, detect_sign_switch, rhat_report, within_chain_suspect
from infocrit.errors import InfocritError, SamplerError, UsageError
from infocrit.io import dumps_json, read_json, write_json
from infocrit.models import FactorModel, GmmModel
from infocrit.psis import psis_loo
from infocrit.sampler import SamplerConfig, pointwise_loglik_draws, sample
from infocrit.simulate import (
    FA_C_LEVELS,
    FA_J_LEVELS,
    FA_SIGMA2_LEVELS,
    GMM_CONDITIONS,
    FaCondition,
    GmmCondition,
    derive_seed,
    generate_fa,
    generate_gmm,
)

log = logging.getLogger(__name__)

DEFAULT_MASTER_SEED = 20250101
DESK_REPLICATES = {"fa": 20, "gmm": 20}
FULL_REPLICATES = {"fa": 100, "gmm": 50}
# Tuned for the random-walk sampler at desk scale; see the README.
DEFAULT_SAMPLER = {
    "fa": {"chains": 4, "warmup": 5000, "iters": 1000, "thin": 40, "init_search": 0},
    "gmm": {"chains": 4, "warmup": 2000, "iters": 1000, "thin": 5, "init_search": 8},
}
CRITERIA = ("dic", "dic_p", "dic_i", "waic", "loo")


def default_config(design: str, full_scale: bool = False, **overrides) -> dict:
    """Full factorial config for ``design`` with desk or full replicate counts."""
    if design == "fa":
        conditions = [{"c": c, "sigma2": s, "J": j} for c in FA_C_LEVELS for s in FA_SIGMA2_LEVELS for j in FA_J_LEVELS]
    elif design == "gmm":
        conditions = list(GMM_CONDITIONS)
    else:
        raise UsageError(f"unknown design {design!r}")
    cfg = {
        "design": design,
        "conditions": conditions,
        "replicates": (FULL_REPLICATES if full_scale else DESK_REPLICATES)[design],
        "master_seed": DEFAULT_MASTER_SEED,
        "sampler": dict(DEFAULT_SAMPLER[design]),
        "out_dir": "out",
        "workers": 1,
    }
    if design == "gmm":
        cfg["k_values"] = [1, 2, 3, 4]
    cfg.update(overrides)
    return cfg


def convergence_config(j_values=(400, 800, 1600, 3200, 6400), c=0.9, sigma2=1.0, **overrides) -> dict:
    """FA config for the sample-size study: one (c, sigma2) cell over doubling J."""
    cfg = default_config("fa", conditions=[{"c": c, "sigma2": sigma2, "J": int(j)} for j in j_values])
    cfg.update(overrides)
    return cfg


def _replicate_ids(cfg) -> list[int]:
    reps = cfg.get("replicates", DESK_REPLICATES[cfg["design"]])
    if isinstance(reps, int):
        return list(range(reps))
    first, stop = reps
    return list(range(int(first), int(stop)))


def _condition_objects(cfg, replicate: int):
    master = int(cfg.get("master_seed", DEFAULT_MASTER_SEED))
    out = []
    for cond in cfg["conditions"]:
        if cfg["design"] == "fa":
            if isinstance(cond, str):
                cond = parse_fa_condition(cond)
            out.append(FaCondition(float(cond["c"]), float(cond["sigma2"]), int(cond["J"]), replicate, master))
        else:
            out.append(GmmCondition(str(cond), replicate, master))
    return out


def parse_fa_condition(name: str) -> dict:
    """Inverse of ``FaCondition.name``, e.g. ``c0.9_s1_J400``."""
    try:
        c, s, j = name.split("_")
        return {"c": float(c[1:]), "sigma2": float(s[1:]), "J": int(j[1:])}
    except ValueError:
        raise UsageError(f"cannot parse FA condition {name!r}") from None


def config_hash(cfg) -> str:
    keep = {k: cfg[k] for k in sorted(cfg) if k not in ("out_dir", "workers", "force")}
    return hashlib.sha256(json.dumps(keep, sort_keys=True, default=str).encode()).hexdigest()[:16]


@dataclass
class ModelResult:
    """One fitted candidate model within a replicate."""

    model_id: str
    report: CriteriaReport | None
    rhat: dict | None = None
    switch: dict | None = None
    timings: dict = field(default_factory=dict)
    acceptance: list[float] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "report": None if self.report is None else self.report.to_dict(per_cluster=False),
            "rhat": self.rhat,
            "switch": self.switch,
            "timings": self.timings,
            "acceptance": self.acceptance,
            "notes": self.notes,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelResult":
        rep = d.get("report")
        report = None
        if rep is not None:
            rep = dict(rep)
            khat = rep.pop("khat", None)
            report = CriteriaReport.from_dict(rep)
            report._khat = khat
        return cls(
            model_id=d["model_id"],
            report=report,
            rhat=d.get("rhat"),
            switch=d.get("switch"),
            timings=d.get("timings", {}),
            acceptance=d.get("acceptance", []),
            notes=d.get("notes", []),
            error=d.get("error"),
        )


@dataclass
class ReplicateResult:
    design: str
    condition: str
    replicate: int
    seed: int
    meta: dict
    models: list[ModelResult]

    def model(self, model_id: str) -> ModelResult | None:
        return next((m for m in self.models if m.model_id == model_id), None)

    def to_dict(self) -> dict:
        return {
            "design": self.design,
            "condition": self.condition,
            "replicate": self.replicate,
            "seed": self.seed,
            "meta": self.meta,
            "models": [m.to_dict() for m in self.models],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReplicateResult":
        return cls(
            design=d["design"],
            condition=d["condition"],
            replicate=int(d["replicate"]),
            seed=int(d["seed"]),
            meta=d.get("meta", {}),
            models=[ModelResult.from_dict(m) for m in d["models"]],
        )


def report_khat(report: CriteriaReport) -> list:
    """Per-cluster Pareto k of a report, whether or not it was reloaded from disk."""
    khat = getattr(report, "_khat", None)
    return khat if khat is not None else report.khat


def timed_criteria(ll, plugin_deviance: float | None) -> tuple[CriteriaReport, dict]:
    """Full report plus wall-clock milliseconds for each criterion on its own.

    DIC_i is timed on the deviance vector, WAIC and PSIS-LOO on the pointwise
    matrix, classic DIC on the deviance vector with the plug-in value given.
    """
    timings = {}
    t = time.perf_counter()
    dev = deviance_from_pointwise(ll)
    timings["deviance"] = 1e3 * (time.perf_counter() - t)
    t = time.perf_counter()
    dic_family(dev)
    timings["dic_i"] = 1e3 * (time.perf_counter() - t)
    if plugin_deviance is not None:
        t = time.perf_counter()
        dic_family(dev, plugin_deviance)
        timings["dic"] = 1e3 * (time.perf_counter() - t)
    t = time.perf_counter()
    w = waic(ll)
    timings["waic"] = 1e3 * (time.perf_counter() - t)
    t = time.perf_counter()
    psis_loo(ll, lppd_j=w.lppd_j)
    timings["loo"] = 1e3 * (time.perf_counter() - t)
    return compute_all(ll, plugin_deviance), timings


def fit_and_score(model, data, sampler_cfg: SamplerConfig, model_id: str) -> ModelResult:
    """Sample, compute every criterion and diagnostic for one candidate model."""
    t = time.perf_counter()
    try:
        chains = sample(model, data, sampler_cfg)
    except (SamplerError, InfocritError, np.linalg.LinAlgError) as exc:
        return ModelResult(model_id, None, error=f"{type(exc).__name__}: {exc}")
    fit_ms = 1e3 * (time.perf_counter() - t)
    ll = pointwise_loglik_draws(model, data, chains)
    try:
        plugin = model.plugin_deviance(chains.posterior_mean(), data)
    except InfocritError:
        plugin = None
    report, timings = timed_criteria(ll, plugin)
    timings["fit"] = fit_ms
    rh = rhat_report(chains)
    notes = []
    switch = None
    if isinstance(model, FactorModel):
        switch = detect_sign_switch(chains, model).to_dict()
    if within_chain_suspect(rh.rhat_max, report.p_dic):
        notes.append(WITHIN_CHAIN_SUSPECT)
    return ModelResult(
        model_id=model_id,
        report=report,
        rhat=rh.to_dict(),
        switch=switch,
        timings=timings,
        acceptance=[float(a) for a in chains.acceptance_rate],
        notes=notes,
    )


def run_replicate(cfg: dict, condition, replicate: int) -> ReplicateResult:
    design = cfg["design"]
    sampler_opts = {**DEFAULT_SAMPLER[design], **cfg.get("sampler", {})}
    master = int(cfg.get("master_seed", DEFAULT_MASTER_SEED))
    if design == "fa":
        data = generate_fa(condition)
        candidates = [("fa", FactorModel(data.y.shape[1]))]
    else:
        data = generate_gmm(condition)
        candidates = [(f"K{k}", GmmModel(int(k))) for k in cfg.get("k_values", [1, 2, 3, 4])]
    models = []
    for model_id, model in candidates:
        seed = derive_seed(master, design, condition.name, replicate, model_id, "sampler")
        scfg = SamplerConfig(**{**sampler_opts, "seed": seed})
        models.append(fit_and_score(model, data, scfg, model_id))
    meta = {k: v for k, v in data.meta.items() if k != "classes"}
    return ReplicateResult(design, condition.name, replicate, condition.seed, meta, models)


def _result_path(root: Path, condition: str, replicate: int) -> Path:
    return root / condition / str(replicate) / "result.json"


def _job(cfg, condition, replicate, root):
    res = run_replicate(cfg, condition, replicate)
    path = _result_path(Path(root), condition.name, replicate)
    write_json(path, res.to_dict())
    return condition.name, replicate, str(path.relative_to(root))


def _load_manifest(path: Path, cfg_id: str) -> dict:
    if path.exists():
        manifest = read_json(path)
        if manifest.get("config_hash") == cfg_id:
            return manifest
        log.warning("config changed since %s was written; starting a new manifest", path)
    return {"config_hash": cfg_id, "entries": {}}


def _entry_ok(root: Path, rel: str) -> bool:
    try:
        read_json(root / rel)
        return True
    except (OSError, ValueError):
        return False


def run_design(config: dict, force: bool = False, progress=None) -> list[ReplicateResult]:
    """Run every (condition, replicate) cell of ``config`` and return all results.

    Completed cells listed in the manifest are loaded instead of recomputed.
    A failed fit is recorded in its ModelResult and the run continues.
    """
    cfg = dict(config)
    design = cfg.get("design")
    if design not in ("fa", "gmm"):
        raise UsageError(f"design must be 'fa' or 'gmm', got {design!r}")
    root = Path(cfg.get("out_dir", "out")) / design
    root.mkdir(parents=True, exist_ok=True)
    cfg_id = config_hash(cfg)
    manifest_path = root / "manifest.json"
    manifest = _load_manifest(manifest_path, cfg_id)
    manifest["config"] = {k: v for k, v in cfg.items() if k not in ("force",)}

    todo = []
    for rep in _replicate_ids(cfg):
        for cond in _condition_objects(cfg, rep):
            key = f"{cond.name}/{rep}"
            rel = manifest["entries"].get(key)
            if not force and rel is not None and _entry_ok(root, rel):
                continue
            todo.append((cond, rep))

    def record(name, rep, rel):
        manifest["entries"][f"{name}/{rep}"] = rel
        write_json(manifest_path, manifest)
        if progress:
            progress(f"{design} {name} replicate {rep} done")

    workers = int(cfg.get("workers", 1))
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_job, cfg, cond, rep, str(root)) for cond, rep in todo]
            for fut in as_completed(futures):
                record(*fut.result())
    else:
        for cond, rep in todo:
            record(*_job(cfg, cond, rep, root))
    write_json(manifest_path, manifest)
    return load_results(root, manifest)


def load_results(root, manifest: dict | None = None) -> list[ReplicateResult]:
    """Results listed in a design directory's manifest, in a stable order."""
    root = Path(root)
    if manifest is None:
        manifest = read_json(root / "manifest.json")
    out = []
    for key in sorted(manifest["entries"]):
        out.append(ReplicateResult.from_dict(read_json(root / manifest["entries"][key])))
    out.sort(key=lambda r: (r.condition, r.replicate))
    return out


# reports ---------------------------------------------------------------------


def _value(mr: ModelResult | None, name: str):
    if mr is None or mr.report is None:
        return None
    v = getattr(mr.report, name)
    return None if v is None or not math.isfinite(v) else float(v)


def _rmsd(diffs) -> float:
    d = np.asarray(diffs, dtype=float)
    return float(np.sqrt(np.mean(d * d))) if d.size else math.nan


def rmsd_report(results: list[ReplicateResult], baseline: str = "waic") -> list[dict]:
    """RMSD of each criterion against ``baseline`` per condition.

    For FA there is one model per replicate. For GMM the candidate models of a
    condition are pooled, and the spread of the baseline is the within-model
    SD: per-model variances across replicates, averaged, square-rooted.
    """
    rows = []
    by_cond: dict[str, list[ReplicateResult]] = {}
    for r in results:
        by_cond.setdefault(r.condition, []).append(r)
    for cond in sorted(by_cond):
        reps = by_cond[cond]
        model_ids = sorted({m.model_id for r in reps for m in r.models})
        row = {"condition": cond, "n_replicates": len(reps)}
        variances = []
        for mid in model_ids:
            base = [_value(r.model(mid), baseline) for r in reps]
            base = [b for b in base if b is not None]
            if len(base) >= 2:
                variances.append(np.var(base, ddof=1))
        sd = float(np.sqrt(np.mean(variances))) if variances else math.nan
        row[f"sd_{baseline}"] = sd
        for crit in CRITERIA:
            if crit == baseline:
                continue
            diffs, missing = [], 0
            for r in reps:
                for mid in model_ids:
                    a, b = _value(r.model(mid), crit), _value(r.model(mid), baseline)
                    if a is None or b is None:
                        missing += 1
                    else:
                        diffs.append(a - b)
            row[f"rmsd_{crit}"] = _rmsd(diffs)
            if missing:
                row[f"missing_{crit}"] = missing
        row["ratio_dic_i"] = row["rmsd_dic_i"] / sd if sd > 0 else math.nan
        row["n_sign_switch"] = sum(
            1 for r in reps for m in r.models if m.switch is not None and m.switch.get("sign_switch") is True
        )
        row["n_pdic_negative"] = sum(
            1 for r in reps for m in r.models if m.report is not None and PDIC_NEGATIVE in m.report.flags
        )
        rows.append(row)
    return rows


def convergence_study(results: list[ReplicateResult]) -> dict:
    """Mean, SD and 95% CI of DIC_i - WAIC at each sample size.

    ``results`` should hold one FA (c, sigma2) cell at several J.
    """
    by_j: dict[int, list[float]] = {}
    pv: dict[int, list[float]] = {}
    for r in results:
        mr = r.models[0] if r.models else None
        a, b = _value(mr, "dic_i"), _value(mr, "waic")
        if a is None or b is None:
            continue
        j = int(r.meta.get("J", parse_fa_condition(r.condition)["J"]))
        by_j.setdefault(j, []).append(a - b)
        pv.setdefault(j, []).append(_value(mr, "p_v"))
    rows = []
    for j in sorted(by_j):
        d = np.asarray(by_j[j])
        n = d.size
        mean = float(d.mean())
        sd = float(d.std(ddof=1)) if n > 1 else math.nan
        half = float(stats.t.ppf(0.975, n - 1) * sd / math.sqrt(n)) if n > 1 else math.nan
        rows.append(
            {
                "J": j,
                "n": n,
                "mean": mean,
                "sd": sd,
                "ci_low": mean - half,
                "ci_high": mean + half,
                "mean_p_v": float(np.mean(pv[j])),
            }
        )
    means = [r["mean"] for r in rows]
    monotone = all(b < a for a, b in zip(means, means[1:]))
    halved = len(means) >= 2 and means[-1] <= 0.5 * means[0]
    return {"rows": rows, "monotone_decrease": monotone, "final_at_most_half_initial": halved}


def model_comparison_report(results: list[ReplicateResult], reference: str = "K2") -> dict:
    """Criterion differences of each candidate against the true two-class model.

    ``delta = criterion(K) - criterion(2)``; a positive delta favors K=2.
    """
    rows = []
    for r in results:
        ref = r.model(reference)
        for m in r.models:
            if m.model_id == reference:
                continue
            row = {"condition": r.condition, "replicate": r.replicate, "model": m.model_id}
            for crit in CRITERIA:
                a, b = _value(m, crit), _value(ref, crit)
                row[f"delta_{crit}"] = None if a is None or b is None else a - b
            rows.append(row)
    rates = {}
    for crit in CRITERIA:
        vals = [row[f"delta_{crit}"] for row in rows if row[f"delta_{crit}"] is not None]
        rates[crit] = float(np.mean([v > 0 for v in vals])) if vals else math.nan
    pairs = [(row["delta_dic_i"], row["delta_waic"]) for row in rows if None not in (row["delta_dic_i"], row["delta_waic"])]
    flips = [np.sign(a) != np.sign(b) for a, b in pairs]
    return {
        "rows": rows,
        "selection_rate": rates,
        "sign_disagreement_dic_i_waic": float(np.mean(flips)) if flips else math.nan,
        "n_comparisons": len(rows),
    }


def timing_report(results_or_timings) -> dict:
    """Median milliseconds per criterion and the DIC_i < WAIC < LOO check.

    Accepts replicate results or a list of timing dicts.
    """
    timings = []
    for item in results_or_timings:
        if isinstance(item, ReplicateResult):
            timings.extend(m.timings for m in item.models if m.timings)
        else:
            timings.append(item)
    keys = sorted({k for t in timings for k in t})
    med = {k: float(np.median([t[k] for t in timings if k in t])) for k in keys}
    iqr = {
        k: float(np.subtract(*np.percentile([t[k] for t in timings if k in t], [75, 25]))) for k in keys
    }
    ordered = all(k in med for k in ("dic_i", "waic", "loo")) and med["dic_i"] < med["waic"] < med["loo"]
    return {"median_ms": med, "iqr_ms": iqr, "n": len(timings), "ordering_holds": ordered}


def time_criteria_on_matrix(ll, repeats: int = 5) -> list[dict]:
    """Repeated criterion timings on one matrix (no plug-in deviance)."""
    return [timed_criteria(ll, None)[1] for _ in range(repeats)]


def format_table(rows: list[dict]) -> str:
    """Fixed-width text rendering of a list of dicts."""
    if not rows:
        return "(empty)\n"
    keys = list(rows[0])

    def fmt(v):
        if isinstance(v, float):
            return f"{v:.4g}"
        return "" if v is None else str(v)

    cells = [[fmt(r.get(k)) for k in keys] for r in rows]
    widths = [max(len(k), *(len(c[i]) for c in cells)) for i, k in enumerate(keys)]
    lines = ["  ".join(k.rjust(w) for k, w in zip(keys, widths))]
    lines.extend("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells)
    return "\n".join(lines) + "\n"


def results_digest(results: list[ReplicateResult]) -> str:
    """Hash of every numeric criterion field, ignoring timings."""
    payload = []
    for r in results:
        for m in r.models:
            rep = m.report.to_dict(per_cluster=False) if m.report else None
            payload.append([r.condition, r.replicate, m.model_id, rep, m.rhat, m.switch])
    return hashlib.sha256(dumps_json(payload).encode()).hexdigest()
