"""Command-line entry point: ``infocrit <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from infocrit import harness
from infocrit.criteria import compute_all
from infocrit.diagnostics import detect_sign_switch, rhat_report
from infocrit.errors import InfocritError, UsageError
from infocrit.io import (
    dumps_json,
    read_cmdstan_draws,
    read_dataset,
    read_json,
    read_loglik_csv,
    write_dataset,
    write_draws_csv,
    write_json,
    write_loglik_csv,
    write_table_csv,
)
from infocrit.models import FactorModel, GmmModel, model_from_config
from infocrit.sampler import SamplerConfig, pointwise_loglik_draws, sample
from infocrit.simulate import GMM_CONDITIONS, FaCondition, GmmCondition, generate_fa, generate_gmm

log = logging.getLogger("infocrit")


def _replicate_range(text: str) -> range:
    """``"5"`` means 0..4, ``"3:7"`` means 3..6."""
    try:
        if ":" in text:
            a, b = text.split(":", 1)
            return range(int(a), int(b))
        return range(int(text))
    except ValueError:
        raise UsageError(f"bad replicate range {text!r}") from None


def cmd_simulate(args) -> int:
    out = Path(args.out)
    written = 0
    for rep in _replicate_range(args.replicates):
        if args.design == "fa":
            names = args.condition or [
                FaCondition(c["c"], c["sigma2"], c["J"]).name for c in harness.default_config("fa")["conditions"]
            ]
            for name in names:
                c = harness.parse_fa_condition(name)
                data = generate_fa(FaCondition(c["c"], c["sigma2"], c["J"], rep, args.master_seed))
                write_dataset(out / "fa" / name / str(rep) / "data.csv", data)
                written += 1
        else:
            for name in args.condition or GMM_CONDITIONS:
                data = generate_gmm(GmmCondition(name, rep, args.master_seed))
                write_dataset(out / "gmm" / name / str(rep) / "data.csv", data)
                written += 1
    print(f"wrote {written} datasets under {out}")
    return 0


def cmd_fit(args) -> int:
    data = read_dataset(args.data)
    if args.model == "fa":
        if data.design != "fa":
            raise UsageError("factor model needs wide FA data")
        model = FactorModel(data.y.shape[1])
    else:
        model = GmmModel(args.k, lkj_eta=args.lkj_eta)
    cfg = SamplerConfig(
        chains=args.chains,
        warmup=args.warmup,
        iters=args.iters,
        thin=args.thin,
        seed=args.seed,
        init_search=args.init_search if args.init_search is not None else (8 if args.model == "gmm" else 0),
    )
    chains = sample(model, data, cfg)
    ll = pointwise_loglik_draws(model, data, chains)
    out = Path(args.out)
    write_draws_csv(out / "draws.csv", chains)
    write_loglik_csv(out / "loglik.csv", ll, layout="long")
    rh = rhat_report(chains)
    meta = {
        "model": model.to_config(),
        "data": str(args.data),
        "sampler": cfg.__dict__,
        "chain_seeds": chains.seeds,
        "acceptance_rate": chains.acceptance_rate.tolist(),
        "plugin_deviance": model.plugin_deviance(chains.posterior_mean(), data),
        "diagnostics": {"rhat": rh.to_dict()},
    }
    if isinstance(model, FactorModel):
        meta["diagnostics"]["switch"] = detect_sign_switch(chains, model).to_dict()
    write_json(out / "run.json", meta)
    print(f"wrote draws, pointwise log-likelihood and run metadata to {out}")
    print(f"acceptance {np.round(chains.acceptance_rate, 3).tolist()}  max classic R-hat {rh.rhat_max:.3f}")
    return 0


def _plugin_from_args(args):
    if args.plugin_deviance is not None:
        return args.plugin_deviance
    if getattr(args, "run_json", None):
        return read_json(args.run_json).get("plugin_deviance")
    return None


def _emit_report(report, args) -> None:
    text = dumps_json(report.to_dict(per_cluster=not args.summary))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)


def cmd_criteria(args) -> int:
    ll = read_loglik_csv(args.loglik)
    _emit_report(compute_all(ll, _plugin_from_args(args), with_loo=not args.no_loo), args)
    return 0


def cmd_ingest(args) -> int:
    ll, _ = read_cmdstan_draws(args.draws)
    _emit_report(compute_all(ll, args.plugin_deviance, with_loo=not args.no_loo), args)
    return 0


def _chains_from_dir(run_dir: Path):
    meta = read_json(run_dir / "run.json")
    with open(run_dir / "draws.csv") as fh:
        names = fh.readline().strip().split(",")[3:]
    raw = np.loadtxt(run_dir / "draws.csv", delimiter=",", skiprows=1, ndmin=2)
    n_chains = int(raw[:, 0].max()) + 1
    table = raw[:, 3:].reshape(n_chains, -1, len(names))
    return SimpleNamespace(constrained=table, param_names=names), model_from_config(meta["model"])


def cmd_diagnose(args) -> int:
    chains, model = _chains_from_dir(Path(args.run_dir))
    rh = rhat_report(chains)
    rows = [
        {"parameter": n, "classic_rhat": float(a), "rank_split_rhat": float(b)}
        for n, a, b in zip(rh.param_names, rh.classic, rh.rank_split)
    ]
    print(harness.format_table(rows), end="")
    print(f"max classic R-hat: {rh.rhat_max:.4f}")
    if isinstance(model, FactorModel):
        sw = detect_sign_switch(chains, model)
        state = "INDETERMINATE" if sw.indeterminate else ("yes" if sw.sign_switch else "no")
        print(f"between-chain sign switch: {state} (chain signs {sw.chain_signs})")
    return 0


def _design_config(args) -> dict:
    if args.config:
        cfg = read_json(args.config)
    else:
        if not args.design:
            raise UsageError("give --config or --design")
        cfg = harness.default_config(args.design, full_scale=args.full_scale)
    if args.replicates is not None:
        r = _replicate_range(args.replicates)
        cfg["replicates"] = [r.start, r.stop]
    if args.out:
        cfg["out_dir"] = args.out
    if args.workers:
        cfg["workers"] = args.workers
    return cfg


def cmd_run_design(args) -> int:
    cfg = _design_config(args)
    results = harness.run_design(cfg, force=args.force, progress=print)
    failed = sum(1 for r in results for m in r.models if m.error)
    print(f"{len(results)} replicate results under {Path(cfg.get('out_dir', 'out')) / cfg['design']}; {failed} failed fits")
    return 0


def cmd_report(args) -> int:
    results = harness.load_results(Path(args.results))
    if args.kind == "rmsd":
        rows = harness.rmsd_report(results)
        text = harness.format_table(rows)
    elif args.kind == "convergence":
        out = harness.convergence_study(results)
        rows = out["rows"]
        text = harness.format_table(rows) + (
            f"monotone decrease: {out['monotone_decrease']}; "
            f"final <= half initial: {out['final_at_most_half_initial']}\n"
        )
    elif args.kind == "model-comparison":
        out = harness.model_comparison_report(results)
        rows = out["rows"]
        rates = "  ".join(f"{k}={v:.3f}" for k, v in out["selection_rate"].items())
        text = (
            f"selection rate of K=2 ({out['n_comparisons']} comparisons): {rates}\n"
            f"sign disagreement between delta DIC_i and delta WAIC: {out['sign_disagreement_dic_i_waic']:.3f}\n"
        )
    else:
        out = harness.timing_report(results)
        rows = [{"criterion": k, "median_ms": v, "iqr_ms": out["iqr_ms"][k]} for k, v in out["median_ms"].items()]
        text = harness.format_table(rows) + f"DIC_i < WAIC < LOO: {out['ordering_holds']}\n"
    sys.stdout.write(text)
    if args.csv:
        write_table_csv(args.csv, rows)
        print(f"wrote {args.csv}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="infocrit", description="Information criteria from posterior draws.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate replicate datasets")
    s.add_argument("--design", choices=["fa", "gmm"], required=True)
    s.add_argument("--condition", action="append", help="condition name, repeatable (default: all)")
    s.add_argument("--replicates", default="1", help="N or FIRST:STOP")
    s.add_argument("--master-seed", type=int, default=harness.DEFAULT_MASTER_SEED)
    s.add_argument("--out", default="data")
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="sample a model and write draws")
    f.add_argument("--model", choices=["fa", "gmm"], required=True)
    f.add_argument("--k", type=int, default=2, help="GMM classes")
    f.add_argument("--lkj-eta", type=float, default=2.0)
    f.add_argument("--data", required=True)
    f.add_argument("--chains", type=int, default=4)
    f.add_argument("--warmup", type=int, default=1000)
    f.add_argument("--iters", type=int, default=1000)
    f.add_argument("--thin", type=int, default=1)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--init-search", type=int, default=None, help="mode-search starts per chain")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    for name, helptext in (("criteria", "criteria from a pointwise log-likelihood CSV"),
                           ("ingest", "criteria from an external draws CSV with log_lik.j columns")):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("loglik" if name == "criteria" else "draws")
        c.add_argument("--plugin-deviance", type=float)
        if name == "criteria":
            c.add_argument("--run-json", help="take the plug-in deviance from a fit's run.json")
        c.add_argument("--no-loo", action="store_true")
        c.add_argument("--summary", action="store_true", help="omit per-cluster records")
        c.add_argument("--out")
        c.set_defaults(func=cmd_criteria if name == "criteria" else cmd_ingest)

    d = sub.add_parser("diagnose", help="R-hat and sign-switch table for a fit directory")
    d.add_argument("run_dir")
    d.set_defaults(func=cmd_diagnose)

    r = sub.add_parser("run-design", help="run a simulation design")
    r.add_argument("--config")
    r.add_argument("--design", choices=["fa", "gmm"])
    r.add_argument("--full-scale", action="store_true", help="100 FA / 50 GMM replicates")
    r.add_argument("--replicates", help="N or FIRST:STOP")
    r.add_argument("--out")
    r.add_argument("--workers", type=int)
    r.add_argument("--force", action="store_true")
    r.set_defaults(func=cmd_run_design)

    rep = sub.add_parser("report", help="tables over a design's results")
    rep.add_argument("kind", choices=["rmsd", "convergence", "model-comparison", "timing"])
    rep.add_argument("results", help="design directory holding manifest.json")
    rep.add_argument("--csv")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except InfocritError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
