"""Command-line entry point.

Subcommands: ``bias-sim``, ``logistic-sim``, ``train``, ``ablate``, ``rank``.
Exit codes: 0 success, 1 runtime failure, 2 bad config or input.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys
import tempfile
from datetime import datetime, timezone
from functools import partial
from pathlib import Path

import numpy as np

from . import __version__, bias_sim, config, metrics, synth_ssl
from .errors import ConfigError, DivergedTraining, MalformedTable, TamatchError
from .parallel import ordered_map

log = logging.getLogger("tamatch")

ABLATIONS = {
    "rescale": "enable_rescale",
    "reweight": "enable_reweight",
    "target_update": "enable_target_update",
    "clipping": "enable_clipping",
}
VARIANTS = ("full", "no_rescale", "no_reweight", "no_target_update", "no_clipping", "baseline")


class UsageError(Exception):
    """Bad flags or config: exit code 2."""


# --- output helpers -------------------------------------------------------------


def _atomic_write(path, text):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(columns, rows):
    lines = [",".join(columns)]
    for r in rows:
        lines.append(",".join(_cell(r[c]) for c in columns))
    return "\n".join(lines) + "\n"


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class Run:
    """Output directory plus the manifest that is written next to every output."""

    def __init__(self, command, out, seed, resolved):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = {
            "command": command,
            "version": __version__,
            "seed": seed,
            "config": resolved,
            "started": _now(),
            "finished": None,
            "outputs": [],
        }

    def path(self, name):
        return self.out / name

    def write(self, name, text):
        _atomic_write(self.path(name), text)
        self.manifest["outputs"].append(name)

    def finish(self, status="ok"):
        self.manifest["finished"] = _now()
        self.manifest["status"] = status
        _atomic_write(self.path("manifest.json"), json.dumps(self.manifest, indent=2) + "\n")


def _master_seed(args, raw):
    if args.seed is not None:
        return int(args.seed)
    if "seed" in raw:
        return int(raw["seed"])
    # fresh entropy, recorded in the manifest so the run stays replayable
    return int(np.random.SeedSequence().entropy % (1 << 64))


def _load_raw(args, required=False):
    if args.config is None:
        if required:
            raise UsageError("--config is required for this command")
        return {}
    return config.load(args.config)


def _with_seed_override(raw, args, section):
    """A --seed flag overrides the section's own seed."""
    if args.seed is None:
        return raw
    raw = {**raw, section: {**raw.get(section, {}), "seed": int(args.seed)}}
    return raw


# --- bias-sim -----------------------------------------------------------------


def cmd_bias_sim(args):
    raw = _with_seed_override(_load_raw(args), args, "sim")
    seed = _master_seed(args, raw)
    sim = dict(raw.get("sim", {}))
    for flag, key in (("trajectories", "trajectories"), ("steps", "steps"), ("eta", "eta")):
        if getattr(args, flag) is not None:
            sim[key] = getattr(args, flag)
    if args.n:
        sim["n_list"] = args.n
    if args.grid_points is not None:
        sim["grid_points"] = args.grid_points
        sim.pop("p1_init_grid", None)
    cfg, ns = config.sim_config({**raw, "sim": sim}, seed)
    if any(n < 1 for n in ns):
        raise ConfigError("every n must be >= 1")

    run = Run("bias-sim", args.out, seed, config.echo(sim={**dataclasses.asdict(cfg), "n_list": ns}))
    log.info("bias-sim: %d grid points x %d batch sizes, %d trajectories of %d steps",
             len(cfg.p1_init_grid), len(ns), cfg.trajectories, cfg.steps)
    rows = bias_sim.sweep(cfg, ns, jobs=args.jobs)
    run.write("bias_sim.csv", _csv_text(bias_sim.SWEEP_COLUMNS, rows))
    run.finish()
    return 0


# --- logistic-sim -------------------------------------------------------------


def cmd_logistic_sim(args):
    raw = _load_raw(args)
    seed = _master_seed(args, raw)
    lg = dict(raw.get("logistic", {}))
    for flag in ("tau", "b_init", "eta", "steps", "w0", "w1"):
        if getattr(args, flag) is not None:
            lg[flag] = getattr(args, flag)
    if args.density is not None:
        dens = {"kind": args.density}
        if args.density == "two_component_mixture":
            dens.update(mu0=args.mu0, mu1=args.mu1, sigma=args.sigma, weight1=args.weight1)
        lg["density"] = dens
    cfg = config.logistic_config({"logistic": lg})

    run = Run("logistic-sim", args.out, seed, config.echo(logistic=cfg))
    rows = bias_sim.run_logistic(cfg)
    run.write("logistic_sim.csv", _csv_text(bias_sim.LOGISTIC_COLUMNS, rows))
    run.finish()
    return 0


# --- train / ablate -----------------------------------------------------------


def _resolve_training(args):
    raw = _with_seed_override(_load_raw(args, required=True), args, "dataset")
    seed = _master_seed(args, raw)
    spec = config.dataset_spec(raw, seed)
    dcfg = config.debiaser_config(raw, spec.n_classes, imbalanced=spec.gamma > 1)
    tcfg = config.train_config(raw, dcfg, seed)
    name = raw.get("name") or Path(args.config).stem
    return raw, seed, name, spec, tcfg


def _safe_train(cfg, data, seed):
    try:
        return synth_ssl.train(cfg, data, seed), None
    except DivergedTraining as exc:
        return exc.history, str(exc)


def _run_histories(tasks, data, jobs):
    """tasks: list of (cfg, seed); returns [(history, error or None)] in task order."""
    return ordered_map(partial(_train_pair, data), tasks, jobs)


def _train_pair(data, task):
    cfg, seed = task
    return _safe_train(cfg, data, seed)


def _summary(histories):
    errs = [h.final("test_error") for h in histories]
    kls = [h.time_average("kl_model_truth") for h in histories]
    return {
        "final_test_error": metrics.seed_aggregate(errs)._asdict(),
        "time_avg_kl_model_truth": metrics.seed_aggregate(kls)._asdict(),
        "per_seed": [
            {"seed": h.seed, "final_test_error": e, "time_avg_kl_model_truth": k}
            for h, e, k in zip(histories, errs, kls)
        ],
    }


def cmd_train(args):
    raw, seed, name, spec, tcfg = _resolve_training(args)
    flags = {ABLATIONS[a]: False for a in (args.ablate or [])}
    if flags:
        tcfg = synth_ssl.with_debiaser(tcfg, **flags)
    data = synth_ssl.generate_dataset(spec)
    run = Run("train", args.out, seed,
              {"name": name, **config.echo(dataset=spec, debiaser=tcfg.debiaser, trainer=tcfg)})

    results = _run_histories([(tcfg, s) for s in tcfg.seeds], data, args.jobs)
    failed = []
    for h, err in results:
        run.write(f"history_seed{h.seed}.csv", _csv_text(h.columns, h.rows))
        if h.final_state is not None:
            run.write(f"state_seed{h.seed}.json", json.dumps(h.final_state.to_record(), indent=2) + "\n")
        if err:
            failed.append(err)
            log.error("seed %d diverged: %s", h.seed, err)
    done = [h for h, err in results if err is None and h.rows]
    if done:
        run.write("aggregate.json", json.dumps(_summary(done), indent=2) + "\n")
    run.finish("diverged" if failed else "ok")
    return 1 if failed else 0


def variant_config(tcfg, variant):
    if variant == "full":
        return tcfg
    if variant == "baseline":
        return synth_ssl.with_debiaser(tcfg, **{f: False for f in ABLATIONS.values()})
    flag = ABLATIONS[variant[len("no_"):]]
    return synth_ssl.with_debiaser(tcfg, **{flag: False})


def cmd_ablate(args):
    raw, seed, name, spec, tcfg = _resolve_training(args)
    variants = args.variants or raw.get("variants") or list(VARIANTS)
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise UsageError(f"unknown variants {bad}; choose from {VARIANTS}")
    data = synth_ssl.generate_dataset(spec)
    run = Run("ablate", args.out, seed,
              {"name": name, "variants": variants,
               **config.echo(dataset=spec, debiaser=tcfg.debiaser, trainer=tcfg)})

    tasks = [(variant_config(tcfg, v), s) for v in variants for s in tcfg.seeds]
    results = _run_histories(tasks, data, args.jobs)
    failed = [err for _, err in results if err]
    run_rows, table = [], []
    for i, v in enumerate(variants):
        hs = [h for h, _ in results[i * len(tcfg.seeds):(i + 1) * len(tcfg.seeds)]]
        for h in hs:
            n = len(h.rows)
            run_rows.append({
                "variant": v,
                "seed": h.seed,
                "final_test_error": h.final("test_error"),
                "time_avg_kl_model_truth": h.time_average("kl_model_truth"),
                "late_util_ratio": float(np.mean(h.column("util_ratio")[-max(1, n // 3):])),
            })
        table.append(metrics.seed_aggregate([h.final("test_error") for h in hs]).mean)
    run.write("ablation_runs.csv", _csv_text(
        ["variant", "seed", "final_test_error", "time_avg_kl_model_truth", "late_util_ratio"], run_rows))
    et = metrics.ErrorTable(list(variants), [name], np.array(table)[:, None])
    et.write(run.path("ablation_table.csv"))
    run.manifest["outputs"].append("ablation_table.csv")
    run.finish("diverged" if failed else "ok")
    return 1 if failed else 0


# --- rank ---------------------------------------------------------------------


def cmd_rank(args):
    try:
        table = metrics.ErrorTable.read(args.table)
        rows = metrics.rank_summary(table)
    except MalformedTable as exc:
        raise UsageError(str(exc)) from exc
    seed = _master_seed(args, {})
    records = [{"method": m, "mean_rank": r, "mean_error": e} for m, r, e in rows]
    text = _csv_text(["method", "mean_rank", "mean_error"], records)
    run = Run("rank", args.out, seed, {"table": str(args.table)})
    run.write("ranks.csv", text)
    run.finish()
    sys.stdout.write(text)
    return 0


# --- argument parsing ---------------------------------------------------------


def build_parser():
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", metavar="PATH", help="TOML config file")
    shared.add_argument("--out", metavar="DIR", default="out", help="output directory (default: out)")
    shared.add_argument("--seed", type=int, metavar="U64", help="master seed; drawn from entropy if absent")
    shared.add_argument("--jobs", type=int, default=1, metavar="N", help="worker processes")
    shared.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="tamatch", description="Debiased pseudo-labeling experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("bias-sim", parents=[shared], help="categorical bias-amplification sweep")
    s.add_argument("--trajectories", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--eta", type=float)
    s.add_argument("--n", type=int, nargs="+", help="batch sizes (default 2 4 8 16 64)")
    s.add_argument("--grid-points", type=int, help="evenly spaced p1_init values in [0.05, 0.95]")
    s.set_defaults(func=cmd_bias_sim)

    s = sub.add_parser("logistic-sim", parents=[shared], help="1-D logistic self-training dynamics")
    s.add_argument("--tau", type=float)
    s.add_argument("--b-init", dest="b_init", type=float)
    s.add_argument("--eta", type=float)
    s.add_argument("--steps", type=int)
    s.add_argument("--w0", type=float)
    s.add_argument("--w1", type=float)
    s.add_argument("--density", choices=["standard_normal", "two_component_mixture"])
    s.add_argument("--mu0", type=float, default=-1.0)
    s.add_argument("--mu1", type=float, default=1.0)
    s.add_argument("--sigma", type=float, default=1.0)
    s.add_argument("--weight1", type=float, default=0.5)
    s.set_defaults(func=cmd_logistic_sim)

    s = sub.add_parser("train", parents=[shared], help="synthetic SSL training, one CSV per seed")
    s.add_argument("--ablate", action="append", choices=sorted(ABLATIONS),
                   help="switch one debiasing component off (repeatable)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("ablate", parents=[shared], help="compare debiaser variants")
    s.add_argument("--variants", type=lambda v: [x.strip() for x in v.split(",") if x.strip()],
                   help=f"comma-separated subset of {','.join(VARIANTS)}")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("rank", parents=[shared], help="Friedman ranks of an error table")
    s.add_argument("table", help="CSV with header method,<task>...")
    s.set_defaults(func=cmd_rank)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TamatchError, ArithmeticError, RuntimeError, OSError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
