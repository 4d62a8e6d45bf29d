"""``dqnlab`` command line: train, diagnose, oracle, replay-compare.

Every command writes into ``<out>/<run id>/``.  The output root comes from
``--out``, else ``$DQNLAB_OUT``, else ``./runs``.  Run ids are derived from
the config hash and seed unless ``--run`` names one, so a rerun overwrites
its own directory with byte-identical files.

Exit codes: 0 success, 1 input error, 2 divergence, 3 property failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import diagnostics as dg
from . import envs
from . import measure as ms
from .errors import DivergenceError, InputError, NumericalError, PreconditionError, ValidationError
from .network import load_checkpoint
from .trainer import RunConfig, TrainRecord, train, write_run

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED, EXIT_PROPERTY = 0, 1, 2, 3
OUT_ENV = "DQNLAB_OUT"


# -- helpers ----------------------------------------------------------------------


def _out_root(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or "runs")


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1, sort_keys=True, allow_nan=True) + "\n")


def _write_csv(path: Path, header, rows, config_hash: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _read_json(path: Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise InputError(f"{path}: cannot read ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None


def load_config(path, seed: int | None = None) -> RunConfig:
    if path is None:
        raise InputError("--config is required")
    cfg = RunConfig.from_dict(_read_json(Path(path)), base_dir=Path(path).parent)
    return cfg.with_seed(seed) if seed is not None else cfg


def run_id_for(cfg: RunConfig, prefix: str = "run") -> str:
    return f"{prefix}-{cfg.config_hash()[:12]}-s{cfg.seed}"


def _manifest(run_dir: Path, run_id, config_hash, seed, status, artifacts, **extra) -> dict:
    rel = {k: (sorted(str(Path(p).relative_to(run_dir)) for p in v) if isinstance(v, list)
               else str(Path(v).relative_to(run_dir))) for k, v in artifacts.items()}
    m = {"run_id": run_id, "config_hash": config_hash, "seed": seed, "status": status, "artifacts": rel}
    m.update(extra)
    _write_json(run_dir / "manifest.json", m)
    return m


def _threshold(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if math.isnan(v) or v < 0:
        raise argparse.ArgumentTypeError(f"threshold must be >= 0 or inf, got {text!r}")
    return v


def _seed(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text!r}")
    return v


# -- train --------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    run_id = args.run or run_id_for(cfg)
    run_dir = _out_root(args) / run_id
    result = train(cfg)
    paths = write_run(result, run_dir, cfg.config_hash())
    cfg_path = run_dir / "config.json"
    _write_json(cfg_path, cfg.to_dict())
    artifacts = {"config": cfg_path, "record": paths["record"], "checkpoints": paths["checkpoints"]}
    extra = {"steps": len(result.record)}
    if result.failed_step is not None:
        extra["failed_step"] = result.failed_step
    _manifest(run_dir, run_id, cfg.config_hash(), cfg.seed, result.status, artifacts, **extra)
    print(f"{run_id}: {result.status} ({len(result.record)} steps) -> {run_dir}")
    return EXIT_OK if result.status == "completed" else EXIT_DIVERGED


# -- loading a finished run -------------------------------------------------------------


def load_run(run_dir: Path):
    """Return ``(config, manifest, mdp, record, checkpoints, topology)``."""
    if not run_dir.is_dir():
        raise InputError(f"{run_dir}: no such run directory")
    manifest = _read_json(run_dir / "manifest.json")
    if manifest.get("status") != "completed":
        raise PreconditionError(f"{run_dir}: run status is {manifest.get('status')!r}, not 'completed'")
    cfg = RunConfig.from_dict(_read_json(run_dir / manifest["artifacts"]["config"]))
    if cfg.config_hash() != manifest["config_hash"]:
        raise ValidationError(f"{run_dir}: config.json does not match the manifest hash")
    mdp = cfg.load_env()
    try:
        record = TrainRecord.from_csv(run_dir / manifest["artifacts"]["record"])
    except OSError as exc:
        raise InputError(f"{exc.filename}: cannot read record ({exc.strerror})") from None
    checkpoints = {}
    topology = None
    for rel in manifest["artifacts"]["checkpoints"]:
        topology, theta, step, _ = load_checkpoint(run_dir / rel)
        checkpoints[int(step)] = theta
    if not checkpoints:
        raise InputError(f"{run_dir}: run has no checkpoints")
    return cfg, manifest, mdp, record, checkpoints, topology


# -- diagnose -----------------------------------------------------------------------


def default_anchors(axis: ms.TimeAxis, horizon: float) -> list[int]:
    """Powers of ten from 10**3 whose horizon still fits in the record."""
    out, n = [], 1000
    while n <= axis.n_steps and axis.t[n] + horizon <= axis.end:
        out.append(n)
        n *= 10
    return out


def _series_rows(times, columns, stride):
    idx = list(range(0, len(times), stride))
    if idx[-1] != len(times) - 1:
        idx.append(len(times) - 1)
    for i in idx:
        yield [float(times[i])] + [float(c[i]) for c in columns]


def diagnose(cfg, mdp, record, checkpoints, topology, opts) -> tuple[dict, dict, list[str]]:
    """Run every diagnostic; return ``(report, csv series, failures)``."""
    failures = []
    axis = ms.TimeAxis.of(record)
    n_steps = len(record)
    final = checkpoints[max(checkpoints)]
    report = {"steps": n_steps}
    series = {}

    # stationarity
    if n_steps == 0:
        raise PreconditionError("run has no steps to diagnose")
    st = ms.stationarity_report(record, checkpoints, topology, mdp, opts.window)
    tail = ms.tail_estimate(record, opts.window, mdp, axis)
    report["stationarity"] = st.to_dict()
    tied = np.flatnonzero(record.ties)
    report["greedy_ties"] = {"count": int(len(tied)), "first_steps": [int(n) for n in tied[:10]]}
    report["tail_measure"] = {"support_size": tail.support_size(), "entropy": tail.entropy(),
                              "marginal": [float(v) for v in tail.marginal().mass]}
    if not st.gap <= opts.max_gap:
        failures.append(f"stationarity: gap {st.gap:.6g} > {opts.max_gap}")

    # martingale traces
    mt = dg.martingale_trace(record, checkpoints, topology, mdp)
    traces = [mt] + [dg.test_function_trace(record, mdp, f, label) for label, f in dg.test_function_bank(mdp)]
    report["martingale"] = [t.summary() for t in traces]
    cm = float(np.max(mt.conditional_mean_max, initial=0.0))
    if not cm <= opts.mean_tol:
        failures.append(f"martingale: conditional mean of psi reaches {cm:.3g} > {opts.mean_tol}")
    for t in traces:
        if not t.tail_ratio() <= opts.max_tail_ratio:
            failures.append(f"martingale {t.label}: tail ratio {t.tail_ratio():.4g} > {opts.max_tail_ratio}")
    stride = max(1, n_steps // opts.series_points)
    series["martingale.csv"] = (["t", "M_norm"] + [f"xi_{t.label}" for t in traces[1:]],
                                list(_series_rows(axis.t, [t.series() for t in traces], stride)))

    # tracking
    anchors = opts.anchors if opts.anchors is not None else default_anchors(axis, opts.horizon)
    reps = dg.tracking_error(record, checkpoints, topology, mdp, anchors, opts.horizon, opts.substeps)
    report["tracking"] = [r.to_dict() for r in reps]
    rows = []
    for r in reps:
        rows.extend([r.anchor, float(t), float(d)] for t, d in r.profile)
        if not r.sup_distance <= opts.max_tracking:
            failures.append(f"tracking anchor {r.anchor}: sup distance {r.sup_distance:.4g} > {opts.max_tracking}")
        limit = opts.halving_tol * (1.0 + r.theta_norm) if r.theta_norm is not None else math.inf
        if r.endpoint_halving_change is not None and not r.endpoint_halving_change <= limit:
            failures.append(f"tracking anchor {r.anchor}: step-halving change "
                            f"{r.endpoint_halving_change:.3g} > {limit:.3g}")
    series["tracking.csv"] = (["anchor", "t", "distance"], rows)

    # averaged gradient
    g0 = dg.averaged_gradient(topology, checkpoints[min(checkpoints)], tail, mdp).norm
    g1 = dg.averaged_gradient(topology, final, tail, mdp).norm
    ratio = g1 / g0 if g0 > 0 else (0.0 if g1 == 0 else math.inf)
    report["averaged_gradient"] = {"initial_norm": g0, "final_norm": g1, "ratio": ratio}
    if not ratio <= opts.max_grad_ratio:
        failures.append(f"averaged gradient: final/initial norm ratio {ratio:.4g} > {opts.max_grad_ratio}")
    series["averaged_gradient.csv"] = (
        ["t", "norm"],
        [[float(axis.t[s]), dg.averaged_gradient(topology, th, tail, mdp).norm]
         for s, th in sorted(checkpoints.items())],
    )

    # undertraining
    oracle = envs.value_iteration(mdp)
    ut = dg.undertraining_scan(topology, final, tail, mdp, oracle)
    report["undertraining"] = ut.to_dict()
    state_mass = tail.marginal().mass
    for r in ut.regions:
        if r.trapped and r.region_mass >= opts.mass_floor:
            failures.append(f"undertraining: region S({r.action}) = states {r.region} carries mass "
                            f"{r.region_mass:.4g} but action {r.action} is never taken there")
    bad = [x for x, m in enumerate(ut.mismatch) if m and state_mass[x] >= opts.mass_floor]
    if bad:
        failures.append(f"undertraining: greedy action is suboptimal on visited states {bad}")
    return report, series, failures


def cmd_diagnose(args) -> int:
    if not args.run:
        raise InputError("--run is required")
    run_dir = _out_root(args) / args.run
    cfg, manifest, mdp, record, checkpoints, topology = load_run(run_dir)
    report, series, failures = diagnose(cfg, mdp, record, checkpoints, topology, args)
    out = run_dir / "diagnostics"
    report.update({"run_id": manifest["run_id"], "config_hash": manifest["config_hash"],
                   "failures": failures, "passed": not failures,
                   "thresholds": {k: getattr(args, k) for k in
                                  ("max_gap", "max_tail_ratio", "mean_tol", "max_tracking",
                                   "halving_tol", "max_grad_ratio", "mass_floor")}})
    _write_json(out / "report.json", report)
    for name, (header, rows) in series.items():
        _write_csv(out / name, header, rows, manifest["config_hash"])
    for f in failures:
        print(f"FAIL {f}", file=sys.stderr)
    print(f"{manifest['run_id']}: {'all checks passed' if not failures else f'{len(failures)} check(s) failed'}")
    return EXIT_OK if not failures else EXIT_PROPERTY


# -- oracle ---------------------------------------------------------------------------


def cmd_oracle(args) -> int:
    if args.mdp:
        mdp = envs.load_mdp(args.mdp)
        digest = hashlib.sha256(json.dumps(envs.mdp_to_dict(mdp), sort_keys=True).encode()).hexdigest()
    elif args.config:
        mdp = load_config(args.config).load_env()
        digest = hashlib.sha256(json.dumps(envs.mdp_to_dict(mdp), sort_keys=True).encode()).hexdigest()
    else:
        raise InputError("oracle needs --mdp or --config")
    run_id = args.run or f"oracle-{digest[:12]}"
    run_dir = _out_root(args) / run_id
    sol = envs.value_iteration(mdp)
    policy = np.zeros((mdp.n_states, mdp.n_actions))
    policy[np.arange(mdp.n_states), sol.pi_star] = 1.0
    dists = envs.stationary_distributions(envs.policy_kernel(mdp, policy))
    _write_csv(run_dir / "q_star.csv", ["state_index", "action", "q"],
               [[x, a, float(sol.q_star[x, a])] for x in range(mdp.n_states) for a in range(mdp.n_actions)], digest)
    _write_csv(run_dir / "policy.csv", ["state_index", "v", "pi"],
               [[x, float(sol.v_star[x]), int(sol.pi_star[x])] for x in range(mdp.n_states)], digest)
    _write_json(run_dir / "stationary.json",
                {"config_hash": digest, "count": len(dists), "distributions": [[float(v) for v in d] for d in dists]})
    _write_json(run_dir / "oracle.json",
                {"config_hash": digest, "q_star": sol.q_star.tolist(), "v_star": sol.v_star.tolist(),
                 "pi_star": [int(a) for a in sol.pi_star], "residual": sol.residual,
                 "iterations": sol.iterations})
    artifacts = {k: run_dir / f for k, f in (("q_star", "q_star.csv"), ("policy", "policy.csv"),
                                              ("stationary", "stationary.json"), ("oracle", "oracle.json"))}
    _manifest(run_dir, run_id, digest, None, "completed", artifacts)
    print(f"{run_id}: V* = {np.round(sol.v_star, 6).tolist()}, {len(dists)} stationary distribution(s)")
    return EXIT_OK


# -- replay-compare ------------------------------------------------------------------------


def compare_runs(online, replay, fraction: float = 0.2) -> dict:
    """Tail-measure comparison of two finished runs on the same MDP."""
    out = {}
    tails = {}
    for name, res in (("online", online), ("replay", replay)):
        tail = ms.tail_estimate(res.record, fraction, res.mdp)
        st = ms.stationarity_report(res.record, res.checkpoints, res.topology, res.mdp, fraction)
        tails[name] = tail
        out[name] = {"support_size": tail.support_size(), "entropy": tail.entropy(), "gap": st.gap}
    out["tv_distance"] = ms.measure_distance(tails["online"], tails["replay"])
    out["replay_entropy_ge_online"] = out["replay"]["entropy"] >= out["online"]["entropy"]
    return out


def cmd_replay_compare(args) -> int:
    cfg = load_config(args.config, args.seed)
    if not cfg.replay.get("enabled"):
        print("note: replay is disabled in the config; both variants run online", file=sys.stderr)
    run_id = args.run or run_id_for(cfg, "compare")
    run_dir = _out_root(args) / run_id
    pairs = []
    status = "completed"
    for k in range(args.repeats):
        c = cfg.with_seed((cfg.seed + k) % 2**64)
        d = c.to_dict()
        d["replay"] = {"enabled": False}
        online, replay = train(RunConfig.from_dict(d)), train(c)
        if "diverged" in (online.status, replay.status):
            status = "diverged"
            pairs.append({"seed": c.seed, "online_status": online.status, "replay_status": replay.status})
            continue
        pairs.append({"seed": c.seed, **compare_runs(online, replay, args.window)})
    done = [p for p in pairs if "tv_distance" in p]
    wins = sum(p["replay_entropy_ge_online"] for p in done)
    report = {"run_id": run_id, "config_hash": cfg.config_hash(), "window": args.window, "pairs": pairs,
              "replay_entropy_ge_online_count": wins,
              "replay_entropy_ge_online_majority": 2 * wins > len(done) if done else False}
    _write_json(run_dir / "comparison.json", report)
    _manifest(run_dir, run_id, cfg.config_hash(), cfg.seed, status, {"comparison": run_dir / "comparison.json"})
    print(f"{run_id}: replay entropy >= online in {wins}/{len(done)} paired runs")
    if status == "diverged":
        return EXIT_DIVERGED
    if args.check_entropy and not report["replay_entropy_ge_online_majority"]:
        return EXIT_PROPERTY
    return EXIT_OK


# -- entry point ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dqnlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="run configuration (JSON)")
        p.add_argument("--run", help="run id (directory name under the output root)")
        p.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./runs)")
        p.add_argument("--seed", type=_seed, help="override network.seed")
        return p

    common(sub.add_parser("train", help="train and write record, checkpoints and manifest"))

    d = common(sub.add_parser("diagnose", help="run all diagnostics on a finished run"))
    d.add_argument("--window", type=float, default=0.2, help="tail fraction of the time axis")
    d.add_argument("--anchors", type=lambda s: [int(v) for v in s.split(",") if v], default=None,
                   help="comma-separated anchor steps (default: powers of ten from 1000)")
    d.add_argument("--horizon", type=float, default=1.0)
    d.add_argument("--substeps", type=int, default=4)
    d.add_argument("--series-points", type=int, default=5000, help="max rows in the martingale CSV")
    for flag, default, text in (
        ("--max-gap", 0.05, "stationarity gap"),
        ("--max-tail-ratio", 0.1, "martingale tail fluctuation / range"),
        ("--mean-tol", 1e-14, "per-component conditional mean of psi"),
        ("--max-tracking", math.inf, "tracking sup distance"),
        ("--halving-tol", 1e-3, "step-halving change / (1 + |theta|)"),
        ("--max-grad-ratio", 0.1, "final / initial averaged-gradient norm"),
        ("--mass-floor", 0.01, "tail mass above which undertraining counts"),
    ):
        d.add_argument(flag, type=_threshold, default=default, help=f"threshold on {text} (default {default})")

    o = common(sub.add_parser("oracle", help="value iteration and stationary distributions"))
    o.add_argument("--mdp", help="MDP file (JSON); alternative to --config")

    r = common(sub.add_parser("replay-compare", help="paired replay vs online runs"))
    r.add_argument("--repeats", type=int, default=1, help="seed repetitions (seed, seed+1, ...)")
    r.add_argument("--window", type=float, default=0.2)
    r.add_argument("--check-entropy", action="store_true",
                   help="exit 3 unless replay entropy >= online in a majority of pairs")
    return parser


COMMANDS = {"train": cmd_train, "diagnose": cmd_diagnose, "oracle": cmd_oracle,
            "replay-compare": cmd_replay_compare}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    try:
        return COMMANDS[args.command](args)
    except (DivergenceError,) as exc:
        print(f"dqnlab: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (InputError, ValidationError, PreconditionError, NumericalError) as exc:
        print(f"dqnlab: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
