"""Command-line entry point: ingest, fit, compare, simulate, score, gradcheck.

Exit codes: 0 success, 1 fatal error, 2 recoverable data issue.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import gradient_check
from .errors import ConfigurationError, ParseError, SessionIRLError
from .ingest import (
    GroupSpec,
    SchemaConfig,
    SessionSet,
    build_mdp,
    load_sessions,
    museum_feature_map,
    parse_sessions,
    segment_groups,
    sessions_to_dict,
)
from .maxent import SolverConfig, fit
from .mdp import FeatureMap, RewardWeights, load_mdp, mdp_to_dict, validate_mdp
from .report import (
    atomic_write_text,
    comparison_csv,
    comparison_rows,
    comparison_table,
    dump_json,
    empirical_document,
    feature_ranking,
    fmt_weight,
    load_weights,
    ranking_csv,
    recovery_scores,
    weights_document,
)
from .simulate import (
    GeneratorSpec,
    ground_truth_document,
    museum_mdp,
    sample_trajectories,
    write_session_log,
)
from .stats import empirical_feature_expectations

log = logging.getLogger("session_irl")

OUTPUT_ENV = "SESSION_IRL_OUTPUT_DIR"

EXIT_OK, EXIT_FATAL, EXIT_DATA = 0, 1, 2

DEFAULT_CONFIG = {
    "seed": 0,
    "output_dir": "out",
    "schema": SchemaConfig().to_dict(),
    "groups": {"attribute": "age", "threshold": 18, "below": "child", "above": "adult"},
    "fit": {
        "discount": 0.9,
        "horizon": None,
        "smoothing": 0.0,
        "min_sessions": 50,
        "workers": 2,
    },
    "solver": {
        "learning_rate": 0.05,
        "max_iters": 2000,
        "grad_tol": 1e-4,
        "init_theta": "zeros",
        "init_scale": 0.01,
        "check_invariants": True,
    },
    "simulate": {
        "mdp": {"path": None, "concentration": 0.2, "horizon": 50},
        "groups": [
            {
                "label": "adult",
                "n_sessions": 5000,
                "mean_length": 8,
                "profile": {"age": 40},
                "theta": [0.3378, 0.1340, 1.0539, -0.7106, 0.9119, 1.3577, 0.4174, 0.6783,
                          0.6161, 0.6556, 0.6171, 0.6, 0.3, -0.3],
                "invalid": {},
            },
            {
                "label": "child",
                "n_sessions": 5000,
                "mean_length": 8,
                "profile": {"age": 10},
                "theta": [1.2, -0.4, 0.1, 1.0, -0.6, 0.2, -0.9, 0.8,
                          0.5, 0.1, -0.3, -0.4, 0.2, 0.6],
                "invalid": {},
            },
        ],
    },
    "gradcheck": {"instances": 20, "step": 1e-5, "tolerance": 1e-4},
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path=None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    path = Path(path)
    if not path.is_file():
        raise ParseError(f"config file not found: {path}")
    return _merge(DEFAULT_CONFIG, json.loads(path.read_text(encoding="utf-8")))


def _apply_overrides(config: dict, args) -> dict:
    if getattr(args, "seed", None) is not None:
        config["seed"] = args.seed
    for flag, section, key in (
        ("discount", "fit", "discount"),
        ("horizon", "fit", "horizon"),
        ("smoothing", "fit", "smoothing"),
        ("min_sessions", "fit", "min_sessions"),
        ("workers", "fit", "workers"),
        ("learning_rate", "solver", "learning_rate"),
        ("max_iters", "solver", "max_iters"),
        ("grad_tol", "solver", "grad_tol"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            config[section][key] = value
    return config


def _output_dir(config: dict, args) -> Path:
    if getattr(args, "out", None):
        out = Path(args.out)
    elif os.environ.get(OUTPUT_ENV):
        out = Path(os.environ[OUTPUT_ENV])
    else:
        out = Path(config["output_dir"])
    config["output_dir"] = str(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(out: Path, config: dict, command: str) -> None:
    atomic_write_text(out / f"effective_config.{command}.json", dump_json(config))


def cmd_ingest(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    schema = SchemaConfig.from_dict(config["schema"])
    out = _output_dir(config, args)
    sessions = parse_sessions(args.logs, schema)
    report = sessions.report
    atomic_write_text(out / "sessions.json", dump_json(sessions_to_dict(sessions)))
    atomic_write_text(out / "drop_report.json", dump_json(report.to_dict()))
    _snapshot(out, config, "ingest")
    observed_actions = sorted({a for s in sessions for a in s.action_seq})
    features = museum_feature_map(schema)
    print(f"kept {report.n_kept} of {report.n_sessions_seen} sessions")
    for reason, count in sorted(report.dropped.items()):
        print(f"  dropped {reason}: {count}")
    print(
        f"states={schema.n_states} features={features.k} actions={schema.n_topics} "
        f"observed_actions={len(observed_actions)}"
    )
    if report.parse_errors:
        for lineno, msg in report.parse_errors[:20]:
            print(f"  line {lineno}: {msg}", file=sys.stderr)
        print(f"{len(report.parse_errors)} malformed lines", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def _fit_group(label: str, group: SessionSet, features: FeatureMap, config: dict):
    fit_cfg = config["fit"]
    mdp = build_mdp(group, fit_cfg["discount"], fit_cfg["horizon"], fit_cfg["smoothing"])
    problems = validate_mdp(mdp)
    if problems:
        raise SessionIRLError(f"group {label}: estimated MDP is invalid: {problems[:3]}")
    mu_hat = empirical_feature_expectations(group, features, mdp.discount, mdp.horizon)
    solver = SolverConfig(
        discount=mdp.discount, horizon=mdp.horizon, seed=config["seed"], **config["solver"]
    )
    return mdp, mu_hat, fit(mdp, features, mu_hat, solver)


def cmd_fit(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    out = _output_dir(config, args)
    sessions = load_sessions(args.sessions)
    features = museum_feature_map(sessions.schema)
    if args.single_group:
        groups = {"all": SessionSet(sessions.sessions, sessions.schema, "all")}
    else:
        groups = segment_groups(sessions, GroupSpec.from_dict(config["groups"]))
    minimum = int(config["fit"]["min_sessions"])
    runnable = {}
    for label, group in groups.items():
        if len(group) < minimum:
            log.warning("skipping group %s: %d sessions < minimum %d", label, len(group), minimum)
        else:
            runnable[label] = group
    _snapshot(out, config, "fit")
    if not runnable:
        print("no group has enough sessions to fit", file=sys.stderr)
        return EXIT_DATA
    workers = max(1, min(int(config["fit"]["workers"]), len(runnable)))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {
            label: pool.submit(_fit_group, label, group, features, config)
            for label, group in runnable.items()
        }
        results = {label: fut.result() for label, fut in futures.items()}

    print(f"{'group':<10} {'sessions':>8} {'horizon':>7} {'iters':>6} {'converged':>9} {'grad_sup':>10} {'mean_ll':>12}")
    for label, (mdp, mu_hat, result) in results.items():
        doc = weights_document(result, label, len(runnable[label]), mdp.horizon)
        atomic_write_text(out / f"weights_{label}.json", dump_json(doc))
        atomic_write_text(
            out / f"empirical_{label}.json",
            dump_json(empirical_document(mu_hat, features.feature_names, label)),
        )
        print(
            f"{label:<10} {len(runnable[label]):>8} {mdp.horizon:>7} {result.iterations:>6} "
            f"{str(result.converged):>9} {result.grad_norm_trace[-1]:>10.3g} {result.ll_trace[-1]:>12.6f}"
        )
    return EXIT_OK


def cmd_compare(args) -> int:
    docs = [load_weights(p) for p in args.weights]
    names, rows = comparison_rows(docs)
    if args.format == "csv":
        sys.stdout.write(comparison_csv(names, rows))
    else:
        sys.stdout.write(comparison_table(names, rows))
        for label, theta in rows:
            ranked = ", ".join(f"{n} ({fmt_weight(w)})" for n, w in feature_ranking(names, theta))
            print(f"ranking {label}: {ranked}")
    if args.csv:
        csv_path = Path(args.csv)
        atomic_write_text(csv_path, comparison_csv(names, rows))
        atomic_write_text(
            csv_path.with_name(csv_path.stem + "_ranking.csv"), ranking_csv(names, rows)
        )
    return EXIT_OK


def _group_theta(group: dict, names) -> np.ndarray:
    missing = [key for key in ("label", "n_sessions", "theta") if key not in group]
    if missing:
        raise ConfigurationError(f"simulate group {group.get('label', '?')} lacks {missing}")
    theta = group["theta"]
    if isinstance(theta, dict):
        theta = [theta.get(n, 0.0) for n in names]
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (len(names),):
        raise SessionIRLError(f"group {group['label']}: theta must have {len(names)} entries")
    return theta


def cmd_simulate(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    out = _output_dir(config, args)
    schema = SchemaConfig.from_dict(config["schema"])
    sim = config["simulate"]
    groups = sim["groups"]
    seeds = np.random.SeedSequence(int(config["seed"])).spawn(1 + 2 * len(groups))
    as_int = [int(s.generate_state(1)[0]) for s in seeds]
    mdp_cfg = sim["mdp"]
    discount = config["fit"]["discount"]
    if mdp_cfg.get("path"):
        mdp, _ = load_mdp(mdp_cfg["path"])
    else:
        mdp = museum_mdp(as_int[0], mdp_cfg["concentration"], discount, mdp_cfg["horizon"], schema)
    features = museum_feature_map(schema)
    atomic_write_text(out / "generator_mdp.json", json.dumps(mdp_to_dict(mdp, features)))
    for i, group in enumerate(groups):
        theta = RewardWeights(_group_theta(group, features.feature_names), features.feature_names)
        label = group["label"]
        if "fixed_length" in group:
            length_dist = ("fixed", int(group["fixed_length"]))
        else:
            length_dist = ("geometric", 1.0 / float(group.get("mean_length", 8)))
        spec = GeneratorSpec(
            mdp, features, theta, int(group["n_sessions"]), length_dist,
            as_int[1 + 2 * i], label, dict(group.get("profile", {})), schema,
        )
        sessions = sample_trajectories(spec)
        n_lines = write_session_log(
            sessions, out / f"{label}.jsonl", as_int[2 + 2 * i], group.get("invalid", {})
        )
        truth = ground_truth_document(spec, {"invalid": dict(group.get("invalid", {}))})
        atomic_write_text(out / f"{label}.truth.json", dump_json(truth))
        print(f"{label}: {len(sessions)} sessions, {n_lines} log lines -> {out / (label + '.jsonl')}")
    _snapshot(out, config, "simulate")
    return EXIT_OK


def cmd_score(args) -> int:
    doc = load_weights(args.weights)
    truth_path = Path(args.truth)
    if not truth_path.is_file():
        raise ParseError(f"ground-truth file not found: {truth_path}")
    truth = json.loads(truth_path.read_text(encoding="utf-8"))
    features = FeatureMap(np.asarray(truth["feature_matrix"]), truth["feature_names"])
    scores = recovery_scores(doc["theta"], truth["true_theta"], features, doc.get("moment_residual"))
    scores["group_label"] = doc.get("group_label")
    print(f"group {scores['group_label']}")
    print(f"  spearman_state_reward  {scores['spearman_state_reward']:.4f}")
    print(f"  pearson_centered_theta {scores['pearson_centered_theta']:.4f}")
    if scores["moment_residual"] is not None:
        print(f"  moment_residual        {scores['moment_residual']:.3g}")
    if args.json:
        atomic_write_text(args.json, dump_json(scores))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    config = load_config(args.config)
    gc = config["gradcheck"]
    n = args.instances if args.instances is not None else gc["instances"]
    seed = args.seed if args.seed is not None else config["seed"]
    errors = gradient_check(int(n), int(seed), float(gc["step"]))
    worst = max(errors)
    print(f"instances={len(errors)} max_relative_error={worst:.3e} tolerance={gc['tolerance']:.0e}")
    return EXIT_OK if worst <= gc["tolerance"] else EXIT_DATA


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="session-irl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, outputs=True):
        p.add_argument("--config", help="JSON config file (defaults are used for missing keys)")
        p.add_argument("--seed", type=int)
        if outputs:
            p.add_argument("--out", help=f"output directory (else ${OUTPUT_ENV}, else config)")

    p = sub.add_parser("ingest", help="parse interaction logs into encoded sessions")
    p.add_argument("logs", nargs="+")
    common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("fit", help="fit reward weights per user group")
    p.add_argument("sessions")
    common(p)
    p.add_argument("--single-group", action="store_true", help="fit all sessions as one group")
    p.add_argument("--discount", type=float)
    p.add_argument("--horizon", type=int)
    p.add_argument("--smoothing", type=float)
    p.add_argument("--min-sessions", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--grad-tol", type=float)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("compare", help="side-by-side table of group weights")
    p.add_argument("weights", nargs="+")
    p.add_argument("--format", choices=("table", "csv"), default="table")
    p.add_argument("--csv", help="also write the table (and rankings) as CSV")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("simulate", help="generate synthetic logs from planted rewards")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("score", help="compare recovered weights with the ground truth")
    p.add_argument("weights")
    p.add_argument("truth")
    p.add_argument("--json", help="write the scores as JSON")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("gradcheck", help="finite-difference check of the gradient")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--instances", type=int)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except SessionIRLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
