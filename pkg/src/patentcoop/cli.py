"""Command-line front end: ``patentcoop <subcommand> ...``.

Exit codes: 0 success, 2 input error, 3 quality or convergence failure.
Every run writes its resolved configuration to ``run_config.json`` next to
its outputs. Values from ``--config`` (TOML) fill in defaults; explicit flags
win. Config keys mirror the long flag names, either at top level or in a
table named after the subcommand.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .graph import (
    RecordError,
    build_graph,
    event_series,
    read_events,
    read_graph,
    read_records,
    to_days,
    write_events,
    write_graph,
)
from .hmc import ChainConfig, SamplingQualityError, read_draws_csv, run_chains, summarize, write_draws_csv
from .relational import (
    PARAM_NAMES,
    RelationalPosterior,
    RelationalPrior,
    classify_relations,
    pair_observations,
    posterior_as_prior,
    read_prior_json,
    relabel_draws,
    write_classification_csv,
    write_prior_json,
    write_summary_json,
)
from .trend import (
    TrendPrior,
    VIConfig,
    VIDivergenceError,
    fit_vi,
    forecast,
    monthly_grid,
    read_params_json,
    simulate,
    write_forecast_csv,
    write_surrogate_json,
)

EXIT_OK, EXIT_INPUT, EXIT_QUALITY = 0, 2, 3
RHAT_LIMIT = 1.05

log = logging.getLogger("patentcoop")


class InputError(Exception):
    pass


class QualityError(Exception):
    pass


def _write_run_config(args: argparse.Namespace, out_dir: Path) -> None:
    resolved = {k: (str(v) if isinstance(v, Path) else v)
                for k, v in sorted(vars(args).items()) if k not in ("func", "config")}
    resolved["version"] = __version__
    with open(out_dir / "run_config.json", "w", encoding="utf-8") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands -------------------------------------------------------------

def cmd_build_graph(args) -> int:
    try:
        records = read_records(args.records)
    except RecordError as exc:
        raise InputError(str(exc)) from None
    if not records:
        raise InputError(f"{args.records}: no records")
    graph = build_graph(records)
    try:
        events = event_series(records, args.cutoff)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    out = _out_dir(args.out_dir)
    write_graph(graph, out)
    write_events(events, out / "events.txt")
    _write_run_config(args, out)
    print(f"records: {graph.n_records}")
    print(f"cooperation patents: {graph.n_cooperation} ({100 * graph.cooperation_share:.1f}%)")
    return EXIT_OK


def _load_graph_pairs(args):
    try:
        graph = read_graph(args.nodes, args.edges)
    except (OSError, ValueError) as exc:
        raise InputError(str(exc)) from None
    pairs = pair_observations(graph, include_others=not args.exclude_others)
    if not pairs:
        raise InputError("graph has no eligible country pairs")
    return pairs


def _relational_prior(args) -> RelationalPrior:
    try:
        prior = read_prior_json(args.prior) if args.prior else RelationalPrior()
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"bad prior file: {exc}") from None
    if args.beta0_mean is not None or args.beta0_sd is not None:
        current = prior.to_dict()["beta0"]
        prior = prior.with_overrides(beta0=(
            args.beta0_mean if args.beta0_mean is not None else current["mean"],
            args.beta0_sd if args.beta0_sd is not None else current["sd"],
        ))
    return prior


def cmd_fit_relational(args) -> int:
    pairs = _load_graph_pairs(args)
    prior = _relational_prior(args)
    config = ChainConfig(
        n_chains=args.chains, n_samples=args.samples, n_warmup=args.warmup,
        target_accept=args.target_accept, max_tree_depth=args.max_tree_depth,
        seed=args.seed, metric=args.metric, n_jobs=args.jobs,
    )
    target = RelationalPosterior(pairs, prior)
    out = _out_dir(args.out_dir)
    _write_run_config(args, out)
    try:
        samples = run_chains(target, config, names=PARAM_NAMES)
    except SamplingQualityError as exc:
        if exc.samples is not None:
            write_draws_csv(exc.samples, out / "draws.csv", PARAM_NAMES)
        raise QualityError(str(exc)) from None
    samples = samples.with_draws(relabel_draws(samples.draws))

    summary = summarize(samples, PARAM_NAMES)
    write_summary_json(summary, out / "posterior_summary.json", extra={
        "diagnostics": {
            "n_chains": samples.n_chains,
            "n_samples_per_chain": samples.n_samples,
            "n_divergent": samples.n_divergent,
            "warmup_divergences": samples.warmup_divergences,
            "step_sizes": [float(s) for s in samples.step_sizes],
        },
    })
    write_draws_csv(samples, out / "draws.csv", PARAM_NAMES)
    write_classification_csv(classify_relations(samples, pairs), out / "classification.csv")
    if samples.draws.shape[0] >= 100:
        write_prior_json(posterior_as_prior(samples), out / "next_prior.json")

    for name, row in summary.items():
        print(f"{name:>7}  mean {row['mean']: .4f}  sd {row['sd']:.4f}  "
              f"95% [{row['q2.5']: .4f}, {row['q97.5']: .4f}]  r_hat {row['r_hat']:.4f}")
    bad = {n: r["r_hat"] for n, r in summary.items() if not r["r_hat"] <= RHAT_LIMIT}
    if bad:
        raise QualityError("R-hat above %.2f: %s" % (
            RHAT_LIMIT, ", ".join(f"{n}={v:.3f}" for n, v in bad.items())))
    return EXIT_OK


def cmd_classify(args) -> int:
    pairs = _load_graph_pairs(args)
    try:
        names, draws, _ = read_draws_csv(args.draws)
    except (OSError, ValueError) as exc:
        raise InputError(str(exc)) from None
    if tuple(names) != PARAM_NAMES:
        raise InputError(f"draws columns must be {', '.join(PARAM_NAMES)}")
    if draws.shape[0] == 0:
        raise InputError("draws file holds no draws")
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    classes = classify_relations(relabel_draws(draws), pairs)
    write_classification_csv(classes, out_path)
    _write_run_config(args, out_path.parent)
    counts = np.bincount([c.relation_type for c in classes.values()], minlength=3)
    print("relation types: " + ", ".join(f"type {k}: {n}" for k, n in enumerate(counts)))
    return EXIT_OK


def cmd_fit_trend(args) -> int:
    try:
        events = read_events(args.events)
        prior = TrendPrior()
        if args.prior:
            with open(args.prior, encoding="utf-8") as fh:
                prior = TrendPrior.from_dict(json.load(fh))
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(str(exc)) from None
    config = VIConfig(
        n_mc=args.n_mc, grad_samples=args.grad_samples, validation_cutoff=args.cutoff,
        max_iters=args.max_iters, eval_interval=args.eval_interval,
        learning_rate=args.learning_rate, patience=args.patience, seed=args.seed,
    )
    out = _out_dir(args.out_dir)
    _write_run_config(args, out)
    try:
        result = fit_vi(events, prior, config)
    except VIDivergenceError as exc:
        raise QualityError(str(exc)) from None
    except ValueError as exc:
        raise InputError(str(exc)) from None
    write_surrogate_json(result, out / "surrogate.json")
    grid = monthly_grid(events.times[0], args.forecast_end)
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 1]))
    write_forecast_csv(forecast(result.surrogate, grid, args.forecast_draws, rng), out / "forecast.csv")
    moments = result.surrogate.constrained_moments()
    print(f"ELBO {result.elbo:.3f} after {result.iterations} iterations")
    for name, row in moments.items():
        extra = f"  ({row['mean_date']})" if "mean_date" in row else ""
        print(f"{name:>10}  mean {row['mean']:.6g}  sd {row['sd']:.4g}{extra}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    try:
        params = read_params_json(args.params)
        window = (to_days(args.start), to_days(args.end))
    except (OSError, ValueError) as exc:
        raise InputError(str(exc)) from None
    if window[0] > window[1]:
        raise InputError("window start must not exceed window end")
    events = simulate(params, window, np.random.default_rng(args.seed))
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_events(events, out_path)
    _write_run_config(args, out_path.parent)
    print(f"simulated {len(events)} events")
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patentcoop", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master random seed")
    common.add_argument("--config", type=Path, help="TOML file with default flag values")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-graph", parents=[common], help="records CSV -> graph and event files")
    p.add_argument("records", type=Path)
    p.add_argument("out_dir", type=Path)
    p.add_argument("--cutoff", help="drop records published after this date")
    p.set_defaults(func=cmd_build_graph)

    def graph_inputs(q):
        q.add_argument("nodes", type=Path)
        q.add_argument("edges", type=Path)
        q.add_argument("--exclude-others", action="store_true",
                       help="drop pairs involving the Others node")

    p = sub.add_parser("fit-relational", parents=[common], help="sample the relation-type mixture")
    graph_inputs(p)
    p.add_argument("out_dir", type=Path)
    p.add_argument("--chains", type=int, default=16)
    p.add_argument("--samples", type=int, default=4000)
    p.add_argument("--warmup", type=int, default=1000)
    p.add_argument("--target-accept", type=float, default=0.8)
    p.add_argument("--max-tree-depth", type=int, default=10)
    p.add_argument("--metric", choices=("identity", "diag", "dense"), default="dense")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for chains")
    p.add_argument("--prior", type=Path, help="prior JSON, e.g. next_prior.json of an earlier run")
    p.add_argument("--beta0-mean", type=float)
    p.add_argument("--beta0-sd", type=float)
    p.set_defaults(func=cmd_fit_relational)

    p = sub.add_parser("classify", parents=[common], help="relation types from stored draws")
    graph_inputs(p)
    p.add_argument("draws", type=Path)
    p.add_argument("out", type=Path, help="classification CSV to write")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("fit-trend", parents=[common], help="variational fit of the arrival trend")
    p.add_argument("events", type=Path)
    p.add_argument("out_dir", type=Path)
    p.add_argument("--cutoff", default="2020-09-01", help="validation split date")
    p.add_argument("--n-mc", type=int, default=16384)
    p.add_argument("--grad-samples", type=int, default=16)
    p.add_argument("--max-iters", type=int, default=20000)
    p.add_argument("--eval-interval", type=int, default=200)
    p.add_argument("--learning-rate", type=float, default=0.01)
    p.add_argument("--patience", type=int, default=1)
    p.add_argument("--prior", type=Path, help="trend prior hyperparameters as JSON")
    p.add_argument("--forecast-end", default="2030-01-01")
    p.add_argument("--forecast-draws", type=int, default=4000)
    p.set_defaults(func=cmd_fit_trend)

    p = sub.add_parser("simulate", parents=[common], help="simulate event times from trend parameters")
    p.add_argument("params", type=Path)
    p.add_argument("out", type=Path, help="events file to write")
    p.add_argument("--start", default="1990-01-01")
    p.add_argument("--end", default="2021-09-18")
    p.set_defaults(func=cmd_simulate)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    try:
        with open(args.config, "rb") as fh:
            data = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise InputError(f"cannot read config {args.config}: {exc}") from None
    section = data.get(args.command, {})
    flat = {k: v for k, v in data.items() if not isinstance(v, dict)}
    flat.update(section if isinstance(section, dict) else {})
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in subparser._actions}
    defaults = {}
    for key, value in flat.items():
        dest = key.replace("-", "_")
        if dest not in known or dest in ("config", "help"):
            raise InputError(f"unknown config key {key!r} for {args.command}")
        defaults[dest] = value
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except QualityError as exc:
        print(f"quality failure: {exc}", file=sys.stderr)
        return EXIT_QUALITY
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
