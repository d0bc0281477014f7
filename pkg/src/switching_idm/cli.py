"""Command-line entry points: simulate, fit, report, segment.

Configuration is flat ``key=value`` text (same keys as the long CLI flags,
with underscores); explicit flags override file values which override the
built-in defaults.  Every run writes a resolved-config echo that can be fed
back through ``--config`` to reproduce it.

Exit codes: 0 success, 2 configuration/usage error, 3 data error,
4 inference/numerical error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .data import (
    Dataset,
    Standardizer,
    downsample_dataset,
    filter_min_duration,
    fit_standardizer,
    load_schema,
    load_trajectories,
    save_metadata,
    save_trajectories,
)
from .errors import (
    DataError,
    InferenceError,
    InvalidArgumentError,
    NumericDomainError,
    SchemaError,
)
from .inference import (
    Hyperparams,
    ModelState,
    compute_local_evidence,
    forward_backward,
    merge_chains,
    read_samples_ndjson,
    run_chain,
    write_diagnostics_json,
    write_samples_ndjson,
    write_segmentation_csv,
)
from .states import JointStateSpace, uniform_initial
from .synthetic import (
    AVERAGED_BEHAVIOR_SIGMA,
    AVERAGED_BEHAVIOR_THETA,
    DEFAULT_REGIME_SIGMAS,
    DEFAULT_REGIME_THETAS,
    GeneratorConfig,
    align_labels,
    generate_dataset,
    load_truth_csv,
    sticky_transition_matrix,
    write_truth_csv,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_INFERENCE = 4


def _load_config_file(path: str) -> dict:
    values = {}
    file_path = Path(path)
    if not file_path.exists():
        raise InvalidArgumentError(f"config file not found: {path}")
    for line_no, raw in enumerate(file_path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InvalidArgumentError(
                f"{path}:{line_no}: expected key=value, got {line!r}"
            )
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


def _apply_config_file(args: argparse.Namespace, parser: argparse.ArgumentParser) -> None:
    """Fill argparse values that were left at None from the config file."""
    if not getattr(args, "config", None):
        return
    values = _load_config_file(args.config)
    types = {
        action.dest: action.type
        for action in parser._actions  # noqa: SLF001 - argparse has no public view
        if action.dest != "help"
    }
    for key, raw in values.items():
        dest = key.replace("-", "_")
        if dest not in types:
            raise InvalidArgumentError(f"unknown config key {key!r}")
        if getattr(args, dest, None) is not None:
            continue  # explicit flag wins
        caster = types[dest] or str
        if caster is _flag:
            setattr(args, dest, raw.lower() in ("1", "true", "yes", "on"))
        else:
            try:
                setattr(args, dest, caster(raw))
            except ValueError as exc:
                raise InvalidArgumentError(f"config key {key!r}: {exc}") from exc


def _flag(value: str) -> bool:
    return value.lower() in ("1", "true", "yes", "on")


def _defaults(args: argparse.Namespace, defaults: dict) -> None:
    for key, value in defaults.items():
        if getattr(args, key, None) is None:
            setattr(args, key, value)


def _write_config_echo(args: argparse.Namespace, keys: list, path: Path) -> None:
    lines = []
    for key in keys:
        value = getattr(args, key)
        if value is None:
            continue
        lines.append(f"{key}={value}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _prepare_dataset(args) -> Dataset:
    schema = load_schema(args.schema) if args.schema else None
    dataset = load_trajectories(args.data, schema)
    if args.downsample > 1:
        dataset = downsample_dataset(dataset, args.downsample)
    if args.min_duration > 0.0:
        dataset = filter_min_duration(dataset, args.min_duration)
    return fit_standardizer(dataset)


def _standardizer_from_metadata(path: Path) -> Standardizer:
    if not path.exists():
        raise DataError(f"metadata file not found: {path}")
    meta = json.loads(path.read_text(encoding="utf-8"))
    if not meta.get("standardizer"):
        raise DataError(f"{path}: no standardizer recorded")
    return Standardizer.from_dict(meta["standardizer"])


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def _add_simulate_parser(subparsers) -> argparse.ArgumentParser:
    p = subparsers.add_parser("simulate", help="generate a synthetic labeled dataset")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out-dir", help="output directory")
    p.add_argument("--seed", type=int, help="RNG seed (required)")
    p.add_argument("--k-b", type=int, help="number of driving regimes (default 2)")
    p.add_argument("--k-s", type=int, help="number of traffic scenarios (default 2)")
    p.add_argument("--n-traj", type=int, help="trajectory count (default 20)")
    p.add_argument("--n-steps", type=int, help="steps per trajectory (default 300)")
    p.add_argument("--dt", type=float, help="sampling interval, s (default 0.2)")
    p.add_argument("--mode", choices=["kinematic", "emission"], help="covariate mode")
    p.add_argument("--stay-prob", type=float, help="joint self-transition (default 0.97)")
    p.add_argument("--noiseless", type=_flag, nargs="?", const=True,
                   help="set all acceleration noise stds to 0")
    return p


def cmd_simulate(args) -> int:
    _defaults(
        args,
        dict(k_b=2, k_s=2, n_traj=20, n_steps=300, dt=0.2, mode="kinematic",
             stay_prob=0.97, noiseless=False),
    )
    if args.out_dir is None:
        raise InvalidArgumentError("--out-dir is required")
    if args.seed is None:
        raise InvalidArgumentError("--seed is required (no wall-clock default)")
    space = JointStateSpace(args.k_b, args.k_s)
    if args.k_b == 1:
        theta = AVERAGED_BEHAVIOR_THETA[None, :]
        sigma = np.array([AVERAGED_BEHAVIOR_SIGMA])
    elif args.k_b == 2:
        theta = DEFAULT_REGIME_THETAS
        sigma = DEFAULT_REGIME_SIGMAS
    else:
        raise InvalidArgumentError(
            "built-in truth covers k_b in {1, 2}; use the library API for more"
        )
    if args.mode == "emission" and args.k_s > 2:
        raise InvalidArgumentError("built-in scenario truth covers k_s in {1, 2}")
    if args.noiseless:
        sigma = np.zeros_like(sigma)
    config = GeneratorConfig(
        space=space,
        true_pi=sticky_transition_matrix(space, args.stay_prob),
        true_theta=theta,
        true_sigma=sigma,
        n_trajectories=args.n_traj,
        n_steps=args.n_steps,
        dt=args.dt,
        mode=args.mode,
    )
    labeled = generate_dataset(config, np.random.default_rng(args.seed))

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_trajectories(labeled.dataset, out / "data.csv")
    write_truth_csv(labeled, out / "data_truth.csv")
    save_metadata(
        labeled.dataset,
        out / "metadata.json",
        extra={
            "n_gap_clamps": labeled.n_gap_clamps,
            "n_covariate_redraws": labeled.n_covariate_redraws,
            "warnings": labeled.warnings,
            "seed": args.seed,
            "mode": args.mode,
        },
    )
    keys = ["out_dir", "seed", "k_b", "k_s", "n_traj", "n_steps", "dt", "mode",
            "stay_prob", "noiseless"]
    _write_config_echo(args, keys, out / "config_resolved.txt")
    for warning in labeled.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    print(f"wrote {len(labeled.dataset.trajectories)} trajectories to {out / 'data.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


def _add_fit_parser(subparsers) -> argparse.ArgumentParser:
    p = subparsers.add_parser("fit", help="run MCMC on a trajectory dataset")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--data", help="input trajectory CSV")
    p.add_argument("--out-dir", help="output directory")
    p.add_argument("--seed", type=int, help="RNG seed (required)")
    p.add_argument("--schema", help="column-mapping key=value file")
    p.add_argument("--k-b", type=int, help="number of driving regimes (default 2)")
    p.add_argument("--k-s", type=int, help="number of traffic scenarios (default 2)")
    p.add_argument("--n-chains", type=int, help="independent chains (default 1)")
    p.add_argument("--burn-in", type=int, help="burn-in sweeps (default 6000)")
    p.add_argument("--samples", type=int, help="retained sweeps (default 2000)")
    p.add_argument("--thinning", type=int, help="keep every n-th draw (default 1)")
    p.add_argument("--latent-mode", choices=["marginal", "joint"],
                   help="latent-state sampling mode (default marginal)")
    p.add_argument("--adapt-proposal", type=_flag,
                   help="adapt MH proposal scale during burn-in (default true)")
    p.add_argument("--dirichlet-conc", type=float,
                   help="symmetric Dirichlet concentration (default 1/|Z|)")
    p.add_argument("--gamma-a", type=float, help="noise-variance prior shape (default 100)")
    p.add_argument("--gamma-b", type=float, help="noise-variance prior rate (default 1)")
    p.add_argument("--downsample", type=int, help="keep every n-th sample (default 1)")
    p.add_argument("--min-duration", type=float,
                   help="drop trajectories shorter than this many seconds (default 0)")
    return p


def cmd_fit(args) -> int:
    _defaults(
        args,
        dict(k_b=2, k_s=2, n_chains=1, burn_in=6000, samples=2000, thinning=1,
             latent_mode="marginal", adapt_proposal=True, gamma_a=100.0,
             gamma_b=1.0, downsample=1, min_duration=0.0),
    )
    if args.data is None or args.out_dir is None:
        raise InvalidArgumentError("--data and --out-dir are required")
    if args.seed is None:
        raise InvalidArgumentError("--seed is required (no wall-clock default)")
    if args.n_chains < 1:
        raise InvalidArgumentError("--n-chains must be >= 1")
    dataset = _prepare_dataset(args)
    space = JointStateSpace(args.k_b, args.k_s)
    hyper = Hyperparams(
        dirichlet_conc=args.dirichlet_conc,
        gamma_a=args.gamma_a,
        gamma_b=args.gamma_b,
        adapt_proposal=args.adapt_proposal,
        n_burn_in=args.burn_in,
        n_samples=args.samples,
        thinning=args.thinning,
        latent_mode=args.latent_mode,
    )

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chains = []
    for index in range(args.n_chains):
        samples = run_chain(dataset, hyper, space, seed=args.seed + index)
        write_samples_ndjson(samples, out / f"samples_chain{index:02d}.ndjson")
        chains.append(samples)
    merged = merge_chains(chains)
    write_segmentation_csv(merged, dataset, out / "segmentation.csv")
    write_diagnostics_json(
        merged,
        out / "diagnostics.json",
        extra={"n_chains": args.n_chains, "base_seed": args.seed},
    )
    save_metadata(dataset, out / "metadata.json", extra={"k_b": args.k_b, "k_s": args.k_s})
    keys = ["data", "out_dir", "seed", "schema", "k_b", "k_s", "n_chains", "burn_in",
            "samples", "thinning", "latent_mode", "adapt_proposal", "dirichlet_conc",
            "gamma_a", "gamma_b", "downsample", "min_duration"]
    _write_config_echo(args, keys, out / "config_resolved.txt")
    print(
        f"fit complete: {args.n_chains} chain(s), "
        f"{merged.n_draws} retained draws, artifacts in {out}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def _add_report_parser(subparsers) -> argparse.ArgumentParser:
    p = subparsers.add_parser("report", help="summarize posterior samples as CSV tables")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--run-dir", help="directory produced by fit")
    p.add_argument("--out-dir", help="where to write the report (default: run dir)")
    p.add_argument("--truth", help="optional truth-chain CSV for alignment scores")
    return p


def _load_run_samples(run_dir: Path):
    files = sorted(run_dir.glob("samples_chain*.ndjson"))
    if not files:
        raise DataError(f"no samples_chain*.ndjson files in {run_dir}")
    records = []
    for file in files:
        records.extend(read_samples_ndjson(file))
    theta = np.array([r["theta"] for r in records])
    sigma2 = np.array([r["sigma2"] for r in records])
    mu_x = np.array([r["mu_x"] for r in records])
    lambda_x = np.array([r["lambda_x"] for r in records])
    pi = np.array([r["pi"] for r in records])
    z = int(round(np.sqrt(pi.shape[1])))
    return theta, sigma2, mu_x, lambda_x, pi.reshape(-1, z, z)


def _load_segmentation_csv(path: Path, space: JointStateSpace):
    chains: dict[str, list[int]] = {}
    order: list[str] = []
    with open(path, encoding="utf-8") as handle:
        header = handle.readline().strip()
        if not header.startswith("traj_id,t,k_B,k_S"):
            raise DataError(f"{path}: not a segmentation CSV")
        for line in handle:
            traj_id, _, k_b, k_s, _ = line.rstrip("\n").split(",")
            if traj_id not in chains:
                chains[traj_id] = []
                order.append(traj_id)
            chains[traj_id].append(space.flat_index(int(k_b), int(k_s)))
    return [np.array(chains[t], dtype=np.int64) for t in order]


def cmd_report(args) -> int:
    if args.run_dir is None:
        raise InvalidArgumentError("--run-dir is required")
    run_dir = Path(args.run_dir)
    out = Path(args.out_dir) if args.out_dir else run_dir
    out.mkdir(parents=True, exist_ok=True)
    theta, sigma2, mu_x, _, pi = _load_run_samples(run_dir)
    standardizer = _standardizer_from_metadata(run_dir / "metadata.json")

    k_b = theta.shape[1]
    with open(out / "report_regimes.csv", "w", encoding="utf-8", newline="\n") as handle:
        handle.write(
            "regime,v_f,s0,T,a_max,b,sigma,"
            "v_f_std,s0_std,T_std,a_max_std,b_std\n"
        )
        means = theta.mean(axis=0)
        stds = theta.std(axis=0)
        sigma = np.sqrt(sigma2).mean(axis=0)
        for k in range(k_b):
            row = [k + 1, *means[k], sigma[k], *stds[k]]
            handle.write(",".join("%.12g" % v if i else "%d" % v
                                  for i, v in enumerate(row)) + "\n")

    k_s = mu_x.shape[1]
    mu_mean = mu_x.mean(axis=0)
    physical = standardizer.destandardize(mu_mean)
    with open(out / "report_scenarios.csv", "w", encoding="utf-8", newline="\n") as handle:
        handle.write("scenario,mu_v,mu_dv,mu_s,mu_v_z,mu_dv_z,mu_s_z\n")
        for k in range(k_s):
            row = [k + 1, *physical[k], *mu_mean[k]]
            handle.write(",".join("%.12g" % v if i else "%d" % v
                                  for i, v in enumerate(row)) + "\n")

    if args.truth:
        space = JointStateSpace(k_b, k_s)
        est_chains = _load_segmentation_csv(run_dir / "segmentation.csv", space)
        truth_chains = load_truth_csv(args.truth, space)
        result = _score_against_truth(est_chains, truth_chains, space, theta.mean(axis=0))
        with open(out / "report_alignment.csv", "w", encoding="utf-8", newline="\n") as handle:
            handle.write("metric,value\n")
            handle.write("joint_accuracy,%.12g\n" % result.joint_accuracy)
            handle.write("regime_accuracy,%.12g\n" % result.regime_accuracy)
            handle.write("scenario_accuracy,%.12g\n" % result.scenario_accuracy)
            handle.write(
                "regime_perm,%s\n" % " ".join(str(v + 1) for v in result.regime_perm)
            )
            handle.write(
                "scenario_perm,%s\n" % " ".join(str(v + 1) for v in result.scenario_perm)
            )
    print(f"report written to {out}")
    return EXIT_OK


def _score_against_truth(est_chains, truth_chains, space, theta_mean):
    """Alignment scores when only the truth chains (not the generator
    config) are available."""
    from itertools import permutations as _perms

    est = np.concatenate(est_chains)
    true = np.concatenate(truth_chains)
    if est.shape != true.shape:
        raise DataError("segmentation and truth chains have different lengths")
    est_b, est_s = space.regimes_of(est), space.scenarios_of(est)
    true_b, true_s = space.regimes_of(true), space.scenarios_of(true)
    best = None
    for pb in _perms(range(space.n_regimes)):
        mb = np.asarray(pb)[est_b] == true_b
        for ps in _perms(range(space.n_scenarios)):
            ms = np.asarray(ps)[est_s] == true_s
            joint = float(np.mean(mb & ms))
            if best is None or joint > best[0]:
                best = (joint, float(mb.mean()), float(ms.mean()), pb, ps)
    from .synthetic import AlignmentResult

    joint, racc, sacc, pb, ps = best
    return AlignmentResult(
        regime_perm=pb,
        scenario_perm=ps,
        joint_accuracy=joint,
        regime_accuracy=racc,
        scenario_accuracy=sacc,
    )


# ---------------------------------------------------------------------------
# segment
# ---------------------------------------------------------------------------


def _add_segment_parser(subparsers) -> argparse.ArgumentParser:
    p = subparsers.add_parser(
        "segment",
        help="recompute smoothed segmentation from existing posterior samples",
    )
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--data", help="input trajectory CSV")
    p.add_argument("--run-dir", help="directory produced by fit")
    p.add_argument("--out", help="output CSV (default: <run-dir>/segmentation_smoothed.csv)")
    p.add_argument("--schema", help="column-mapping key=value file")
    p.add_argument("--downsample", type=int, help="keep every n-th sample (default 1)")
    p.add_argument("--min-duration", type=float, help="minimum duration filter (default 0)")
    return p


def cmd_segment(args) -> int:
    _defaults(args, dict(downsample=1, min_duration=0.0))
    if args.data is None or args.run_dir is None:
        raise InvalidArgumentError("--data and --run-dir are required")
    run_dir = Path(args.run_dir)
    dataset = _prepare_dataset(args)
    theta, sigma2, mu_x, lambda_x, pi = _load_run_samples(run_dir)
    standardizer = _standardizer_from_metadata(run_dir / "metadata.json")
    dataset = Dataset(trajectories=dataset.trajectories, standardizer=standardizer)
    k_b, k_s = theta.shape[1], mu_x.shape[1]
    space = JointStateSpace(k_b, k_s)

    # One smoothing pass under the posterior-mean parameters.
    state = ModelState(
        pi=pi.mean(axis=0) / pi.mean(axis=0).sum(axis=1, keepdims=True),
        theta=theta.mean(axis=0),
        sigma2=sigma2.mean(axis=0),
        mu_x=mu_x.mean(axis=0),
        lambda_x=lambda_x.mean(axis=0),
        mu_log=np.zeros(5),
        lam=np.eye(5),
        chains=[np.zeros(t.length, dtype=np.int64) for t in dataset.trajectories],
    )
    init = uniform_initial(space)
    tables = compute_local_evidence(dataset, state, space)
    out_path = Path(args.out) if args.out else run_dir / "segmentation_smoothed.csv"
    with open(out_path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write("traj_id,t,k_B,k_S,gamma_max\n")
        for traj, table in zip(dataset.trajectories, tables):
            fb = forward_backward(table, state.pi, init)
            modes = np.argmax(fb.gamma, axis=1)
            for step, mode in enumerate(modes):
                k_b_lab, k_s_lab = space.state_pair(int(mode))
                handle.write(
                    "%s,%.12g,%d,%d,%.12g\n"
                    % (
                        traj.traj_id,
                        step * traj.dt,
                        k_b_lab,
                        k_s_lab,
                        fb.gamma[step, mode],
                    )
                )
    print(f"segmentation written to {out_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="switching-idm",
        description="Regime-switching car-following model: simulation, "
        "Bayesian inference, and trajectory segmentation.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    parsers = {
        "simulate": _add_simulate_parser(subparsers),
        "fit": _add_fit_parser(subparsers),
        "report": _add_report_parser(subparsers),
        "segment": _add_segment_parser(subparsers),
    }
    for name, sub in parsers.items():
        sub.set_defaults(_subparser=sub)
    return parser


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "report": cmd_report,
    "segment": cmd_segment,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_config_file(args, args._subparser)
        return COMMANDS[args.command](args)
    except (InvalidArgumentError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        name = exc.filename if exc.filename else exc
        print(f"error: file not found: {name}", file=sys.stderr)
        return EXIT_DATA
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (InferenceError, NumericDomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFERENCE


if __name__ == "__main__":
    sys.exit(main())
