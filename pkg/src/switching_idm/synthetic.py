"""Ground-truth dataset generator and evaluation helpers.

Two covariate modes:

* ``kinematic`` — the follower integrates the car-following law against a
  piecewise-constant leader speed schedule, so (v, dv, s) are physically
  consistent.  Used for parameter-recovery tests.
* ``emission`` — (v, dv, s) are drawn directly from the per-scenario
  Gaussians, exactly matching the scenario-emission likelihood.  Used for
  factorial-recovery tests.

Also provides the permutation search that resolves label switching when
scoring inferred states/parameters against the generating truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import permutations

import numpy as np

from .data import Dataset, Trajectory, fit_standardizer
from .errors import DataError, InvalidArgumentError
from .idm import GAP_FLOOR, IdmParams, StateVector, equilibrium_gap, idm_acceleration, simulate_step
from .states import JointStateSpace, uniform_initial, validate_transition_matrix

# Reference parameter sets used as default synthetic ground truth.  The
# five-vector order is (v_f, s0, T, a_max, b); sigma is the acceleration
# noise std.
AVERAGED_BEHAVIOR_THETA = np.array([38.57, 2.71, 0.86, 0.14, 1.33])
AVERAGED_BEHAVIOR_SIGMA = 0.40

HIGH_SPEED_SEEKING_THETA = np.array([39.26, 1.80, 0.59, 0.30, 1.40])
HIGH_SPEED_SEEKING_SIGMA = 0.47
CONGESTED_CRUISING_THETA = np.array([9.84, 5.10, 1.29, 0.08, 0.50])
CONGESTED_CRUISING_SIGMA = 0.15

DEFAULT_REGIME_THETAS = np.stack([HIGH_SPEED_SEEKING_THETA, CONGESTED_CRUISING_THETA])
DEFAULT_REGIME_SIGMAS = np.array([HIGH_SPEED_SEEKING_SIGMA, CONGESTED_CRUISING_SIGMA])

# Scenario covariate means (v, dv, s) in physical units.
AVERAGED_TRAFFIC_MEAN = np.array([5.73, 0.00, 14.32])
CONGESTED_TRAFFIC_MEAN = np.array([3.95, -0.08, 9.12])
HIGH_SPEED_CRUISING_MEAN = np.array([8.30, 0.10, 21.82])
DEFAULT_SCENARIO_MEANS = np.stack([CONGESTED_TRAFFIC_MEAN, HIGH_SPEED_CRUISING_MEAN])

# Default scenario spreads, chosen so that invalid draws (v < 0 or s <= 0)
# are several sigmas out and the truncation bias is negligible.
DEFAULT_SCENARIO_COVS = np.stack(
    [
        np.diag(np.array([1.2, 1.3, 2.0]) ** 2),
        np.diag(np.array([2.2, 1.5, 3.0]) ** 2),
    ]
)


def sticky_transition_matrix(space: JointStateSpace, stay_prob: float) -> np.ndarray:
    """Joint-state transition matrix with a given self-transition probability
    and the remaining mass spread uniformly over the other states."""
    if not 0.0 < stay_prob < 1.0:
        raise InvalidArgumentError("stay_prob must be in (0, 1)")
    z = space.size
    if z == 1:
        return np.ones((1, 1))
    pi = np.full((z, z), (1.0 - stay_prob) / (z - 1))
    np.fill_diagonal(pi, stay_prob)
    return pi


@dataclass
class GeneratorConfig:
    """Everything needed to simulate a labeled dataset."""

    space: JointStateSpace
    true_pi: np.ndarray
    true_theta: np.ndarray  # (K_B, 5)
    true_sigma: np.ndarray  # (K_B,)
    n_trajectories: int
    n_steps: int
    dt: float = 0.2
    mode: str = "kinematic"
    # Emission mode: per-scenario covariate Gaussians in physical units.
    scenario_means: np.ndarray | None = None
    scenario_covs: np.ndarray | None = None
    # Kinematic mode: piecewise-constant leader speed schedule.
    leader_speed_range: tuple[float, float] = (5.0, 33.0)
    leader_segment_steps: int = 75
    initial_speed_range: tuple[float, float] = (5.0, 25.0)
    # Generation-quality guards.
    max_clamp_fraction: float = 0.01
    max_redraw_rounds: int = 100

    def __post_init__(self):
        self.true_pi = np.asarray(self.true_pi, dtype=float)
        self.true_theta = np.atleast_2d(np.asarray(self.true_theta, dtype=float))
        self.true_sigma = np.atleast_1d(np.asarray(self.true_sigma, dtype=float))
        validate_transition_matrix(self.true_pi, self.space)
        if self.true_theta.shape != (self.space.n_regimes, 5):
            raise InvalidArgumentError("true_theta must be (K_B, 5)")
        if self.true_sigma.shape != (self.space.n_regimes,):
            raise InvalidArgumentError("true_sigma must be (K_B,)")
        if np.any(self.true_sigma < 0.0):
            raise InvalidArgumentError("noise stds must be >= 0")
        for row in self.true_theta:
            IdmParams.from_array(row)  # raises on invalid parameters
        if self.n_trajectories < 1 or self.n_steps < 2:
            raise InvalidArgumentError("need >= 1 trajectories of >= 2 steps")
        if self.dt <= 0.0:
            raise InvalidArgumentError("dt must be > 0")
        if self.mode not in ("kinematic", "emission"):
            raise InvalidArgumentError("mode must be 'kinematic' or 'emission'")
        if self.mode == "emission":
            if self.scenario_means is None:
                self.scenario_means = DEFAULT_SCENARIO_MEANS[: self.space.n_scenarios]
            if self.scenario_covs is None:
                self.scenario_covs = DEFAULT_SCENARIO_COVS[: self.space.n_scenarios]
            self.scenario_means = np.atleast_2d(
                np.asarray(self.scenario_means, dtype=float)
            )
            self.scenario_covs = np.asarray(self.scenario_covs, dtype=float)
            if self.scenario_covs.ndim == 2:
                self.scenario_covs = self.scenario_covs[None, :, :]
            if self.scenario_means.shape != (self.space.n_scenarios, 3):
                raise InvalidArgumentError("scenario_means must be (K_S, 3)")
            if self.scenario_covs.shape != (self.space.n_scenarios, 3, 3):
                raise InvalidArgumentError("scenario_covs must be (K_S, 3, 3)")


@dataclass
class LabeledDataset:
    """Generated dataset plus its generating latent chains and event counts."""

    dataset: Dataset
    true_chains: list  # per-trajectory flat joint-state index arrays
    config: GeneratorConfig
    n_gap_clamps: int = 0
    n_covariate_redraws: int = 0
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        for traj, chain in zip(self.dataset.trajectories, self.true_chains):
            if traj.length != len(chain):
                raise InvalidArgumentError("chain length must match trajectory length")


def _sample_chain(
    pi: np.ndarray, init: np.ndarray, n_steps: int, rng: np.random.Generator
) -> np.ndarray:
    z = pi.shape[0]
    chain = np.empty(n_steps, dtype=np.int64)
    chain[0] = rng.choice(z, p=init)
    for t in range(1, n_steps):
        chain[t] = rng.choice(z, p=pi[chain[t - 1]])
    return chain


def generate_dataset(config: GeneratorConfig, rng: np.random.Generator) -> LabeledDataset:
    """Sample latent chains from the truth transition matrix, then emit
    covariates and accelerations in the configured mode."""
    init = uniform_initial(config.space)
    trajectories = []
    chains = []
    n_clamps = 0
    n_redraws = 0
    for d in range(config.n_trajectories):
        chain = _sample_chain(config.true_pi, init, config.n_steps, rng)
        if config.mode == "kinematic":
            traj, clamps = _generate_kinematic(config, chain, d, rng)
            n_clamps += clamps
        else:
            traj, redraws = _generate_emission(config, chain, d, rng)
            n_redraws += redraws
        trajectories.append(traj)
        chains.append(chain)

    warnings = []
    total_steps = config.n_trajectories * config.n_steps
    if n_clamps > config.max_clamp_fraction * total_steps:
        warnings.append(
            f"gap clamped at {n_clamps}/{total_steps} steps "
            f"(> {config.max_clamp_fraction:.1%} of the data)"
        )
    dataset = fit_standardizer(Dataset(trajectories=tuple(trajectories)))
    return LabeledDataset(
        dataset=dataset,
        true_chains=chains,
        config=config,
        n_gap_clamps=n_clamps,
        n_covariate_redraws=n_redraws,
        warnings=warnings,
    )


def _generate_kinematic(config, chain, index, rng):
    """Integrate the follower against a piecewise-constant leader schedule."""
    n = config.n_steps
    lo, hi = config.leader_speed_range
    n_segments = -(-n // config.leader_segment_steps)
    leader = np.repeat(rng.uniform(lo, hi, size=n_segments), config.leader_segment_steps)[:n]

    v0 = rng.uniform(*config.initial_speed_range)
    params0 = IdmParams.from_array(config.true_theta[config.space.regimes_of(chain[0])])
    # Start near equilibrium spacing so transients stay physical.
    v_eq = min(v0, 0.9 * params0.v_f)
    s0 = max(float(equilibrium_gap(v_eq, params0)), GAP_FLOOR + 1.0)
    state = StateVector(v=v0, dv=v0 - leader[0], s=s0)

    x = np.empty((n, 3))
    y = np.empty(n)
    clamps = 0
    for t in range(n):
        regime = int(config.space.regimes_of(chain[t]))
        params = IdmParams.from_array(config.true_theta[regime])
        x[t] = (state.v, state.dv, state.s)
        leader_next = leader[min(t + 1, n - 1)]
        result = simulate_step(
            state,
            leader_next,
            params,
            float(config.true_sigma[regime]),
            config.dt,
            rng,
        )
        y[t] = result.accel
        clamps += result.gap_clamped
        state = result.state
    traj = Trajectory(traj_id=f"traj_{index:04d}", dt=config.dt, x=x, y=y)
    return traj, clamps


def _generate_emission(config, chain, index, rng):
    """Draw covariates from the scenario Gaussians (redrawing invalid rows),
    then emit accelerations from the regime law plus noise."""
    n = config.n_steps
    x = np.empty((n, 3))
    redraws = 0
    scenarios = config.space.scenarios_of(chain)
    for k in range(config.space.n_scenarios):
        idx = np.flatnonzero(scenarios == k)
        if idx.size == 0:
            continue
        draws = rng.multivariate_normal(
            config.scenario_means[k], config.scenario_covs[k], size=idx.size,
            method="cholesky",
        )
        for _ in range(config.max_redraw_rounds):
            bad = (draws[:, 0] < 0.0) | (draws[:, 2] <= 0.0)
            if not np.any(bad):
                break
            redraws += int(bad.sum())
            draws[bad] = rng.multivariate_normal(
                config.scenario_means[k],
                config.scenario_covs[k],
                size=int(bad.sum()),
                method="cholesky",
            )
        else:
            raise DataError(
                f"scenario {k + 1}: could not draw valid covariates; "
                "means/covariances put too much mass on v < 0 or s <= 0"
            )
        x[idx] = draws

    y = np.empty(n)
    regimes = config.space.regimes_of(chain)
    for k in range(config.space.n_regimes):
        idx = np.flatnonzero(regimes == k)
        if idx.size == 0:
            continue
        params = IdmParams.from_array(config.true_theta[k])
        mean = idm_acceleration(x[idx, 0], x[idx, 1], x[idx, 2], params)
        y[idx] = mean + config.true_sigma[k] * rng.standard_normal(idx.size)
    traj = Trajectory(traj_id=f"traj_{index:04d}", dt=config.dt, x=x, y=y)
    return traj, redraws


def write_truth_csv(labeled: LabeledDataset, path) -> None:
    """Per-step generating states: ``traj_id,t,k_B,k_S``."""
    space = labeled.config.space
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write("traj_id,t,k_B,k_S\n")
        for traj, chain in zip(labeled.dataset.trajectories, labeled.true_chains):
            for step, state in enumerate(chain):
                k_b, k_s = space.state_pair(int(state))
                handle.write(
                    "%s,%.12g,%d,%d\n" % (traj.traj_id, step * traj.dt, k_b, k_s)
                )


def load_truth_csv(path, space: JointStateSpace) -> list[np.ndarray]:
    """Read a truth-chain CSV back into per-trajectory flat-index arrays."""
    chains: dict[str, list[int]] = {}
    order: list[str] = []
    with open(path, encoding="utf-8") as handle:
        header = handle.readline().strip()
        if header != "traj_id,t,k_B,k_S":
            raise InvalidArgumentError(f"{path}: not a truth-chain CSV")
        for line in handle:
            traj_id, _, k_b, k_s = line.rstrip("\n").split(",")
            if traj_id not in chains:
                chains[traj_id] = []
                order.append(traj_id)
            chains[traj_id].append(space.flat_index(int(k_b), int(k_s)))
    return [np.array(chains[traj_id], dtype=np.int64) for traj_id in order]


@dataclass(frozen=True)
class AlignmentResult:
    """Best factor-wise relabeling of inferred states onto the truth.

    ``regime_perm[j]`` / ``scenario_perm[j]`` give the truth label (0-based)
    that inferred label j corresponds to.
    """

    regime_perm: tuple
    scenario_perm: tuple
    joint_accuracy: float
    regime_accuracy: float
    scenario_accuracy: float
    theta_rel_errors: np.ndarray | None = None

    def align_regime_array(self, values: np.ndarray) -> np.ndarray:
        """Reorder a per-regime array (first axis) into truth label order."""
        inverse = np.argsort(np.asarray(self.regime_perm))
        return np.asarray(values)[inverse]

    def align_scenario_array(self, values: np.ndarray) -> np.ndarray:
        inverse = np.argsort(np.asarray(self.scenario_perm))
        return np.asarray(values)[inverse]

    def joint_permutation(self, space: JointStateSpace) -> np.ndarray:
        """Flat-index map: inferred joint state i -> truth joint state."""
        out = np.empty(space.size, dtype=np.int64)
        for i in range(space.size):
            k_b = int(space.regimes_of(i))
            k_s = int(space.scenarios_of(i))
            out[i] = self.scenario_perm[k_s] * space.n_regimes + self.regime_perm[k_b]
        return out

    def align_joint_matrix(self, pi: np.ndarray, space: JointStateSpace) -> np.ndarray:
        """Relabel a joint-state transition matrix into truth label order."""
        mapping = self.joint_permutation(space)
        out = np.empty_like(np.asarray(pi, dtype=float))
        out[np.ix_(mapping, mapping)] = pi
        return out


def align_labels(
    inferred_chains,
    truth: LabeledDataset,
    space: JointStateSpace,
    theta_estimate: np.ndarray | None = None,
) -> AlignmentResult:
    """Search all factor-wise permutation pairs and keep the one that
    maximizes per-step joint state accuracy against the generating chains.

    ``inferred_chains`` are per-trajectory flat joint-state arrays (e.g.
    posterior-mode segmentations).  If ``theta_estimate`` is given, the
    per-regime relative errors against the generating parameters are
    computed under the chosen permutation.
    """
    if len(inferred_chains) != len(truth.true_chains):
        raise InvalidArgumentError("trajectory counts differ")
    est = np.concatenate([np.asarray(c) for c in inferred_chains])
    true = np.concatenate([np.asarray(c) for c in truth.true_chains])
    if est.shape != true.shape:
        raise InvalidArgumentError("chain lengths differ from the truth")
    if np.any(est < 0) or np.any(est >= space.size):
        raise InvalidArgumentError("inferred chains contain out-of-range states")

    est_b = space.regimes_of(est)
    est_s = space.scenarios_of(est)
    true_b = space.regimes_of(true)
    true_s = space.scenarios_of(true)

    best = None
    for perm_b in permutations(range(space.n_regimes)):
        match_b = np.asarray(perm_b)[est_b] == true_b
        for perm_s in permutations(range(space.n_scenarios)):
            match_s = np.asarray(perm_s)[est_s] == true_s
            joint = float(np.mean(match_b & match_s))
            if best is None or joint > best[0]:
                best = (joint, float(match_b.mean()), float(match_s.mean()), perm_b, perm_s)

    joint_acc, regime_acc, scenario_acc, perm_b, perm_s = best
    result = AlignmentResult(
        regime_perm=perm_b,
        scenario_perm=perm_s,
        joint_accuracy=joint_acc,
        regime_accuracy=regime_acc,
        scenario_accuracy=scenario_acc,
    )
    if theta_estimate is not None:
        theta_estimate = np.atleast_2d(np.asarray(theta_estimate, dtype=float))
        if theta_estimate.shape != truth.config.true_theta.shape:
            raise InvalidArgumentError("theta_estimate shape mismatch")
        aligned = result.align_regime_array(theta_estimate)
        errors = np.abs(aligned - truth.config.true_theta) / np.abs(
            truth.config.true_theta
        )
        result = AlignmentResult(
            regime_perm=perm_b,
            scenario_perm=perm_s,
            joint_accuracy=joint_acc,
            regime_accuracy=regime_acc,
            scenario_accuracy=scenario_acc,
            theta_rel_errors=errors,
        )
    return result
