"""Blocked MCMC for the factorial regime-switching car-following model.

One sweep resamples, in order: the joint transition matrix (Dirichlet),
the latent chains (forward-backward smoothing + categorical draws), the
per-regime IDM parameters (random-walk Metropolis-Hastings), the per-regime
noise variances (inverse-Gamma), the per-scenario covariate Gaussians
(normal-Wishart) and the log-space hyperprior over IDM parameters
(normal-Wishart).  All trajectories share one parameter set; transition
counts and likelihood terms pool across trajectories.

Wishart bookkeeping: prior/posterior "scale" accumulators (w0, w') collect
inverse-scale mass, so draws use W(dof, inv(w')) and E[Lambda] = dof *
inv(w').  This is the convention under which the conjugate updates hold.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, fit_standardizer
from .distributions import (
    InverseGammaParams,
    NormalWishartParams,
    lognormal_logpdf,
    make_rng,
    mvn_logpdf_batch,
    normal_logpdf,
    sample_dirichlet,
    sample_inverse_gamma,
    sample_mvn_from_precision,
    sample_normal_wishart,
    sample_wishart,
)
from .errors import InferenceError, InvalidArgumentError
from .idm import IdmParams, idm_acceleration
from .states import (
    JointStateSpace,
    count_transitions,
    uniform_initial,
    validate_transition_matrix,
)

DEFAULT_LOG_MU0 = np.array([33.0, 2.0, 1.6, 1.5, 1.67])


@dataclass
class Hyperparams:
    """Prior and run settings; defaults follow the reference configuration."""

    # Transition rows: symmetric Dirichlet concentration; None means 1/|Z|.
    dirichlet_conc: float | None = None
    # Log-normal-Wishart hyperprior over ln(theta).
    mu0: np.ndarray = field(default_factory=lambda: DEFAULT_LOG_MU0.copy())
    kappa0: float = 0.01
    nu0: float = 7.0
    w0: np.ndarray = field(default_factory=lambda: 0.1 * np.eye(5))
    # Inverse-Gamma prior on the acceleration-noise variances.
    gamma_a: float = 100.0
    gamma_b: float = 1.0
    # Normal-Wishart prior on the scenario emissions (standardized space).
    mu_x0: np.ndarray = field(default_factory=lambda: np.zeros(3))
    kappa_x0: float = 0.01
    nu_x0: float = 5.0
    w_x0: np.ndarray = field(default_factory=lambda: 0.1 * np.eye(3))
    # Metropolis-Hastings proposal; None means diag((0.05 * mu0)^2), or
    # diag(0.05^2) when proposing in log space.
    proposal_cov: np.ndarray | None = None
    # Propose theta' = exp(ln theta + eps) instead of theta + eps; the
    # asymmetry is corrected in the acceptance ratio.  Multiplicative steps
    # traverse scale-shaped likelihood ridges much faster.
    log_space_proposal: bool = False
    adapt_proposal: bool = True
    target_accept: float = 0.23
    # Chain lengths.
    n_burn_in: int = 6000
    n_samples: int = 2000
    thinning: int = 1
    # "marginal" draws each z_t from its smoothed marginal; "joint" draws
    # the whole chain exactly via forward-filter backward-sampling.
    latent_mode: str = "marginal"
    # p(z1) is fixed uniform by default; optionally resampled from its
    # Dirichlet posterior each sweep.
    resample_initial: bool = False

    def __post_init__(self):
        self.mu0 = np.asarray(self.mu0, dtype=float)
        self.w0 = np.asarray(self.w0, dtype=float)
        self.mu_x0 = np.asarray(self.mu_x0, dtype=float)
        self.w_x0 = np.asarray(self.w_x0, dtype=float)
        if self.latent_mode not in ("marginal", "joint"):
            raise InvalidArgumentError("latent_mode must be 'marginal' or 'joint'")
        if self.n_burn_in < 0 or self.n_samples < 1 or self.thinning < 1:
            raise InvalidArgumentError("bad chain-length settings")
        if np.any(self.mu0 <= 0.0):
            raise InvalidArgumentError("mu0 entries must be > 0")

    def row_concentration(self, space: JointStateSpace) -> np.ndarray:
        conc = 1.0 / space.size if self.dirichlet_conc is None else self.dirichlet_conc
        return np.full(space.size, conc)

    def resolved_proposal_cov(self) -> np.ndarray:
        if self.proposal_cov is not None:
            return np.asarray(self.proposal_cov, dtype=float)
        if self.log_space_proposal:
            return np.diag(np.full(5, 0.05**2))
        return np.diag((0.05 * self.mu0) ** 2)


@dataclass
class ModelState:
    """All sampled unknowns, plus the per-trajectory latent chains."""

    pi: np.ndarray  # (|Z|, |Z|)
    theta: np.ndarray  # (K_B, 5)
    sigma2: np.ndarray  # (K_B,)
    mu_x: np.ndarray  # (K_S, 3)
    lambda_x: np.ndarray  # (K_S, 3, 3)
    mu_log: np.ndarray  # (5,) hyperprior mean of ln(theta)
    lam: np.ndarray  # (5, 5) hyperprior precision of ln(theta)
    chains: list  # per-trajectory flat joint-state index arrays
    init_dist: np.ndarray | None = None  # p(z1); None means uniform

    def validate(self, space: JointStateSpace) -> None:
        validate_transition_matrix(self.pi, space)
        if np.any(self.theta <= 0.0) or not np.all(np.isfinite(self.theta)):
            raise InferenceError("theta left the positive orthant")
        if np.any(self.sigma2 <= 0.0):
            raise InferenceError("sigma2 must stay > 0")
        for mat in (*self.lambda_x, self.lam):
            try:
                np.linalg.cholesky(mat)
            except np.linalg.LinAlgError as exc:
                raise InferenceError("precision matrix lost SPD-ness") from exc
        for chain in self.chains:
            if np.any(chain < 0) or np.any(chain >= space.size):
                raise InferenceError("latent chain out of range")


@dataclass
class ForwardBackwardResult:
    """Smoothed marginals plus the quantities needed for exact sampling."""

    gamma: np.ndarray  # (T, |Z|)
    log_marginal: float
    alpha_hat: np.ndarray  # (T, |Z|) normalized filtered messages


def compute_local_evidence(
    dataset: Dataset, state: ModelState, space: JointStateSpace
) -> list[np.ndarray]:
    """Per-trajectory (T, |Z|) tables of log joint local evidence.

    Column order follows the flat index (regime varies fastest).  The
    car-following factor sees physical covariates; the scenario factor sees
    standardized ones.
    """
    if dataset.standardizer is None:
        raise InvalidArgumentError("dataset needs a fitted standardizer")
    pooled = _evidence_pooled(
        dataset.pooled_x(),
        dataset.standardizer.standardize(dataset.pooled_x()),
        dataset.pooled_y(),
        state,
        space,
    )
    offsets = dataset.offsets()
    return [pooled[offsets[d] : offsets[d + 1]] for d in range(len(dataset.trajectories))]


def _evidence_pooled(x, x_std, y, state: ModelState, space: JointStateSpace) -> np.ndarray:
    n = x.shape[0]
    psi_b = np.empty((n, space.n_regimes))
    for k in range(space.n_regimes):
        params = IdmParams.from_array(state.theta[k])
        mean = idm_acceleration(x[:, 0], x[:, 1], x[:, 2], params)
        psi_b[:, k] = normal_logpdf(y, mean, state.sigma2[k])
    psi_s = np.empty((n, space.n_scenarios))
    for k in range(space.n_scenarios):
        psi_s[:, k] = mvn_logpdf_batch(x_std, state.mu_x[k], state.lambda_x[k])
    table = (psi_s[:, :, None] + psi_b[:, None, :]).reshape(n, space.size)
    # A non-finite IDM mean (overflow) cannot explain any datum: mark -inf.
    table[~np.isfinite(table)] = -np.inf
    return table


def forward_backward(
    log_evidence: np.ndarray, pi: np.ndarray, init: np.ndarray
) -> ForwardBackwardResult:
    """Smoothed posteriors and log marginal likelihood for one trajectory.

    Recursions run in the rescaled domain (per-step normalized messages
    with accumulated log normalizers), so long sequences do not underflow.
    """
    gammas, logliks, alphas = _fb_batch(log_evidence[None, :, :], pi, init)
    return ForwardBackwardResult(
        gamma=gammas[0], log_marginal=float(logliks[0]), alpha_hat=alphas[0]
    )


def _fb_batch(log_evidence: np.ndarray, pi: np.ndarray, init: np.ndarray):
    """Batched forward-backward over sequences that share a length.

    ``log_evidence`` has shape (B, T, |Z|); returns (gamma (B,T,Z),
    log marginal (B,), alpha_hat (B,T,Z)).
    """
    b, t_len, z = log_evidence.shape
    shifts = np.max(log_evidence, axis=2)
    bad = ~np.isfinite(shifts)
    if np.any(bad):
        seq, step = np.argwhere(bad)[0]
        raise InferenceError(
            f"no state can explain step t={step} of sequence {seq}: "
            "all local evidence is zero"
        )
    psi = np.exp(log_evidence - shifts[:, :, None])

    alpha_hat = np.empty((b, t_len, z))
    log_c = np.empty((b, t_len))
    msg = init[None, :] * psi[:, 0, :]
    norm = msg.sum(axis=1)
    _check_norms(norm, 0)
    alpha_hat[:, 0] = msg / norm[:, None]
    log_c[:, 0] = np.log(norm)
    for t in range(1, t_len):
        msg = psi[:, t, :] * (alpha_hat[:, t - 1] @ pi)
        norm = msg.sum(axis=1)
        _check_norms(norm, t)
        alpha_hat[:, t] = msg / norm[:, None]
        log_c[:, t] = np.log(norm)

    beta_hat = np.empty((b, t_len, z))
    beta_hat[:, -1] = 1.0
    for t in range(t_len - 2, -1, -1):
        beta_hat[:, t] = (beta_hat[:, t + 1] * psi[:, t + 1]) @ pi.T
        beta_hat[:, t] /= np.exp(log_c[:, t + 1])[:, None]

    gamma = alpha_hat * beta_hat
    gamma /= gamma.sum(axis=2, keepdims=True)
    log_marginal = (log_c + shifts).sum(axis=1)
    return gamma, log_marginal, alpha_hat


def _check_norms(norm: np.ndarray, t: int) -> None:
    if np.any(norm <= 0.0) or not np.all(np.isfinite(norm)):
        raise InferenceError(f"forward message vanished at step t={t}")


def sample_latent_states(
    fb: ForwardBackwardResult,
    pi: np.ndarray,
    rng: np.random.Generator,
    mode: str = "marginal",
) -> np.ndarray:
    """Draw one latent chain for a trajectory.

    "marginal" draws each z_t independently from its smoothed marginal;
    "joint" backward-samples from the filtered messages, which is a draw
    from the exact joint chain posterior.
    """
    if mode == "marginal":
        return _sample_marginal_batch(fb.gamma[None, :, :], rng)[0]
    if mode == "joint":
        return _sample_joint_batch(fb.alpha_hat[None, :, :], pi, rng)[0]
    raise InvalidArgumentError(f"unknown latent sampling mode {mode!r}")


def _categorical_rows(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Vectorized categorical draws; ``probs`` rows sum to 1, ``u`` in [0,1)."""
    cdf = np.cumsum(probs, axis=-1)
    return np.minimum(
        np.sum(cdf < u[..., None], axis=-1), probs.shape[-1] - 1
    ).astype(np.int64)


def _sample_marginal_batch(gamma: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    b, t_len, _ = gamma.shape
    u = rng.random((b, t_len))
    return _categorical_rows(gamma, u)


def _sample_joint_batch(
    alpha_hat: np.ndarray, pi: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    b, t_len, z = alpha_hat.shape
    u = rng.random((b, t_len))
    out = np.empty((b, t_len), dtype=np.int64)
    last = alpha_hat[:, -1] / alpha_hat[:, -1].sum(axis=1, keepdims=True)
    out[:, -1] = _categorical_rows(last, u[:, -1])
    for t in range(t_len - 2, -1, -1):
        w = alpha_hat[:, t] * pi.T[out[:, t + 1]]
        w /= w.sum(axis=1, keepdims=True)
        out[:, t] = _categorical_rows(w, u[:, t])
    return out


def sample_transition_matrix(
    counts: np.ndarray,
    hyper: Hyperparams,
    space: JointStateSpace,
    rng: np.random.Generator,
) -> np.ndarray:
    """Rows drawn independently from Dir(concentration + counts)."""
    if space.size == 1:
        return np.ones((1, 1))
    conc = hyper.row_concentration(space)
    pi = np.empty((space.size, space.size))
    for row in range(space.size):
        pi[row] = sample_dirichlet(conc + counts[row], rng)
    return pi


def idm_log_likelihood(theta, x: np.ndarray, y: np.ndarray, sigma2: float) -> float:
    """Gaussian log likelihood of the observed accelerations under one theta."""
    params = IdmParams.from_array(theta)
    mean = idm_acceleration(x[:, 0], x[:, 1], x[:, 2], params)
    values = normal_logpdf(y, mean, sigma2)
    return float(np.sum(values)) if np.all(np.isfinite(values)) else -np.inf


def mh_acceptance_log_ratio(
    theta_current,
    theta_proposed,
    x: np.ndarray,
    y: np.ndarray,
    sigma2: float,
    mu_log: np.ndarray,
    lam: np.ndarray,
) -> float:
    """Log of the (symmetric-proposal) Metropolis-Hastings ratio."""
    theta_proposed = np.asarray(theta_proposed, dtype=float)
    if np.any(theta_proposed <= 0.0):
        return -np.inf
    log_ratio = lognormal_logpdf(theta_proposed, mu_log, lam) - lognormal_logpdf(
        theta_current, mu_log, lam
    )
    log_ratio += idm_log_likelihood(theta_proposed, x, y, sigma2)
    log_ratio -= idm_log_likelihood(theta_current, x, y, sigma2)
    return float(log_ratio)


def mh_update_idm_params(
    dataset: Dataset,
    state: ModelState,
    hyper: Hyperparams,
    space: JointStateSpace,
    rng: np.random.Generator,
    proposal_scales: np.ndarray | None = None,
    proposal_chols: np.ndarray | None = None,
):
    """One random-walk MH proposal per regime over its assigned time steps.

    ``proposal_chols`` optionally supplies per-regime Cholesky factors of
    the proposal covariance (e.g. adapted from burn-in draws); otherwise
    the configured base covariance is used for every regime.

    Returns (theta, accepted) where accepted[k] is 1.0/0.0 for a decided
    proposal and NaN for a regime that owned no data and was instead
    redrawn from its conditional prior.
    """
    x = dataset.pooled_x()
    y = dataset.pooled_y()
    regimes = space.regimes_of(np.concatenate(state.chains))
    if proposal_chols is None:
        chol_q = np.linalg.cholesky(hyper.resolved_proposal_cov())
        proposal_chols = np.broadcast_to(chol_q, (space.n_regimes, 5, 5))
    scales = (
        np.ones(space.n_regimes) if proposal_scales is None else proposal_scales
    )
    theta = state.theta.copy()
    accepted = np.full(space.n_regimes, np.nan)
    for k in range(space.n_regimes):
        mask = regimes == k
        if not np.any(mask):
            theta[k] = np.exp(sample_mvn_from_precision(state.mu_log, state.lam, rng))
            continue
        step = scales[k] * (proposal_chols[k] @ rng.standard_normal(5))
        if hyper.log_space_proposal:
            proposal = np.exp(np.log(theta[k]) + step)
        else:
            proposal = theta[k] + step
        log_ratio = mh_acceptance_log_ratio(
            theta[k],
            proposal,
            x[mask],
            y[mask],
            float(state.sigma2[k]),
            state.mu_log,
            state.lam,
        )
        if hyper.log_space_proposal:
            # Hastings correction: the log-space random walk is symmetric in
            # ln(theta), so q(theta|theta')/q(theta'|theta) = prod theta'/theta.
            log_ratio += float(np.sum(np.log(proposal) - np.log(theta[k])))
        if np.log(rng.random()) < log_ratio:
            theta[k] = proposal
            accepted[k] = 1.0
        else:
            accepted[k] = 0.0
    return theta, accepted


def sample_noise_variances(
    dataset: Dataset,
    state: ModelState,
    hyper: Hyperparams,
    space: JointStateSpace,
    rng: np.random.Generator,
) -> np.ndarray:
    """Conjugate inverse-Gamma update of the per-regime noise variances."""
    x = dataset.pooled_x()
    y = dataset.pooled_y()
    regimes = space.regimes_of(np.concatenate(state.chains))
    sigma2 = np.empty(space.n_regimes)
    for k in range(space.n_regimes):
        mask = regimes == k
        if not np.any(mask):
            sigma2[k] = sample_inverse_gamma(
                InverseGammaParams(hyper.gamma_a, hyper.gamma_b), rng
            )
            continue
        params = IdmParams.from_array(state.theta[k])
        resid = y[mask] - idm_acceleration(
            x[mask, 0], x[mask, 1], x[mask, 2], params
        )
        post = InverseGammaParams(
            shape=hyper.gamma_a + 0.5 * mask.sum(),
            rate=hyper.gamma_b + 0.5 * float(np.sum(resid**2)),
        )
        sigma2[k] = sample_inverse_gamma(post, rng)
    return sigma2


def normal_wishart_posterior(
    points: np.ndarray,
    mu0: np.ndarray,
    kappa0: float,
    nu0: float,
    w0: np.ndarray,
) -> NormalWishartParams:
    """Standard conjugate update; ``w0`` and the returned accumulator are
    inverse-scale matrices (the Wishart draw uses their inverse)."""
    n = points.shape[0]
    if n == 0:
        return NormalWishartParams(
            mean=mu0, kappa=kappa0, dof=nu0, scale=np.linalg.inv(w0)
        )
    xbar = points.mean(axis=0)
    centered = points - xbar
    scatter = centered.T @ centered
    shift = (xbar - mu0)[:, None]
    w_post = w0 + scatter + (kappa0 * n / (kappa0 + n)) * (shift @ shift.T)
    mu_post = (kappa0 * mu0 + n * xbar) / (kappa0 + n)
    return NormalWishartParams(
        mean=mu_post,
        kappa=kappa0 + n,
        dof=nu0 + n,
        scale=np.linalg.inv(w_post),
    )


def sample_idm_hyperpriors(
    state: ModelState, hyper: Hyperparams, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Draw the hyperprior (ln mu, Lambda) given the current ln(theta_k)."""
    log_theta = np.log(state.theta)
    post = normal_wishart_posterior(
        log_theta, np.log(hyper.mu0), hyper.kappa0, hyper.nu0, hyper.w0
    )
    mu_log, lam = sample_normal_wishart(post, rng)
    return mu_log, lam


def sample_scenario_emissions(
    dataset: Dataset,
    state: ModelState,
    hyper: Hyperparams,
    space: JointStateSpace,
    rng: np.random.Generator,
):
    """Draw each scenario's (mean, precision) over standardized covariates."""
    x_std = dataset.standardizer.standardize(dataset.pooled_x())
    scenarios = space.scenarios_of(np.concatenate(state.chains))
    mu_x = np.empty((space.n_scenarios, 3))
    lambda_x = np.empty((space.n_scenarios, 3, 3))
    n_empty = 0
    for k in range(space.n_scenarios):
        points = x_std[scenarios == k]
        if points.shape[0] == 0:
            n_empty += 1
        post = normal_wishart_posterior(
            points, hyper.mu_x0, hyper.kappa_x0, hyper.nu_x0, hyper.w_x0
        )
        mu_x[k], lambda_x[k] = sample_normal_wishart(post, rng)
    return mu_x, lambda_x, n_empty


@dataclass
class SweepResult:
    state: ModelState
    log_marginal: float
    mh_accepted: np.ndarray  # per regime; NaN where redrawn from the prior
    n_empty_regimes: int
    n_empty_scenarios: int


def gibbs_sweep(
    dataset: Dataset,
    state: ModelState,
    hyper: Hyperparams,
    space: JointStateSpace,
    rng: np.random.Generator,
    proposal_scales: np.ndarray | None = None,
    proposal_chols: np.ndarray | None = None,
    check_invariants: bool = True,
) -> SweepResult:
    """One full sweep in the fixed block order; see module docstring."""
    try:
        counts = count_transitions(state.chains, space)
        pi = sample_transition_matrix(counts, hyper, space, rng)
        init_dist = state.init_dist
        if hyper.resample_initial and space.size > 1:
            first = np.array([chain[0] for chain in state.chains])
            z1_counts = np.bincount(first, minlength=space.size)
            init_dist = sample_dirichlet(
                hyper.row_concentration(space) + z1_counts, rng
            )
        state = replace(state, pi=pi, init_dist=init_dist)
    except Exception as exc:
        raise InferenceError(f"transition-matrix block failed: {exc}") from exc

    init = uniform_initial(space) if state.init_dist is None else state.init_dist
    try:
        tables = compute_local_evidence(dataset, state, space)
        chains = []
        log_marginal = 0.0
        for group in _length_groups(dataset):
            stacked = np.stack([tables[d] for d in group])
            gamma, logliks, alpha_hat = _fb_batch(stacked, state.pi, init)
            log_marginal += float(logliks.sum())
            if hyper.latent_mode == "marginal":
                draws = _sample_marginal_batch(gamma, rng)
            else:
                draws = _sample_joint_batch(alpha_hat, state.pi, rng)
            chains.append((group, draws))
        new_chains = [None] * len(dataset.trajectories)
        for group, draws in chains:
            for row, d in enumerate(group):
                new_chains[d] = draws[row]
        state = replace(state, chains=new_chains)
    except InferenceError as exc:
        raise InferenceError(f"latent-state block failed: {exc}") from exc

    try:
        theta, accepted = mh_update_idm_params(
            dataset, state, hyper, space, rng, proposal_scales, proposal_chols
        )
        state = replace(state, theta=theta)
        n_empty_regimes = int(np.sum(np.isnan(accepted)))
    except Exception as exc:
        raise InferenceError(f"IDM parameter block failed: {exc}") from exc

    try:
        state = replace(
            state,
            sigma2=sample_noise_variances(dataset, state, hyper, space, rng),
        )
    except Exception as exc:
        raise InferenceError(f"noise-variance block failed: {exc}") from exc

    try:
        mu_x, lambda_x, n_empty_scenarios = sample_scenario_emissions(
            dataset, state, hyper, space, rng
        )
        state = replace(state, mu_x=mu_x, lambda_x=lambda_x)
    except Exception as exc:
        raise InferenceError(f"scenario-emission block failed: {exc}") from exc

    try:
        mu_log, lam = sample_idm_hyperpriors(state, hyper, rng)
        state = replace(state, mu_log=mu_log, lam=lam)
    except Exception as exc:
        raise InferenceError(f"hyperprior block failed: {exc}") from exc

    if check_invariants:
        state.validate(space)
    return SweepResult(
        state=state,
        log_marginal=log_marginal,
        mh_accepted=accepted,
        n_empty_regimes=n_empty_regimes,
        n_empty_scenarios=n_empty_scenarios,
    )


def _length_groups(dataset: Dataset) -> list[list[int]]:
    """Indices of trajectories grouped by length (batched forward-backward)."""
    groups: dict[int, list[int]] = {}
    for d, traj in enumerate(dataset.trajectories):
        groups.setdefault(traj.length, []).append(d)
    return [groups[length] for length in sorted(groups)]


@dataclass
class PosteriorSamples:
    """Retained post-burn-in draws plus run diagnostics."""

    space: JointStateSpace
    pi: np.ndarray  # (m, |Z|, |Z|)
    theta: np.ndarray  # (m, K_B, 5)
    sigma2: np.ndarray  # (m, K_B)
    mu_x: np.ndarray  # (m, K_S, 3)
    lambda_x: np.ndarray  # (m, K_S, 3, 3)
    log_marginal: np.ndarray  # (m,)
    state_votes: list  # per trajectory, (T, |Z|) counts over retained draws
    traj_ids: list
    acceptance_rates: np.ndarray  # (K_B,) post-burn-in MH acceptance
    loglik_trace: np.ndarray  # (m1 + m2,)
    n_empty_regime_events: int
    n_empty_scenario_events: int
    proposal_scales: np.ndarray
    latent_mode: str
    seed: int

    @property
    def n_draws(self) -> int:
        return self.pi.shape[0]

    def theta_mean(self) -> np.ndarray:
        return self.theta.mean(axis=0)

    def theta_std(self) -> np.ndarray:
        return self.theta.std(axis=0)

    def mode_states(self) -> list[np.ndarray]:
        """Posterior-mode flat state per step, from the retained-draw votes."""
        return [np.argmax(votes, axis=1) for votes in self.state_votes]

    def mode_fractions(self) -> list[np.ndarray]:
        return [
            votes.max(axis=1) / votes.sum(axis=1) for votes in self.state_votes
        ]


def initialize_state(
    dataset: Dataset,
    hyper: Hyperparams,
    space: JointStateSpace,
    rng: np.random.Generator,
) -> ModelState:
    """Prior-mean hyperpriors, prior draws for everything else, and chains
    set to the per-step argmax of the initial evidence."""
    mu_log = np.log(hyper.mu0)
    lam = hyper.nu0 * np.linalg.inv(hyper.w0)
    theta = np.exp(
        np.stack(
            [sample_mvn_from_precision(mu_log, lam, rng) for _ in range(space.n_regimes)]
        )
    )
    sigma2 = np.array(
        [
            sample_inverse_gamma(InverseGammaParams(hyper.gamma_a, hyper.gamma_b), rng)
            for _ in range(space.n_regimes)
        ]
    )
    if space.size == 1:
        pi = np.ones((1, 1))
    else:
        conc = hyper.row_concentration(space)
        pi = np.stack([sample_dirichlet(conc, rng) for _ in range(space.size)])
    prior_x = NormalWishartParams(
        mean=hyper.mu_x0,
        kappa=hyper.kappa_x0,
        dof=hyper.nu_x0,
        scale=np.linalg.inv(hyper.w_x0),
    )
    mu_x = np.empty((space.n_scenarios, 3))
    lambda_x = np.empty((space.n_scenarios, 3, 3))
    for k in range(space.n_scenarios):
        mu_x[k], lambda_x[k] = sample_normal_wishart(prior_x, rng)
    state = ModelState(
        pi=pi,
        theta=theta,
        sigma2=sigma2,
        mu_x=mu_x,
        lambda_x=lambda_x,
        mu_log=mu_log,
        lam=lam,
        chains=[np.zeros(t.length, dtype=np.int64) for t in dataset.trajectories],
    )
    tables = compute_local_evidence(dataset, state, space)
    state.chains = [np.argmax(table, axis=1) for table in tables]
    return state


def run_chain(
    dataset: Dataset,
    hyper: Hyperparams,
    space: JointStateSpace,
    seed: int,
    init_strategy: str = "prior",
) -> PosteriorSamples:
    """Run one MCMC chain: burn-in (with optional proposal adaptation),
    then retain every ``thinning``-th of the following draws."""
    if init_strategy != "prior":
        raise InvalidArgumentError(f"unknown init strategy {init_strategy!r}")
    if dataset.standardizer is None:
        dataset = fit_standardizer(dataset)
    rng = make_rng(seed)
    state = initialize_state(dataset, hyper, space, rng)

    m1, m2 = hyper.n_burn_in, hyper.n_samples
    n_retained = (m2 + hyper.thinning - 1) // hyper.thinning
    pi_draws = np.empty((n_retained, space.size, space.size))
    theta_draws = np.empty((n_retained, space.n_regimes, 5))
    sigma2_draws = np.empty((n_retained, space.n_regimes))
    mu_x_draws = np.empty((n_retained, space.n_scenarios, 3))
    lambda_x_draws = np.empty((n_retained, space.n_scenarios, 3, 3))
    loglik_draws = np.empty(n_retained)
    votes = [
        np.zeros((t.length, space.size), dtype=np.int64) for t in dataset.trajectories
    ]
    trace = np.empty(m1 + m2)
    log_scales = np.zeros(space.n_regimes)
    accept_count = np.zeros(space.n_regimes)
    decided_count = np.zeros(space.n_regimes)
    empty_regime_events = 0
    empty_scenario_events = 0

    # Proposal adaptation (burn-in only): a Robbins-Monro scalar scale per
    # regime, plus a covariance shape re-estimated from a sliding window of
    # recent burn-in draws.  The window (rather than the full history) keeps
    # the proposal elongated along the ridge the chain is currently
    # traversing, which is what limits mixing for correlated parameters.
    base_chol = np.linalg.cholesky(hyper.resolved_proposal_cov())
    chols = np.tile(base_chol, (space.n_regimes, 1, 1))
    window = 300
    theta_window = np.zeros((window, space.n_regimes, 5))
    n_hist = 0
    adapt_start = min(50, max(1, m1 // 4))

    kept = 0
    for sweep in range(1, m1 + m2 + 1):
        try:
            result = gibbs_sweep(
                dataset,
                state,
                hyper,
                space,
                rng,
                proposal_scales=np.exp(log_scales),
                proposal_chols=chols,
                check_invariants=(sweep % 50 == 1),
            )
        except InferenceError as exc:
            raise InferenceError(f"sweep {sweep}: {exc}") from exc
        state = result.state
        trace[sweep - 1] = result.log_marginal
        empty_regime_events += result.n_empty_regimes
        empty_scenario_events += result.n_empty_scenarios

        decided = ~np.isnan(result.mh_accepted)
        if sweep <= m1:
            if hyper.adapt_proposal:
                # The floor keeps the scale responsive late in burn-in, when
                # the covariance shape is still being re-estimated; all
                # adaptation is frozen after burn-in.
                step = max(2.0 / sweep**0.6, 0.05)
                delta = np.where(
                    decided, result.mh_accepted - hyper.target_accept, 0.0
                )
                log_scales += step * np.nan_to_num(delta)
                theta_window[n_hist % window] = (
                    np.log(state.theta) if hyper.log_space_proposal else state.theta
                )
                n_hist += 1
                if sweep >= adapt_start and sweep % 5 == 0:
                    recent = theta_window[: min(n_hist, window)]
                    for k in range(space.n_regimes):
                        # 2.38^2/d is the classic random-walk optimum; a
                        # small diagonal ridge keeps the proposal full-rank
                        # while the window is still short.
                        cov_k = np.cov(recent[:, k, :], rowvar=False)
                        cand = (2.38**2 / 5.0) * cov_k + 1e-6 * np.diag(
                            np.diag(base_chol @ base_chol.T)
                        )
                        try:
                            chols[k] = np.linalg.cholesky(cand)
                        except np.linalg.LinAlgError:
                            chols[k] = base_chol
        else:
            accept_count[decided] += result.mh_accepted[decided]
            decided_count[decided] += 1.0
            offset = sweep - m1 - 1
            if offset % hyper.thinning == 0:
                pi_draws[kept] = state.pi
                theta_draws[kept] = state.theta
                sigma2_draws[kept] = state.sigma2
                mu_x_draws[kept] = state.mu_x
                lambda_x_draws[kept] = state.lambda_x
                loglik_draws[kept] = result.log_marginal
                for d, chain in enumerate(state.chains):
                    votes[d][np.arange(chain.shape[0]), chain] += 1
                kept += 1

    with np.errstate(invalid="ignore"):
        rates = np.where(decided_count > 0, accept_count / decided_count, np.nan)
    return PosteriorSamples(
        space=space,
        pi=pi_draws[:kept],
        theta=theta_draws[:kept],
        sigma2=sigma2_draws[:kept],
        mu_x=mu_x_draws[:kept],
        lambda_x=lambda_x_draws[:kept],
        log_marginal=loglik_draws[:kept],
        state_votes=votes,
        traj_ids=[t.traj_id for t in dataset.trajectories],
        acceptance_rates=rates,
        loglik_trace=trace,
        n_empty_regime_events=empty_regime_events,
        n_empty_scenario_events=empty_scenario_events,
        proposal_scales=np.exp(log_scales),
        latent_mode=hyper.latent_mode,
        seed=seed,
    )


def merge_chains(samples_list: list) -> PosteriorSamples:
    """Pool retained draws and state votes from several chains."""
    if not samples_list:
        raise InvalidArgumentError("need at least one chain to merge")
    first = samples_list[0]
    if len(samples_list) == 1:
        return first
    votes = [v.copy() for v in first.state_votes]
    for other in samples_list[1:]:
        if other.space != first.space:
            raise InvalidArgumentError("chains were run on different state spaces")
        for mine, theirs in zip(votes, other.state_votes):
            mine += theirs
    with np.errstate(invalid="ignore"):
        rates = np.nanmean(
            np.stack([s.acceptance_rates for s in samples_list]), axis=0
        )
    return PosteriorSamples(
        space=first.space,
        pi=np.concatenate([s.pi for s in samples_list]),
        theta=np.concatenate([s.theta for s in samples_list]),
        sigma2=np.concatenate([s.sigma2 for s in samples_list]),
        mu_x=np.concatenate([s.mu_x for s in samples_list]),
        lambda_x=np.concatenate([s.lambda_x for s in samples_list]),
        log_marginal=np.concatenate([s.log_marginal for s in samples_list]),
        state_votes=votes,
        traj_ids=first.traj_ids,
        acceptance_rates=rates,
        loglik_trace=np.concatenate([s.loglik_trace for s in samples_list]),
        n_empty_regime_events=sum(s.n_empty_regime_events for s in samples_list),
        n_empty_scenario_events=sum(s.n_empty_scenario_events for s in samples_list),
        proposal_scales=first.proposal_scales,
        latent_mode=first.latent_mode,
        seed=first.seed,
    )


# ---------------------------------------------------------------------------
# On-disk artifacts
# ---------------------------------------------------------------------------


def write_samples_ndjson(samples: PosteriorSamples, path) -> None:
    """One JSON record per retained draw; deterministic byte-for-byte."""
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for i in range(samples.n_draws):
            record = {
                "pi": samples.pi[i].ravel().tolist(),
                "theta": samples.theta[i].tolist(),
                "sigma2": samples.sigma2[i].tolist(),
                "mu_x": samples.mu_x[i].tolist(),
                "lambda_x": samples.lambda_x[i].tolist(),
                "log_marginal": float(samples.log_marginal[i]),
            }
            handle.write(json.dumps(record, sort_keys=True))
            handle.write("\n")


def read_samples_ndjson(path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    if not records:
        raise InvalidArgumentError(f"{path}: no posterior samples found")
    return records


def write_segmentation_csv(samples: PosteriorSamples, dataset: Dataset, path) -> None:
    """Posterior-mode joint states per step: traj_id,t,k_B,k_S,gamma_max."""
    modes = samples.mode_states()
    fractions = samples.mode_fractions()
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write("traj_id,t,k_B,k_S,gamma_max\n")
        for traj, mode, frac in zip(dataset.trajectories, modes, fractions):
            for step in range(mode.shape[0]):
                k_b, k_s = samples.space.state_pair(int(mode[step]))
                handle.write(
                    "%s,%.12g,%d,%d,%.12g\n"
                    % (traj.traj_id, step * traj.dt, k_b, k_s, frac[step])
                )


def write_diagnostics_json(samples: PosteriorSamples, path, extra: dict | None = None) -> None:
    payload = {
        "seed": samples.seed,
        "latent_mode": samples.latent_mode,
        "acceptance_rates": [
            None if np.isnan(v) else float(v) for v in samples.acceptance_rates
        ],
        "proposal_scales": samples.proposal_scales.tolist(),
        "log_marginal_trace": samples.loglik_trace.tolist(),
        "n_empty_regime_events": samples.n_empty_regime_events,
        "n_empty_scenario_events": samples.n_empty_scenario_events,
        "n_draws": samples.n_draws,
    }
    if extra:
        payload.update(extra)
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")
