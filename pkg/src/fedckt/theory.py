"""Closed-form theory for the hierarchical linear-regression model and its
brute-force verification.

Generative model: a global parameter theta (uniform on a bounded box as the
flat-prior stand-in), per-client truths w_k = theta + zeta_k with
zeta_k ~ N(0, upsilon_k^2 I), designs with X_k' X_k = beta I, observations
y_k = X_k w_k + z_k with z_k ~ N(0, sigma^2 I), and a public design with
P' P = nu I.

The closed-form regularization weight and distillation weights are

    lambda_k* = sigma^2 / (upsilon_k^2 nu)
    alpha_{k,i}* = B_k / (sigma^2 + beta upsilon_i^2)   for every i in [K]
    A_k = (sum_{i != k} 1/(sigma^2 + beta upsilon_i^2))^{-1}
    B_k = A_k (sigma^2 + beta upsilon_k^2) / (sigma^2 + A_k + beta upsilon_k^2)

With these, the ridge/co-distillation minimizer reproduces the exact
posterior mean of w_k given every client's least-squares estimate, and the
weights sum to 1. (The B_k denominator is written additively here; the
multiplicative variant seen elsewhere fails a dimensional check and makes
the posterior coefficients sum away from 1 — see tests for the brute-force
cross-check.)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, NumericError
from .rng import substream

THETA_BOX = 10.0  # flat-prior stand-in: theta ~ Uniform(-THETA_BOX, THETA_BOX)^d


@dataclass(frozen=True)
class BayesLinRegTask:
    """One realization of the generative model, with designs structured so
    X_k' X_k = beta I and P' P = nu I hold exactly (checked to 1e-8)."""

    dim: int
    num_clients: int
    sigma: float
    upsilon: np.ndarray  # (K,)
    beta: float
    nu: float
    n_samples: int
    theta: np.ndarray  # (d,)
    true_w: np.ndarray  # (K, d)
    designs: np.ndarray  # (K, n, d)
    targets: np.ndarray  # (K, n)
    public_design: np.ndarray  # (d, d)

    def __post_init__(self):
        for k in range(self.num_clients):
            gram = self.designs[k].T @ self.designs[k]
            if not np.allclose(gram, self.beta * np.eye(self.dim), atol=1e-8):
                raise ConfigurationError("X_k' X_k must equal beta I")
        gram = self.public_design.T @ self.public_design
        if not np.allclose(gram, self.nu * np.eye(self.dim), atol=1e-8):
            raise ConfigurationError("P' P must equal nu I")


@dataclass(frozen=True)
class ClosedForm:
    lambda_star: float
    alpha_star: np.ndarray  # (K,), includes the self weight
    a_k: float
    b_k: float


@dataclass(frozen=True)
class OracleResult:
    best_lambda: float
    best_alpha: np.ndarray
    best_loss: float
    closed_form_loss: float


def _orthonormal_frame(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(rows, cols)))
    return q[:, :cols]


def gen_task(
    dim: int,
    num_clients: int,
    sigma: float,
    upsilon,
    beta: float,
    nu: float,
    n_samples: int,
    seed: int,
) -> BayesLinRegTask:
    upsilon = np.asarray(upsilon, dtype=np.float64)
    if n_samples < dim:
        raise ConfigurationError("need n_samples >= dim for full-rank designs")
    if not (sigma > 0 and beta > 0 and nu > 0):
        raise ConfigurationError("sigma, beta, nu must be positive")
    if upsilon.shape != (num_clients,) or np.any(upsilon < 0):
        raise ConfigurationError("upsilon must be K non-negative values")
    rng = substream(seed, "bayes-task")
    theta = rng.uniform(-THETA_BOX, THETA_BOX, dim)
    zeta = rng.normal(size=(num_clients, dim)) * upsilon[:, None]
    true_w = theta + zeta
    designs = np.empty((num_clients, n_samples, dim))
    targets = np.empty((num_clients, n_samples))
    for k in range(num_clients):
        designs[k] = np.sqrt(beta) * _orthonormal_frame(rng, n_samples, dim)
        noise = rng.normal(0.0, sigma, n_samples)
        targets[k] = designs[k] @ true_w[k] + noise
    public_design = np.sqrt(nu) * _orthonormal_frame(rng, dim, dim)
    return BayesLinRegTask(
        dim=dim,
        num_clients=num_clients,
        sigma=sigma,
        upsilon=upsilon,
        beta=beta,
        nu=nu,
        n_samples=n_samples,
        theta=theta,
        true_w=true_w,
        designs=designs,
        targets=targets,
        public_design=public_design,
    )


def ols_estimate(task: BayesLinRegTask, k: int) -> np.ndarray:
    """Least-squares estimate of client k's parameters."""
    solution, _, rank, _ = np.linalg.lstsq(task.designs[k], task.targets[k], rcond=None)
    if rank < task.dim:
        raise NumericError(f"design of client {k} is rank-deficient")
    return solution


def all_ols(task: BayesLinRegTask) -> np.ndarray:
    return np.stack([ols_estimate(task, k) for k in range(task.num_clients)])


def ridge_codistill_solve(
    xtx: np.ndarray,
    ptp: np.ndarray,
    what_k: np.ndarray,
    lam: float,
    alpha: np.ndarray,
    what_all: np.ndarray,
) -> np.ndarray:
    """General-matrix minimizer of the ridge/co-distillation objective:
    (X'X + lam P'P)^{-1} (X'X what_k + lam P'P sum_i alpha_i what_i)."""
    mixed = np.asarray(alpha) @ what_all
    lhs = xtx + lam * ptp
    rhs = xtx @ what_k + lam * (ptp @ mixed)
    try:
        solution = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"singular ridge system (lambda={lam})") from exc
    if not np.all(np.isfinite(solution)):
        raise NumericError(f"non-finite ridge solution (lambda={lam})")
    return solution


def ridge_codistill_minimizer(
    task: BayesLinRegTask,
    k: int,
    lam: float,
    alpha: np.ndarray,
    what_all: np.ndarray | None = None,
) -> np.ndarray:
    if what_all is None:
        what_all = all_ols(task)
    xtx = task.designs[k].T @ task.designs[k]
    ptp = task.public_design.T @ task.public_design
    return ridge_codistill_solve(xtx, ptp, what_all[k], lam, alpha, what_all)


def ridge_codistill_scalar(
    task: BayesLinRegTask,
    k: int,
    lam: float,
    alpha: np.ndarray,
    what_all: np.ndarray | None = None,
) -> np.ndarray:
    """Scalar-mixing form of the same minimizer, valid under the beta-I /
    nu-I design structure: (1-rho) what_k + rho sum_i alpha_i what_i with
    rho = lam nu / (beta + lam nu)."""
    if what_all is None:
        what_all = all_ols(task)
    rho = lam * task.nu / (task.beta + lam * task.nu)
    return (1.0 - rho) * what_all[k] + rho * (np.asarray(alpha) @ what_all)


def closed_form_lambda_alpha(task: BayesLinRegTask, k: int) -> ClosedForm:
    """Optimal regularization weight and distillation weights for client k."""
    if task.num_clients < 2:
        raise ConfigurationError("the closed form needs at least two clients")
    s2 = task.sigma**2
    beta = task.beta
    u2 = task.upsilon.astype(np.float64) ** 2
    if u2[k] == 0:
        raise ConfigurationError("lambda* is undefined for upsilon_k = 0")
    others = [1.0 / (s2 + beta * u2[i]) for i in range(task.num_clients) if i != k]
    a_k = 1.0 / sum(others)
    b_k = a_k * (s2 + beta * u2[k]) / (s2 + a_k + beta * u2[k])
    lambda_star = s2 / (u2[k] * task.nu)
    alpha_star = b_k / (s2 + beta * u2)
    return ClosedForm(lambda_star=lambda_star, alpha_star=alpha_star, a_k=a_k, b_k=b_k)


def posterior_moments_scalar(
    task: BayesLinRegTask, k: int, what_all: np.ndarray
) -> tuple[np.ndarray, float]:
    """Posterior mean of w_k given every least-squares estimate, in the
    coefficient (scalar-mixing) form, plus the scalar posterior variance."""
    if task.num_clients < 2:
        raise ConfigurationError("the posterior fusion needs at least two clients")
    s2 = task.sigma**2
    beta = task.beta
    u2 = task.upsilon.astype(np.float64) ** 2
    b = beta * u2[k]
    a_k = 1.0 / sum(
        1.0 / (s2 + beta * u2[i]) for i in range(task.num_clients) if i != k
    )
    coef = (s2 / (s2 + b)) * (
        a_k * (s2 + b) / (s2 + a_k + b)
    ) / (s2 + beta * u2)  # = rho* alpha*_i at the optimum
    coef[k] += b / (s2 + b)
    mean = coef @ what_all
    variance = s2 * (a_k + b) / (beta * (s2 + a_k + b))
    return mean, variance


def posterior_moments_matrix(
    task: BayesLinRegTask, k: int, what_all: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Same posterior from the general matrix definitions (no beta-I
    shortcut): the independent dual path used to verify the scalar form."""
    d = task.dim
    s2 = task.sigma**2
    eye = np.eye(d)
    u2 = task.upsilon.astype(np.float64) ** 2

    def obs_cov(i):
        xtx_inv = np.linalg.inv(task.designs[i].T @ task.designs[i])
        return s2 * xtx_inv + u2[i] * eye

    prec_sum = np.zeros((d, d))
    weighted = np.zeros(d)
    for i in range(task.num_clients):
        if i == k:
            continue
        prec = np.linalg.inv(obs_cov(i))
        prec_sum += prec
        weighted += prec @ what_all[i]
    loo_cov = np.linalg.inv(prec_sum)
    loo_mean = loo_cov @ weighted
    tilde = loo_cov + u2[k] * eye
    own_prec = (task.designs[k].T @ task.designs[k]) / s2
    post_cov = np.linalg.inv(np.linalg.inv(tilde) + own_prec)
    mean = post_cov @ (own_prec @ what_all[k]) + post_cov @ np.linalg.solve(
        tilde, loo_mean
    )
    return mean, post_cov


def bayes_optimal_wk(
    task: BayesLinRegTask, k: int, what_all: np.ndarray | None = None
) -> tuple[np.ndarray, float]:
    """Posterior mean and scalar posterior variance of w_k."""
    if what_all is None:
        what_all = all_ols(task)
    return posterior_moments_scalar(task, k, what_all)


def _mc_noise(num_samples: int, dim: int, seed: int) -> np.ndarray:
    return substream(seed, "mc-noise").normal(size=(num_samples, dim))


def expected_loss_mc(
    task: BayesLinRegTask,
    k: int,
    lam: float,
    alpha: np.ndarray,
    num_samples: int,
    seed: int,
    what_all: np.ndarray | None = None,
    noise: np.ndarray | None = None,
    candidate: np.ndarray | None = None,
) -> float:
    """Monte-Carlo estimate of E ||w_tilde - w_k||^2 with w_k drawn from its
    posterior given the realized least-squares estimates.

    `noise` provides common random numbers across calls; `candidate`
    substitutes an arbitrary vector for the ridge minimizer (used to probe
    the posterior-mean floor).
    """
    if num_samples < 1:
        raise ConfigurationError("num_samples must be >= 1")
    if what_all is None:
        what_all = all_ols(task)
    mean, variance = posterior_moments_scalar(task, k, what_all)
    if candidate is None:
        candidate = ridge_codistill_minimizer(task, k, lam, alpha, what_all)
    if noise is None:
        noise = _mc_noise(num_samples, task.dim, seed)
    samples = mean + np.sqrt(variance) * noise[:num_samples]
    diffs = candidate - samples
    return float(np.mean(np.einsum("ij,ij->i", diffs, diffs)))


def _loss_from_noise_stats(
    candidate: np.ndarray,
    mean: np.ndarray,
    sd: float,
    noise_mean: np.ndarray,
    noise_sq_mean: float,
) -> float:
    """Identical value to the explicit sample average, via the expansion
    mean_s ||delta - sd eps_s||^2 = ||delta||^2 - 2 sd delta.mean(eps) + sd^2 mean||eps||^2."""
    delta = candidate - mean
    return float(delta @ delta - 2.0 * sd * (delta @ noise_mean) + sd * sd * noise_sq_mean)


def simplex_grid(num_weights: int, resolution: int) -> np.ndarray:
    """All weight vectors with entries j/resolution summing to 1."""
    if resolution < 1:
        raise ConfigurationError("resolution must be >= 1")
    rows = [
        np.array(parts, dtype=np.float64) / resolution
        for parts in _compositions(resolution, num_weights)
    ]
    return np.stack(rows)


def _compositions(total: int, parts: int):
    if parts == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def lambda_grid_around(center: float, points: int, span: float) -> np.ndarray:
    """Geometric grid of `points` values covering [center/span, center*span]."""
    if points < 1 or span <= 1:
        raise ConfigurationError("need points >= 1 and span > 1")
    return center * np.exp(np.linspace(-np.log(span), np.log(span), points))


def grid_search_oracle(
    task: BayesLinRegTask,
    k: int,
    lambda_grid: np.ndarray,
    alpha_grid: np.ndarray,
    num_samples: int,
    seed: int,
) -> OracleResult:
    """Exhaustive MC loss evaluation over the (lambda, alpha) product grid
    with common random numbers, compared against the closed form."""
    if len(lambda_grid) == 0 or len(alpha_grid) == 0:
        raise ConfigurationError("grids must be non-empty")
    what_all = all_ols(task)
    mean, variance = posterior_moments_scalar(task, k, what_all)
    sd = float(np.sqrt(variance))
    noise = _mc_noise(num_samples, task.dim, seed)
    noise_mean = noise.mean(axis=0)
    noise_sq_mean = float(np.mean(np.einsum("ij,ij->i", noise, noise)))

    xtx = task.designs[k].T @ task.designs[k]
    ptp = task.public_design.T @ task.public_design

    best = (np.inf, None, None)
    for lam in lambda_grid:
        for alpha in alpha_grid:
            candidate = ridge_codistill_solve(xtx, ptp, what_all[k], lam, alpha, what_all)
            loss = _loss_from_noise_stats(candidate, mean, sd, noise_mean, noise_sq_mean)
            if loss < best[0]:
                best = (loss, float(lam), np.array(alpha))

    closed = closed_form_lambda_alpha(task, k)
    closed_candidate = ridge_codistill_solve(
        xtx, ptp, what_all[k], closed.lambda_star, closed.alpha_star, what_all
    )
    closed_loss = _loss_from_noise_stats(
        closed_candidate, mean, sd, noise_mean, noise_sq_mean
    )
    return OracleResult(
        best_lambda=best[1],
        best_alpha=best[2],
        best_loss=best[0],
        closed_form_loss=closed_loss,
    )


# ---------------------------------------------------------------------------
# Linear-regression toy: three clients, two similar and one outlier.
# ---------------------------------------------------------------------------

TOY_SIGMAS = (2.0, 5.0, 200.0)  # per-client spread (std dev) of zeta
TOY_LAMBDA = 50.0
TOY_INPUT_RANGE = 10.0
_TOY_CLUSTERS = ((0.5, 0.5, 0.0), (0.5, 0.5, 0.0), (0.0, 0.0, 1.0))
_TOY_UNIFORM = (1 / 3, 1 / 3, 1 / 3)


@dataclass(frozen=True)
class ToySolution:
    kind: str
    weights: np.ndarray
    distance: float


@dataclass(frozen=True)
class ToyClientReport:
    client: int
    true_w: np.ndarray
    solutions: tuple[ToySolution, ...]

    def distance(self, kind: str) -> float:
        for sol in self.solutions:
            if sol.kind == kind:
                return sol.distance
        raise KeyError(kind)


def run_toy_example(
    seed: int,
    sigmas=TOY_SIGMAS,
    lam: float = TOY_LAMBDA,
    n_samples: int = 40,
    n_public: int = 40,
) -> list[ToyClientReport]:
    """Three-client linear-regression toy: the pair 0/1 is similar, client 2
    is an outlier. Compares pooled least squares against co-distillation with
    uniform weights and with cluster-restricted weights.

    Observations are noiseless, so each least-squares estimate recovers the
    true client model and all differences come from the regularizer.
    """
    rng = substream(seed, "toy")
    dim = 2
    theta = rng.uniform(-TOY_INPUT_RANGE, TOY_INPUT_RANGE, dim)
    true_w = np.stack([theta + rng.normal(0.0, s, dim) for s in sigmas])
    x = rng.uniform(-TOY_INPUT_RANGE, TOY_INPUT_RANGE, (n_samples, dim))
    public = rng.uniform(-TOY_INPUT_RANGE, TOY_INPUT_RANGE, (n_public, dim))
    targets = true_w @ x.T  # (3, n), noiseless

    what = np.stack(
        [np.linalg.lstsq(x, targets[k], rcond=None)[0] for k in range(3)]
    )

    # pooled least squares over all clients' data (shared design)
    stacked_x = np.vstack([x] * 3)
    stacked_y = np.concatenate([targets[k] for k in range(3)])
    fedavg = np.linalg.lstsq(stacked_x, stacked_y, rcond=None)[0]

    xtx = x.T @ x
    ptp = public.T @ public
    reports = []
    for k in range(3):
        uniform = ridge_codistill_solve(
            xtx, ptp, what[k], lam, np.array(_TOY_UNIFORM), what
        )
        clustered = ridge_codistill_solve(
            xtx, ptp, what[k], lam, np.array(_TOY_CLUSTERS[k]), what
        )
        sols = tuple(
            ToySolution(kind, w, float(np.linalg.norm(w - true_w[k])))
            for kind, w in (
                ("fedavg", fedavg),
                ("uniform_kt", uniform),
                ("clustered_kt", clustered),
            )
        )
        reports.append(ToyClientReport(client=k, true_w=true_w[k], solutions=sols))
    return reports
