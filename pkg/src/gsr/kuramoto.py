"""Phase-coupled oscillator simulation and dataset generation.

Two clusters of all-to-all coupled oscillators drive every experiment:
training/validation windows come from healthy 2W-step runs, diagnosis
runs switch to a perturbed coupling matrix after 2W steps and continue
for 3W more.  Integration is classic RK4; all randomness flows through
numpy SeedSequences keyed on (seed, stream, index) so datasets are pure
functions of their configuration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * np.pi


@dataclass
class KuramotoConfig:
    """Simulation constants.

    The defaults are calibrated so that, from uniform initial phases,
    the clusters are still partly out of sync after W steps but locked
    by 2W steps (the regime both learning tasks rely on).
    """
    n: int = 8
    omega_mean: float = 3.0
    omega_std: float = 0.2
    k: float = 0.35
    dt: float = 0.01
    W: int = 200
    seed: int = 0
    # sin(phi_j - phi_i) pulls oscillators together ("attractive");
    # "repulsive" flips the sign inside the sine.
    coupling_sign: str = "attractive"

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"need at least 2 oscillators, got n={self.n}")
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.W < 1:
            raise ValueError(f"window length must be >= 1, got W={self.W}")
        if self.k < 0:
            raise ValueError(f"coupling strength must be >= 0, got k={self.k}")
        if self.coupling_sign not in ("attractive", "repulsive"):
            raise ValueError(f"unknown coupling_sign {self.coupling_sign!r}")


@dataclass
class NoiseConfig:
    mu: float = 0.0
    sigma: float = 0.1

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"noise sigma must be >= 0, got {self.sigma}")


@dataclass
class PhaseTrajectory:
    phases: np.ndarray     # (n, T), radians, unwrapped
    omegas: np.ndarray     # (n,)


@dataclass(frozen=True)
class FaultSpec:
    """A structural perturbation applied at the fault step.

    kind is one of "decouple" (zero one node's row/column), "swap"
    (two nodes exchange their entire edge sets), or "explicit" (use the
    given matrix as-is; with the original C this is the healthy case).
    """
    kind: str
    node: int = -1
    pair: tuple = ()
    matrix: np.ndarray | None = field(default=None, compare=False)

    @classmethod
    def decouple(cls, node: int) -> "FaultSpec":
        return cls(kind="decouple", node=int(node))

    @classmethod
    def swap(cls, a: int, b: int) -> "FaultSpec":
        return cls(kind="swap", pair=(int(a), int(b)))

    @classmethod
    def explicit(cls, matrix: np.ndarray) -> "FaultSpec":
        return cls(kind="explicit", matrix=np.array(matrix, dtype=np.float64))


def rng_for(seed: int, *key) -> np.random.Generator:
    """Independent, reproducible stream for (seed, *key)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, key)]))


def validate_coupling(C: np.ndarray, n: int | None = None) -> np.ndarray:
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError(f"coupling matrix must be square, got {C.shape}")
    if n is not None and C.shape[0] != n:
        raise ValueError(f"coupling matrix is {C.shape}, expected {(n, n)}")
    if not np.array_equal(C, C.T):
        raise ValueError("coupling matrix must be symmetric")
    if np.any(np.diag(C) != 0.0):
        raise ValueError("coupling matrix must have a zero diagonal")
    return C


def two_clusters(n: int) -> tuple[np.ndarray, np.ndarray]:
    half = n // 2
    return np.arange(half), np.arange(half, n)


def build_two_cluster_coupling(config: KuramotoConfig) -> np.ndarray:
    """All-to-all coupling of strength k inside each half, none across."""
    if config.n % 2 != 0:
        raise ValueError(f"two-cluster layout needs an even n, got {config.n}")
    C = np.zeros((config.n, config.n))
    for cluster in two_clusters(config.n):
        C[np.ix_(cluster, cluster)] = config.k
    np.fill_diagonal(C, 0.0)
    return C


def perturb_coupling(C: np.ndarray, fault: FaultSpec) -> np.ndarray:
    """Apply a structural fault; symmetry and zero diagonal are preserved."""
    C = validate_coupling(C)
    n = C.shape[0]
    if fault.kind == "decouple":
        if not 0 <= fault.node < n:
            raise ValueError(f"node index {fault.node} out of range for n={n}")
        out = C.copy()
        out[fault.node, :] = 0.0
        out[:, fault.node] = 0.0
        return out
    if fault.kind == "swap":
        a, b = fault.pair
        if not (0 <= a < n and 0 <= b < n) or a == b:
            raise ValueError(f"invalid swap pair {fault.pair} for n={n}")
        if C[a, b] != 0.0:
            raise ValueError(f"nodes {a} and {b} are coupled partners; "
                             "swap requires nodes from different clusters")
        perm = np.arange(n)
        perm[a], perm[b] = b, a
        return C[np.ix_(perm, perm)]
    if fault.kind == "explicit":
        return validate_coupling(fault.matrix, n)
    raise ValueError(f"unknown fault kind {fault.kind!r}")


# ---------------------------------------------------------------------------
# integration

def _rk4(phases: np.ndarray, omegas: np.ndarray, C: np.ndarray,
         steps: int, dt: float, sign: float) -> np.ndarray:
    """Batched RK4: phases (R, n) -> (R, n, steps), column 0 = initial state."""
    R, n = phases.shape

    def deriv(phi):
        diff = phi[:, None, :] - phi[:, :, None]     # diff[r, i, j] = phi_j - phi_i
        return omegas + (C * np.sin(sign * diff)).sum(axis=2)

    out = np.empty((R, n, steps))
    out[:, :, 0] = phases
    phi = phases.copy()
    for t in range(1, steps):
        k1 = deriv(phi)
        k2 = deriv(phi + 0.5 * dt * k1)
        k3 = deriv(phi + 0.5 * dt * k2)
        k4 = deriv(phi + dt * k3)
        phi = phi + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[:, :, t] = phi
    return out


def simulate(config: KuramotoConfig, C: np.ndarray, steps: int,
             initial_phases: np.ndarray, omegas=None, rng=None) -> PhaseTrajectory:
    """Integrate the phase ODE for `steps` recorded states.

    Column t holds the state after t RK4 transitions of length dt
    (column 0 is the initial state).  Intrinsic frequencies are drawn
    once from N(omega_mean, omega_std) unless given explicitly.
    """
    C = validate_coupling(C, config.n)
    phi0 = np.asarray(initial_phases, dtype=np.float64)
    if phi0.shape != (config.n,):
        raise ValueError(f"initial phases must have shape ({config.n},), got {phi0.shape}")
    if omegas is None:
        if rng is None:
            rng = rng_for(config.seed, 9)
        omegas = rng.normal(config.omega_mean, config.omega_std, config.n)
    omegas = np.asarray(omegas, dtype=np.float64)
    sign = 1.0 if config.coupling_sign == "attractive" else -1.0
    phases = _rk4(phi0[None], omegas[None], C, int(steps), config.dt, sign)[0]
    return PhaseTrajectory(phases=phases, omegas=omegas)


def to_signal(traj: PhaseTrajectory) -> np.ndarray:
    """Observable signal: S[i, t] = sin(phase[i, t]), bounded in [-1, 1]."""
    return np.sin(traj.phases)


def add_noise(X: np.ndarray, noise: NoiseConfig, rng) -> np.ndarray:
    """X + iid N(mu, sigma^2); deterministic per generator/seed."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    if noise.sigma == 0.0 and noise.mu == 0.0:
        return X.copy()
    return X + rng.normal(noise.mu, noise.sigma, X.shape)


def order_parameter(phases: np.ndarray, subset) -> float:
    """Magnitude of the mean phase vector over `subset`: 1 = in sync."""
    subset = np.asarray(subset, dtype=np.intp)
    if subset.size == 0:
        raise ValueError("order_parameter needs a non-empty subset")
    return float(np.abs(np.exp(1j * np.asarray(phases)[subset]).mean()))


def mean_cluster_order_parameter(phases_column: np.ndarray, n: int) -> float:
    a, b = two_clusters(n)
    return 0.5 * (order_parameter(phases_column, a) + order_parameter(phases_column, b))


# ---------------------------------------------------------------------------
# datasets

def _draw_initial(config: KuramotoConfig, stream: int, count: int):
    """Per-run initial phases and frequencies, one rng stream per run."""
    phi0 = np.empty((count, config.n))
    omegas = np.empty((count, config.n))
    for i in range(count):
        rng = rng_for(config.seed, stream, i)
        phi0[i] = rng.uniform(0.0, TWO_PI, config.n)
        omegas[i] = rng.normal(config.omega_mean, config.omega_std, config.n)
    return phi0, omegas


def make_training_dataset(config: KuramotoConfig, C: np.ndarray, runs: int):
    """Simulate `runs` healthy 2W-step runs; split each into train/val halves.

    Training windows are columns [0, W), validation windows the
    contiguous columns [W, 2W) of the same run.
    """
    if runs < 1:
        raise ValueError(f"need at least one run, got {runs}")
    C = validate_coupling(C, config.n)
    phi0, omegas = _draw_initial(config, 0, runs)
    sign = 1.0 if config.coupling_sign == "attractive" else -1.0
    phases = _rk4(phi0, omegas, C, 2 * config.W, config.dt, sign)
    signals = np.sin(phases)
    train = [np.ascontiguousarray(signals[i, :, :config.W]) for i in range(runs)]
    val = [np.ascontiguousarray(signals[i, :, config.W:]) for i in range(runs)]
    return train, val


def make_diagnosis_run(config: KuramotoConfig, C: np.ndarray, fault: FaultSpec,
                       run_index: int = 0):
    """A 5W-step run whose coupling switches to the perturbed matrix at
    step 2W; phases are continuous across the switch.

    Initial conditions depend only on (seed, run_index), not on the
    fault, so different fault cases share their pre-fault trajectory.
    Returns (signal (n, 5W), C, C_perturbed).
    """
    C = validate_coupling(C, config.n)
    C_hat = perturb_coupling(C, fault)
    phi0, omegas = _draw_initial(config, 1, run_index + 1)
    phi0, omegas = phi0[run_index:], omegas[run_index:]
    sign = 1.0 if config.coupling_sign == "attractive" else -1.0
    W = config.W
    healthy = _rk4(phi0, omegas, C, 2 * W, config.dt, sign)
    # continue from the state at column 2W-1; transitions from here use C_hat
    faulty = _rk4(healthy[:, :, -1], omegas, C_hat, 3 * W + 1, config.dt, sign)
    phases = np.concatenate([healthy, faulty[:, :, 1:]], axis=2)[0]
    return np.sin(phases), C, C_hat
