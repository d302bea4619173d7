"""Self-supervised training of the graph models, plus baselines and the
validation metrics.

Every configuration trains the same denoiser; they differ only in where
the adjacency comes from:

  reference    learned static N x N parameter block
  observation  learned TCN + dot-product similarity, per window
  true         the ground-truth coupling structure (rescaled)
  correlation  mean absolute Pearson correlation over training windows
  features     dot-product similarity of the raw, untransformed window

Per epoch the dataset is shuffled, each batch is corrupted with fresh
Gaussian noise, the denoiser reconstructs the clean windows from the
noisy ones and the generated adjacency, and Adam minimizes the MSE.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import models as md
from .diffcore import ParameterStore, Tensor
from .kuramoto import NoiseConfig, rng_for

CONFIGURATIONS = ("true", "reference", "correlation", "observation", "features")

# (goal, generator trains?, adjacency is per-window?, denoiser prefix)
_KIND_INFO = {
    "true": ("ref", False, False, "dref"),
    "reference": ("ref", True, False, "dref"),
    "correlation": ("ref", False, False, "dref"),
    "observation": ("obs", True, True, "dobs"),
    "features": ("obs", False, True, "dobs"),
}


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 0.001
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    seed: int = 0
    model_kind: str = "reference"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.model_kind not in CONFIGURATIONS:
            raise ValueError(f"unknown model_kind {self.model_kind!r}")


@dataclass
class TrainResult:
    store: ParameterStore
    epoch_losses: list[float]
    kind: str
    denoiser_prefix: str


def _tune_allocator():
    """Keep big scratch blocks on the heap instead of mmap round trips."""
    try:
        import ctypes
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(-3, 1 << 30)      # M_MMAP_THRESHOLD
    except Exception:
        pass


# ---------------------------------------------------------------------------
# baseline adjacency sources

def baseline_true(C: np.ndarray) -> np.ndarray:
    """Ground-truth structure rescaled to its own maximum."""
    C = np.asarray(C, dtype=np.float64)
    peak = C.max()
    return C / peak if peak > 0 else np.zeros_like(C)


def baseline_correlation(train: list[np.ndarray]) -> np.ndarray:
    """Mean absolute Pearson correlation across training windows.

    Pairs involving a zero-variance series contribute 0; the diagonal
    is zeroed.
    """
    if len(train) < 1:
        raise ValueError("correlation baseline needs at least one window")
    acc = np.zeros((train[0].shape[0],) * 2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for X in train:
            r = np.corrcoef(X)            # nan wherever a series is constant
            acc += np.abs(np.nan_to_num(r, nan=0.0))
    acc /= len(train)
    np.fill_diagonal(acc, 0.0)
    return acc


def baseline_features(X: np.ndarray) -> np.ndarray:
    """Observation pipeline with the TCN replaced by the identity."""
    with dc.no_grad():
        return md.postprocess(dc.gram(Tensor(X)), "sigmoid").data


# ---------------------------------------------------------------------------
# adjacency providers used inside the training loop

class _Provider:
    """Yields the adjacency for a batch of clean windows."""

    def __init__(self, kind: str, model: md.ModelConfig, C, train_set):
        self.kind = kind
        self.model = model
        if kind == "true":
            if C is None:
                raise ValueError("the 'true' configuration needs the coupling matrix")
            self.static = baseline_true(C)
        elif kind == "correlation":
            self.static = baseline_correlation(train_set)
        else:
            self.static = None

    def init_params(self, store: ParameterStore, n: int, rng) -> None:
        if self.kind == "reference":
            md.init_reference_params(store, n)
        elif self.kind == "observation":
            md.init_tcn_params(store, "gobs.tcn", self.model.tcn, rng)

    def adjacency(self, X_clean: np.ndarray, store: ParameterStore,
                  training: bool, rng) -> Tensor:
        if self.kind == "reference":
            return md.gen_reference(store)
        if self.kind == "observation":
            return md.gen_observation(Tensor(X_clean), store, "gobs",
                                      self.model.tcn, training, rng)
        if self.kind == "features":
            return Tensor(np.stack([baseline_features(x) for x in X_clean])
                          if X_clean.ndim == 3 else baseline_features(X_clean))
        return Tensor(self.static)


def train(dataset: list[np.ndarray], config: TrainConfig,
          model: md.ModelConfig | None = None, coupling=None) -> TrainResult:
    """Run the training loop for one configuration; returns the trained
    parameters and per-epoch mean losses.  Bit-reproducible per seed."""
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    _tune_allocator()
    model = model or md.ModelConfig()
    kind = config.model_kind
    _, _, _, dprefix = _KIND_INFO[kind]
    kind_idx = CONFIGURATIONS.index(kind)

    X_all = np.stack(dataset)                      # (R, N, W)
    n = X_all.shape[1]
    provider = _Provider(kind, model, coupling, dataset)

    init_rng = rng_for(config.seed, 2, kind_idx)
    shuffle_rng = rng_for(config.seed, 3, kind_idx)
    noise_rng = rng_for(config.seed, 4, kind_idx)
    drop_rng = rng_for(config.seed, 5, kind_idx)

    store = ParameterStore()
    provider.init_params(store, n, init_rng)
    md.init_denoiser_params(store, dprefix, model, init_rng)
    adam = dc.AdamState(store, learning_rate=config.learning_rate)

    order = np.arange(len(dataset))
    mu, sigma = config.noise.mu, config.noise.sigma
    epoch_losses = []
    for _ in range(config.epochs):
        shuffle_rng.shuffle(order)
        batch_losses = []
        for lo in range(0, len(order), config.batch_size):
            Xb = X_all[order[lo:lo + config.batch_size]]
            Xn = Xb + noise_rng.normal(mu, sigma, Xb.shape)
            A = provider.adjacency(Xb, store, True, drop_rng)
            Xhat = md.denoise(Tensor(Xn), A, store, dprefix, model, True, drop_rng)
            loss = dc.mse_loss(Xhat, Tensor(Xb))
            dc.backward(loss)
            dc.adam_step(store, adam)
            batch_losses.append(float(loss.data))
        epoch_losses.append(float(np.mean(batch_losses)))
    return TrainResult(store=store, epoch_losses=epoch_losses,
                       kind=kind, denoiser_prefix=dprefix)


# ---------------------------------------------------------------------------
# metrics

def adjacency_error(A: np.ndarray, C: np.ndarray) -> float:
    """Mean absolute difference between the min-max rescaled off-diagonal
    of A and the binarized coupling structure; diagonal masked out."""
    A = np.asarray(A, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    if A.shape != C.shape:
        raise ValueError(f"adjacency {A.shape} vs coupling {C.shape}")
    off = ~np.eye(A.shape[0], dtype=bool)
    a = A[off]
    lo, hi = a.min(), a.max()
    scaled = (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)
    target = (C[off] != 0).astype(np.float64)
    return float(np.abs(scaled - target).mean())


def evaluate_adjacency(result: TrainResult, kind: str, val: list[np.ndarray],
                       C: np.ndarray, model: md.ModelConfig,
                       train_set=None) -> float:
    """Configuration-appropriate adjacency error (averaged over windows
    for the dynamic configurations)."""
    if kind == "true":
        return adjacency_error(baseline_true(C), C)
    if kind == "correlation":
        return adjacency_error(baseline_correlation(train_set), C)
    if kind == "reference":
        with dc.no_grad():
            return adjacency_error(md.gen_reference(result.store).data, C)
    if kind == "features":
        return float(np.mean([adjacency_error(baseline_features(X), C) for X in val]))
    with dc.no_grad():
        errs = [adjacency_error(
            md.gen_observation(Tensor(X), result.store, "gobs", model.tcn).data, C)
            for X in val]
    return float(np.mean(errs))


def reconstruction_error(result: TrainResult, dataset: list[np.ndarray],
                         noise: NoiseConfig, seed: int,
                         model: md.ModelConfig, coupling=None,
                         train_set=None) -> float:
    """Mean over the dataset of MSE(denoised, clean), dropout off,
    fixed noise stream per seed."""
    provider = _Provider(result.kind, model, coupling, train_set)
    rng = rng_for(seed, 6)
    errs = []
    with dc.no_grad():
        for X in dataset:
            Xn = X + rng.normal(noise.mu, noise.sigma, X.shape)
            A = provider.adjacency(X, result.store, False, None)
            Xhat = md.denoise(Tensor(Xn), A, result.store,
                              result.denoiser_prefix, model, False, None)
            errs.append(float(np.mean((Xhat.data - X) ** 2)))
    return float(np.mean(errs))
