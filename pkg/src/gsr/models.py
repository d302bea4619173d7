"""Graph generators and the graph-TCN denoiser.

Two generators produce adjacency matrices: the reference generator
directly optimizes an N x N parameter block (static, input independent),
while the observation generator runs a shared temporal convolutional
network over each node's series and takes pairwise dot products of the
transformed series.  Both outputs pass through the same postprocessing:
activation, symmetrization, zero diagonal, symmetric degree
normalization.

The denoiser stacks graph layers that aggregate neighbor features via
the adjacency (no self-loops) and transform them with a per-layer shared
TCN; hidden layers keep an identity skip, the output layer does not, so
reconstruction is forced through the adjacency.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import ParameterStore, Tensor


@dataclass
class TCNConfig:
    kernel_size: int = 7
    hidden_channels: int = 8
    levels: int = 4               # dilations 1, 2, 4, ..., 2^(levels-1)
    dropout_p: float = 0.5

    def __post_init__(self):
        if self.kernel_size < 2:
            raise ValueError(f"kernel_size must be >= 2, got {self.kernel_size}")
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")


@dataclass
class ModelConfig:
    tcn: TCNConfig = field(default_factory=TCNConfig)
    depth: int = 2                # denoiser graph layers (hidden + output)

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")


def tcn_channels(config: TCNConfig) -> list[int]:
    """Per-block channel counts: single channel in and out, hidden width
    between blocks."""
    c = [1] + [config.hidden_channels] * (config.levels - 1) + [1]
    return c


def init_tcn_params(store: ParameterStore, prefix: str, config: TCNConfig,
                    rng: np.random.Generator) -> None:
    """Register one TCN's kernels and biases under `prefix`.

    Weights are uniform with fan-in scaling; biases start at zero.
    """
    K = config.kernel_size
    chans = tcn_channels(config)
    for i in range(config.levels):
        cin, cout = chans[i], chans[i + 1]
        for tag, (ci, co, kk) in (("conv1", (cin, cout, K)), ("conv2", (cout, cout, K))):
            bound = 1.0 / np.sqrt(ci * kk)
            store.add(f"{prefix}.b{i}.{tag}.w", rng.uniform(-bound, bound, (co, ci, kk)))
            store.add(f"{prefix}.b{i}.{tag}.b", np.zeros(co))
        if cin != cout:
            bound = 1.0 / np.sqrt(cin)
            store.add(f"{prefix}.b{i}.down.w", rng.uniform(-bound, bound, (cout, cin, 1)))
            store.add(f"{prefix}.b{i}.down.b", np.zeros(cout))


def tcn_forward(series: Tensor, store: ParameterStore, prefix: str,
                config: TCNConfig, training: bool = False, rng=None) -> Tensor:
    """Apply the TCN to univariate series, preserving length.

    Accepts (W,) or a stack (B, W); every series runs through the same
    weights.  Each block: two dilated causal convolutions with relu and
    dropout, plus an identity skip (1x1 projection when the channel
    count changes).
    """
    series = dc.as_tensor(series)
    single = series.data.ndim == 1
    W = series.shape[-1]
    B = 1 if single else int(np.prod(series.shape[:-1]))
    x = dc.reshape(series, (B, 1, W))
    chans = tcn_channels(config)
    p = config.dropout_p
    for i in range(config.levels):
        cin, cout = chans[i], chans[i + 1]
        dil = 2 ** i
        h = dc.causal_conv1d(x, store[f"{prefix}.b{i}.conv1.w"], dil,
                             store[f"{prefix}.b{i}.conv1.b"])
        h = dc.dropout(dc.pointwise(h, "relu"), p, training, rng)
        h = dc.causal_conv1d(h, store[f"{prefix}.b{i}.conv2.w"], dil,
                             store[f"{prefix}.b{i}.conv2.b"])
        h = dc.dropout(dc.pointwise(h, "relu"), p, training, rng)
        if cin == cout:
            skip = x
        else:
            skip = dc.causal_conv1d(x, store[f"{prefix}.b{i}.down.w"], 1,
                                    store[f"{prefix}.b{i}.down.b"])
        x = dc.add(skip, h)
    return dc.reshape(x, series.shape)


_diag_masks: dict[int, np.ndarray] = {}


def _offdiag_mask(n: int) -> np.ndarray:
    m = _diag_masks.get(n)
    if m is None:
        m = np.ones((n, n))
        np.fill_diagonal(m, 0.0)
        _diag_masks[n] = m
    return m


def postprocess(raw: Tensor, activation: str) -> Tensor:
    """Preliminary adjacency -> valid adjacency.

    Activation, then (M + M^T)/2, zero the diagonal (no self-loops),
    then D^{-1/2} M D^{-1/2} with zero-degree rows left untouched.
    """
    raw = dc.as_tensor(raw)
    if activation not in ("elu_plus_one", "sigmoid"):
        raise ValueError(f"unsupported adjacency activation {activation!r}")
    m = dc.pointwise(raw, activation)
    m = dc.scale(dc.add(m, dc.transpose_last2(m)), 0.5)
    mask = np.broadcast_to(_offdiag_mask(m.shape[-1]), m.shape)
    m = dc.mul(m, Tensor(mask))
    return dc.degree_normalize(m)


def init_reference_params(store: ParameterStore, n: int, prefix: str = "gref") -> None:
    """Raw reference adjacency starts at zero: elu(0)+1 = 1, a uniform graph."""
    store.add(f"{prefix}.raw", np.zeros((n, n)))


def gen_reference(store: ParameterStore, prefix: str = "gref") -> Tensor:
    """Static adjacency from the fully parametrized raw block; input
    features are never consulted."""
    return postprocess(store[f"{prefix}.raw"], "elu_plus_one")


def gen_observation(X: Tensor, store: ParameterStore, prefix: str,
                    config: TCNConfig, training: bool = False, rng=None) -> Tensor:
    """Window-dependent adjacency: shared per-node TCN, then pairwise dot
    products as the similarity measure.  X: (N, W) or (B, N, W)."""
    X = dc.as_tensor(X)
    transformed = tcn_forward(X, store, f"{prefix}.tcn", config, training, rng)
    return postprocess(dc.gram(transformed), "sigmoid")


def graph_layer_hidden(X: Tensor, A: Tensor, store: ParameterStore, prefix: str,
                       config: TCNConfig, training: bool = False, rng=None) -> Tensor:
    """X + relu(TCN(A @ X)): neighbor aggregation with an identity skip."""
    agg = dc.matmul(A, X)
    h = tcn_forward(agg, store, prefix, config, training, rng)
    return dc.add(X, dc.pointwise(h, "relu"))


def graph_layer_output(X: Tensor, A: Tensor, store: ParameterStore, prefix: str,
                       config: TCNConfig, training: bool = False, rng=None) -> Tensor:
    """TCN(A @ X): no skip, no activation; output depends on X only
    through the adjacency."""
    return tcn_forward(dc.matmul(A, X), store, prefix, config, training, rng)


def init_denoiser_params(store: ParameterStore, prefix: str, model: ModelConfig,
                         rng: np.random.Generator) -> None:
    for j in range(model.depth):
        init_tcn_params(store, f"{prefix}.l{j}", model.tcn, rng)


def denoise(X_noisy: Tensor, A: Tensor, store: ParameterStore, prefix: str,
            model: ModelConfig, training: bool = False, rng=None) -> Tensor:
    """Reconstruct clean signals from noisy ones and an adjacency.

    depth-1 hidden layers followed by one output layer; the same
    function body serves the reference and observation denoisers.
    """
    x = dc.as_tensor(X_noisy)
    for j in range(model.depth - 1):
        x = graph_layer_hidden(x, A, store, f"{prefix}.l{j}", model.tcn, training, rng)
    return graph_layer_output(x, A, store, f"{prefix}.l{model.depth - 1}",
                              model.tcn, training, rng)
