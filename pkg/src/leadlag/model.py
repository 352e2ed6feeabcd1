"""Full forecasting model: hierarchy + lead-lag graphs + decay attention +
hierarchical message passing + linear prediction head."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import decay, message
from .data import NormStats
from .engine import DiffArray, ShapeError, add, matmul, mean, mul, reshape, sub
from .hierarchy import HierarchyConfig, ScaleHierarchy, build_hierarchy, patchify
from .laggraph import InitialGraph, build_initial_graph


class ConfigError(ValueError):
    pass


DEFAULT_LR_GRID = (1e-2, 1e-3, 5e-4, 1e-4)
ABLATIONS = ("no_ms", "no_init", "no_weight", "no_hmp")


@dataclass
class ModelConfig:
    window_len: int = 96
    horizon: int = 24
    coarse_groups: list[int] = field(default_factory=list)   # N^s for s >= 1
    patch_lens: list[int] = field(default_factory=lambda: [8])  # per scale
    k_lags: int = 4
    d: int = 16
    d_e: int = 8
    d_a: int = 8
    layers: int = 1
    activation: str = "relu"
    clustering: str = "spectral"
    ablation: str | None = None
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    patience: int = 3
    seed: int = 0
    max_lag: int | None = None
    dtw_band_frac: float = 0.1
    quantile_q: float = 0.3
    aggregate: str = "sum"
    per_window_lags: bool = False
    normalized_metrics: bool = False
    train_ratios: tuple = (0.7, 0.1, 0.2)
    window_stride: int = 1
    relu_leak: float = 0.0
    normalize_xcorr: bool = False

    def __post_init__(self):
        self.validate()

    @property
    def n_scales(self) -> int:
        return 1 + len(self.coarse_groups)

    def validate(self):
        c = self
        if c.window_len < 2 or c.horizon < 1:
            raise ConfigError(f"bad window/horizon: L={c.window_len} H={c.horizon}")
        if len(c.patch_lens) != c.n_scales:
            raise ConfigError(
                f"{len(c.patch_lens)} patch lengths for {c.n_scales} scales"
            )
        prev = 0
        for p in c.patch_lens:
            if p < 1 or c.window_len % p:
                raise ConfigError(f"patch length {p} does not divide L={c.window_len}")
            if p < prev:
                raise ConfigError("patch lengths must be non-decreasing across scales")
            prev = p
        for p in c.patch_lens[1:]:
            if p % c.patch_lens[0]:
                raise ConfigError(
                    f"coarse patch length {p} must be a multiple of {c.patch_lens[0]}"
                )
        for a, b in zip(c.coarse_groups, c.coarse_groups[1:]):
            if b >= a:
                raise ConfigError(f"group counts must strictly decrease, got {a}->{b}")
        if c.k_lags < 1:
            raise ConfigError(f"k_lags must be >= 1, got {c.k_lags}")
        if min(c.d, c.d_e, c.d_a) < 1:
            raise ConfigError("feature dims must be positive")
        if c.layers < 1:
            raise ConfigError("need at least one layer")
        if c.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {c.lr}")
        if c.ablation is not None and c.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {c.ablation!r}, pick from {ABLATIONS}")
        if c.activation not in ("relu", "tanh", "identity"):
            raise ConfigError(f"unknown activation {c.activation!r}")
        if c.batch_size < 1 or c.epochs < 1 or c.patience < 1:
            raise ConfigError("batch_size, epochs, patience must be >= 1")
        if len(c.train_ratios) != 3:
            raise ConfigError("train_ratios must have three entries")


def ablate(config: ModelConfig, flag: str) -> ModelConfig:
    """Config with one component removed (multi-scale, initial graph,
    decay weights, or hierarchical passing)."""
    if flag not in ABLATIONS:
        raise ConfigError(f"unknown ablation {flag!r}, pick from {ABLATIONS}")
    out = replace(config, ablation=flag)
    if flag in ("no_ms", "no_hmp"):
        out = replace(out, coarse_groups=[], patch_lens=config.patch_lens[:1],
                      ablation=flag)
    return out


def hierarchy_config(config: ModelConfig, n_variates: int) -> HierarchyConfig:
    return HierarchyConfig(
        group_counts=[n_variates] + list(config.coarse_groups),
        patch_lens=list(config.patch_lens),
        window_len=config.window_len,
        clustering=config.clustering,
        dtw_band_frac=config.dtw_band_frac,
        quantile_q=config.quantile_q,
        aggregate=config.aggregate,
        seed=config.seed,
    )


def build_graphs(config: ModelConfig, hierarchy: ScaleHierarchy,
                 series_by_scale=None) -> InitialGraph:
    return build_initial_graph(
        hierarchy, config.k_lags, max_lag=config.max_lag,
        series_by_scale=series_by_scale,
        all_admissible=(config.ablation == "no_init"),
        normalize=config.normalize_xcorr,
    )


def predict_head(h_tilde: DiffArray, w: DiffArray, b: DiffArray,
                 n_variates: int) -> DiffArray:
    """Flatten patch and feature dims per variate, then one linear map to the
    horizon: (B, N*P0, d) -> (B, N, H)."""
    bsz = h_tilde.shape[0]
    tokens, d = h_tilde.shape[-2], h_tilde.shape[-1]
    p0 = tokens // n_variates
    flat = reshape(h_tilde, (bsz, n_variates, p0 * d))
    return add(matmul(flat, w), b)


def mse_loss(pred: DiffArray, target: DiffArray) -> DiffArray:
    """Mean over every entry of the squared error."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = sub(pred, target)
    return mean(mul(diff, diff))


def _sym_normalized_adjacency(d0: np.ndarray) -> np.ndarray:
    deg = d0.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(np.maximum(deg, 1e-12))
    return inv_sqrt[:, None] * d0 * inv_sqrt[None, :]


class LeadLagModel:
    """End-to-end differentiable forecaster over a fixed hierarchy and graph."""

    def __init__(self, config: ModelConfig, hierarchy: ScaleHierarchy,
                 graph: InitialGraph | None, variate_names: list[str],
                 norm_stats: NormStats | None = None):
        if hierarchy.n_scales != config.n_scales:
            raise ConfigError(
                f"hierarchy has {hierarchy.n_scales} scales, config expects "
                f"{config.n_scales}"
            )
        self.config = config
        self.hierarchy = hierarchy
        self.graph = graph
        self.variate_names = list(variate_names)
        self.norm_stats = norm_stats
        self.n_variates = hierarchy.group_counts[0]
        rng = np.random.default_rng(config.seed)

        self.gcn_mode = config.ablation == "no_hmp"
        if self.gcn_mode:
            self.adjacency = _sym_normalized_adjacency(hierarchy.graphs[0])
            self.mlp0 = message.init_feature_mlp(rng, config.patch_lens[0],
                                                 config.d, "mlp0")
            self.gcn_theta = [
                message.init_layer_params(rng, 1, config.d, f"layer{i}").theta[0]
                for i in range(config.layers)
            ]
        else:
            if graph is None:
                raise ConfigError("a lead-lag graph is required outside no_hmp mode")
            self.stack = message.init_stack_params(rng, hierarchy, config.d,
                                                   config.layers)
            self.maps = message.build_scale_maps(hierarchy)
            self.decay_params = None
            if config.ablation != "no_weight":
                self.decay_params = [
                    decay.init_decay_params(
                        rng, hierarchy.group_counts[s], hierarchy.patch_counts[s],
                        hierarchy.patch_lens[s], config.d_e, config.d_a,
                        prefix=f"decay{s}",
                    )
                    for s in range(hierarchy.n_scales)
                ]

        p0_count = config.window_len // config.patch_lens[0]
        self.head_w = DiffArray(
            rng.uniform(-1, 1, (p0_count * config.d, config.horizon))
            / np.sqrt(p0_count * config.d), trainable=True, name="head.w")
        self.head_b = DiffArray(np.zeros(config.horizon), trainable=True,
                                name="head.b")

        # constant coarsening operators per coarse scale
        self.coarsen_mats = []
        for s in range(1, hierarchy.n_scales):
            mat = hierarchy.direct_assign[s - 1].T.copy()
            if config.aggregate == "mean":
                mat = mat / mat.sum(axis=1, keepdims=True)
            self.coarsen_mats.append(mat)

    # ------------------------------------------------------------------
    def parameters(self) -> list[tuple[str, DiffArray]]:
        out = []
        if self.gcn_mode:
            out += self.mlp0.named("mlp0")
            out += [(f"gcn.theta{i}", t) for i, t in enumerate(self.gcn_theta)]
        else:
            out += self.stack.named()
            if self.decay_params is not None:
                for s, dp in enumerate(self.decay_params):
                    out += dp.named(f"decay{s}")
        out += [("head.w", self.head_w), ("head.b", self.head_b)]
        return out

    def param_state(self) -> dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self.parameters()}

    def load_param_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.parameters():
            if name not in state:
                raise ConfigError(f"missing parameter {name!r} in state")
            if state[name].shape != p.shape:
                raise ConfigError(
                    f"parameter {name!r} shape {state[name].shape} != {p.shape}"
                )
            p.values = state[name].copy()
            p.grad = None

    # ------------------------------------------------------------------
    def patched_inputs(self, x: np.ndarray) -> list[DiffArray]:
        """Coarsen and patchify one window batch to per-scale (B,N_s,P_s,p_s)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None, ...]
        b, n, length = x.shape
        if n != self.n_variates or length != self.config.window_len:
            raise ShapeError(
                f"window batch {x.shape} does not match N={self.n_variates}, "
                f"L={self.config.window_len}"
            )
        out = []
        hier = self.hierarchy
        for s in range(hier.n_scales):
            xs = x if s == 0 else np.matmul(self.coarsen_mats[s - 1], x)
            p = hier.patch_lens[s]
            out.append(DiffArray(xs.reshape(b, xs.shape[1], length // p, p)))
        return out

    def edge_weights(self, patched: list[DiffArray],
                     graph: InitialGraph) -> list[DiffArray | None]:
        """Per-scale effective edge weights for one window batch."""
        cfg = self.config
        if cfg.ablation == "no_weight" or self.decay_params is None:
            return [decay.effective_graph(g, None) for g in graph.scales]
        weights = []
        for s, g in enumerate(graph.scales):
            dp = self.decay_params[s]
            beta_e, beta_i = decay.rates(dp, g)
            alpha = decay.input_attention(patched[s], dp, g)
            lam = decay.decay_weights(beta_e, beta_i, alpha,
                                      g.delta.astype(float), leak=cfg.relu_leak)
            weights.append(decay.effective_graph(g, lam))
        return weights

    def forward(self, x: np.ndarray, graph: InitialGraph | None = None) -> DiffArray:
        """Window batch (B, N, L) -> normalized-scale forecasts (B, N, H)."""
        cfg = self.config
        patched = self.patched_inputs(x)
        b = patched[0].shape[0]
        if self.gcn_mode:
            h = self._gcn_features(patched[0])
        else:
            g = graph if graph is not None else self.graph
            weights = self.edge_weights(patched, g)
            h = message.forward_stack(patched, g.scales, weights, self.hierarchy,
                                      self.stack, maps=self.maps,
                                      activation=cfg.activation)
        return predict_head(h, self.head_w, self.head_b, self.n_variates)

    def _gcn_features(self, patched0: DiffArray) -> DiffArray:
        from .engine import activation_fn
        sigma = activation_fn(self.config.activation)
        b, n, pc, pl = patched0.shape
        d = self.config.d
        h = self.mlp0(patched0, sigma)          # (B, N, P0, d)
        h = reshape(h, (b, n, pc * d))
        adj = DiffArray(self.adjacency)
        for theta in self.gcn_theta:
            mixed = matmul(adj, h)              # variate-axis graph convolution
            hd = reshape(mixed, (b, n, pc, d))
            hd = sigma(matmul(hd, theta))
            h = add(reshape(hd, (b, n, pc * d)), h)
        return reshape(h, (b, n * pc, d))

    def predict(self, x: np.ndarray, graph: InitialGraph | None = None) -> np.ndarray:
        """Forward pass outside any tape; returns plain values."""
        return self.forward(x, graph=graph).values


class PerVariateLinear:
    """Graph-free baseline: one shared linear map from each variate's own
    history to its horizon."""

    def __init__(self, config: ModelConfig, variate_names: list[str],
                 norm_stats: NormStats | None = None):
        self.config = config
        self.variate_names = list(variate_names)
        self.norm_stats = norm_stats
        rng = np.random.default_rng(config.seed)
        bound = 1.0 / np.sqrt(config.window_len)
        self.w = DiffArray(rng.uniform(-bound, bound,
                                       (config.window_len, config.horizon)),
                           trainable=True, name="linear.w")
        self.b = DiffArray(np.zeros(config.horizon), trainable=True, name="linear.b")

    def parameters(self):
        return [("linear.w", self.w), ("linear.b", self.b)]

    def param_state(self):
        return {name: p.values.copy() for name, p in self.parameters()}

    def load_param_state(self, state):
        for name, p in self.parameters():
            p.values = state[name].copy()
            p.grad = None

    def forward(self, x: np.ndarray, graph=None) -> DiffArray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None, ...]
        return add(matmul(DiffArray(x), self.w), self.b)

    def predict(self, x: np.ndarray, graph=None) -> np.ndarray:
        return self.forward(x).values
