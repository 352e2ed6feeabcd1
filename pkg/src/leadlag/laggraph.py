"""Initial lead-lag graphs from FFT cross-correlation with top-K lag selection.

Nodes are (group, patch) tokens per scale. For a candidate ordered pair
(i, j) with selected lag set tau, edges run from patch n of i to patch
n + tau of j, restricted to n < P - max(tau). Targets never precede sources
(upper-triangular in the patch indices), which encodes causality.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .hierarchy import ScaleHierarchy


class LagGraphError(ValueError):
    pass


def xcorr_fft(x: np.ndarray, y: np.ndarray, normalize: bool = False) -> np.ndarray:
    """Circular cross-correlation coefficients for all non-negative lags.

    Both series are zero-meaned, then R(tau) = (1/P) * sum_t x(t) y((t+tau) mod P)
    computed in the frequency domain. normalize=True rescales to unit-variance
    (Pearson-style) coefficients.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1 or x.shape != y.shape:
        raise LagGraphError(f"series shapes must match, got {x.shape} vs {y.shape}")
    p = x.shape[0]
    if p == 0:
        raise LagGraphError("empty series")
    xc = x - x.mean()
    yc = y - y.mean()
    spec = np.fft.fft(yc) * np.conj(np.fft.fft(xc))
    coeff = np.fft.ifft(spec).real  # == sum_t x(t) y(t+tau), circular
    coeff = coeff / p
    if normalize:
        denom = xc.std() * yc.std()
        coeff = coeff / max(denom, 1e-12)
    return coeff


def xcorr_direct(x: np.ndarray, y: np.ndarray, normalize: bool = False) -> np.ndarray:
    """O(P^2) time-domain oracle for xcorr_fft (identical preprocessing)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    p = x.shape[0]
    xc = x - x.mean()
    yc = y - y.mean()
    out = np.zeros(p)
    for tau in range(p):
        s = 0.0
        for t in range(p):
            s += xc[t] * yc[(t + tau) % p]
        out[tau] = s / p
    if normalize:
        out = out / max(xc.std() * yc.std(), 1e-12)
    return out


@dataclass
class LagSet:
    """Selected lags for one ordered pair at one scale, coefficients descending."""

    pair: tuple[int, int]
    scale: int
    lags: list[int]
    coefficients: list[float]
    short: bool = False  # fewer admissible lags than requested

    def __post_init__(self):
        if len(set(self.lags)) != len(self.lags):
            raise LagGraphError(f"duplicate lags for pair {self.pair}: {self.lags}")
        coeffs = self.coefficients
        if any(coeffs[i] < coeffs[i + 1] for i in range(len(coeffs) - 1)):
            raise LagGraphError("coefficients must be sorted descending")


def select_topk_lags(coefficients: np.ndarray, k: int, max_lag: int,
                     pair=(0, 0), scale=0) -> LagSet:
    """The k lags in [0, max_lag] with the largest coefficients.

    Ties break toward the smaller lag. If fewer than k lags are admissible,
    all are returned and the result is flagged short.
    """
    coefficients = np.asarray(coefficients, dtype=np.float64)
    p = coefficients.shape[0]
    if k < 1:
        raise LagGraphError(f"k must be >= 1, got {k}")
    if not (0 <= max_lag <= p - 1):
        raise LagGraphError(f"max_lag must lie in [0, {p - 1}], got {max_lag}")
    admissible = coefficients[:max_lag + 1]
    order = sorted(range(len(admissible)), key=lambda t: (-admissible[t], t))
    take = order[:k]
    short = len(take) < k
    return LagSet(
        pair=tuple(pair), scale=scale,
        lags=[int(t) for t in take],
        coefficients=[float(admissible[t]) for t in take],
        short=short,
    )


def candidate_pairs(hierarchy: ScaleHierarchy, s: int) -> list[tuple[int, int]]:
    """Ordered group pairs eligible for lead-lag edges at scale s.

    Cross pairs share a parent at scale s+1; at the top scale every ordered
    pair qualifies. Self-pairs (i, i) are always included so intra-variate
    lags stay representable.
    """
    n_s = hierarchy.group_counts[s]
    parents = hierarchy.parent_labels(s)
    pairs = [(i, i) for i in range(n_s)]
    for i in range(n_s):
        for j in range(n_s):
            if i == j:
                continue
            if parents is None or parents[i] == parents[j]:
                pairs.append((i, j))
    return pairs


@dataclass
class ScaleGraph:
    """Edge list of the initial graph at one scale, sorted by target token."""

    scale: int
    n_groups: int
    patch_count: int
    patch_len: int
    max_lag: int
    src_group: np.ndarray
    dst_group: np.ndarray
    src_patch: np.ndarray
    dst_patch: np.ndarray
    lag: np.ndarray
    coeff: np.ndarray
    candidate_pairs: list[tuple[int, int]]
    lag_sets: dict[tuple[int, int], LagSet]

    @property
    def n_tokens(self) -> int:
        return self.n_groups * self.patch_count

    @property
    def edge_count(self) -> int:
        return int(self.src_group.shape[0])

    @property
    def src_token(self) -> np.ndarray:
        return self.src_group * self.patch_count + self.src_patch

    @property
    def dst_token(self) -> np.ndarray:
        return self.dst_group * self.patch_count + self.dst_patch

    @property
    def delta(self) -> np.ndarray:
        """Time-lag tensor over edges, in patch units (always >= 0)."""
        return self.dst_patch - self.src_patch

    def validate(self):
        if np.any(self.dst_patch < self.src_patch):
            raise LagGraphError(f"scale {self.scale}: edge with target before source")
        if np.any(self.delta != self.lag):
            raise LagGraphError(f"scale {self.scale}: stored lag disagrees with patches")

    def dense(self, weights: np.ndarray | None = None) -> np.ndarray:
        """Dense (tokens x tokens) adjacency; [dst, src] = weight (reference path)."""
        a = np.zeros((self.n_tokens, self.n_tokens))
        w = np.ones(self.edge_count) if weights is None else weights
        np.add.at(a, (self.dst_token, self.src_token), w)
        return a


@dataclass
class InitialGraph:
    """Per-scale binary lead-lag graphs plus the lag sets behind them."""

    scales: list[ScaleGraph]
    k: int
    meta: dict = field(default_factory=dict)

    @property
    def edge_counts(self) -> list[int]:
        return [g.edge_count for g in self.scales]

    def validate(self):
        for g in self.scales:
            g.validate()


def _pair_edges(lag_set: LagSet, p_count: int):
    """Eq-style edge enumeration: (n, n + tau) for tau in the set, bounded by
    n < P - max(lag set)."""
    if not lag_set.lags:
        return np.zeros(0, int), np.zeros(0, int)
    bound = p_count - max(lag_set.lags)
    src, dst = [], []
    for tau in sorted(lag_set.lags):
        for n in range(min(bound, p_count - tau)):
            src.append(n)
            dst.append(n + tau)
    return np.asarray(src, int), np.asarray(dst, int)


def default_max_lag(p_count: int) -> int:
    """Half the patch count, limiting circular wrap-around artifacts."""
    return max(0, min(p_count // 2, p_count - 1))


def pooled_series(series: np.ndarray, patch_len: int) -> np.ndarray:
    """Average pooling within consecutive patches: (N, T) -> (N, T // p)."""
    n, t = series.shape
    usable = (t // patch_len) * patch_len
    if usable == 0:
        raise LagGraphError(f"series of {t} steps shorter than patch {patch_len}")
    return series[:, :usable].reshape(n, -1, patch_len).mean(axis=2)


def build_scale_graph(hierarchy: ScaleHierarchy, s: int, k: int,
                      max_lag: int | None = None,
                      series: np.ndarray | None = None,
                      all_admissible: bool = False,
                      normalize: bool = False) -> ScaleGraph:
    p_count = hierarchy.patch_counts[s]
    p_len = hierarchy.patch_lens[s]
    if max_lag is None:
        max_lag = default_max_lag(p_count)
    max_lag = min(max_lag, p_count - 1)
    if series is None:
        series = hierarchy.series[s]
    pooled = pooled_series(series, p_len)
    if pooled.shape[1] < 2:
        raise LagGraphError(
            f"scale {s}: only {pooled.shape[1]} pooled patches; cannot correlate"
        )
    pairs = candidate_pairs(hierarchy, s)
    lag_sets: dict[tuple[int, int], LagSet] = {}
    src_g, dst_g, src_p, dst_p, lags, coefs = [], [], [], [], [], []
    pooled_max_lag = min(max_lag, pooled.shape[1] - 1)
    for (i, j) in pairs:
        if all_admissible:
            lag_set = LagSet((i, j), s, list(range(pooled_max_lag + 1)),
                             [0.0] * (pooled_max_lag + 1))
        else:
            coeff = xcorr_fft(pooled[i], pooled[j], normalize=normalize)
            lag_set = select_topk_lags(coeff, k, pooled_max_lag, pair=(i, j), scale=s)
        lag_sets[(i, j)] = lag_set
        e_src, e_dst = _pair_edges(lag_set, p_count)
        coeff_by_lag = dict(zip(lag_set.lags, lag_set.coefficients))
        for n, m in zip(e_src, e_dst):
            src_g.append(i)
            dst_g.append(j)
            src_p.append(int(n))
            dst_p.append(int(m))
            lags.append(int(m - n))
            coefs.append(coeff_by_lag[int(m - n)])
    graph = ScaleGraph(
        scale=s, n_groups=hierarchy.group_counts[s], patch_count=p_count,
        patch_len=p_len, max_lag=max_lag,
        src_group=np.asarray(src_g, int), dst_group=np.asarray(dst_g, int),
        src_patch=np.asarray(src_p, int), dst_patch=np.asarray(dst_p, int),
        lag=np.asarray(lags, int), coeff=np.asarray(coefs, float),
        candidate_pairs=pairs, lag_sets=lag_sets,
    )
    # deterministic target-major ordering (segment sums expect it)
    order = np.lexsort((graph.src_token, graph.dst_token))
    for name in ("src_group", "dst_group", "src_patch", "dst_patch", "lag", "coeff"):
        setattr(graph, name, getattr(graph, name)[order])
    graph.validate()
    return graph


def build_initial_graph(hierarchy: ScaleHierarchy, k: int,
                        max_lag: int | None = None,
                        series_by_scale: list[np.ndarray] | None = None,
                        all_admissible: bool = False,
                        normalize: bool = False) -> InitialGraph:
    """Per-scale graphs from the hierarchy's training series (or an override).

    all_admissible=True skips correlation and lays down every lag in
    [0, max_lag] for every candidate pair (the "uninformed prior" variant).
    """
    if k < 1:
        raise LagGraphError(f"k must be >= 1, got {k}")
    scales = []
    for s in range(hierarchy.n_scales):
        series = None if series_by_scale is None else series_by_scale[s]
        scales.append(build_scale_graph(
            hierarchy, s, k, max_lag=max_lag, series=series,
            all_admissible=all_admissible, normalize=normalize,
        ))
    return InitialGraph(scales=scales, k=k)


def export_graph(graph: InitialGraph,
                 mean_weights: list[np.ndarray] | None = None) -> str:
    """One line per edge: scale, groups, patches, lag, static coefficient,
    and (when supplied) the effective weight averaged over a validation set."""
    lines = ["# scale src_group dst_group src_patch dst_patch lag coeff"
             + (" mean_weight" if mean_weights is not None else "")]
    for g in graph.scales:
        w = None if mean_weights is None else mean_weights[g.scale]
        for e in range(g.edge_count):
            cells = [
                str(g.scale), str(int(g.src_group[e])), str(int(g.dst_group[e])),
                str(int(g.src_patch[e])), str(int(g.dst_patch[e])),
                str(int(g.lag[e])), f"{g.coeff[e]:.10g}",
            ]
            if w is not None:
                cells.append(f"{w[e]:.10g}")
            lines.append(" ".join(cells))
    return "\n".join(lines) + "\n"
