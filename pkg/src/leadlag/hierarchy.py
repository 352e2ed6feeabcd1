"""Multi-level variate grouping: DTW similarity, clustering, coarsening, patches.

Scale 0 is the raw variate level (each variate its own group). Every coarser
scale s groups the previous one through a binary assignment matrix with
exactly one 1 per row; grouped series are column-sum aggregates, and each
scale's series is cut into non-overlapping patches whose length grows with
the scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .data import MtsFrame


class HierarchyError(ValueError):
    pass


# ---------------------------------------------------------------------------
# dynamic time warping (Sakoe-Chiba band, squared-difference local cost,
# step pattern match/insert/delete)

@njit(cache=True)
def _dtw_kernel(a, b, band):  # pragma: no cover - compiled
    L = a.shape[0]
    INF = 1e300
    prev = np.full(L, INF)
    cur = np.full(L, INF)
    for i in range(L):
        lo = i - band
        if lo < 0:
            lo = 0
        hi = i + band
        if hi > L - 1:
            hi = L - 1
        for j in range(L):
            cur[j] = INF
        for j in range(lo, hi + 1):
            d = a[i] - b[j]
            cost = d * d
            if i == 0 and j == 0:
                cur[j] = cost
                continue
            best = INF
            if i > 0 and prev[j] < best:
                best = prev[j]
            if j > 0 and cur[j - 1] < best:
                best = cur[j - 1]
            if i > 0 and j > 0 and prev[j - 1] < best:
                best = prev[j - 1]
            cur[j] = cost + best
    # swap buffers
        tmp = prev
        prev = cur
        cur = tmp
    return prev[L - 1]


def dtw_distance(a, b, band: int) -> float:
    """Banded DTW cost between two equal-length series.

    band >= L is unconstrained; band == 0 degenerates to the squared
    Euclidean distance along the diagonal. Symmetric in (a, b), zero on
    identical inputs.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1:
        raise HierarchyError("dtw_distance expects 1-d series")
    if a.shape[0] != b.shape[0]:
        raise HierarchyError(
            f"series lengths differ: {a.shape[0]} vs {b.shape[0]}"
        )
    if band < 0:
        raise HierarchyError(f"band must be >= 0, got {band}")
    if a.shape[0] == 0:
        raise HierarchyError("empty series")
    band = min(int(band), a.shape[0])
    return float(_dtw_kernel(a, b, band))


DTW_DOWNSAMPLE_THRESHOLD = 20_000
DTW_DOWNSAMPLE_STRIDE = 4


def build_similarity_graph(train_series: np.ndarray, band: int,
                           quantile_q: float) -> np.ndarray:
    """Binary N x N graph: 1 where the DTW distance is below the q-quantile
    of all off-diagonal distances. Symmetric, diagonal forced to 1."""
    series = np.asarray(train_series, dtype=np.float64)
    if series.ndim != 2 or series.shape[0] < 2:
        raise HierarchyError(f"need at least 2 variates, got shape {series.shape}")
    if not (0.0 < quantile_q < 1.0):
        raise HierarchyError(f"quantile must lie in (0, 1), got {quantile_q}")
    n = series.shape[0]
    dist = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            dist[i, j] = dist[j, i] = dtw_distance(series[i], series[j], band)
    off = dist[~np.eye(n, dtype=bool)]
    threshold = np.quantile(off, quantile_q)
    graph = (dist < threshold).astype(np.float64)
    graph[np.eye(n, dtype=bool)] = 1.0
    return graph


# ---------------------------------------------------------------------------
# clustering into assignment matrices

def _kmeans(points: np.ndarray, k: int, rng: np.random.Generator,
            n_iter: int = 100) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; empty clusters are re-seeded
    with the point farthest from its center. Deterministic given rng state."""
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[c] = points[rng.integers(n)]
        else:
            centers[c] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((points - centers[c]) ** 2, axis=1))
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(n_iter):
        dist = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = dist.argmin(axis=1)
        for c in range(k):
            mask = new_labels == c
            if not np.any(mask):
                worst = int(np.argmax(dist[np.arange(n), new_labels]))
                new_labels[worst] = c
                mask = new_labels == c
            centers[c] = points[mask].mean(axis=0)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return labels


def _spectral_embedding(affinity: np.ndarray, k: int) -> np.ndarray:
    """Rows of the bottom-k eigenvectors of the normalized Laplacian,
    row-normalized to the unit sphere."""
    w = affinity.copy().astype(np.float64)
    np.fill_diagonal(w, 0.0)
    deg = w.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(np.maximum(deg, 1e-12))
    lap = np.eye(len(w)) - inv_sqrt[:, None] * w * inv_sqrt[None, :]
    vals, vecs = np.linalg.eigh(lap)
    emb = vecs[:, :k]
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    return emb / np.maximum(norms, 1e-12)


def _connected_components(affinity: np.ndarray) -> list[np.ndarray]:
    n = len(affinity)
    adj = affinity > 0
    seen = np.zeros(n, dtype=bool)
    comps = []
    for start in range(n):
        if seen[start]:
            continue
        stack = [start]
        seen[start] = True
        members = [start]
        while stack:
            u = stack.pop()
            for v in np.flatnonzero(adj[u]):
                if not seen[v]:
                    seen[v] = True
                    stack.append(v)
                    members.append(int(v))
        comps.append(np.array(sorted(members)))
    return comps


def _agglomerative(sim: np.ndarray, k: int) -> np.ndarray:
    """Average-linkage merging on a similarity matrix until k clusters remain."""
    n = len(sim)
    clusters = [[i] for i in range(n)]
    while len(clusters) > k:
        best = (-np.inf, 0, 1)
        for a in range(len(clusters)):
            for b in range(a + 1, len(clusters)):
                link = float(np.mean(sim[np.ix_(clusters[a], clusters[b])]))
                if link > best[0]:
                    best = (link, a, b)
        _, a, b = best
        clusters[a] = clusters[a] + clusters[b]
        del clusters[b]
    labels = np.zeros(n, dtype=np.int64)
    for c, members in enumerate(clusters):
        labels[members] = c
    return labels


def _labels_to_assignment(labels: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], k))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def cluster_scale(n_groups: int, d_prev: np.ndarray, algo: str = "spectral",
                  seed: int = 0) -> np.ndarray:
    """Group the rows of a similarity graph into a binary assignment matrix.

    Returns S with one 1 per row and no empty column. Disconnected graphs are
    clustered per connected component. Deterministic given seed.
    """
    d_prev = np.asarray(d_prev, dtype=np.float64)
    n_prev = d_prev.shape[0]
    if d_prev.ndim != 2 or d_prev.shape[1] != n_prev:
        raise HierarchyError(f"similarity graph must be square, got {d_prev.shape}")
    if not (1 <= n_groups < n_prev):
        raise HierarchyError(
            f"group count must satisfy 1 <= k < {n_prev}, got {n_groups}"
        )
    if algo not in ("spectral", "kmeans", "hierarchical"):
        raise HierarchyError(f"unknown clustering algorithm {algo!r}")
    if n_groups == 1:
        return np.ones((n_prev, 1))

    rng = np.random.default_rng(seed)
    off = d_prev.copy()
    np.fill_diagonal(off, 0.0)
    comps = _connected_components(off)
    labels = np.zeros(n_prev, dtype=np.int64)

    if len(comps) >= n_groups:
        # whole components share clusters: balanced round-robin by size
        order = sorted(range(len(comps)), key=lambda c: -len(comps[c]))
        loads = np.zeros(n_groups)
        for c in order:
            tgt = int(np.argmin(loads))
            labels[comps[c]] = tgt
            loads[tgt] += len(comps[c])
    else:
        # proportional budget per component, at least one group each
        budgets = _allocate_budgets([len(c) for c in comps], n_groups)
        next_label = 0
        for comp, budget in zip(comps, budgets):
            sub = d_prev[np.ix_(comp, comp)]
            if budget == 1 or len(comp) <= budget:
                local = np.minimum(np.arange(len(comp)), budget - 1)
            elif algo == "spectral":
                emb = _spectral_embedding(sub, budget)
                local = _kmeans(emb, budget, rng)
            elif algo == "kmeans":
                local = _kmeans(sub, budget, rng)
            else:
                local = _agglomerative(sub, budget)
            labels[comp] = next_label + local
            next_label += budget
    labels = _compact_labels(labels, n_groups)
    return _labels_to_assignment(labels, n_groups)


def _allocate_budgets(sizes: list[int], total: int) -> list[int]:
    """Largest-remainder allocation of `total` groups over component sizes,
    at least 1 each and no more than the component size."""
    n = sum(sizes)
    raw = [s * total / n for s in sizes]
    out = [max(1, min(int(r), s)) for r, s in zip(raw, sizes)]
    while sum(out) < total:
        rema = [(r - o) if o < s else -np.inf for r, o, s in zip(raw, out, sizes)]
        out[int(np.argmax(rema))] += 1
    while sum(out) > total:
        rema = [(r - o) if o > 1 else np.inf for r, o in zip(raw, out)]
        out[int(np.argmin(rema))] -= 1
    return out


def _compact_labels(labels: np.ndarray, k: int) -> np.ndarray:
    """Renumber labels to 0..k-1 (first-appearance order) and fill any empty
    cluster by splitting off a member of the largest one."""
    remap: dict[int, int] = {}
    out = np.empty_like(labels)
    for i, lab in enumerate(labels):
        if lab not in remap:
            remap[lab] = len(remap)
        out[i] = remap[lab]
    used = len(remap)
    while used < k:
        counts = np.bincount(out, minlength=used)
        donor = int(np.argmax(counts))
        member = int(np.flatnonzero(out == donor)[-1])
        out[member] = used
        used += 1
    return out


# ---------------------------------------------------------------------------
# coarsening and patching

def coarsen(assign: np.ndarray, d_prev: np.ndarray, x_prev: np.ndarray,
            aggregate: str = "sum"):
    """Column-sum aggregation of graph and series: D' = S^T D S, X' = S^T X.

    aggregate="mean" divides each grouped series row by its group size.
    """
    assign = np.asarray(assign, dtype=np.float64)
    d_next = assign.T @ d_prev @ assign
    x_next = assign.T @ x_prev
    if aggregate == "mean":
        sizes = assign.sum(axis=0)
        x_next = x_next / sizes[:, None]
    elif aggregate != "sum":
        raise HierarchyError(f"unknown aggregate {aggregate!r}")
    return d_next, x_next


def patchify(x: np.ndarray, patch_len: int) -> np.ndarray:
    """Cut (N, L) series into (N, L/p, p) contiguous patches. No padding."""
    x = np.asarray(x)
    n, length = x.shape
    if patch_len < 1 or length % patch_len != 0:
        raise HierarchyError(
            f"patch length {patch_len} does not divide series length {length}"
        )
    return x.reshape(n, length // patch_len, patch_len)


def unpatchify(patched: np.ndarray) -> np.ndarray:
    n, p_count, p_len = patched.shape
    return patched.reshape(n, p_count * p_len)


# ---------------------------------------------------------------------------
# the hierarchy itself

@dataclass
class HierarchyConfig:
    group_counts: list[int]      # groups per scale incl. scale 0 = N
    patch_lens: list[int]        # per scale, non-decreasing divisors of L
    window_len: int              # L
    clustering: str = "spectral"
    dtw_band_frac: float = 0.1
    quantile_q: float = 0.3
    aggregate: str = "sum"
    seed: int = 0

    @property
    def n_scales(self) -> int:
        return len(self.group_counts)


@dataclass
class ScaleHierarchy:
    """Assignments, similarity graphs, grouped training series, patch configs."""

    assignments: list[np.ndarray]      # S^s for s = 1..S-1 (empty when S == 1)
    graphs: list[np.ndarray]           # D^s for s = 0..S-1
    series: list[np.ndarray]           # grouped training series per scale
    patch_lens: list[int]
    window_len: int
    direct_assign: list[np.ndarray] = field(default_factory=list)  # N x N^s, s >= 1
    group_sizes: list[np.ndarray] = field(default_factory=list)    # per s >= 1
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.direct_assign:
            acc = None
            for s_mat in self.assignments:
                acc = s_mat if acc is None else acc @ s_mat
                self.direct_assign.append(acc.copy())
            self.group_sizes = [da.sum(axis=0) for da in self.direct_assign]
        self.validate()

    @property
    def n_scales(self) -> int:
        return len(self.graphs)

    @property
    def group_counts(self) -> list[int]:
        return [g.shape[0] for g in self.graphs]

    @property
    def patch_counts(self) -> list[int]:
        return [self.window_len // p for p in self.patch_lens]

    def validate(self):
        n0 = self.graphs[0].shape[0]
        if len(self.patch_lens) != self.n_scales:
            raise HierarchyError(
                f"{len(self.patch_lens)} patch lengths for {self.n_scales} scales"
            )
        for s, s_mat in enumerate(self.assignments, start=1):
            rows_ok = np.all(s_mat.sum(axis=1) == 1)
            binary = np.all((s_mat == 0) | (s_mat == 1))
            if not (rows_ok and binary):
                raise HierarchyError(f"assignment at scale {s} is not one-hot")
            if np.any(s_mat.sum(axis=0) < 1):
                raise HierarchyError(f"assignment at scale {s} has an empty group")
        for s, da in enumerate(self.direct_assign, start=1):
            if da.shape[0] != n0 or not np.all((da == 0) | (da == 1)):
                raise HierarchyError(f"direct assignment at scale {s} is not binary")
        prev = 0
        for s, p in enumerate(self.patch_lens):
            if self.window_len % p != 0:
                raise HierarchyError(
                    f"patch length {p} at scale {s} does not divide L = {self.window_len}"
                )
            if p < prev:
                raise HierarchyError("patch lengths must be non-decreasing in scale")
            prev = p

    def parent_labels(self, s: int) -> np.ndarray | None:
        """Group index at scale s+1 for each group at scale s; None at the top."""
        if s + 1 >= self.n_scales:
            return None
        return np.argmax(self.assignments[s], axis=1)

    def variate_group(self, s: int) -> np.ndarray:
        """Group index at scale s of each scale-0 variate."""
        if s == 0:
            return np.arange(self.graphs[0].shape[0])
        return np.argmax(self.direct_assign[s - 1], axis=1)


def build_hierarchy(frame: MtsFrame, config: HierarchyConfig) -> ScaleHierarchy:
    """Compose similarity, clustering, coarsening, and patch configs."""
    series0 = frame.values
    n = series0.shape[0]
    if config.group_counts[0] != n:
        raise HierarchyError(
            f"scale 0 must have one group per variate ({n}), "
            f"got {config.group_counts[0]}"
        )
    meta = {}
    dtw_series = series0
    if series0.shape[1] > DTW_DOWNSAMPLE_THRESHOLD:
        dtw_series = series0[:, ::DTW_DOWNSAMPLE_STRIDE]
        meta["dtw_downsampled"] = DTW_DOWNSAMPLE_STRIDE
    band = max(1, int(round(config.dtw_band_frac * dtw_series.shape[1])))
    if n >= 2:
        d0 = build_similarity_graph(dtw_series, band, config.quantile_q)
    else:
        d0 = np.ones((1, 1))
    graphs = [d0]
    series = [series0]
    assignments = []
    for s in range(1, config.n_scales):
        n_groups = config.group_counts[s]
        if n_groups == graphs[-1].shape[0]:
            s_mat = np.eye(n_groups)
        else:
            s_mat = cluster_scale(n_groups, graphs[-1], config.clustering,
                                  seed=config.seed + s)
        d_next, x_next = coarsen(s_mat, graphs[-1], series[-1], config.aggregate)
        assignments.append(s_mat)
        graphs.append(d_next)
        series.append(x_next)
    return ScaleHierarchy(
        assignments=assignments,
        graphs=graphs,
        series=series,
        patch_lens=list(config.patch_lens),
        window_len=config.window_len,
        meta=meta,
    )


def hierarchy_from_assignments(series0: np.ndarray, assignments: list[np.ndarray],
                               patch_lens: list[int], window_len: int,
                               graphs: list[np.ndarray] | None = None,
                               aggregate: str = "sum") -> ScaleHierarchy:
    """Build a hierarchy from explicit assignment matrices (no clustering)."""
    series = [np.asarray(series0, dtype=np.float64)]
    if graphs is None:
        graphs = [np.ones((series0.shape[0], series0.shape[0]))]
    else:
        graphs = [np.asarray(graphs[0], dtype=np.float64)]
    for s_mat in assignments:
        d_next, x_next = coarsen(s_mat, graphs[-1], series[-1], aggregate)
        graphs.append(d_next)
        series.append(x_next)
    return ScaleHierarchy(
        assignments=[np.asarray(s, dtype=np.float64) for s in assignments],
        graphs=graphs,
        series=series,
        patch_lens=list(patch_lens),
        window_len=window_len,
    )


def export_hierarchy(hierarchy: ScaleHierarchy, variate_names: list[str]) -> str:
    """Structured text: per scale, each variate's group plus patch config."""
    lines = []
    if hierarchy.meta.get("dtw_downsampled"):
        lines.append(f"# dtw_downsample_stride={hierarchy.meta['dtw_downsampled']}")
    for s in range(hierarchy.n_scales):
        lines.append(
            f"scale {s} groups={hierarchy.group_counts[s]} "
            f"patch_len={hierarchy.patch_lens[s]} "
            f"patch_count={hierarchy.patch_counts[s]}"
        )
        membership = hierarchy.variate_group(s)
        for v, g in enumerate(membership):
            lines.append(f"variate {v} name={variate_names[v]} group={int(g)}")
    return "\n".join(lines) + "\n"
