"""Loading, normalization, windowing, and chronological splitting of series.

On-disk format: a header-bearing delimited text table, one row per time step,
one column per variate (an optional leading timestamp column can be skipped).
Values are stored variates-as-rows internally.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

STD_FLOOR = 1e-8


class DataError(ValueError):
    pass


@dataclass
class NormStats:
    mean: np.ndarray  # (N,)
    std: np.ndarray   # (N,), floored at STD_FLOOR
    train_fraction: float


@dataclass
class MtsFrame:
    """An N x T matrix of variate readings plus per-variate normalization stats."""

    values: np.ndarray
    variate_names: list[str]
    sample_interval: str = ""
    norm_stats: NormStats | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DataError(f"frame values must be 2-d, got shape {self.values.shape}")
        if len(self.variate_names) != self.values.shape[0]:
            raise DataError(
                f"{len(self.variate_names)} names for {self.values.shape[0]} variates"
            )
        if not np.all(np.isfinite(self.values)):
            raise DataError("frame contains NaN/Inf values")

    @property
    def n_variates(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]


@dataclass
class WindowPair:
    input: np.ndarray   # (N, L)
    target: np.ndarray  # (N, H)
    origin_index: int


def load_csv(path, *, delimiter: str = ",", skip_timestamp: bool = False,
             missing: str = "reject", sample_interval: str = "") -> MtsFrame:
    """Load a delimited text table into an MtsFrame (variates as rows).

    missing: "reject" fails on any empty cell naming row and column;
    "ffill" forward-fills from the previous time step (leading gaps rejected).
    """
    if missing not in ("reject", "ffill"):
        raise DataError(f"unknown missing-value policy {missing!r}")
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n").rstrip("\r") for ln in fh]
    lines = [ln for ln in lines if ln.strip() != ""]
    if not lines:
        raise DataError(f"{path}: empty file")
    header = [c.strip() for c in lines[0].split(delimiter)]
    start_col = 1 if skip_timestamp else 0
    names = header[start_col:]
    if not names:
        raise DataError(f"{path}: no variate columns after header")
    n_cols = len(header)
    rows: list[list[float]] = []
    filled = 0
    for lineno, ln in enumerate(lines[1:], start=2):
        cells = [c.strip() for c in ln.split(delimiter)]
        if len(cells) != n_cols:
            raise DataError(
                f"{path}: line {lineno}: expected {n_cols} cells, found {len(cells)}"
            )
        row = []
        for j, cell in enumerate(cells[start_col:]):
            if cell == "" or cell.lower() in ("nan", "na"):
                if missing == "reject":
                    raise DataError(
                        f"{path}: line {lineno}: missing value in column "
                        f"{names[j]!r} (policy=reject)"
                    )
                if not rows:
                    raise DataError(
                        f"{path}: line {lineno}: cannot forward-fill leading gap "
                        f"in column {names[j]!r}"
                    )
                row.append(rows[-1][j])
                filled += 1
                continue
            try:
                row.append(float(cell))
            except ValueError:
                raise DataError(
                    f"{path}: line {lineno}: non-numeric cell {cell!r} in column "
                    f"{names[j]!r}"
                )
        rows.append(row)
    if not rows:
        raise DataError(f"{path}: no data rows")
    values = np.asarray(rows, dtype=np.float64).T  # column order == variate order
    meta = {"source": str(path)}
    if filled:
        meta["forward_filled_cells"] = filled
    return MtsFrame(values, names, sample_interval=sample_interval, meta=meta)


def zscore_fit_apply(frame: MtsFrame, train_fraction: float) -> MtsFrame:
    """Normalize per variate with mean/std fit on the first train_fraction of T.

    Stats use the population formula and are stored for de-normalization.
    Constant variates get their std floored at STD_FLOOR (with a warning).
    """
    if not (0.0 < train_fraction <= 1.0):
        raise DataError(f"train_fraction must lie in (0, 1], got {train_fraction}")
    n_fit = max(1, int(round(train_fraction * frame.n_steps)))
    head = frame.values[:, :n_fit]
    mean = head.mean(axis=1)
    std = head.std(axis=1)  # population formula (ddof=0)
    degenerate = std < STD_FLOOR
    if np.any(degenerate):
        names = [frame.variate_names[i] for i in np.flatnonzero(degenerate)]
        log.warning("constant variates %s: std floored at %g", names, STD_FLOOR)
    std = np.maximum(std, STD_FLOOR)
    stats = NormStats(mean=mean, std=std, train_fraction=train_fraction)
    normalized = (frame.values - mean[:, None]) / std[:, None]
    meta = dict(frame.meta)
    if np.any(degenerate):
        meta["degenerate_variates"] = int(degenerate.sum())
    return MtsFrame(normalized, list(frame.variate_names), frame.sample_interval,
                    norm_stats=stats, meta=meta)


def denormalize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    """Invert zscore_fit_apply on an (N, ...) array of normalized values."""
    extra = (None,) * (values.ndim - 1)
    return values * stats.std[(slice(None),) + extra] + stats.mean[(slice(None),) + extra]


def window_count(T: int, L: int, H: int, stride: int) -> int:
    return (T - L - H) // stride + 1


def make_windows(frame: MtsFrame, L: int, H: int, stride: int = 1) -> list[WindowPair]:
    """Contiguous, non-overlapping (input, target) slices at origins 0, stride, ..."""
    if stride < 1:
        raise DataError(f"stride must be >= 1, got {stride}")
    T = frame.n_steps
    if L + H > T:
        raise DataError(f"window L+H = {L + H} exceeds series length T = {T}")
    out = []
    for origin in range(0, T - L - H + 1, stride):
        out.append(WindowPair(
            input=frame.values[:, origin:origin + L],
            target=frame.values[:, origin + L:origin + L + H],
            origin_index=origin,
        ))
    return out


def chrono_split(frame: MtsFrame, ratios=None, sizes=None,
                 min_length: int | None = None):
    """Partition T chronologically into (train, val, test) frames.

    Give either `ratios` (three floats summing to 1; sizes rounded, remainder
    to the training split) or explicit integer `sizes`. When `min_length` is
    set (normally L+H), any non-empty split shorter than it is rejected.
    """
    T = frame.n_steps
    if (ratios is None) == (sizes is None):
        raise DataError("give exactly one of ratios or sizes")
    if sizes is None:
        ratios = tuple(float(r) for r in ratios)
        if len(ratios) != 3 or any(r < 0 for r in ratios):
            raise DataError(f"need three non-negative ratios, got {ratios}")
        if abs(sum(ratios) - 1.0) > 1e-9:
            raise DataError(f"ratios must sum to 1, got sum {sum(ratios)}")
        n_val = int(round(ratios[1] * T))
        n_test = int(round(ratios[2] * T))
        n_train = T - n_val - n_test
        sizes = (n_train, n_val, n_test)
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) != 3 or any(s < 0 for s in sizes) or sum(sizes) != T:
        raise DataError(f"split sizes {sizes} do not partition T = {T}")
    if min_length is not None:
        for name, s in zip(("train", "val", "test"), sizes):
            if s < min_length:
                raise DataError(
                    f"{name} split of {s} steps is shorter than L+H = {min_length}"
                )
    frames = []
    at = 0
    for s in sizes:
        sub = MtsFrame(frame.values[:, at:at + s] if s else np.zeros((frame.n_variates, 0)),
                       list(frame.variate_names), frame.sample_interval,
                       norm_stats=frame.norm_stats, meta=dict(frame.meta))
        frames.append(sub)
        at += s
    return tuple(frames)


def write_predictions_csv(path, variate_names: list[str],
                          predictions: np.ndarray, origins) -> None:
    """Write per-window forecasts: origin_index, step, then one column per variate.

    predictions has shape (W, N, H); one row is emitted per (window, horizon step).
    """
    predictions = np.asarray(predictions)
    if predictions.ndim != 3:
        raise DataError(f"predictions must be (windows, N, H), got {predictions.shape}")
    W, N, H = predictions.shape
    if N != len(variate_names):
        raise DataError(f"{N} prediction variates vs {len(variate_names)} names")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(["origin_index", "step"] + list(variate_names)) + "\n")
        for w in range(W):
            for h in range(H):
                cells = [str(int(origins[w])), str(h + 1)]
                cells += [repr(float(v)) for v in predictions[w, :, h]]
                fh.write(",".join(cells) + "\n")


def read_predictions_csv(path):
    """Inverse of write_predictions_csv: returns (names, predictions, origins)."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    header = lines[0].split(",")
    names = header[2:]
    rows = [ln.split(",") for ln in lines[1:]]
    origins_all = [int(r[0]) for r in rows]
    origins = sorted(dict.fromkeys(origins_all))
    H = max(int(r[1]) for r in rows)
    W, N = len(origins), len(names)
    pred = np.zeros((W, N, H))
    pos = {o: i for i, o in enumerate(origins)}
    for r in rows:
        w, h = pos[int(r[0])], int(r[1]) - 1
        pred[w, :, h] = [float(c) for c in r[2:]]
    return names, pred, np.asarray(origins)


def write_frame_csv(path, frame: MtsFrame) -> None:
    """Write a frame in the standard on-disk layout (rows are time steps)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(frame.variate_names) + "\n")
        for t in range(frame.n_steps):
            fh.write(",".join(repr(float(v)) for v in frame.values[:, t]) + "\n")


# Conventional calendar split of the hourly transformer-temperature benchmark,
# expressed as explicit segment sizes (train, val, test).
ETT_HOUR_SIZES = (8545, 2881, 2881)
