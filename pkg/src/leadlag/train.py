"""Training protocol: Adam updates, early stopping on validation MSE,
evaluation metrics on both normalized and de-normalized scales."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .data import WindowPair, denormalize
from .engine import Adam, DiffArray, Tape
from .laggraph import build_initial_graph
from .model import ModelConfig, mse_loss

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float
    wall_seconds: float


@dataclass
class TrainResult:
    history: list[EpochRecord]
    best_epoch: int
    best_val_mse: float
    best_state: dict[str, np.ndarray]
    stopped_early: bool

    def history_csv(self) -> str:
        """Deterministic history (wall-clock timings are reported separately)."""
        lines = ["epoch,train_mse,val_mse"]
        for r in self.history:
            lines.append(f"{r.epoch},{r.train_mse!r},{r.val_mse!r}")
        return "\n".join(lines) + "\n"

    def timing_csv(self) -> str:
        lines = ["epoch,wall_seconds"]
        for r in self.history:
            lines.append(f"{r.epoch},{r.wall_seconds:.6f}")
        return "\n".join(lines) + "\n"


def _stack_batch(windows: list[WindowPair]):
    x = np.stack([w.input for w in windows])
    y = np.stack([w.target for w in windows])
    return x, y


def _window_graph(model, window_input: np.ndarray):
    """Per-window lag estimation: rebuild the initial graph from this window's
    own coarsened series (batch size is necessarily 1)."""
    series = [window_input]
    for mat in model.coarsen_mats:
        series.append(mat @ window_input)
    return build_initial_graph(
        model.hierarchy, model.config.k_lags, max_lag=model.config.max_lag,
        series_by_scale=series,
        all_admissible=(model.config.ablation == "no_init"),
        normalize=model.config.normalize_xcorr,
    )


def _forward_batch(model, x: np.ndarray):
    if getattr(model.config, "per_window_lags", False) \
            and not getattr(model, "gcn_mode", False):
        return model.forward(x, graph=_window_graph(model, x[0]))
    return model.forward(x)


def batch_mse(model, windows: list[WindowPair], batch_size: int) -> float:
    """Window-weighted mean squared error on the normalized scale, no tape."""
    total, count = 0.0, 0
    step = 1 if getattr(model.config, "per_window_lags", False) else batch_size
    for at in range(0, len(windows), step):
        chunk = windows[at:at + step]
        x, y = _stack_batch(chunk)
        pred = _forward_batch(model, x).values
        total += float(np.sum((pred - y) ** 2))
        count += y.size
    return total / count


def train(model, train_windows: list[WindowPair], val_windows: list[WindowPair],
          config: ModelConfig | None = None) -> TrainResult:
    """Adam training with early stopping.

    Stops when validation MSE has not improved for `patience` consecutive
    epochs; the best-validation parameter snapshot is restored and returned.
    Deterministic given the config seed.
    """
    config = config or model.config
    if not train_windows:
        raise TrainingError("no training windows")
    if not val_windows:
        raise TrainingError("no validation windows")
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.parameters(), lr=config.lr)
    history: list[EpochRecord] = []
    best_val = np.inf
    best_epoch = 0
    best_state = model.param_state()
    since_best = 0
    stopped_early = False
    per_window = getattr(config, "per_window_lags", False)
    batch_size = 1 if per_window else config.batch_size

    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(len(train_windows))
        total, count = 0.0, 0
        for at in range(0, len(order), batch_size):
            chunk = [train_windows[i] for i in order[at:at + batch_size]]
            x, y = _stack_batch(chunk)
            opt.zero_grad()
            with Tape() as tape:
                pred = _forward_batch(model, x)
                loss = mse_loss(pred, DiffArray(y))
                loss_value = float(loss.values)
                if not np.isfinite(loss_value):
                    origins = [w.origin_index for w in chunk]
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch} (lr={config.lr}, "
                        f"batch origins {origins})"
                    )
                tape.backward(loss)
            opt.step()
            total += loss_value * y.size
            count += y.size
        train_mse = total / count
        val_mse = batch_mse(model, val_windows, batch_size=config.batch_size)
        if not np.isfinite(val_mse):
            raise TrainingError(
                f"non-finite validation loss at epoch {epoch} (lr={config.lr})"
            )
        history.append(EpochRecord(epoch, train_mse, val_mse,
                                   time.perf_counter() - start))
        log.info("epoch %d train_mse=%.6f val_mse=%.6f", epoch, train_mse, val_mse)
        if val_mse < best_val:
            best_val = val_mse
            best_epoch = epoch
            best_state = model.param_state()
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                stopped_early = True
                break
    model.load_param_state(best_state)
    return TrainResult(history=history, best_epoch=best_epoch,
                       best_val_mse=best_val, best_state=best_state,
                       stopped_early=stopped_early)


# ---------------------------------------------------------------------------
# evaluation

METRIC_NAMES = ("mse", "mae", "rmse", "mape")


def _metric_block(pred: np.ndarray, target: np.ndarray) -> dict:
    err = pred - target
    mse = float(np.mean(err ** 2))
    out = {
        "mse": mse,
        "mae": float(np.mean(np.abs(err))),
        "rmse": float(np.sqrt(mse)),
    }
    nonzero = target != 0
    skipped = int(target.size - nonzero.sum())
    if np.any(nonzero):
        out["mape"] = float(np.mean(
            np.abs(err[nonzero] / target[nonzero])) * 100.0)
    else:
        out["mape"] = float("nan")
    out["mape_skipped_zero_targets"] = skipped
    return out


@dataclass
class Evaluation:
    metrics: dict            # de-normalized scale
    normalized: dict         # normalized scale
    predictions: np.ndarray  # (W, N, H) de-normalized
    origins: np.ndarray

    def table(self, include_normalized: bool = False) -> str:
        lines = ["metric value scale"]
        for k in METRIC_NAMES:
            lines.append(f"{k} {self.metrics[k]:.6g} denormalized")
        lines.append(
            f"mape_skipped {self.metrics['mape_skipped_zero_targets']} denormalized")
        if include_normalized:
            for k in METRIC_NAMES:
                lines.append(f"{k} {self.normalized[k]:.6g} normalized")
        return "\n".join(lines)


def evaluate(model, windows: list[WindowPair],
             batch_size: int | None = None) -> Evaluation:
    """Metrics over every window and variate; predictions are de-normalized
    through the model's stored statistics (targets likewise)."""
    if not windows:
        raise TrainingError("empty evaluation set")
    batch_size = batch_size or model.config.batch_size
    if getattr(model.config, "per_window_lags", False):
        batch_size = 1
    preds, targets, origins = [], [], []
    for at in range(0, len(windows), batch_size):
        chunk = windows[at:at + batch_size]
        x, y = _stack_batch(chunk)
        preds.append(_forward_batch(model, x).values)
        targets.append(y)
        origins += [w.origin_index for w in chunk]
    pred_n = np.concatenate(preds, axis=0)
    target_n = np.concatenate(targets, axis=0)
    stats = model.norm_stats
    if stats is not None:
        pred_d = np.stack([denormalize(p, stats) for p in pred_n])
        target_d = np.stack([denormalize(t, stats) for t in target_n])
    else:
        pred_d, target_d = pred_n, target_n
    return Evaluation(
        metrics=_metric_block(pred_d, target_d),
        normalized=_metric_block(pred_n, target_n),
        predictions=pred_d,
        origins=np.asarray(origins),
    )


def mean_edge_weights(model, windows: list[WindowPair],
                      batch_size: int = 32) -> list[np.ndarray] | None:
    """Effective edge weights averaged over a window set (for graph export)."""
    if getattr(model, "gcn_mode", False) or model.graph is None:
        return None
    sums = [np.zeros(g.edge_count) for g in model.graph.scales]
    count = 0
    for at in range(0, len(windows), batch_size):
        chunk = windows[at:at + batch_size]
        x, _ = _stack_batch(chunk)
        patched = model.patched_inputs(x)
        weights = model.edge_weights(patched, model.graph)
        for s, w in enumerate(weights):
            vals = w.values
            if vals.ndim == 1:
                sums[s] += vals * len(chunk)
            else:
                sums[s] += vals.sum(axis=0)
        count += len(chunk)
    return [s / max(count, 1) for s in sums]
