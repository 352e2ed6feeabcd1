"""Command-line entry points: train, forecast, selfcheck.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure,
5 selfcheck failure. Failures print a single machine-parseable line
`error category=<cat> message=<text>` on stderr. All outputs land under
--out with fixed filenames.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import engine
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import DataError, chrono_split, load_csv, make_windows, \
    write_predictions_csv, zscore_fit_apply
from .hierarchy import HierarchyError, build_hierarchy, export_hierarchy, \
    hierarchy_from_assignments
from .laggraph import LagGraphError, build_initial_graph, export_graph, \
    xcorr_direct, xcorr_fft
from .model import ConfigError, LeadLagModel, ModelConfig, build_graphs, \
    hierarchy_config, mse_loss
from .synth import SynthError
from .train import TrainingError, evaluate, mean_edge_weights, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_SELFCHECK = 5

OUTPUT_FILES = ("checkpoint.bin", "history.csv", "predictions.csv",
                "graph.edges", "hierarchy.txt", "config.echo")

_DATA_KEYS = {
    "data": str, "out": str, "skip_timestamp": bool, "missing": str,
    "delimiter": str, "split_sizes": list,
}


class CliError(Exception):
    def __init__(self, category: str, message: str, code: int):
        super().__init__(message)
        self.category = category
        self.code = code


def _fail(category: str, message: str, code: int):
    raise CliError(category, message, code)


def _model_config_keys():
    return {f.name for f in dataclasses.fields(ModelConfig)}


def load_run_config(path: str | None) -> dict:
    """Run config file: JSON mirroring the model config plus data paths.
    Unknown keys are rejected."""
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        _fail("config", f"config file not found: {path}", EXIT_CONFIG)
    except json.JSONDecodeError as exc:
        _fail("config", f"config file is not valid JSON: {exc}", EXIT_CONFIG)
    if not isinstance(raw, dict):
        _fail("config", "config file must hold a JSON object", EXIT_CONFIG)
    allowed = _model_config_keys() | set(_DATA_KEYS)
    unknown = sorted(set(raw) - allowed)
    if unknown:
        _fail("config", f"unknown config keys: {unknown}", EXIT_CONFIG)
    return raw


def merge_config(file_cfg: dict, args: argparse.Namespace) -> dict:
    """Precedence: flag > config file > default."""
    merged = dict(file_cfg)
    if getattr(args, "data", None):
        merged["data"] = args.data
    if getattr(args, "out", None):
        merged["out"] = args.out
    if getattr(args, "seed", None) is not None:
        merged["seed"] = args.seed
    if getattr(args, "ablate", None):
        merged["ablation"] = args.ablate
    if getattr(args, "per_window_lags", False):
        merged["per_window_lags"] = True
    if getattr(args, "normalized_metrics", False):
        merged["normalized_metrics"] = True
    if getattr(args, "clustering", None):
        merged["clustering"] = args.clustering
    return merged


def build_model_config(merged: dict) -> ModelConfig:
    kwargs = {k: v for k, v in merged.items() if k in _model_config_keys()}
    if "train_ratios" in kwargs:
        kwargs["train_ratios"] = tuple(kwargs["train_ratios"])
    if kwargs.get("ablation") in ("no_ms", "no_hmp"):
        kwargs["coarse_groups"] = []
        kwargs["patch_lens"] = list(kwargs.get("patch_lens", [8]))[:1]
    try:
        return ModelConfig(**kwargs)
    except (ConfigError, TypeError) as exc:
        _fail("config", str(exc), EXIT_CONFIG)


def _echo_config(out_dir: str, merged: dict, config: ModelConfig) -> None:
    effective = dataclasses.asdict(config)
    effective["data"] = merged.get("data")
    effective["out"] = out_dir
    for key in ("skip_timestamp", "missing", "delimiter", "split_sizes"):
        if key in merged:
            effective[key] = merged[key]
    with open(os.path.join(out_dir, "config.echo"), "w", encoding="utf-8") as fh:
        json.dump(effective, fh, indent=2, sort_keys=True, default=list)
        fh.write("\n")


def cmd_train(args) -> int:
    merged = merge_config(load_run_config(args.config), args)
    if "data" not in merged:
        _fail("config", "no input data given (--data or config 'data')",
              EXIT_CONFIG)
    if "out" not in merged:
        _fail("config", "no output directory given (--out or config 'out')",
              EXIT_CONFIG)
    config = build_model_config(merged)
    out_dir = merged["out"]
    os.makedirs(out_dir, exist_ok=True)

    try:
        frame = load_csv(merged["data"],
                         delimiter=merged.get("delimiter", ","),
                         skip_timestamp=merged.get("skip_timestamp", False),
                         missing=merged.get("missing", "reject"))
    except (DataError, OSError) as exc:
        _fail("data", str(exc), EXIT_DATA)

    try:
        frame = zscore_fit_apply(frame, config.train_ratios[0])
        min_len = config.window_len + config.horizon
        if "split_sizes" in merged:
            tr, va, te = chrono_split(frame, sizes=merged["split_sizes"],
                                      min_length=min_len)
        else:
            tr, va, te = chrono_split(frame, ratios=config.train_ratios,
                                      min_length=min_len)
    except DataError as exc:
        _fail("data", str(exc), EXIT_DATA)

    try:
        hier = build_hierarchy(tr, hierarchy_config(config, frame.n_variates))
        graph = None
        if config.ablation != "no_hmp":
            graph = build_graphs(config, hier)
        model = LeadLagModel(config, hier, graph, frame.variate_names,
                             norm_stats=frame.norm_stats)
        windows = {
            "train": make_windows(tr, config.window_len, config.horizon,
                                  config.window_stride),
            "val": make_windows(va, config.window_len, config.horizon,
                                config.window_stride),
            "test": make_windows(te, config.window_len, config.horizon,
                                 config.window_stride),
        }
        result = train(model, windows["train"], windows["val"])
        ev = evaluate(model, windows["test"])
    except (HierarchyError, LagGraphError, ConfigError) as exc:
        _fail("config", str(exc), EXIT_CONFIG)
    except (TrainingError, FloatingPointError) as exc:
        _fail("numeric", str(exc), EXIT_NUMERIC)

    save_checkpoint(os.path.join(out_dir, "checkpoint.bin"), model)
    with open(os.path.join(out_dir, "history.csv"), "w", encoding="utf-8") as fh:
        fh.write(result.history_csv())
    with open(os.path.join(out_dir, "timing.csv"), "w", encoding="utf-8") as fh:
        fh.write(result.timing_csv())
    write_predictions_csv(os.path.join(out_dir, "predictions.csv"),
                          frame.variate_names, ev.predictions, ev.origins)
    with open(os.path.join(out_dir, "hierarchy.txt"), "w", encoding="utf-8") as fh:
        fh.write(export_hierarchy(hier, frame.variate_names))
    if graph is not None:
        weights = mean_edge_weights(model, windows["val"])
        with open(os.path.join(out_dir, "graph.edges"), "w", encoding="utf-8") as fh:
            fh.write(export_graph(graph, weights))
    else:
        with open(os.path.join(out_dir, "graph.edges"), "w", encoding="utf-8") as fh:
            fh.write("# no lead-lag graph (plain graph convolution mode)\n")
    _echo_config(out_dir, merged, config)

    print(f"trained {len(result.history)} epochs "
          f"(best epoch {result.best_epoch}, val_mse {result.best_val_mse:.6g})")
    print(ev.table(include_normalized=config.normalized_metrics))
    return EXIT_OK


def cmd_forecast(args) -> int:
    try:
        model = load_checkpoint(args.checkpoint)
    except (CheckpointError, OSError) as exc:
        _fail("config", str(exc), EXIT_CONFIG)
    try:
        frame = load_csv(args.input, skip_timestamp=args.skip_timestamp)
    except (DataError, OSError) as exc:
        _fail("data", str(exc), EXIT_DATA)
    if frame.variate_names != model.variate_names:
        _fail("data",
              f"variate names differ: expected {model.variate_names}, "
              f"found {frame.variate_names}", EXIT_DATA)
    lead = model.config.window_len
    if frame.n_steps < lead:
        _fail("data", f"input has {frame.n_steps} steps, needs at least {lead}",
              EXIT_DATA)
    stats = model.norm_stats
    values = frame.values[:, -lead:]
    if stats is not None:
        values = (values - stats.mean[:, None]) / stats.std[:, None]
    pred = model.predict(values[None, ...])[0]
    if stats is not None:
        pred = pred * stats.std[:, None] + stats.mean[:, None]
    if not np.all(np.isfinite(pred)):
        _fail("numeric", "forecast produced non-finite values", EXIT_NUMERIC)
    out_path = args.out or "predictions.csv"
    write_predictions_csv(out_path, model.variate_names, pred[None, ...],
                          [frame.n_steps - lead])
    print(f"wrote {out_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# selfcheck: embedded oracle suite

def _check_fft_oracle(rng) -> tuple[bool, str]:
    worst = 0.0
    for p in (8, 16, 32, 64):
        for _ in range(5):
            x, y = rng.normal(size=p), rng.normal(size=p)
            fast, slow = xcorr_fft(x, y), xcorr_direct(x, y)
            scale = max(np.max(np.abs(slow)), 1e-12)
            worst = max(worst, np.max(np.abs(fast - slow)) / scale)
    return worst <= 1e-9, f"fft-vs-time-domain max_rel={worst:.3e}"


def _check_duplication(rng) -> tuple[bool, str]:
    from . import message
    from .engine import DiffArray
    worst = 0.0
    for trial in range(3):
        n = int(rng.integers(4, 9))
        sizes = []
        left = n
        while left > 0:
            take = int(min(left, rng.integers(1, 4)))
            sizes.append(take)
            left -= take
        labels = np.repeat(np.arange(len(sizes)), sizes)
        assign = np.zeros((n, len(sizes)))
        assign[np.arange(n), labels] = 1.0
        series = rng.normal(size=(n, 128))
        hier = hierarchy_from_assignments(series, [assign], [4, 8], 32)
        graph = build_initial_graph(hier, k=2)
        layer = message.init_layer_params(rng, 2, 4, "chk")
        maps = message.build_scale_maps(hier)
        feats_v, weights_v, feats, weights = [], [], [], []
        for s in range(2):
            fv = rng.normal(size=(graph.scales[s].n_tokens, 4))
            wv = rng.uniform(0.1, 1.0, graph.scales[s].edge_count)
            feats_v.append(fv)
            weights_v.append(wv)
            feats.append(DiffArray(fv))
            weights.append(DiffArray(wv))
        got = message.aggregate(feats, graph.scales, weights, maps, layer,
                                engine.relu).values
        want = message.dense_aggregate_reference(
            feats_v, graph.scales, weights_v, hier, layer,
            lambda x: np.maximum(x, 0))
        worst = max(worst, float(np.max(np.abs(got - want))))
    return worst <= 1e-9, f"duplication-vs-dense max_abs={worst:.3e}"


def _check_gradients(rng) -> tuple[bool, str]:
    from .data import MtsFrame
    frame = MtsFrame(rng.normal(size=(4, 160)), [f"v{i}" for i in range(4)])
    frame = zscore_fit_apply(frame, 1.0)
    config = ModelConfig(window_len=16, horizon=4, coarse_groups=[2],
                         patch_lens=[4, 8], k_lags=2, d=3, d_e=3, d_a=3,
                         layers=1, seed=7)
    hier = build_hierarchy(frame, hierarchy_config(config, 4))
    graph = build_graphs(config, hier)
    model = LeadLagModel(config, hier, graph, frame.variate_names,
                         norm_stats=frame.norm_stats)
    x = frame.values[:, :16][None]
    y = frame.values[:, 16:20][None]

    def f():
        return mse_loss(model.forward(x), engine.DiffArray(y))

    report = engine.grad_check(f, model.parameters(), step=1e-5, tol=1e-3)
    worst = max((p.max_rel_err for p in report.params), default=0.0)
    return report.passed, f"whole-model gradient max_rel={worst:.3e}"


def _check_edge_counts(rng) -> tuple[bool, str, list[str]]:
    from .message import count_edges_and_work
    n = 8
    assign = np.zeros((n, 2))
    assign[:4, 0] = 1
    assign[4:, 1] = 1
    hier = hierarchy_from_assignments(rng.normal(size=(n, 256)), [assign],
                                      [4, 8], 32)
    graph = build_initial_graph(hier, k=2)
    report = count_edges_and_work(graph, hier)
    ok = not any(s.exceeds_bound for s in report.scales)
    return ok, f"edge counts within bounds: {ok}", report.lines()


def cmd_selfcheck(args) -> int:
    if getattr(args, "inject_fault", False):
        engine.set_fault_injection(True)
    rng = np.random.default_rng(20_240_817)
    rows = []
    try:
        checks = [
            ("fft-cross-correlation", _check_fft_oracle),
            ("duplication-aggregation", _check_duplication),
            ("gradient-check", _check_gradients),
        ]
        all_ok = True
        for name, fn in checks:
            ok, detail = fn(rng)
            all_ok &= ok
            rows.append((name, ok, detail))
        ok, detail, lines = _check_edge_counts(rng)
        all_ok &= ok
        rows.append(("edge-count-report", ok, detail))
        for name, ok, detail in rows:
            print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        for line in lines:
            print("  " + line)
    finally:
        engine.set_fault_injection(False)
    if not all_ok:
        _fail("selfcheck", "one or more embedded oracle checks failed",
              EXIT_SELFCHECK)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="leadlag",
        description="Multi-scale lead-lag graph forecasting for "
                    "multivariate time series",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model and write artifacts")
    p_train.add_argument("--config", help="JSON run config")
    p_train.add_argument("--data", help="input CSV (rows are time steps)")
    p_train.add_argument("--out", help="output directory")
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--ablate", choices=("no_ms", "no_init", "no_weight",
                                              "no_hmp"))
    p_train.add_argument("--per-window-lags", action="store_true",
                         dest="per_window_lags")
    p_train.add_argument("--normalized-metrics", action="store_true",
                         dest="normalized_metrics")
    p_train.add_argument("--clustering", choices=("spectral", "kmeans",
                                                  "hierarchical"))
    p_train.set_defaults(fn=cmd_train)

    p_fc = sub.add_parser("forecast", help="forecast from a checkpoint")
    p_fc.add_argument("checkpoint")
    p_fc.add_argument("input")
    p_fc.add_argument("--out", help="output CSV path")
    p_fc.add_argument("--skip-timestamp", action="store_true",
                      dest="skip_timestamp")
    p_fc.set_defaults(fn=cmd_forecast)

    p_sc = sub.add_parser("selfcheck", help="run the embedded oracle suite")
    p_sc.add_argument("--inject-fault", action="store_true", dest="inject_fault",
                      help=argparse.SUPPRESS)  # negative-control test hook
    p_sc.set_defaults(fn=cmd_selfcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error category={exc.category} message={exc}", file=sys.stderr)
        return exc.code
    except (SynthError, ValueError) as exc:
        print(f"error category=config message={exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
