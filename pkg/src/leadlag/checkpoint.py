"""Versioned binary checkpoint container.

Layout: an 8-byte magic, a little-endian uint64 manifest length, the JSON
manifest (config echo, variate names, normalization stats, lag sets, array
directory with shapes/dtypes/offsets/sha256, and a hierarchy fingerprint),
then the raw array payload. Arrays round-trip bit-exactly, so a reloaded
model reproduces forward outputs exactly on the same platform.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct

import numpy as np

from .data import NormStats
from .hierarchy import ScaleHierarchy
from .laggraph import InitialGraph, LagSet, ScaleGraph
from .model import LeadLagModel, ModelConfig

MAGIC = b"LLAGCKP1"
VERSION = 1
_DTYPES = {"float64": "<f8", "int64": "<i8"}


class CheckpointError(ValueError):
    pass


def _pack_arrays(arrays: dict[str, np.ndarray]):
    directory = []
    chunks = []
    offset = 0
    for name in arrays:
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype == np.float64:
            dtype = "float64"
        elif np.issubdtype(arr.dtype, np.integer):
            arr = arr.astype(np.int64)
            dtype = "int64"
        else:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = arr.astype(_DTYPES[dtype]).tobytes()
        directory.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": dtype,
            "offset": offset,
            "nbytes": len(raw),
            "sha256": hashlib.sha256(raw).hexdigest(),
        })
        chunks.append(raw)
        offset += len(raw)
    return directory, b"".join(chunks)


def _unpack_arrays(directory, payload: bytes) -> dict[str, np.ndarray]:
    out = {}
    for entry in directory:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise CheckpointError(f"checksum mismatch for array {entry['name']!r}")
        arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]])
        out[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return out


def _hierarchy_arrays(h: ScaleHierarchy) -> dict[str, np.ndarray]:
    out = {}
    for s, mat in enumerate(h.assignments, start=1):
        out[f"hierarchy.assign{s}"] = mat
    for s, g in enumerate(h.graphs):
        out[f"hierarchy.graph{s}"] = g
    return out


def _graph_arrays(graph: InitialGraph) -> dict[str, np.ndarray]:
    out = {}
    for g in graph.scales:
        base = f"graph{g.scale}"
        out[f"{base}.src_group"] = g.src_group
        out[f"{base}.dst_group"] = g.dst_group
        out[f"{base}.src_patch"] = g.src_patch
        out[f"{base}.dst_patch"] = g.dst_patch
        out[f"{base}.lag"] = g.lag
        out[f"{base}.coeff"] = g.coeff
    return out


def _lag_sets_manifest(graph: InitialGraph):
    out = []
    for g in graph.scales:
        out.append({
            "scale": g.scale,
            "n_groups": g.n_groups,
            "patch_count": g.patch_count,
            "patch_len": g.patch_len,
            "max_lag": g.max_lag,
            "pairs": [
                {"pair": list(ls.pair), "lags": ls.lags,
                 "coefficients": ls.coefficients, "short": ls.short}
                for ls in g.lag_sets.values()
            ],
        })
    return out


def save_checkpoint(path, model: LeadLagModel) -> None:
    arrays = {f"param.{name}": p.values for name, p in model.parameters()}
    arrays.update(_hierarchy_arrays(model.hierarchy))
    if model.graph is not None:
        arrays.update(_graph_arrays(model.graph))
    if model.norm_stats is not None:
        arrays["norm.mean"] = model.norm_stats.mean
        arrays["norm.std"] = model.norm_stats.std
    directory, payload = _pack_arrays(arrays)

    h_digest = hashlib.sha256()
    for name in sorted(_hierarchy_arrays(model.hierarchy)):
        h_digest.update(np.ascontiguousarray(arrays[name]).tobytes())

    manifest = {
        "version": VERSION,
        "config": dataclasses.asdict(model.config),
        "variate_names": model.variate_names,
        "hierarchy": {
            "patch_lens": model.hierarchy.patch_lens,
            "window_len": model.hierarchy.window_len,
            "group_counts": model.hierarchy.group_counts,
            "meta": model.hierarchy.meta,
            "fingerprint": h_digest.hexdigest(),
        },
        "graph": None if model.graph is None else {
            "k": model.graph.k,
            "scales": _lag_sets_manifest(model.graph),
        },
        "norm_train_fraction": None if model.norm_stats is None
        else model.norm_stats.train_fraction,
        "arrays": directory,
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path) -> LeadLagModel:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
        (blob_len,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(blob_len).decode("utf-8"))
        payload = fh.read()
    if manifest["version"] != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest['version']}")
    arrays = _unpack_arrays(manifest["arrays"], payload)

    cfg_dict = dict(manifest["config"])
    cfg_dict["train_ratios"] = tuple(cfg_dict["train_ratios"])
    config = ModelConfig(**cfg_dict)

    group_counts = manifest["hierarchy"]["group_counts"]
    assignments = [arrays[f"hierarchy.assign{s}"]
                   for s in range(1, len(group_counts))]
    graphs = [arrays[f"hierarchy.graph{s}"] for s in range(len(group_counts))]
    hierarchy = ScaleHierarchy(
        assignments=assignments,
        graphs=graphs,
        series=[np.zeros((c, 0)) for c in group_counts],
        patch_lens=list(manifest["hierarchy"]["patch_lens"]),
        window_len=manifest["hierarchy"]["window_len"],
        meta=dict(manifest["hierarchy"].get("meta", {})),
    )

    graph = None
    if manifest["graph"] is not None:
        scales = []
        for entry in manifest["graph"]["scales"]:
            s = entry["scale"]
            lag_sets = {}
            pairs = []
            for p in entry["pairs"]:
                pair = tuple(p["pair"])
                pairs.append(pair)
                lag_sets[pair] = LagSet(pair, s, [int(v) for v in p["lags"]],
                                        [float(v) for v in p["coefficients"]],
                                        short=p["short"])
            scales.append(ScaleGraph(
                scale=s, n_groups=entry["n_groups"],
                patch_count=entry["patch_count"], patch_len=entry["patch_len"],
                max_lag=entry["max_lag"],
                src_group=arrays[f"graph{s}.src_group"],
                dst_group=arrays[f"graph{s}.dst_group"],
                src_patch=arrays[f"graph{s}.src_patch"],
                dst_patch=arrays[f"graph{s}.dst_patch"],
                lag=arrays[f"graph{s}.lag"],
                coeff=arrays[f"graph{s}.coeff"],
                candidate_pairs=pairs, lag_sets=lag_sets,
            ))
        graph = InitialGraph(scales=scales, k=manifest["graph"]["k"])
        graph.validate()

    stats = None
    if "norm.mean" in arrays:
        stats = NormStats(mean=arrays["norm.mean"], std=arrays["norm.std"],
                          train_fraction=manifest["norm_train_fraction"])

    model = LeadLagModel(config, hierarchy, graph,
                         manifest["variate_names"], norm_stats=stats)
    state = {name[len("param."):]: arr for name, arr in arrays.items()
             if name.startswith("param.")}
    model.load_param_state(state)
    return model
