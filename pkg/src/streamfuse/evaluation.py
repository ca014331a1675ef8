"""Probe/gallery matching, CMC curves, and the ablation experiment runner.

Camera-1 sequences act as probes and camera-2 sequences as the gallery; a
probe's rank is the position of its true identity when gallery entries are
sorted by ascending embedding distance (ties broken by gallery index).  The
ablation runner trains and evaluates whole grids of configurations per seed
and assembles reports whose mean rows stay recomputable from the stored
per-seed curves.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import network as nw
from .config import ExperimentConfig, to_flat
from .data import split as split_dataset
from .data import synth_generate
from .network import AttentionParams, ConfigError, Network, temporal_pool
from .training import TrainConfig, train

SUMMARY_RANKS = (1, 5, 10, 20)
ABLATION_KINDS = ("stream_pairs", "stream_count", "fusion_method", "fusion_layer")

_PAIR_LABELS = {
    "max_pool": "MaxPool",
    "avg_pool": "AverPool",
    "strided_conv": "2stride",
    "dilated_max": "DilatedMax",
    "dilated_avg": "DilatedAver",
}


class EvalError(ValueError):
    """Raised when the evaluation protocol cannot be applied to a split."""


@dataclass
class CmcCurve:
    """Cumulative match rates indexed by rank 1..G."""

    ranks: list

    def __post_init__(self):
        self.ranks = [float(r) for r in self.ranks]
        if not self.ranks:
            raise EvalError("a CMC curve needs at least one rank")
        prev = 0.0
        for i, r in enumerate(self.ranks):
            if not 0.0 <= r <= 1.0:
                raise EvalError(f"rate at rank {i + 1} outside [0, 1]: {r}")
            if r < prev:
                raise EvalError(f"curve decreases at rank {i + 1}: {prev} -> {r}")
            prev = r
        if abs(self.ranks[-1] - 1.0) > 1e-12:
            raise EvalError(f"curve must end at 1.0, got {self.ranks[-1]}")

    @property
    def gallery_size(self) -> int:
        return len(self.ranks)

    def value_at(self, rank: int) -> float:
        """Rate at a 1-based rank, clamped to the gallery size."""
        if rank < 1:
            raise EvalError(f"rank must be >= 1, got {rank}")
        return self.ranks[min(rank, len(self.ranks)) - 1]

    def summary(self, ranks=SUMMARY_RANKS) -> dict:
        return {r: self.value_at(r) for r in ranks}


def compute_cmc(dist: np.ndarray, truth) -> CmcCurve:
    """Distance matrix [P, G] + true gallery index per probe -> CMC curve."""
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim != 2 or dist.shape[0] < 1 or dist.shape[1] < 1:
        raise EvalError(f"distance matrix must be [P >= 1, G >= 1], got shape {list(dist.shape)}")
    p, g = dist.shape
    truth = [int(t) for t in truth]
    if len(truth) != p:
        raise EvalError(f"need one true match per probe: {p} probes, {len(truth)} truths")
    for i, t in enumerate(truth):
        if not 0 <= t < g:
            raise EvalError(f"probe {i} truth index {t} outside gallery of size {g}")
    hits = np.zeros(g)
    for i, t in enumerate(truth):
        d_true = dist[i, t]
        rank = 1 + sum(1 for j in range(g) if (dist[i, j], j) < (d_true, t))
        hits[rank - 1] += 1
    return CmcCurve(list(np.cumsum(hits) / p))


# ---------------------------------------------------------------------------
# Network evaluation
# ---------------------------------------------------------------------------

def _probe_gallery(samples) -> tuple[list, list]:
    by_person: dict = {}
    for s in samples:
        by_person.setdefault(s.person_id, {}).setdefault(s.camera_id, []).append(s)
    probes, gallery = [], []
    for pid in sorted(by_person):
        cams = by_person[pid]
        if len(cams) < 2:
            raise EvalError(f"identity {pid!r} lacks a second camera; probe/gallery needs both")
        cam_ids = sorted(cams)
        probes.extend(cams[cam_ids[0]])
        gallery.append(cams[cam_ids[1]][0])
    return probes, gallery


def evaluate(net: Network, test_samples, cfg: TrainConfig) -> CmcCurve:
    """First-camera sequences against a second-camera gallery.

    Features come from the first min(test_seq_len, T) frames of each sequence;
    distances are Euclidean between pooled sequence vectors.  Attentive
    pooling scores each probe/gallery pair jointly.
    """
    probes, gallery = _probe_gallery(test_samples)
    gallery_index = {s.person_id: i for i, s in enumerate(gallery)}
    truth = [gallery_index[s.person_id] for s in probes]

    def clip(sample):
        return sample.frames[:min(cfg.test_seq_len, len(sample.frames))]

    if net.config.temporal_pool == "attentive":
        attn = AttentionParams(net.param("attn.u"))
        probe_frames = [net.forward_sequence(clip(s)) for s in probes]
        gallery_frames = [net.forward_sequence(clip(s)) for s in gallery]
        dist = np.zeros((len(probes), len(gallery)))
        for i, hp in enumerate(probe_frames):
            for j, hg in enumerate(gallery_frames):
                vp, vg = temporal_pool("attentive", hp, hg, attn)
                dist[i, j] = np.linalg.norm(vp.data - vg.data)
    else:
        pf = np.stack([net.sequence_feature(clip(s)).data for s in probes])
        gf = np.stack([net.sequence_feature(clip(s)).data for s in gallery])
        dist = np.linalg.norm(pf[:, None, :] - gf[None, :, :], axis=-1)
    return compute_cmc(dist, truth)


# ---------------------------------------------------------------------------
# Ablation grids
# ---------------------------------------------------------------------------

@dataclass
class AblationCell:
    """One grid configuration with its per-seed outcomes."""

    label: str
    overrides: dict
    curves: list = field(default_factory=list)
    error: Optional[str] = None

    def mean_summary(self, ranks=SUMMARY_RANKS) -> Optional[dict]:
        if not self.curves:
            return None
        return {r: float(np.mean([c.value_at(r) for c in self.curves])) for r in ranks}


@dataclass
class ExperimentReport:
    kind: str
    base_summary: dict
    seeds: list
    cells: list

    def rows(self) -> list[dict]:
        out = []
        for cell in self.cells:
            row = {"label": cell.label, "seeds": len(cell.curves), "error": cell.error or ""}
            mean = cell.mean_summary()
            for r in SUMMARY_RANKS:
                row[f"rank{r}"] = "" if mean is None else f"{mean[r]:.6f}"
            out.append(row)
        return out


def pair_label(streams) -> str:
    return "+".join(_PAIR_LABELS[s] for s in streams)


def ablation_grid(kind: str, base: nw.NetworkConfig) -> list[AblationCell]:
    """The configuration list for one ablation axis, in report order."""
    if kind == "stream_pairs":
        kinds = ("max_pool", "avg_pool", "strided_conv", "dilated_max")
        same = [(k, k) for k in kinds]
        mixed = [(a, kinds[j]) for i, a in enumerate(kinds) for j in range(i + 1, len(kinds))]
        return [AblationCell(pair_label(pair), {"architecture": "baseline", "streams": pair})
                for pair in same + mixed]
    if kind == "stream_count":
        ladder = ("max_pool", "avg_pool", "strided_conv", "dilated_max")
        return [AblationCell(f"{n} stream{'s' if n > 1 else ''}",
                             {"architecture": "baseline", "streams": ladder[:n]})
                for n in range(1, 5)]
    if kind == "fusion_method":
        return [AblationCell(k.capitalize(), {"fusion_kind": k})
                for k in ("sum", "max", "channel", "width", "height")]
    if kind == "fusion_layer":
        return [AblationCell(f"Conv{l}", {"fusion_layer": l})
                for l in range(1, base.num_blocks + 1)]
    raise EvalError(f"unknown ablation kind {kind!r}, expected one of {ABLATION_KINDS}")


def _run_cell(cfg: ExperimentConfig, overrides: dict, seed: int):
    net_cfg = replace(cfg.network, **overrides)
    samples = synth_generate(cfg.synth.num_ids, cfg.synth.cams,
                             cfg.synth.frames_per_seq, cfg.synth.extent, seed=seed)
    ds = split_dataset(samples, seed=seed)
    net = nw.build(net_cfg, seed=seed)
    train_cfg = replace(cfg.train, seed=seed)
    train(net, ds, train_cfg)
    return evaluate(net, ds.test, train_cfg)


def run_ablation(kind: str, cfg: ExperimentConfig, seeds,
                 progress: Optional[Callable[[str, int], None]] = None,
                 max_workers: int = 1) -> ExperimentReport:
    """Train and evaluate every grid cell per seed.

    Each (cell, seed) run regenerates its dataset, split, network, and
    training from that seed, so cells are independent and may run on worker
    threads; numeric results do not depend on scheduling.  Configuration
    errors are recorded on the cell without aborting the rest of the grid,
    and report assembly is serialized in grid order.
    """
    seeds = list(seeds)
    if not seeds:
        raise EvalError("ablation needs at least one seed")
    cells = ablation_grid(kind, cfg.network)
    jobs = [(ci, seed) for ci in range(len(cells)) for seed in seeds]
    outcomes: dict = {}

    def execute(ci: int, seed: int):
        if progress is not None:
            progress(cells[ci].label, seed)
        try:
            return cells[ci].overrides, _run_cell(cfg, cells[ci].overrides, seed)
        except (ConfigError, EvalError, ValueError) as e:
            return cells[ci].overrides, f"{type(e).__name__}: {e}"

    if max_workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            futures = {job: pool.submit(execute, *job) for job in jobs}
        for job, fut in futures.items():
            outcomes[job] = fut.result()[1]
    else:
        for job in jobs:
            outcomes[job] = execute(*job)[1]

    for ci, cell in enumerate(cells):
        for seed in seeds:
            result = outcomes[(ci, seed)]
            if isinstance(result, CmcCurve):
                cell.curves.append(result)
            elif cell.error is None:
                cell.error = result
    return ExperimentReport(kind=kind, base_summary=to_flat(cfg), seeds=seeds, cells=cells)


# ---------------------------------------------------------------------------
# Report serialization
# ---------------------------------------------------------------------------

def report_to_csv(report: ExperimentReport) -> str:
    cols = ["label", "seeds"] + [f"rank{r}" for r in SUMMARY_RANKS] + ["error"]
    lines = [",".join(cols)]
    for row in report.rows():
        lines.append(",".join(str(row[c]) for c in cols))
    return "\n".join(lines) + "\n"


def report_to_json(report: ExperimentReport) -> str:
    payload = {
        "kind": report.kind,
        "base_config": report.base_summary,
        "seeds": report.seeds,
        "cells": [
            {
                "label": c.label,
                "overrides": {k: list(v) if isinstance(v, tuple) else v
                              for k, v in c.overrides.items()},
                "curves": [c2.ranks for c2 in c.curves],
                "mean": c.mean_summary(),
                "error": c.error,
            }
            for c in report.cells
        ],
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# SVG plots
# ---------------------------------------------------------------------------

_PALETTE = ("#1b6ca8", "#c0392b", "#27ae60", "#8e44ad", "#d35400",
            "#16a085", "#7f8c8d", "#2c3e50", "#f39c12", "#9b59b6")


def _svg_header(width: int, height: int) -> list[str]:
    return [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">',
            f'<rect width="{width}" height="{height}" fill="white"/>']


def curves_svg(named_curves: dict, width: int = 640, height: int = 420) -> str:
    """CMC curves as polylines with a right-hand legend."""
    if not named_curves:
        raise EvalError("no curves to plot")
    margin, legend_w = 50, 150
    pw, ph = width - margin * 2 - legend_w, height - margin * 2
    gmax = max(c.gallery_size for c in named_curves.values())
    parts = _svg_header(width, height)
    parts.append(f'<rect x="{margin}" y="{margin}" width="{pw}" height="{ph}" '
                 f'fill="none" stroke="#444"/>')
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = margin + ph * (1 - frac)
        parts.append(f'<line x1="{margin}" y1="{y:.1f}" x2="{margin + pw}" y2="{y:.1f}" '
                     f'stroke="#ddd"/>')
        parts.append(f'<text x="{margin - 8}" y="{y + 4:.1f}" font-size="11" '
                     f'text-anchor="end" fill="#333">{frac:.2f}</text>')
    for i, (name, curve) in enumerate(named_curves.items()):
        color = _PALETTE[i % len(_PALETTE)]
        pts = []
        for r, v in enumerate(curve.ranks, start=1):
            x = margin + pw * (r - 1) / max(gmax - 1, 1)
            y = margin + ph * (1 - v)
            pts.append(f"{x:.1f},{y:.1f}")
        parts.append(f'<polyline points="{" ".join(pts)}" fill="none" stroke="{color}" '
                     f'stroke-width="2"/>')
        ly = margin + 16 * i
        parts.append(f'<rect x="{margin + pw + 12}" y="{ly}" width="10" height="10" fill="{color}"/>')
        parts.append(f'<text x="{margin + pw + 28}" y="{ly + 9}" font-size="11" fill="#333">{name}</text>')
    parts.append(f'<text x="{margin + pw / 2:.1f}" y="{height - 12}" font-size="12" '
                 f'text-anchor="middle" fill="#333">rank</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def bars_svg(labels, values, width: int = 640, height: int = 360) -> str:
    """Rank-1 rates per configuration as a bar chart."""
    if len(labels) != len(values) or not labels:
        raise EvalError("bar chart needs matching non-empty labels and values")
    margin = 50
    pw, ph = width - margin * 2, height - margin * 2
    n = len(labels)
    bw = pw / (1.5 * n + 0.5)
    parts = _svg_header(width, height)
    parts.append(f'<rect x="{margin}" y="{margin}" width="{pw}" height="{ph}" '
                 f'fill="none" stroke="#444"/>')
    for i, (label, value) in enumerate(zip(labels, values)):
        v = min(max(float(value), 0.0), 1.0)
        x = margin + bw * (0.5 + 1.5 * i)
        h = ph * v
        parts.append(f'<rect x="{x:.1f}" y="{margin + ph - h:.1f}" width="{bw:.1f}" '
                     f'height="{h:.1f}" fill="{_PALETTE[i % len(_PALETTE)]}"/>')
        parts.append(f'<text x="{x + bw / 2:.1f}" y="{margin + ph - h - 4:.1f}" font-size="10" '
                     f'text-anchor="middle" fill="#333">{v:.2f}</text>')
        parts.append(f'<text x="{x + bw / 2:.1f}" y="{margin + ph + 14}" font-size="10" '
                     f'text-anchor="middle" fill="#333">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
