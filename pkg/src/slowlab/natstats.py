"""Transition statistics for tracked object-mask measurements.

CSV measurements come in per frame and object; this module groups them
into tracks, forms temporal differences of position and area, rescales
each difference column to unit standard deviation with clipping, fits
the three distribution families, and produces dependence diagnostics
that contrast true pairs with per-column shuffled ones.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace

import numpy as np

from .dists import fit_all_families, kurtosis

__all__ = [
    "COLUMNS",
    "CSV_HEADER",
    "CLIP_LIMIT",
    "HIST_BINS",
    "TrackSample",
    "MaskTrack",
    "TransitionTable",
    "load_tracks",
    "compute_transitions",
    "normalize_clip",
    "stats_report",
    "stats_text",
    "dependence_diagnostic",
]

logger = logging.getLogger(__name__)

COLUMNS = ("dx", "dy", "darea")
CSV_HEADER = ("sequence_id", "object_id", "frame", "time_s", "cx", "cy", "area")
CLIP_LIMIT = 5.0
HIST_BINS = 50


@dataclass(frozen=True)
class TrackSample:
    frame: int
    time_s: float
    cx: float
    cy: float
    area: float


@dataclass
class MaskTrack:
    """One object's ordered measurements within one sequence."""

    sequence_id: str
    object_id: str
    samples: list

    def __post_init__(self):
        if not self.samples:
            raise ValueError("track has no samples")
        frames = [s.frame for s in self.samples]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise ValueError(f"track {self.key}: frames not strictly increasing")
        if any(s.area <= 0 for s in self.samples):
            raise ValueError(f"track {self.key}: area must be > 0")

    @property
    def key(self) -> str:
        return f"{self.sequence_id}/{self.object_id}"


@dataclass
class TransitionTable:
    """Per-pair differences (dx, dy, darea) with provenance columns.

    ``raw`` holds the differences in input units; ``normalized`` is
    filled by normalize_clip.  Every row comes from two samples of the
    same track, never across tracks.
    """

    track_ids: list
    gaps: np.ndarray
    dt: np.ndarray
    raw: np.ndarray
    normalized: np.ndarray | None = None
    clip_counts: dict | None = None

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=float)
        if self.raw.ndim != 2 or self.raw.shape[1] != len(COLUMNS):
            raise ValueError(f"raw must be (n, {len(COLUMNS)}), got {self.raw.shape}")
        n = self.raw.shape[0]
        self.gaps = np.asarray(self.gaps, dtype=int)
        self.dt = np.asarray(self.dt, dtype=float)
        if len(self.track_ids) != n or self.gaps.shape != (n,) or self.dt.shape != (n,):
            raise ValueError("provenance columns must match the row count")

    @property
    def count(self) -> int:
        return self.raw.shape[0]

    @property
    def mean_dt(self) -> float:
        return float(self.dt.mean()) if self.count else float("nan")

    def column(self, name: str, normalized: bool = True) -> np.ndarray:
        source = self.normalized if normalized else self.raw
        if source is None:
            raise ValueError("table has no normalized columns; run normalize_clip")
        return source[:, COLUMNS.index(name)]


def _report_row_errors(errors, sink):
    if sink is not None:
        sink.extend(errors)
    elif errors:
        logger.warning("%d rows rejected; first: %s", len(errors), errors[0])


def load_tracks(path, errors: list | None = None) -> list:
    """Parse a measurement CSV into validated, frame-sorted tracks.

    Rows that cannot be used (bad numbers, non-positive area, duplicate
    frame within a track) are collected as messages in ``errors`` when a
    list is passed, otherwise logged.  A malformed header or unreadable
    file is fatal.
    """
    collected = []
    groups: dict = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise ValueError(f"expected header {','.join(CSV_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                collected.append(f"row {lineno}: expected {len(CSV_HEADER)} fields, got {len(row)}")
                continue
            seq, obj = row[0].strip(), row[1].strip()
            try:
                sample = TrackSample(int(row[2]), float(row[3]), float(row[4]),
                                     float(row[5]), float(row[6]))
            except ValueError:
                collected.append(f"row {lineno}: unparseable numeric field")
                continue
            if not all(np.isfinite(v) for v in (sample.time_s, sample.cx, sample.cy, sample.area)):
                collected.append(f"row {lineno}: non-finite value")
                continue
            if sample.area <= 0:
                collected.append(f"row {lineno}: area {sample.area} must be > 0")
                continue
            groups.setdefault((seq, obj), []).append((lineno, sample))

    tracks = []
    for (seq, obj), rows in sorted(groups.items()):
        rows.sort(key=lambda pair: (pair[1].frame, pair[0]))
        kept = []
        for lineno, sample in rows:
            if kept and sample.frame == kept[-1].frame:
                collected.append(f"row {lineno}: duplicate frame {sample.frame} "
                                 f"in track {seq}/{obj}")
                continue
            kept.append(sample)
        tracks.append(MaskTrack(seq, obj, kept))
    _report_row_errors(collected, errors)
    return tracks


def compute_transitions(tracks, max_frame_gap: int = 1) -> TransitionTable:
    """Ordered within-track sample pairs at frame distance <= max_frame_gap."""
    if max_frame_gap < 1:
        raise ValueError(f"max_frame_gap must be >= 1, got {max_frame_gap}")
    ids, gaps, dts, rows = [], [], [], []
    for track in tracks:
        samples = track.samples
        for i, first in enumerate(samples):
            for second in samples[i + 1:]:
                gap = second.frame - first.frame
                if gap > max_frame_gap:
                    break
                ids.append(track.key)
                gaps.append(gap)
                dts.append(second.time_s - first.time_s)
                rows.append((second.cx - first.cx, second.cy - first.cy,
                             second.area - first.area))
    raw = np.array(rows, dtype=float).reshape(len(rows), len(COLUMNS))
    return TransitionTable(ids, np.array(gaps, dtype=int), np.array(dts, dtype=float), raw)


def normalize_clip(table: TransitionTable) -> TransitionTable:
    """Scale each raw column to unit standard deviation, clip to +-CLIP_LIMIT.

    Standard deviations are taken over the pooled table (all tracks and
    sequences together).  Returns a new table; clip counts are per column.
    """
    if table.count == 0:
        raise ValueError("cannot normalize an empty table")
    stds = table.raw.std(axis=0)
    for name, s in zip(COLUMNS, stds):
        if s == 0:
            raise ValueError(f"column {name} is constant; cannot normalize")
    scaled = table.raw / stds
    clipped = np.clip(scaled, -CLIP_LIMIT, CLIP_LIMIT)
    counts = {name: int((np.abs(scaled[:, k]) > CLIP_LIMIT).sum())
              for k, name in enumerate(COLUMNS)}
    return replace(table, normalized=clipped, clip_counts=counts)


def stats_report(table: TransitionTable) -> dict:
    """Per-column family fits and kurtosis of the normalized differences.

    Deterministic given the table contents; the fits use fixed
    multi-start optimization with no randomness.
    """
    if table.normalized is None:
        raise ValueError("table has no normalized columns; run normalize_clip")
    columns = {}
    for k, name in enumerate(COLUMNS):
        data = table.normalized[:, k]
        entries = fit_all_families(data)
        columns[name] = {
            "count": int(data.size),
            "kurtosis": kurtosis(data),
            "clipped": table.clip_counts[name],
            "fits": [
                {"family": e.family, "params": list(e.params), "loglik": e.loglik}
                for e in entries
            ],
        }
    return {
        "normalization": "unit std over the pooled table, clipped to "
                         f"[-{CLIP_LIMIT:g}, {CLIP_LIMIT:g}]",
        "count": table.count,
        "mean_dt": table.mean_dt,
        "columns": columns,
    }


def stats_text(report: dict) -> str:
    """Aligned text rendering of a stats_report dict."""
    lines = [
        f"transitions: {report['count']}   mean dt: {report['mean_dt']:.6g}   "
        f"({report['normalization']})",
        f"{'column':<8}{'family':<14}{'loglik':>14}  {'kurtosis':>10}  params",
    ]
    for name, col in report["columns"].items():
        for fit in col["fits"]:
            params = ", ".join(f"{p:.4g}" for p in fit["params"])
            lines.append(f"{name:<8}{fit['family']:<14}{fit['loglik']:>14.4f}  "
                         f"{col['kurtosis']:>10.3f}  ({params})")
    return "\n".join(lines)


def dependence_diagnostic(table: TransitionTable, rng: np.random.Generator) -> dict:
    """Paired vs per-column-shuffled histograms and |difference| correlations.

    Shuffling permutes each normalized column independently, which keeps
    every 1D marginal exactly while destroying cross-column dependence.
    Histograms use a fixed 50x50 grid over the clip square.
    """
    if table.normalized is None:
        raise ValueError("table has no normalized columns; run normalize_clip")
    data = table.normalized
    shuffled = np.column_stack([data[rng.permutation(table.count), k]
                                for k in range(len(COLUMNS))])
    edges = np.linspace(-CLIP_LIMIT, CLIP_LIMIT, HIST_BINS + 1)
    pairs = {}
    for i in range(len(COLUMNS)):
        for j in range(i + 1, len(COLUMNS)):
            paired_h, _, _ = np.histogram2d(data[:, i], data[:, j], bins=(edges, edges))
            shuffled_h, _, _ = np.histogram2d(shuffled[:, i], shuffled[:, j],
                                              bins=(edges, edges))
            pairs[f"{COLUMNS[i]}|{COLUMNS[j]}"] = {
                "paired": paired_h.astype(int).tolist(),
                "shuffled": shuffled_h.astype(int).tolist(),
            }
    return {
        "bins": HIST_BINS,
        "edges": edges.tolist(),
        "pairs": pairs,
        "abs_corr": {
            "paired": np.corrcoef(np.abs(data), rowvar=False).tolist(),
            "shuffled": np.corrcoef(np.abs(shuffled), rowvar=False).tolist(),
        },
    }
