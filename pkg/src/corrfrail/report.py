"""Plain-CSV emission of threshold grids, partition variances and plot series.

Floats are written with ``repr`` so reruns are byte-identical and values
round-trip exactly.  Rendering is left to external tools.
"""

from __future__ import annotations

import csv
import math
import os

from .dataset import CompetingRisksDataset, cumulative_incidence
from .threshold import AllOrderingsResult, PartitionVariance, StepwiseResult, ThresholdScanResult

CIF_HEADER = ("time", "cif", "cause")
SCAN_HEADER = ("gene", "position", "cutoff", "p_value", "frailty_variance")
PARTITION_HEADER = ("gene", "cutoff", "lower_fvar", "upper_fvar", "lower_note", "upper_note")
APPENDIX_HEADER = ("ordering", "start", "position", "gene", "cutoff", "lower_fvar", "upper_fvar", "note")


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def write_csv(path, header, rows):
    """Write ``rows`` under ``header``; an empty ``rows`` gives a header-only file."""
    d = os.path.dirname(path)
    if d:
        os.makedirs(d, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])
    return path


def table5_rows(rows, genes=None):
    """One row per (ordering, start) with one cutoff column per gene.

    ``genes`` fixes the column order (default: the first row's ordering).
    """
    rows = list(rows)
    if genes is None:
        genes = tuple(rows[0].ordering) if rows else ()
    header = ("ordering", "start") + tuple(genes)
    out = []
    for r in rows:
        cut = r.as_dict()
        out.append([">".join(r.ordering), r.start] + [float(cut[g]) for g in genes])
    return header, out


def cif_rows(data: CompetingRisksDataset):
    out = []
    for j in range(1, data.num_causes + 1):
        f = cumulative_incidence(data, j)
        out += [[float(t), float(v), j] for t, v in zip(f.breakpoints, f.values)]
    return out


def scan_rows(scan: ThresholdScanResult):
    return [[r[c] for c in SCAN_HEADER] for r in scan.to_rows()]


def partition_rows(parts):
    return [[p.gene, p.cutoff, p.lower_fvar, p.upper_fvar, p.lower_note, p.upper_note] for p in parts]


def appendix_rows(rows, partitions):
    """Per stepwise row and selection position: the arm variances of that gene's cutoff.

    ``partitions`` maps ``(gene, cutoff)`` to a :class:`PartitionVariance`.
    """
    out = []
    for r in rows:
        for pos, (g, c) in enumerate(zip(r.ordering, r.cutoffs), start=1):
            pv = partitions[(g, c)]
            note = "; ".join(n for n in (pv.lower_note, pv.upper_note) if n)
            out.append([">".join(r.ordering), r.start, pos, g, float(c), pv.lower_fvar, pv.upper_fvar, note])
    return out


def emit_report(results, directory, kind=None, genes=None):
    """Write ``results`` as CSV under ``directory``; returns the written paths.

    The kind is inferred from the result type unless given explicitly
    (``"table5"``, ``"scan"``, ``"partitions"`` or ``"cif"``), which is needed
    for an empty result list.
    """
    if kind is None:
        if isinstance(results, AllOrderingsResult):
            kind = "table5"
        elif isinstance(results, ThresholdScanResult):
            kind = "scan"
        elif isinstance(results, CompetingRisksDataset):
            kind = "cif"
        elif isinstance(results, (list, tuple)) and results and isinstance(results[0], PartitionVariance):
            kind = "partitions"
        elif isinstance(results, (list, tuple)) and results and isinstance(results[0], StepwiseResult):
            kind = "table5"
        else:
            raise ValueError("cannot infer report kind; pass kind=")
    if kind == "table5":
        rows = results.rows if isinstance(results, AllOrderingsResult) else results
        header, body = table5_rows(rows, genes)
        if not body and genes is None:
            header = ("ordering", "start")
        return [write_csv(os.path.join(directory, "table5.csv"), header, body)]
    if kind == "scan":
        return [write_csv(os.path.join(directory, f"scan_{results.gene}.csv"), SCAN_HEADER, scan_rows(results))]
    if kind == "partitions":
        return [write_csv(os.path.join(directory, "partitions.csv"), PARTITION_HEADER, partition_rows(results))]
    if kind == "cif":
        body = cif_rows(results) if isinstance(results, CompetingRisksDataset) else list(results)
        return [write_csv(os.path.join(directory, "cif.csv"), CIF_HEADER, body)]
    raise ValueError(f"unknown report kind {kind!r}")
