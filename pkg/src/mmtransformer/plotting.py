"""SVG scatter of predicted endpoints over the region partition."""

from __future__ import annotations

import json
from typing import Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .model import PredictionSet
from .partition import ProposalRegionMap, RegionPartition
from .scene import atomic_write_text

PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
    "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#393b79", "#637939",
)


def region_color(i: int) -> str:
    return PALETTE[i % len(PALETTE)]


def kept_endpoints(predictions: Sequence[PredictionSet], proposal_map: ProposalRegionMap):
    """Endpoints whose confidence is not below the uniform level 1/K,
    with the region of the proposal that produced them."""
    pts, regions = [], []
    for pred in predictions:
        K = len(pred.scores)
        probs = pred.probabilities()
        keep = ~(probs < 1.0 / K)
        pts.append(pred.endpoints[keep])
        regions.append(proposal_map.assignment[keep])
    if not pts:
        return np.zeros((0, 2)), np.zeros(0, dtype=np.int64)
    return np.concatenate(pts), np.concatenate(regions)


def render_endpoint_plot(
    predictions: Sequence[PredictionSet],
    partition: Optional[RegionPartition],
    path,
    proposal_map: Optional[ProposalRegionMap] = None,
    meta: Optional[dict] = None,
    size: int = 600,
    extent: float = 40.0,
) -> str:
    """Write the SVG to ``path`` and return its text."""
    if proposal_map is None:
        K = len(predictions[0].scores) if predictions else 1
        M = partition.M if partition is not None else 1
        proposal_map = ProposalRegionMap(K, M if K % M == 0 else 1)
    pts, regions = kept_endpoints(predictions, proposal_map)

    scale = size / (2 * extent)

    def sx(x):
        return (x + extent) * scale

    def sy(y):
        return (extent - y) * scale

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f"<metadata>{escape(json.dumps(meta or {}))}</metadata>",
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>',
        f'<g id="axes" stroke="#444" stroke-width="1">'
        f'<line x1="0" y1="{sy(0):.2f}" x2="{size}" y2="{sy(0):.2f}"/>'
        f'<line x1="{sx(0):.2f}" y1="0" x2="{sx(0):.2f}" y2="{size}"/></g>',
    ]
    if partition is not None:
        out.append('<g id="regions" fill-opacity="0.08" stroke-width="1.5">')
        for i, hull in enumerate(partition.hulls):
            hull = np.asarray(hull)
            if len(hull) == 0:
                continue
            coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in hull)
            out.append(f'<polygon class="hull r{i}" points="{coords}" fill="{region_color(i)}" stroke="{region_color(i)}"/>')
        for i, (x, y) in enumerate(partition.centroids):
            out.append(f'<path class="centroid r{i}" d="M{sx(x) - 5:.2f},{sy(y):.2f}h10M{sx(x):.2f},{sy(y) - 5:.2f}v10" stroke="black" stroke-width="2"/>')
        out.append("</g>")
    out.append('<g id="endpoints">')
    for (x, y), r in zip(pts, regions):
        out.append(f'<circle class="endpoint r{int(r)}" cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="2" fill="{region_color(int(r))}"/>')
    out.append("</g></svg>")
    text = "\n".join(out) + "\n"
    atomic_write_text(path, text)
    return text
