"""Shared-plane PCA of features and classifier prototypes, rendered as SVG."""

from __future__ import annotations

import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ssgen.errors import ContractError, DegenerateDataError

SAMPLE_COLOR = "#d62728"
PROTOTYPE_COLOR = "#1f77b4"
HIGHLIGHT_COLOR = "#2ca02c"
SHAPES = ("circle", "square", "triangle", "diamond", "cross", "star", "hexagon", "triangle_down", "plus", "pentagon")


@dataclass
class Projection:
    features: np.ndarray  # (n, 2)
    prototypes: np.ndarray  # (m, 2)
    components: np.ndarray  # (d, 2)
    center: np.ndarray  # (d,)
    eigenvalues: np.ndarray  # (2,)


def project_2d(features, classifier_rows) -> Projection:
    """PCA fitted on the union of both sets, both projected into the same plane.

    Each principal axis is signed so its largest-magnitude loading is positive.
    """
    feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
    rows = np.atleast_2d(np.asarray(classifier_rows, dtype=np.float64))
    parts = [p for p in (feats, rows) if p.size]
    union = np.concatenate(parts) if parts else np.zeros((0, 0))
    if len(union) < 3:
        raise ContractError(f"project_2d needs at least 3 vectors, got {len(union)}")
    if union.ndim != 2 or union.shape[1] < 2:
        raise ContractError("vectors must have dimension >= 2")
    center = union.mean(axis=0)
    centered = union - center
    cov = centered.T @ centered / (len(union) - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    if eigvals[-1] <= 1e-12 * max(1.0, float(np.abs(union).max())):
        raise DegenerateDataError("all vectors coincide; nothing to project")
    order = np.argsort(eigvals)[::-1][:2]
    comps = eigvecs[:, order]
    for j in range(2):
        if comps[np.argmax(np.abs(comps[:, j])), j] < 0:
            comps[:, j] *= -1
    n_feat = len(feats) if feats.size else 0
    coords = centered @ comps
    return Projection(coords[:n_feat], coords[n_feat:], comps, center, np.clip(eigvals[order], 0, None))


def _marker(parent, shape: str, x: float, y: float, r: float, **style) -> None:
    if shape == "circle":
        ET.SubElement(parent, "circle", cx=f"{x:.2f}", cy=f"{y:.2f}", r=f"{r:.2f}", **style)
        return
    if shape == "square":
        ET.SubElement(parent, "rect", x=f"{x - r:.2f}", y=f"{y - r:.2f}", width=f"{2 * r:.2f}", height=f"{2 * r:.2f}", **style)
        return
    angles = {
        "triangle": (-90, 30, 150),
        "triangle_down": (90, 210, 330),
        "diamond": (0, 90, 180, 270),
        "pentagon": tuple(-90 + 72 * i for i in range(5)),
        "hexagon": tuple(60 * i for i in range(6)),
    }
    if shape in angles:
        pts = [(x + r * np.cos(np.radians(a)), y + r * np.sin(np.radians(a))) for a in angles[shape]]
    elif shape == "star":
        pts = [
            (x + (r if i % 2 == 0 else r / 2.5) * np.cos(np.radians(-90 + 36 * i)),
             y + (r if i % 2 == 0 else r / 2.5) * np.sin(np.radians(-90 + 36 * i)))
            for i in range(10)
        ]
    else:  # cross / plus drawn as thick polygons
        t = r / 3
        base = [(-t, -r), (t, -r), (t, -t), (r, -t), (r, t), (t, t), (t, r), (-t, r), (-t, t), (-r, t), (-r, -t), (-t, -t)]
        rot = np.radians(45 if shape == "cross" else 0)
        c, s = np.cos(rot), np.sin(rot)
        pts = [(x + px * c - py * s, y + px * s + py * c) for px, py in base]
    ET.SubElement(parent, "polygon", points=" ".join(f"{px:.2f},{py:.2f}" for px, py in pts), **style)


def export_scatter(
    path,
    sample_coords,
    sample_labels,
    prototype_coords,
    prototype_labels=None,
    title: str = "",
    config_hash: str = "",
    highlight: int | None = None,
    size: int = 480,
) -> Path:
    """Standalone SVG: red class-shaped samples, larger blue class-shaped prototypes.

    ``highlight`` marks one sample (the test sample an adapted classifier was
    generated for) with a green ring.
    """
    samples = np.asarray(sample_coords, dtype=np.float64).reshape(-1, 2)
    protos = np.asarray(prototype_coords, dtype=np.float64).reshape(-1, 2)
    sample_labels = np.asarray(sample_labels, dtype=int).reshape(-1)
    if prototype_labels is None:
        prototype_labels = np.arange(len(protos))
    prototype_labels = np.asarray(prototype_labels, dtype=int).reshape(-1)
    if len(sample_labels) != len(samples) or len(prototype_labels) != len(protos):
        raise ContractError("labels must match coordinates")
    allpts = np.concatenate([samples, protos]) if len(protos) else samples
    if len(allpts) == 0:
        raise ContractError("nothing to plot")
    lo, hi = allpts.min(axis=0), allpts.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    margin = 30.0

    def to_px(p):
        x = margin + (p[0] - lo[0]) / span[0] * (size - 2 * margin)
        y = size - margin - (p[1] - lo[1]) / span[1] * (size - 2 * margin)
        return x, y

    svg = ET.Element(
        "svg", xmlns="http://www.w3.org/2000/svg", width=str(size), height=str(size), viewBox=f"0 0 {size} {size}"
    )
    ET.SubElement(svg, "title").text = title or "feature and prototype projection"
    if config_hash:
        ET.SubElement(svg, "desc").text = f"config_hash={config_hash}"
    ET.SubElement(svg, "rect", x="0", y="0", width=str(size), height=str(size), fill="white")
    group = ET.SubElement(svg, "g", id="samples")
    for p, label in zip(samples, sample_labels):
        x, y = to_px(p)
        _marker(group, SHAPES[label % len(SHAPES)], x, y, 3.5, fill=SAMPLE_COLOR, **{"fill-opacity": "0.6"})
    if highlight is not None:
        x, y = to_px(samples[highlight])
        ET.SubElement(svg, "circle", cx=f"{x:.2f}", cy=f"{y:.2f}", r="9", fill="none", stroke=HIGHLIGHT_COLOR, **{"stroke-width": "2.5"})
    group = ET.SubElement(svg, "g", id="prototypes")
    for p, label in zip(protos, prototype_labels):
        x, y = to_px(p)
        _marker(group, SHAPES[label % len(SHAPES)], x, y, 8.0, fill=PROTOTYPE_COLOR, stroke="black")
        ET.SubElement(group, "text", x=f"{x + 10:.2f}", y=f"{y - 8:.2f}", **{"font-size": "11"}).text = str(label)
    if title:
        ET.SubElement(svg, "text", x="10", y="18", **{"font-size": "13"}).text = title
    path = Path(path)
    ET.ElementTree(svg).write(path, encoding="utf-8", xml_declaration=True)
    return path
