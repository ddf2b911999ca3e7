"""Parametric stroke glyphs: a hermetic stand-in for handwritten digits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ssgen.errors import ContractError

SIZE = 28
CENTER = (SIZE - 1) / 2.0
_UNIT_PX = 9.0


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray  # (28, 28) float32 in [0, 1]
    label: int

    def __post_init__(self) -> None:
        if self.pixels.shape != (SIZE, SIZE):
            raise ContractError(f"pixels must be {SIZE}x{SIZE}, got {self.pixels.shape}")
        if self.label < 0:
            raise ContractError(f"negative label {self.label}")


def _arc(cx, cy, rx, ry, start, stop, n=24):
    t = np.radians(np.linspace(start, stop, n))
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


def _line(*points):
    return np.asarray(points, dtype=np.float64)


# Glyph-space coordinates: x in [-0.6, 0.6], y in [-1, 1] with y pointing up.
# Shapes are taller than wide so quarter-turn rotations change the silhouette.
GLYPH_STROKES: dict[int, list[np.ndarray]] = {
    0: [_arc(0, 0, 0.55, 0.9, 0, 360, 40)],
    1: [_line((0.05, -0.9), (0.05, 0.9)), _line((-0.3, 0.55), (0.05, 0.9))],
    2: [
        _arc(0, 0.45, 0.45, 0.45, 160, -30),
        _line((0.39, 0.225), (-0.55, -0.9), (0.55, -0.9)),
    ],
    3: [_arc(0, 0.45, 0.45, 0.45, 150, -90), _arc(0, -0.45, 0.45, 0.45, 90, -150)],
    4: [_line((0.25, 0.9), (0.25, -0.9)), _line((0.25, 0.9), (-0.55, -0.3), (0.55, -0.3))],
    5: [
        _line((0.5, 0.9), (-0.45, 0.9), (-0.45, 0.1)),
        _arc(0, -0.4, 0.5, 0.5, 130, -160),
    ],
    6: [_arc(0, -0.45, 0.45, 0.45, 0, 360, 32), _line((0.35, 0.9), (-0.43, -0.3))],
    7: [_line((-0.55, 0.9), (0.55, 0.9), (-0.15, -0.9))],
    8: [_arc(0, 0.48, 0.38, 0.4, 0, 360, 32), _arc(0, -0.45, 0.47, 0.47, 0, 360, 32)],
    9: [_arc(0, 0.45, 0.45, 0.45, 0, 360, 32), _line((0.45, 0.45), (0.3, -0.9))],
}

_GRID_Y, _GRID_X = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)
_GRID = np.stack([_GRID_X.ravel(), _GRID_Y.ravel()], axis=1)


def _segments(strokes: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    starts = np.concatenate([s[:-1] for s in strokes])
    ends = np.concatenate([s[1:] for s in strokes])
    return starts, ends


def _distance_field(starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    """Distance from each pixel centre to the nearest segment, shape (784,)."""
    d = ends - starts
    length2 = np.maximum((d * d).sum(axis=1), 1e-12)
    rel = _GRID[:, None, :] - starts[None, :, :]
    t = np.clip((rel * d[None]).sum(axis=2) / length2[None], 0.0, 1.0)
    nearest = starts[None] + t[..., None] * d[None]
    dist = np.sqrt(((_GRID[:, None, :] - nearest) ** 2).sum(axis=2))
    return dist.min(axis=1)


def render_glyph(label: int, rng: np.random.Generator) -> np.ndarray:
    """Render one jittered glyph; all randomness comes from ``rng``."""
    if label not in GLYPH_STROKES:
        raise ContractError(f"no glyph for label {label}")
    shift = rng.uniform(-2.0, 2.0, size=2)
    thickness = rng.uniform(1.4, 2.6)
    scale = rng.uniform(0.9, 1.1)
    shear = rng.uniform(-0.15, 0.15)
    strokes = []
    for stroke in GLYPH_STROKES[label]:
        wobble = rng.normal(0.0, 0.04, size=2)
        x = (stroke[:, 0] + shear * stroke[:, 1] + wobble[0]) * scale
        y = (stroke[:, 1] + wobble[1]) * scale
        # glyph y points up, image rows point down
        strokes.append(np.stack([CENTER + shift[0] + _UNIT_PX * x, CENTER + shift[1] - _UNIT_PX * y], 1))
    starts, ends = _segments(strokes)
    dist = _distance_field(starts, ends)
    ink = np.clip(thickness / 2.0 + 0.5 - dist, 0.0, 1.0).reshape(SIZE, SIZE)
    noisy = ink + rng.normal(0.0, 0.05, size=ink.shape)
    return np.clip(noisy, 0.0, 1.0).astype(np.float32)


def generate_glyph_corpus(seed: int, n_per_class: int, classes: int = 10) -> list[LabeledImage]:
    """``n_per_class`` images for each of ``classes`` labels, ordered label-major."""
    if n_per_class < 1:
        raise ContractError("n_per_class must be >= 1")
    if not 1 <= classes <= len(GLYPH_STROKES):
        raise ContractError(f"classes must be in [1, {len(GLYPH_STROKES)}]")
    rng = np.random.default_rng(seed)
    return [
        LabeledImage(render_glyph(label, rng), label)
        for label in range(classes)
        for _ in range(n_per_class)
    ]


def stack_images(samples: list[LabeledImage]) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.pixels for s in samples]).astype(np.float32, copy=False)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return images, labels
