"""Small utilities shared across the test modules.

Only things several files need live here; each test module keeps its own
``_reference_*`` oracles so every check stays readable on its own.
"""

import numpy as np

from hffn import imaging

# Release-gate pass/fail lines, appended by the acceptance tests and printed
# by a terminal-summary hook so they survive output capture.
ACCEPTANCE_VERDICTS = []


def smooth_image(rng, height, width, *, waves=3):
    """A synthetic RGB image with broad structure plus mild texture.

    Sums a few random low-frequency cosine gratings per channel and adds a
    little noise, then normalizes to [0, 1]. Smooth content keeps bicubic
    LR/HR pairs honest (downscaling preserves most of the signal), which is
    what the toy training checks need.
    """
    yy, xx = np.meshgrid(
        np.linspace(0.0, 1.0, height), np.linspace(0.0, 1.0, width), indexing="ij"
    )
    px = np.zeros((3, height, width))
    for c in range(3):
        for _ in range(waves):
            fy, fx = rng.uniform(0.5, 3.0, size=2)
            phase = rng.uniform(0.0, 2 * np.pi)
            px[c] += rng.uniform(0.3, 1.0) * np.cos(
                2 * np.pi * (fy * yy + fx * xx) + phase
            )
        px[c] += 0.05 * rng.standard_normal((height, width))
        lo, hi = px[c].min(), px[c].max()
        px[c] = (px[c] - lo) / (hi - lo)
    return imaging.Image(px)


def write_pngs(rng, directory, count, height, width):
    """Drop ``count`` synthetic PNGs into ``directory``; returns their paths."""
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        path = directory / f"img{i:02d}.png"
        imaging.save_png(smooth_image(rng, height, width), str(path))
        paths.append(path)
    return paths
