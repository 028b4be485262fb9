import json

import numpy as np
import pytest

from card.covariance import (build_synthetic_covariance, make_patch_grid,
                             sample_correlated_noise)
from card.tensorio import PlanarImage, save_image


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture
def banded_cov():
    # mild band correlation, safely positive definite
    return build_synthetic_covariance(1.0, 0.5, [1], 0.0, 8, 8)


@pytest.fixture
def strong_cov():
    # strong correlation at alpha=0.9 needs real diagonal regularization:
    # eps=1 keeps it SPD with normalized off-band entries of 0.45
    return build_synthetic_covariance(1.0, 0.9, [1], 1.0, 8, 8)


def random_image(rng, channels=1, height=16, width=16):
    return PlanarImage(rng.random((channels, height, width)))


def random_spd(rng, d, jitter=0.05):
    a = rng.standard_normal((d, d))
    mat = a @ a.T / d + jitter * np.eye(d)
    return (mat + mat.T) / 2.0


def build_dataset_tree(root, cov, n_scenes=1, size=32, dark_size=96, seed=0):
    """Write a miniature four-level dataset tree with dark frames.

    Dark frames are larger than scenes so the patch count comfortably
    exceeds the covariance dimension.
    """
    root.mkdir(parents=True, exist_ok=True)
    levels = {"zero": 0.0, "low": 0.05, "medium": 0.12, "high": 0.25}
    grid = make_patch_grid(size, size, cov.patch_h, cov.patch_w)
    dark_grid = make_patch_grid(dark_size, dark_size, cov.patch_h, cov.patch_w)
    rng = np.random.default_rng(seed)
    scene_ids = []
    for s in range(n_scenes):
        scene_id = f"scene{s:03d}"
        scene_ids.append(scene_id)
        scene_dir = root / "scenes" / scene_id
        scene_dir.mkdir(parents=True)
        base = np.clip(0.5 + 0.2 * rng.standard_normal((1, size, size)), 0, 1)
        for li, (level, sigma) in enumerate(levels.items()):
            noise = sample_correlated_noise(cov, sigma, grid, 1,
                                            seed=seed + 97 * s + li)
            save_image(PlanarImage(base + noise.data),
                       scene_dir / f"{level}.png", 16)
    for li, (level, sigma) in enumerate(levels.items()):
        dark_dir = root / "dark" / level
        dark_dir.mkdir(parents=True)
        for f in range(3):
            noise = sample_correlated_noise(cov, max(sigma, 0.02), dark_grid,
                                            1, seed=1000 + 31 * li + f)
            save_image(PlanarImage(0.5 + 0.3 * noise.data),
                       dark_dir / f"dark{f}.png", 16)
    manifest = {
        "scenes": [{"id": sid} for sid in scene_ids],
        "levels": {
            "zero": {"gain_db": 0.0, "exposure_ms": 350.0},
            "low": {"gain_db": 25.0, "exposure_ms": 20.0},
            "medium": {"gain_db": 35.0, "exposure_ms": 8.0},
            "high": {"gain_db": 43.0, "exposure_ms": 2.5},
        },
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return root
