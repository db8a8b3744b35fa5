"""Synthetic dataset generation and a cached loader for its views."""
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import torch
from cachetools import LRUCache

from core.scenes import AnalyticScene, make_scene, orbit_cameras, render_ground_truth, split_indices, surface_samples
from data.image_io import read_pfm, read_pgm, read_ppm, write_pfm, write_pgm, write_ppm
from models.camera import Camera, CameraRecord
from models.schemas import SceneConfig

logger = logging.getLogger(__name__)

VIEW_CACHE_SIZE = int(os.getenv("GSDF_VIEW_CACHE", 32))

IMAGES_DIR = "images"
DEPTH_DIR = "depth"
NORMAL_DIR = "normal"
MASKS_DIR = "masks"


@dataclass
class View:
    """One decoded training or test view."""
    index: int
    camera: Camera
    color: torch.Tensor
    depth: torch.Tensor
    normal: torch.Tensor
    mask: torch.Tensor


def _view_name(index: int) -> str:
    return f"{index:03d}"


def _write_json(path: Path, payload):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def generate_dataset(cfg: SceneConfig, root: Path) -> Path:
    """
    Render every view of a preset scene and write the dataset layout under `root`.

    Returns:
        the dataset root
    """
    root = Path(root)
    for sub in (IMAGES_DIR, DEPTH_DIR, NORMAL_DIR, MASKS_DIR):
        (root / sub).mkdir(parents=True, exist_ok=True)
    scene = make_scene(cfg.preset)
    cameras = orbit_cameras(cfg)
    records = []
    for index, camera in enumerate(cameras):
        gt = render_ground_truth(scene, camera)
        name = _view_name(index)
        write_ppm(root / IMAGES_DIR / f"{name}.ppm", gt.color.numpy())
        write_pfm(root / DEPTH_DIR / f"{name}.pfm", gt.depth.numpy())
        write_pfm(root / NORMAL_DIR / f"{name}.pfm", gt.normal.numpy())
        write_pgm(root / MASKS_DIR / f"{name}.pgm", gt.mask.numpy())
        records.append(CameraRecord.from_camera(index, camera).model_dump())
        logger.debug(f"Rendered view {name}: {int(gt.mask.sum())} foreground pixels")
    train, test = split_indices(cfg.n_views, cfg.test_stride)
    _write_json(root / "cameras.json", records)
    _write_json(root / "split.json", {"train": train, "test": test})
    _write_json(root / "scene.json", cfg.model_dump())
    logger.info(f"Generated dataset '{cfg.preset}' with {len(train)} train / {len(test)} test views at {root}")
    return root


class SceneDataset:
    """Reads a generated dataset; decoded views are kept in an LRU cache."""

    def __init__(self, root: Path, cache_size: int = VIEW_CACHE_SIZE):
        self.root = Path(root)
        if not (self.root / "cameras.json").exists():
            raise FileNotFoundError(f"No dataset at {self.root} (cameras.json missing)")
        with open(self.root / "cameras.json", "r", encoding="utf-8") as f:
            self.cameras: List[Camera] = [CameraRecord.model_validate(r).to_camera() for r in json.load(f)]
        with open(self.root / "split.json", "r", encoding="utf-8") as f:
            split = json.load(f)
        self.train_indices: List[int] = list(split["train"])
        self.test_indices: List[int] = list(split["test"])
        with open(self.root / "scene.json", "r", encoding="utf-8") as f:
            self.config = SceneConfig.model_validate(json.load(f))
        self._cache: LRUCache = LRUCache(maxsize=cache_size)

    def __len__(self) -> int:
        return len(self.cameras)

    def view(self, index: int) -> View:
        cached = self._cache.get(index)
        if cached is not None:
            return cached
        name = _view_name(index)
        view = View(
            index=index,
            camera=self.cameras[index],
            color=torch.as_tensor(read_ppm(self.root / IMAGES_DIR / f"{name}.ppm").copy()),
            depth=torch.as_tensor(read_pfm(self.root / DEPTH_DIR / f"{name}.pfm").copy()),
            normal=torch.as_tensor(read_pfm(self.root / NORMAL_DIR / f"{name}.pfm").copy()),
            mask=torch.as_tensor(read_pgm(self.root / MASKS_DIR / f"{name}.pgm").copy()) > 0.5,
        )
        self._cache[index] = view
        return view

    def scene(self) -> AnalyticScene:
        return make_scene(self.config.preset)

    def surface_points(self, n: int, seed: Optional[int] = None) -> torch.Tensor:
        """Area-uniform samples of the analytic surface."""
        return surface_samples(self.scene(), n, self.config.seed if seed is None else seed)

    def summary(self) -> Dict[str, object]:
        return {
            "root": str(self.root), "preset": self.config.preset, "views": len(self),
            "train": len(self.train_indices), "test": len(self.test_indices),
            "resolution": self.config.resolution,
        }
