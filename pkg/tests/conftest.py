from __future__ import annotations

import json
import sys
from pathlib import Path

import cv2
import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def write_mini_bop(scene_dir: Path, frames: list[dict]) -> None:
    """Hand-rolled BOP writer (cv2 + json), independent of the package.

    ``frames``: ``[{"rgb": HxWx3 RGB array, "instances": [(obj_id:int, HxW bool mask)]}]``
    """
    (scene_dir / "rgb").mkdir(parents=True, exist_ok=True)
    (scene_dir / "mask_visib").mkdir(parents=True, exist_ok=True)
    gt = {}
    for im_id, frame in enumerate(frames):
        cv2.imwrite(str(scene_dir / "rgb" / f"{im_id:06d}.png"), frame["rgb"][:, :, ::-1])
        gt[str(im_id)] = []
        for k, (obj_id, mask) in enumerate(frame["instances"]):
            gt[str(im_id)].append({"obj_id": obj_id, "cam_R_m2c": [1, 0, 0, 0, 1, 0, 0, 0, 1], "cam_t_m2c": [0, 0, 0]})
            cv2.imwrite(str(scene_dir / "mask_visib" / f"{im_id:06d}_{k:06d}.png"), mask.astype(np.uint8) * 255)
    (scene_dir / "scene_gt.json").write_text(json.dumps(gt), encoding="utf-8")


@pytest.fixture
def single_square_scene(tmp_path):
    """1 frame, 1 object; the visible mask is a 10x10 square at rows 5..14, cols 7..16."""
    rgb = np.full((24, 30, 3), 90, dtype=np.uint8)
    rgb[5:15, 7:17] = (200, 30, 30)
    mask = np.zeros((24, 30), dtype=bool)
    mask[5:15, 7:17] = True
    scene_dir = tmp_path / "000001"
    write_mini_bop(scene_dir, [{"rgb": rgb, "instances": [(3, mask)]}])
    return scene_dir


@pytest.fixture
def eighteen_instance_scene(tmp_path):
    """3 frames x 6 instances over object ids {1, 2, 3}; 18 annotations."""
    rng = np.random.default_rng(7)
    frames = []
    for _ in range(3):
        rgb = rng.integers(40, 220, size=(40, 60, 3)).astype(np.uint8)
        instances = []
        for k in range(6):
            mask = np.zeros((40, 60), dtype=bool)
            r, c = divmod(k, 3)
            mask[2 + 19 * r : 2 + 19 * r + 15, 2 + 19 * c : 2 + 19 * c + 15] = True
            instances.append((1 + k % 3, mask))
        frames.append({"rgb": rgb, "instances": instances})
    scene_dir = tmp_path / "000002"
    write_mini_bop(scene_dir, frames)
    return scene_dir
