"""
Synthetic stand-in for the emotion dataset.

Every scene plants its class in all three cues: a striped background motif (context),
a textured face patch (face) and a stick-figure pose with its person mask and
keypoints (body). Odd-numbered scenes add one or two smaller bystanders near the
image border, each with a face and a mask of its own, so the principal-face selector
and the mask overlap have something to choose from.
"""
import logging
import math
from pathlib import Path
from typing import Tuple

import numpy as np
from PIL import Image, ImageDraw

from mcaer import rng as rngs
from mcaer.constants import CLASS_NAMES, KEYPOINT_NAMES
from mcaer.cues import FaceBox, PersonMask
from mcaer.dataset import DatasetSpec, box_to_list, write_sidecar
from mcaer.detectors import FACES_SUFFIX
from mcaer.errors import ConfigError
from mcaer.imageio import save_image, save_mask

logger = logging.getLogger(__name__)

SCENE_SIZE = (96, 168)
SIDECAR = "annotations.jsonl"

BACKGROUND_COLORS = [
    ((0.55, 0.10, 0.10), (0.85, 0.45, 0.30)),
    ((0.30, 0.45, 0.10), (0.60, 0.70, 0.35)),
    ((0.20, 0.10, 0.35), (0.55, 0.45, 0.70)),
    ((0.85, 0.70, 0.15), (0.95, 0.90, 0.60)),
    ((0.10, 0.20, 0.45), (0.40, 0.50, 0.70)),
    ((0.10, 0.55, 0.55), (0.60, 0.90, 0.85)),
    ((0.35, 0.35, 0.35), (0.65, 0.65, 0.65)),
]
FACE_TINTS = [
    (0.90, 0.10, 0.10),
    (0.20, 0.70, 0.10),
    (0.50, 0.10, 0.80),
    (1.00, 0.90, 0.10),
    (0.10, 0.30, 0.90),
    (0.10, 0.90, 0.90),
    (0.50, 0.50, 0.50),
]
BODY_COLORS = [
    (200, 30, 30),
    (60, 160, 40),
    (120, 40, 190),
    (250, 210, 40),
    (40, 80, 220),
    (30, 210, 210),
    (140, 140, 140),
]
SKIN = np.array([0.87, 0.72, 0.60])

# arm angles in degrees from straight down: left upper, left fore, right upper, right fore
ARM_POSES = [
    (40, 100, 40, 100),
    (20, 150, 170, 170),
    (60, 150, 60, 150),
    (135, 150, 135, 150),
    (5, 5, 5, 5),
    (90, 90, 90, 90),
    (20, 20, 20, 20),
]

# fixed joints as (dx, dy) fractions of the figure height; elbows and wrists come from the pose
TORSO = {
    "head": (0.0, 0.10),
    "neck": (0.0, 0.20),
    "l_shoulder": (-0.12, 0.25),
    "r_shoulder": (0.12, 0.25),
    "hip": (0.0, 0.55),
    "l_knee": (-0.08, 0.75),
    "r_knee": (0.08, 0.75),
    "l_ankle": (-0.10, 0.95),
    "r_ankle": (0.10, 0.95),
}
BONES = [
    ("neck", "hip"),
    ("l_shoulder", "r_shoulder"),
    ("l_shoulder", "l_elbow"),
    ("l_elbow", "l_wrist"),
    ("r_shoulder", "r_elbow"),
    ("r_elbow", "r_wrist"),
    ("hip", "l_knee"),
    ("l_knee", "l_ankle"),
    ("hip", "r_knee"),
    ("r_knee", "r_ankle"),
]
UPPER_ARM, FOREARM = 0.17, 0.15
FACE_FRACTION = 0.16


def pose_keypoints(label: int, cx: float, top: float, height: float) -> dict:
    points = {name: (cx + dx * height, top + dy * height) for name, (dx, dy) in TORSO.items()}
    left_upper, left_fore, right_upper, right_fore = ARM_POSES[label]
    for side, sign, upper, fore in (("l", -1, left_upper, left_fore), ("r", 1, right_upper, right_fore)):
        sx, sy = points[f'{side}_shoulder']
        ex = sx + sign * math.sin(math.radians(upper)) * UPPER_ARM * height
        ey = sy + math.cos(math.radians(upper)) * UPPER_ARM * height
        wx = ex + sign * math.sin(math.radians(fore)) * FOREARM * height
        wy = ey + math.cos(math.radians(fore)) * FOREARM * height
        points[f'{side}_elbow'] = (ex, ey)
        points[f'{side}_wrist'] = (wx, wy)
    return points


def background(label: int, size: Tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    height, width = size
    angle = math.radians(label * 180 / len(CLASS_NAMES))
    period = 8 + 3 * (label % 3)
    yy, xx = np.mgrid[0:height, 0:width]
    phase = rng.uniform(0, 2 * math.pi)
    wave = 0.5 + 0.5 * np.sin(2 * math.pi * (xx * math.cos(angle) + yy * math.sin(angle)) / period + phase)
    low, high = (np.array(color) for color in BACKGROUND_COLORS[label])
    image = low + (high - low) * wave[:, :, None]
    return np.clip(image + rng.normal(0, 0.02, image.shape), 0, 1)


def face_texture(label: int, side: int) -> np.ndarray:
    cell = 2 + label // 3
    yy, xx = np.mgrid[0:side, 0:side]
    kind = label % 3
    if kind == 0:
        pattern = (yy // cell + xx // cell) % 2
    elif kind == 1:
        pattern = (yy // cell) % 2
    else:
        pattern = (xx // cell) % 2
    tint = np.array(FACE_TINTS[label])
    return SKIN * (1 - 0.6 * pattern[:, :, None]) + tint * 0.6 * pattern[:, :, None]


def draw_person(canvas: Image.Image, mask: Image.Image, label: int, cx: float, top: float, height: float):
    """
    Draw one figure onto `canvas` and its silhouette onto `mask`. Returns (face box, keypoints).
    """
    points = pose_keypoints(label, cx, top, height)
    line_width = max(2, int(round(height * 0.04)))
    draw, silhouette = ImageDraw.Draw(canvas), ImageDraw.Draw(mask)
    for a, b in BONES:
        segment = [points[a], points[b]]
        draw.line(segment, fill=BODY_COLORS[label], width=line_width)
        silhouette.line(segment, fill=255, width=line_width)

    side = max(3, int(round(height * FACE_FRACTION)))
    hx, hy = points["head"]
    x, y = int(round(hx - side / 2)), int(round(hy - side / 2))
    texture = (face_texture(label, side) * 255).round().astype(np.uint8)
    canvas.paste(Image.fromarray(texture), (x, y))
    silhouette.rectangle([x, y, x + side - 1, y + side - 1], fill=255)
    keypoints = [points[name] for name in KEYPOINT_NAMES]
    return FaceBox(x, y, side, side), keypoints


def render_scene(label: int, index: int, seed: int, size=SCENE_SIZE):
    """
    Returns (image [H,W,3] in [0,1], faces, masks, keypoints); the principal person comes first.
    """
    rng = rngs.stream(seed, "synth", CLASS_NAMES[label], index)
    height, width = size
    canvas = Image.fromarray((background(label, size, rng) * 255).round().astype(np.uint8))

    people = []
    if index % 2 == 1:
        for slot in range(int(rng.integers(1, 3))):
            side_x = 0.12 if slot == 0 else 0.88
            people.append(
                (
                    int(rng.integers(len(CLASS_NAMES))),
                    width * side_x + rng.uniform(-2, 2),
                    height * rng.uniform(0.05, 0.45),
                    height * 0.45,
                )
            )
    principal = (label, width / 2 + rng.uniform(-width / 12, width / 12), height * 0.1, height * 0.8)

    faces, masks, keypoints = [], [], None
    # bystanders first so the principal is drawn on top
    for person in people + [principal]:
        mask = Image.new("L", (width, height), 0)
        box, points = draw_person(canvas, mask, *person)
        faces.append(box.clip(width, height))
        masks.append(np.asarray(mask, dtype=np.uint8) >= 128)
        keypoints = points

    # principal first; the bystanders' masks lose the pixels the principal covers
    faces = faces[-1:] + faces[:-1]
    masks = masks[-1:] + [mask & ~masks[-1] for mask in masks[:-1]]
    confidences = [rng.uniform(0.6, 0.95)] + [rng.uniform(0.5, 1.0) for _ in faces[1:]]
    faces = [FaceBox(box.x, box.y, box.w, box.h, round(float(c), 3)) for box, c in zip(faces, confidences)]
    image = np.asarray(canvas, dtype=np.float64) / 255.0
    return image, faces, masks, keypoints


def generate_synthetic(n_per_class: int, seed: int, outdir, size=SCENE_SIZE) -> DatasetSpec:
    if n_per_class < 1:
        raise ConfigError(f'need at least one image per class, got {n_per_class}')
    root = Path(outdir)
    records = []
    for label, name in enumerate(CLASS_NAMES):
        folder = root / name
        folder.mkdir(parents=True, exist_ok=True)
        for index in range(n_per_class):
            image, faces, masks, keypoints = render_scene(label, index, seed, size)
            stem = f'{index:04d}'
            save_image(image, folder / f'{stem}.ppm')
            mask_paths = []
            for number, mask in enumerate(masks):
                mask_path = f'{name}/{stem}.m{number}.pgm'
                save_mask(PersonMask(mask.astype(np.uint8)), root / mask_path)
                mask_paths.append(mask_path)
            (folder / f'{stem}{FACES_SUFFIX}').write_text(
                ''.join(f'{box.x} {box.y} {box.w} {box.h} {box.confidence}\n' for box in faces)
            )
            records.append(
                {
                    "image": f'{name}/{stem}.ppm',
                    "label": name,
                    "face": box_to_list(faces[0]),
                    "faces": [box_to_list(box, confidence=True) for box in faces],
                    "mask": mask_paths[0],
                    "masks": mask_paths,
                    "keypoints": [[round(x, 2), round(y, 2)] for x, y in keypoints],
                }
            )
    annotations = root / SIDECAR
    write_sidecar(records, annotations)
    logger.info('wrote %d synthetic scenes to %s', len(records), root)
    return DatasetSpec(root, annotations)
