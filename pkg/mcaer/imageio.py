"""
Image codecs. Pillow reads and writes binary PPM/PGM and any other format it knows;
arrays are float64 HxWx3 in [0,1] for color images and uint8 {0,1} for masks.
"""
import logging
import os
from pathlib import Path

import numpy as np
from cachetools.func import lru_cache
from PIL import Image

from mcaer.cache import memory
from mcaer.constants import MASK_THRESHOLD
from mcaer.cues import PersonMask
from mcaer.errors import ValidationError

logger = logging.getLogger(__name__)


@memory.cache()
def _decode_rgb(path: str, mtime: float) -> np.ndarray:
    with Image.open(path) as image:
        return np.asarray(image.convert("RGB"), dtype=np.uint8)


@lru_cache(256)
def _cached_rgb(path: str, mtime: float) -> np.ndarray:
    pixels = _decode_rgb(path, mtime)
    pixels.setflags(write=False)
    return pixels


def load_image(path) -> np.ndarray:
    """
    Decode an image file into an HxWx3 float array in [0,1].
    """
    path = os.fspath(path)
    pixels = _cached_rgb(path, os.path.getmtime(path))
    if pixels.size == 0:
        raise ValidationError(f'{path}: empty image')
    return pixels.astype(np.float64) / 255.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def save_image(image: np.ndarray, path):
    """
    Write an HxWx3 float image in [0,1]; the format follows the suffix (.ppm gives binary P6).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path)


def load_mask(path) -> PersonMask:
    """
    Read an 8-bit single-channel mask; pixels >= 128 are person.
    """
    with Image.open(os.fspath(path)) as image:
        gray = np.asarray(image.convert("L"), dtype=np.uint8)
    return PersonMask((gray >= MASK_THRESHOLD).astype(np.uint8))


def save_mask(mask: PersonMask, path):
    save_pgm(mask.data.astype(np.float64), path)


def save_pgm(values: np.ndarray, path):
    """
    Write a 2-D array in [0,1] as an 8-bit binary PGM (P5).
    """
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValidationError(f'pgm export needs a 2-D array, got shape {list(values.shape)}')
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(values)).save(path, format="PPM")
    logger.debug('wrote %dx%d pgm %s', values.shape[1], values.shape[0], path)


def load_pgm(path) -> np.ndarray:
    with Image.open(os.fspath(path)) as image:
        return np.asarray(image.convert("L"), dtype=np.uint8)
