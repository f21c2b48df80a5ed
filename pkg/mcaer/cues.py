"""
Cue extraction: the principal face, the face-occluded context and the background-removed body.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from mcaer.constants import MASK_OVERLAP_MIN
from mcaer.errors import NoFaceError, ValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FaceBox:
    x: int
    y: int
    w: int
    h: int
    confidence: float = 1.0

    @property
    def area(self) -> int:
        return self.w * self.h

    @property
    def center(self) -> Tuple[float, float]:
        return self.x + self.w / 2, self.y + self.h / 2

    def as_list(self) -> List[int]:
        return [self.x, self.y, self.w, self.h]

    def clip(self, width: int, height: int) -> Optional["FaceBox"]:
        """
        Intersect with the image; None when nothing of the box is left.
        """
        x0, y0 = max(self.x, 0), max(self.y, 0)
        x1, y1 = min(self.x + self.w, width), min(self.y + self.h, height)
        if x1 <= x0 or y1 <= y0:
            return None
        return FaceBox(x0, y0, x1 - x0, y1 - y0, self.confidence)


@dataclass
class PersonMask:
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.uint8)
        if self.data.ndim != 2:
            raise ValidationError(f'person mask must be 2-D, got shape {list(self.data.shape)}')
        if not np.isin(self.data, (0, 1)).all():
            raise ValidationError('person mask values must be 0 or 1')

    @property
    def shape(self):
        return self.data.shape


@dataclass
class CueBundle:
    image: np.ndarray
    face: FaceBox
    mask: Optional[PersonMask] = None
    label: Optional[int] = None
    keypoints: Optional[np.ndarray] = None
    # lenient substitutions that fired while resolving the cues
    flags: List[str] = field(default_factory=list)

    def __post_init__(self):
        height, width = self.image.shape[:2]
        if self.face.clip(width, height) != self.face:
            raise ValidationError(f'face {self.face.as_list()} outside image {width}x{height}')
        if self.mask is not None and self.mask.shape != (height, width):
            raise ValidationError(f'mask {list(self.mask.shape)} does not match image {height}x{width}')

    @property
    def has_mask(self) -> bool:
        return self.mask is not None


def face_score(box: FaceBox, width: int, height: int) -> float:
    """
    Normalized size minus normalized distance of the box center from the image center.
    """
    cx, cy = box.center
    size = math.sqrt(box.area) / math.sqrt(width * height)
    distance = math.hypot(cx - width / 2, cy - height / 2) / math.hypot(width, height)
    return size - distance


def select_principal_face(boxes: Sequence[FaceBox], width: int, height: int) -> FaceBox:
    if not boxes:
        raise NoFaceError('no face to select from')
    # larger area, then smaller (x, y) break score ties
    best = max(boxes, key=lambda box: (face_score(box, width, height), box.area, -box.x, -box.y))
    logger.debug('selected face %s out of %d', best.as_list(), len(boxes))
    return best


def centered_box(width: int, height: int) -> FaceBox:
    w, h = max(width // 3, 1), max(height // 3, 1)
    return FaceBox((width - w) // 2, (height - h) // 2, w, h, 0.0)


def resolve_face(
    boxes: Sequence[FaceBox], width: int, height: int, use_selector=True, strict=True
) -> Tuple[FaceBox, bool]:
    """
    Pick the face for a scene. Returns the box and whether the no-face fallback fired.

    Without the selector the highest-confidence detection wins. In lenient mode an empty
    scene gets a centered box of a third of the image size.
    """
    if boxes:
        if use_selector:
            return select_principal_face(boxes, width, height), False
        return max(boxes, key=lambda box: box.confidence), False
    if strict:
        raise NoFaceError('no face detected')
    logger.warning('no face detected, substituting the centered box')
    return centered_box(width, height), True


def _check_box(image: np.ndarray, box: FaceBox):
    height, width = image.shape[:2]
    if box.w <= 0 or box.h <= 0:
        raise ValidationError(f'degenerate face box {box.as_list()}')
    if box.clip(width, height) != box:
        raise ValidationError(f'face box {box.as_list()} is not clipped to the {width}x{height} image')


def crop_face(image: np.ndarray, box: FaceBox) -> np.ndarray:
    _check_box(image, box)
    return image[box.y : box.y + box.h, box.x : box.x + box.w].copy()


def occlude_face(image: np.ndarray, box: FaceBox) -> np.ndarray:
    """
    Copy of the image with the face box filled black.
    """
    height, width = image.shape[:2]
    out = image.copy()
    clipped = box.clip(width, height)
    if clipped is not None:
        out[clipped.y : clipped.y + clipped.h, clipped.x : clipped.x + clipped.w] = 0
    return out


def mask_overlap(mask: PersonMask, box: FaceBox) -> float:
    """
    Fraction of the face box covered by the mask.
    """
    covered = mask.data[box.y : box.y + box.h, box.x : box.x + box.w].sum()
    return float(covered) / box.area


def select_person_mask(
    masks: Sequence[PersonMask], face: FaceBox, threshold=MASK_OVERLAP_MIN
) -> Optional[PersonMask]:
    if not masks:
        return None
    shape = masks[0].shape
    for mask in masks:
        if mask.shape != shape:
            raise ValidationError(f'mask shapes differ: {list(mask.shape)} vs {list(shape)}')
    if face.clip(shape[1], shape[0]) != face:
        raise ValidationError(f'face {face.as_list()} outside {shape[1]}x{shape[0]} masks')

    overlaps = [mask_overlap(mask, face) for mask in masks]
    best = int(np.argmax(overlaps))
    logger.debug('mask overlaps %s', ['%.3f' % overlap for overlap in overlaps])
    if overlaps[best] < threshold:
        return None
    return masks[best]


def remove_background(image: np.ndarray, mask: PersonMask) -> np.ndarray:
    if mask.shape != image.shape[:2]:
        raise ValidationError(f'mask {list(mask.shape)} does not match image {list(image.shape[:2])}')
    return image * mask.data[:, :, None].astype(image.dtype)
