"""
Face detector backends.

Every backend turns an image into a list of `FaceBox`. `detect_faces` clips the raw
boxes to the image, drops the ones that vanish, and sorts by confidence (stable, descending).
"""
import logging
import shlex
import subprocess
import tempfile
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from mcaer.cues import FaceBox
from mcaer.errors import DetectorUnavailable, ParseError
from mcaer.imageio import save_image

logger = logging.getLogger(__name__)

FACES_SUFFIX = ".faces"


def parse_boxes(text: str, source=None) -> List[FaceBox]:
    """
    Parse `x y w h confidence` lines. Blank lines are skipped.
    """
    boxes = []
    for number, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 5:
            raise ParseError(f'expected "x y w h confidence", got {line!r}', line=number, source=source)
        try:
            x, y, w, h, confidence = (float(field) for field in fields)
        except ValueError:
            raise ParseError(f'non-numeric field in {line!r}', line=number, source=source)
        if not 0.0 <= confidence <= 1.0:
            raise ParseError(f'confidence {confidence} outside [0, 1]', line=number, source=source)
        boxes.append(FaceBox(int(round(x)), int(round(y)), int(round(w)), int(round(h)), confidence))
    return boxes


def normalize_boxes(boxes: Sequence[FaceBox], width: int, height: int) -> List[FaceBox]:
    clipped = [box.clip(width, height) for box in boxes if box.w > 0 and box.h > 0]
    kept = [box for box in clipped if box is not None]
    if len(kept) < len(boxes):
        logger.debug('dropped %d boxes outside the %dx%d image', len(boxes) - len(kept), width, height)
    return sorted(kept, key=lambda box: -box.confidence)


class AnnotationDetector:
    """
    Reads boxes that were annotated ahead of time: either handed over directly (from a
    sidecar record) or from a `<image>.faces` text file next to the image.
    """

    name = "annotation"

    def __init__(self, boxes: Optional[Sequence[FaceBox]] = None, missing_ok=False):
        self.boxes = None if boxes is None else list(boxes)
        # a missing annotation file reads as zero faces
        self.missing_ok = missing_ok

    def __repr__(self):
        return f'<AnnotationDetector boxes={None if self.boxes is None else len(self.boxes)}>'

    def detect(self, image: np.ndarray, path=None) -> List[FaceBox]:
        if self.boxes is not None:
            return list(self.boxes)
        if path is None:
            raise DetectorUnavailable('annotation detector needs either boxes or an image path')
        annotation = Path(path).with_suffix(FACES_SUFFIX)
        if not annotation.exists():
            if self.missing_ok:
                logger.debug('no face annotation at %s, zero faces', annotation)
                return []
            raise DetectorUnavailable(f'no face annotation at {annotation}')
        return parse_boxes(annotation.read_text(), source=str(annotation))


class CommandDetector:
    """
    Runs an external detector: `<command> <image path>` must print one `x y w h confidence`
    line per face.
    """

    name = "command"

    def __init__(self, command: str, timeout=60):
        self.argv = shlex.split(command)
        self.timeout = timeout
        if not self.argv:
            raise DetectorUnavailable('empty detector command')

    def __repr__(self):
        return f'<CommandDetector {" ".join(self.argv)}>'

    def detect(self, image: np.ndarray, path=None) -> List[FaceBox]:
        if path is not None:
            return self._run(Path(path))
        with tempfile.TemporaryDirectory() as tmp:
            target = Path(tmp) / "scene.ppm"
            save_image(image, target)
            return self._run(target)

    def _run(self, path: Path) -> List[FaceBox]:
        argv = self.argv + [str(path)]
        logger.debug('running detector %s', argv)
        try:
            result = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout)
        except (FileNotFoundError, PermissionError) as error:
            raise DetectorUnavailable(f'detector {self.argv[0]} unavailable: {error}')
        except subprocess.TimeoutExpired:
            raise DetectorUnavailable(f'detector {self.argv[0]} timed out after {self.timeout}s')
        if result.returncode != 0:
            raise DetectorUnavailable(
                f'detector {self.argv[0]} exited with {result.returncode}: {result.stderr.strip()}'
            )
        return parse_boxes(result.stdout, source=self.argv[0])


def make_detector(command: Optional[str] = None, boxes: Optional[Sequence[FaceBox]] = None, missing_ok=False):
    if command:
        return CommandDetector(command)
    return AnnotationDetector(boxes, missing_ok)


def detect_faces(image: np.ndarray, detector=None, path=None) -> List[FaceBox]:
    detector = detector or AnnotationDetector()
    height, width = image.shape[:2]
    boxes = normalize_boxes(detector.detect(image, path), width, height)
    logger.debug('%s found %d faces', detector.name, len(boxes))
    return boxes
