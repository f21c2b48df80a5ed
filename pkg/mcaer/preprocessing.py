"""
Per-stream input preparation.

face:    crop of the principal face, resized to face_size x face_size
context: face-occluded scene, centered on a context_pad canvas, downscaled by
         context_scale (floored) and, in train mode, randomly cropped after a
         crop_pad zero border
body:    background-removed scene resized to body_size x body_size

All outputs are channels-first float arrays in [0,1].
"""
import logging
import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from mcaer import rng as rngs
from mcaer.constants import BODY_SIZE, CONTEXT_PAD, CONTEXT_SCALE, CROP_PAD, FACE_SIZE
from mcaer.cues import CueBundle, crop_face, occlude_face, remove_background
from mcaer.errors import ConfigError, MissingCueError, ValidationError

logger = logging.getLogger(__name__)

MODES = ("train", "eval")


@dataclass
class PrepConfig:
    face_size: int = FACE_SIZE
    context_pad_h: int = CONTEXT_PAD[0]
    context_pad_w: int = CONTEXT_PAD[1]
    context_scale: int = CONTEXT_SCALE
    crop_pad: int = CROP_PAD
    body_size: int = BODY_SIZE
    mode: str = "eval"
    use_prep_pipeline: bool = True
    body_use_mask: bool = True
    keypoint_sigma: float = 2.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        sizes = dict(
            face_size=self.face_size,
            context_pad_h=self.context_pad_h,
            context_pad_w=self.context_pad_w,
            context_scale=self.context_scale,
            body_size=self.body_size,
        )
        for key, value in sizes.items():
            if value < 1:
                raise ConfigError(f'prep.{key} must be positive, got {value}')
        if self.crop_pad < 0:
            raise ConfigError(f'prep.crop_pad must be >= 0, got {self.crop_pad}')
        if self.context_pad_h < self.context_scale or self.context_pad_w < self.context_scale:
            raise ConfigError('prep.context_pad is smaller than one context_scale step')
        if self.body_size < 16:
            raise ConfigError(f'prep.body_size must be >= 16, got {self.body_size}')
        if self.mode not in MODES:
            raise ConfigError(f'prep.mode must be one of {MODES}, got {self.mode!r}')

    @property
    def context_size(self) -> Tuple[int, int]:
        return self.context_pad_h // self.context_scale, self.context_pad_w // self.context_scale

    @property
    def heatmap_size(self) -> int:
        return (self.body_size // 16) * 4


@dataclass
class StreamInputs:
    """
    Prepared inputs of one sample. `body` is all zeros when the body cue is missing.
    """

    face: np.ndarray
    context: np.ndarray
    body: Optional[np.ndarray] = None
    body_present: bool = True
    heatmaps: Optional[np.ndarray] = None
    label: Optional[int] = None
    flags: List[str] = field(default_factory=list)


@dataclass
class StreamBatch:
    face: np.ndarray
    context: np.ndarray
    body: Optional[np.ndarray]
    body_present: np.ndarray
    heatmaps: Optional[np.ndarray]
    heatmap_mask: np.ndarray
    labels: Optional[np.ndarray]

    def __len__(self):
        return self.face.shape[0]

    def astype(self, dtype) -> "StreamBatch":
        cast = lambda array: None if array is None else array.astype(dtype, copy=False)
        return StreamBatch(
            cast(self.face),
            cast(self.context),
            cast(self.body),
            self.body_present,
            cast(self.heatmaps),
            self.heatmap_mask,
            self.labels,
        )


def _lerp_axis(image: np.ndarray, size: int, axis: int) -> np.ndarray:
    source = image.shape[axis]
    coords = np.linspace(0.0, source - 1, size)
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, source - 1)
    weight = (coords - lo).reshape((-1,) + (1,) * (image.ndim - axis - 1))
    a = np.take(image, lo, axis=axis)
    b = np.take(image, hi, axis=axis)
    return a + (b - a) * weight


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """
    Bilinear resize with corner-aligned sampling: output corners land exactly on input corners.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim < 2 or image.shape[0] == 0 or image.shape[1] == 0:
        raise ValidationError(f'cannot resize an empty image of shape {list(image.shape)}')
    if out_h < 1 or out_w < 1:
        raise ValidationError(f'resize target must be positive, got {out_h}x{out_w}')
    if image.shape[:2] == (out_h, out_w):
        return image.copy()
    return _lerp_axis(_lerp_axis(image, out_h, 0), out_w, 1)


def _channels_first(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.clip(image, 0.0, 1.0).transpose(2, 0, 1))


def _square(image: np.ndarray, size: int, what: str) -> np.ndarray:
    if image.ndim != 3 or image.shape[0] == 0 or image.shape[1] == 0:
        raise ValidationError(f'{what}: degenerate image of shape {list(image.shape)}')
    return _channels_first(resize_bilinear(image, size, size))


def prep_face(face_image: np.ndarray, config: PrepConfig) -> np.ndarray:
    return _square(face_image, config.face_size, 'prep_face')


def prep_body(masked_image: np.ndarray, config: PrepConfig) -> np.ndarray:
    return _square(masked_image, config.body_size, 'prep_body')


def pad_center(image: np.ndarray, height: int, width: int) -> np.ndarray:
    h, w = image.shape[:2]
    top, left = (height - h) // 2, (width - w) // 2
    out = np.zeros((height, width) + image.shape[2:], dtype=image.dtype)
    out[top : top + h, left : left + w] = image
    return out


def down_fit(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """
    Shrink by a uniform factor until the image fits height x width; smaller images pass through.
    """
    h, w = image.shape[:2]
    if h <= height and w <= width:
        return image
    scale = min(height / h, width / w)
    return resize_bilinear(image, max(int(h * scale), 1), max(int(w * scale), 1))


def prep_context(occluded: np.ndarray, config: PrepConfig, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    if occluded.ndim != 3 or occluded.shape[0] == 0 or occluded.shape[1] == 0:
        raise ValidationError(f'prep_context: empty image of shape {list(occluded.shape)}')
    out_h, out_w = config.context_size
    if not config.use_prep_pipeline:
        return _channels_first(resize_bilinear(occluded, out_h, out_w))

    fitted = down_fit(occluded, config.context_pad_h, config.context_pad_w)
    canvas = pad_center(fitted, config.context_pad_h, config.context_pad_w)
    scaled = resize_bilinear(canvas, out_h, out_w)

    if config.mode == "train" and config.crop_pad:
        if rng is None:
            raise ConfigError('prep_context: train mode needs an rng stream')
        pad = config.crop_pad
        bordered = np.pad(scaled, ((pad, pad), (pad, pad), (0, 0)))
        top, left = rng.integers(0, 2 * pad + 1, size=2)
        scaled = bordered[top : top + out_h, left : left + out_w]
    return _channels_first(scaled)


def keypoint_heatmaps(
    keypoints: np.ndarray, image_hw: Tuple[int, int], out_hw: Tuple[int, int], sigma=2.0
) -> np.ndarray:
    """
    Gaussian target per joint at the body stream's output resolution.

    Keypoints are [J, 2] pixel (x, y) pairs in the source image; joints with a negative
    coordinate are invisible and get an all-zero map.
    """
    keypoints = np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)
    (src_h, src_w), (out_h, out_w) = image_hw, out_hw
    sx = (out_w - 1) / max(src_w - 1, 1)
    sy = (out_h - 1) / max(src_h - 1, 1)
    ys = np.arange(out_h, dtype=np.float64)[:, None]
    xs = np.arange(out_w, dtype=np.float64)[None, :]
    maps = np.zeros((len(keypoints), out_h, out_w))
    for joint, (x, y) in enumerate(keypoints):
        if x < 0 or y < 0:
            continue
        cx, cy = x * sx, y * sy
        maps[joint] = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma * sigma))
    return maps


def prepare_sample(
    bundle: CueBundle,
    config: PrepConfig,
    streams: Sequence[str],
    rng: Optional[np.random.Generator] = None,
    strict=False,
) -> StreamInputs:
    image = bundle.image
    flags = list(bundle.flags)
    face = prep_face(crop_face(image, bundle.face), config)
    context = prep_context(occlude_face(image, bundle.face), config, rng)

    body, present, heatmaps = None, True, None
    if "body" in streams:
        if not config.body_use_mask:
            body = prep_body(image, config)
        elif bundle.mask is not None:
            body = prep_body(remove_background(image, bundle.mask), config)
        elif strict:
            raise MissingCueError('no person mask for the body stream')
        else:
            logger.warning('no person mask, the body stream sees a zero feature')
            body = np.zeros((3, config.body_size, config.body_size))
            present = False
            flags.append('no-mask')
        # keypoint targets only for a real body input
        if present and bundle.keypoints is not None:
            size = config.heatmap_size
            heatmaps = keypoint_heatmaps(bundle.keypoints, image.shape[:2], (size, size), config.keypoint_sigma)

    return StreamInputs(face, context, body, present, heatmaps, bundle.label, flags)


def collate(samples: Sequence[StreamInputs], joints=0) -> StreamBatch:
    has_body = samples[0].body is not None
    heatmaps = None
    heatmap_mask = np.array([sample.heatmaps is not None and sample.body_present for sample in samples])
    if has_body and joints and heatmap_mask.any():
        first = next(sample.heatmaps for sample in samples if sample.heatmaps is not None)
        if first.shape[0] != joints:
            raise ValidationError(f'{first.shape[0]} keypoints per sample but the heatmap head has {joints} joints')
        heatmaps = np.stack([np.zeros_like(first) if sample.heatmaps is None else sample.heatmaps for sample in samples])
    else:
        heatmap_mask[:] = False
    labels = None
    if all(sample.label is not None for sample in samples):
        labels = np.array([sample.label for sample in samples], dtype=np.int64)
    return StreamBatch(
        face=np.stack([sample.face for sample in samples]),
        context=np.stack([sample.context for sample in samples]),
        body=np.stack([sample.body for sample in samples]) if has_body else None,
        body_present=np.array([sample.body_present for sample in samples]),
        heatmaps=heatmaps,
        heatmap_mask=heatmap_mask,
        labels=labels,
    )


def worker_count() -> int:
    return int(os.environ.get("MCAER_WORKERS", "4"))


def prepare_many(
    load,
    indices: Sequence[int],
    config: PrepConfig,
    streams: Sequence[str],
    seed=0,
    epoch=0,
    strict=False,
    workers=None,
) -> List[StreamInputs]:
    """
    Prepare samples `load(index) -> CueBundle` on a thread pool.

    Each sample draws from its own (seed, "prep", epoch, index) stream, so results do not
    depend on the worker count.
    """

    def one(index):
        stream = rngs.stream(seed, "prep", epoch, index) if config.mode == "train" else None
        return prepare_sample(load(index), config, streams, stream, strict=strict)

    workers = workers or worker_count()
    if workers <= 1 or len(indices) <= 1:
        return [one(index) for index in indices]
    return Parallel(workers, "threading")(delayed(one)(index) for index in indices)
