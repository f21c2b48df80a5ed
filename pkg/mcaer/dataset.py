"""
Dataset layout, annotation sidecar and the seeded 70/10/20 split.

    root/
      angry/ disgust/ fear/ happy/ sad/ surprise/ neutral/   images, one folder per class
      annotations.jsonl                                       optional sidecar

Sidecar records are JSON objects, one per line:

    {"image": "happy/0003.ppm", "label": "happy", "face": [x, y, w, h],
     "faces": [[x, y, w, h, conf], ...], "mask": "happy/0003.mask.pgm",
     "masks": ["happy/0003.m0.pgm", ...], "keypoints": [[x, y], ...]}

Only `image` is required. Images are decoded lazily when a sample is loaded.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from toolz import groupby

from mcaer import rng as rngs
from mcaer.constants import CLASS_NAMES, SPLIT_FRACTIONS
from mcaer.cues import CueBundle, FaceBox, resolve_face, select_person_mask
from mcaer.detectors import detect_faces, make_detector, normalize_boxes
from mcaer.errors import ConfigError, DatasetError, McaerError, MissingCueError, ParseError
from mcaer.imageio import load_image, load_mask

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".ppm", ".png", ".jpg", ".jpeg", ".bmp"}
SPLITS = ("train", "val", "test", "all")


@dataclass
class DatasetSpec:
    root: Path
    annotations: Optional[Path] = None
    split: str = "all"
    fractions: Tuple[float, float, float] = SPLIT_FRACTIONS
    split_seed: int = 0

    def __post_init__(self):
        self.root = Path(self.root)
        self.annotations = None if self.annotations is None else Path(self.annotations)
        self.fractions = tuple(self.fractions)
        if self.split not in SPLITS:
            raise ConfigError(f'split must be one of {SPLITS}, got {self.split!r}')
        if len(self.fractions) != 3 or any(f < 0 for f in self.fractions) or abs(sum(self.fractions) - 1) > 1e-9:
            raise ConfigError(f'split fractions must be three non-negative numbers summing to 1, got {self.fractions}')

    def with_split(self, split: str) -> "DatasetSpec":
        return DatasetSpec(self.root, self.annotations, split, self.fractions, self.split_seed)


@dataclass
class CueOptions:
    """
    How missing cues are resolved when a sample is loaded.
    """

    use_face_selector: bool = True
    strict: bool = False
    detector: object = None


def box_from_list(values, source=None) -> FaceBox:
    if not isinstance(values, (list, tuple)) or len(values) not in (4, 5):
        raise ParseError(f'face box must be [x, y, w, h] or [x, y, w, h, confidence], got {values!r}', source=source)
    x, y, w, h = (int(v) for v in values[:4])
    confidence = float(values[4]) if len(values) == 5 else 1.0
    return FaceBox(x, y, w, h, confidence)


def box_to_list(box: FaceBox, confidence=False) -> list:
    return box.as_list() + ([box.confidence] if confidence else [])


@dataclass
class SampleRef:
    path: Path
    label: int
    record: Dict = field(default_factory=dict)

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.label]

    def load(self, root: Path, options: Optional[CueOptions] = None) -> CueBundle:
        options = options or CueOptions()
        image = load_image(self.path)
        height, width = image.shape[:2]
        source = str(self.path)
        flags = []

        listed = self.record.get("faces")
        candidates = [box_from_list(box, source) for box in listed or []]
        if self.record.get("face") is not None and (options.use_face_selector or not candidates):
            face = box_from_list(self.record["face"], source).clip(width, height)
            if face is None:
                raise DatasetError(f'{self.path}: annotated face lies outside the image')
        else:
            if listed is not None:
                boxes = normalize_boxes(candidates, width, height)
            else:
                boxes = detect_faces(image, options.detector or make_detector(missing_ok=not options.strict), self.path)
            face, substituted = resolve_face(boxes, width, height, options.use_face_selector, options.strict)
            if substituted:
                flags.append('no-face')

        mask = None
        if self.record.get("mask") is not None:
            mask = load_mask(root / self.record["mask"])
        elif self.record.get("masks"):
            masks = [load_mask(root / path) for path in self.record["masks"]]
            mask = select_person_mask(masks, face)

        keypoints = self.record.get("keypoints")
        if keypoints is not None:
            keypoints = np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)
        return CueBundle(image, face, mask, self.label, keypoints, flags)


class Dataset:
    def __init__(self, spec: DatasetSpec, samples: List[SampleRef], options: Optional[CueOptions] = None):
        self.spec = spec
        self.samples = samples
        self.options = options or CueOptions()

    def __repr__(self):
        return f'<Dataset {self.spec.root} split={self.spec.split} samples={len(self)}>'

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, index) -> SampleRef:
        return self.samples[index]

    @property
    def labels(self) -> np.ndarray:
        return np.array([sample.label for sample in self.samples], dtype=np.int64)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=len(CLASS_NAMES))

    def load(self, index: int) -> CueBundle:
        return self.samples[index].load(self.spec.root, self.options)


def read_sidecar(path) -> List[dict]:
    path = Path(path)
    records = []
    for number, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as error:
            raise ParseError(f'invalid JSON: {error.msg}', line=number, source=str(path))
        if not isinstance(record, dict) or "image" not in record:
            raise ParseError('record needs an "image" field', line=number, source=str(path))
        records.append(record)
    return records


def write_sidecar(records: Sequence[dict], path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(''.join(json.dumps(record, sort_keys=True) + '\n' for record in records))


def scan_images(root: Path) -> List[SampleRef]:
    if not root.is_dir():
        raise DatasetError(f'dataset root {root} is not a directory')
    folders = {entry.name for entry in root.iterdir() if entry.is_dir()}
    missing = [name for name in CLASS_NAMES if name not in folders]
    if missing:
        raise DatasetError(f'{root}: missing class directories {missing}')
    unknown = sorted(folders - set(CLASS_NAMES))
    if unknown:
        raise DatasetError(f'{root}: unknown class directories {unknown}')

    samples = []
    for label, name in enumerate(CLASS_NAMES):
        for path in sorted((root / name).iterdir()):
            if path.suffix.lower() in IMAGE_SUFFIXES:
                samples.append(SampleRef(path, label))
    return samples


def attach_records(root: Path, samples: List[SampleRef], records: Sequence[dict], source) -> List[SampleRef]:
    by_path = {sample.path.resolve(): sample for sample in samples}
    for record in records:
        path = (root / record["image"]).resolve()
        if not path.exists():
            raise DatasetError(f'{source}: record for {record["image"]} but {path} does not exist')
        sample = by_path.get(path)
        if sample is None:
            raise DatasetError(f'{source}: {record["image"]} is not inside a class directory of {root}')
        label = record.get("label")
        if label is not None and label != sample.class_name:
            raise DatasetError(f'{source}: {record["image"]} labelled {label!r} but stored under {sample.class_name}')
        sample.record = record
    return samples


def split_counts(n: int, fractions) -> Tuple[int, int, int]:
    """
    Floor the val and test shares; the remainder goes to train.
    """
    val = math.floor(n * fractions[1] + 1e-9)
    test = math.floor(n * fractions[2] + 1e-9)
    return n - val - test, val, test


def assign_splits(samples: Sequence[SampleRef], fractions, seed) -> Dict[str, List[SampleRef]]:
    splits = {"train": [], "val": [], "test": []}
    for label, group in sorted(groupby(lambda sample: sample.label, samples).items()):
        group = sorted(group, key=lambda sample: str(sample.path))
        order = rngs.stream(seed, "split", CLASS_NAMES[label]).permutation(len(group))
        shuffled = [group[i] for i in order]
        _, n_val, n_test = split_counts(len(group), fractions)
        splits["val"] += shuffled[:n_val]
        splits["test"] += shuffled[n_val : n_val + n_test]
        splits["train"] += shuffled[n_val + n_test :]
    for name in splits:
        splits[name].sort(key=lambda sample: (sample.label, str(sample.path)))
    return splits


def load_dataset(spec: DatasetSpec, options: Optional[CueOptions] = None) -> Dataset:
    samples = scan_images(spec.root)
    if spec.annotations is not None:
        if not spec.annotations.exists():
            raise DatasetError(f'annotation sidecar {spec.annotations} does not exist')
        samples = attach_records(spec.root, samples, read_sidecar(spec.annotations), spec.annotations)
    if not samples:
        raise DatasetError(f'{spec.root}: no images found')

    if spec.split != "all":
        samples = assign_splits(samples, spec.fractions, spec.split_seed)[spec.split]
    dataset = Dataset(spec, samples, options)
    logger.info(
        'loaded %s split=%s samples=%d per class %s', spec.root, spec.split, len(dataset), dataset.class_counts().tolist()
    )
    return dataset


def resolve_record(sample: SampleRef, root: Path, options: CueOptions) -> dict:
    """
    Sidecar record with the principal face and the person mask selected, ready to be
    consumed without re-selection. Resolving an already resolved record changes nothing.
    """
    record = dict(sample.record)
    record["image"] = record.get("image") or sample.path.relative_to(root).as_posix()
    record["label"] = sample.class_name
    image = load_image(sample.path)
    height, width = image.shape[:2]
    source = str(sample.path)

    listed = record.get("faces")
    candidates = [box_from_list(box, source) for box in listed or []]
    if candidates:
        boxes = normalize_boxes(candidates, width, height)
    elif record.get("face") is not None:
        face = box_from_list(record["face"], source).clip(width, height)
        if face is None:
            raise DatasetError(f'{sample.path}: annotated face lies outside the image')
        boxes = [face]
    elif listed is not None:
        boxes = []
    else:
        boxes = detect_faces(image, options.detector or make_detector(missing_ok=not options.strict), sample.path)
        record["faces"] = [box_to_list(box, confidence=True) for box in boxes]
    face, substituted = resolve_face(boxes, width, height, options.use_face_selector, options.strict)
    record["face"] = box_to_list(face)
    if substituted:
        record["flags"] = sorted(set(record.get("flags") or []) | {"no-face"})

    if record.get("masks"):
        masks = [load_mask(root / path) for path in record["masks"]]
        selected = select_person_mask(masks, face)
        record["mask"] = next((path for path, mask in zip(record["masks"], masks) if mask is selected), None)
    record.setdefault("mask", None)
    if record["mask"] is None:
        if options.strict:
            raise MissingCueError(f'{sample.path}: no person mask covers the face')
        logger.warning('%s: no person mask, keeping mask: null', sample.path)
    return record


def resolve_records(dataset: Dataset, workers=4) -> Tuple[List[dict], List[Tuple[str, str]]]:
    """
    Resolve every sample of the dataset. Returns (records, failures); a failed sample keeps
    its original record and is reported as (image path, error).
    """

    def one(sample):
        try:
            return resolve_record(sample, dataset.spec.root, dataset.options), None
        except McaerError as error:
            logger.error('%s: %s', sample.path, error)
            return dict(sample.record, image=sample.path.relative_to(dataset.spec.root).as_posix()), error

    results = Parallel(workers, "threading")(delayed(one)(sample) for sample in dataset.samples)
    records = [record for record, _ in results]
    failures = [(record["image"], str(error)) for record, error in results if error is not None]
    return records, failures
