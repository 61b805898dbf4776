from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from django.db import models
from scipy import ndimage

from core.exceptions import ConfigurationError, DatasetLoadError, EmptyDatasetError, GeometryError
from core.utils import format_float

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.csv'
PROTOCOLS_NAME = 'protocols.json'
IMAGES_DIR = 'images'
MANIFEST_PREFIX = ['file', 'protocol', 'domain', 'bx', 'by', 'bw', 'bh']

_PPM_HEADER = re.compile(rb'\AP6\s+(\d+)\s+(\d+)\s+(\d+)\s')


class NormRule(models.TextChoices):
    BboxSize = "bbox_size"
    InterOcular = "inter_ocular"


@dataclass(frozen=True)
class ProtocolSpec:
    id: str
    landmarks: int
    flip_perm: Tuple[int, ...]
    norm_rule: str = NormRule.BboxSize
    eye_indices: Optional[Tuple[int, int]] = None

    def validate(self) -> ProtocolSpec:
        if self.landmarks < 1:
            raise ConfigurationError(f'Protocol {self.id}: landmark count must be positive')
        if sorted(self.flip_perm) != list(range(self.landmarks)):
            raise ConfigurationError(f'Protocol {self.id}: flip_perm is not a permutation of [0, {self.landmarks})')
        if any(self.flip_perm[self.flip_perm[i]] != i for i in range(self.landmarks)):
            raise ConfigurationError(f'Protocol {self.id}: flip_perm is not an involution')
        if self.norm_rule not in NormRule.values:
            raise ConfigurationError(f'Protocol {self.id}: unknown norm rule {self.norm_rule!r}')
        if self.norm_rule == NormRule.InterOcular:
            if self.eye_indices is None or len(self.eye_indices) != 2 \
                    or not all(0 <= i < self.landmarks for i in self.eye_indices):
                raise ConfigurationError(f'Protocol {self.id}: inter_ocular needs two valid eye indices')
        return self

    def to_dict(self) -> dict:
        return {
            'id': self.id,
            'landmarks': self.landmarks,
            'flip_perm': list(self.flip_perm),
            'norm_rule': str(self.norm_rule),
            'eye_indices': list(self.eye_indices) if self.eye_indices is not None else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> ProtocolSpec:
        try:
            eyes = data.get('eye_indices')
            return cls(
                id=str(data['id']),
                landmarks=int(data['landmarks']),
                flip_perm=tuple(int(i) for i in data['flip_perm']),
                norm_rule=data.get('norm_rule', NormRule.BboxSize),
                eye_indices=tuple(int(i) for i in eyes) if eyes is not None else None,
            ).validate()
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, ConfigurationError):
                raise
            raise ConfigurationError(f'Malformed protocol entry {data!r}: {e}') from e


@dataclass
class LandmarkSample:
    image: np.ndarray
    landmarks: np.ndarray
    bbox: Tuple[float, float, float, float]
    protocol_id: str
    domain: Optional[int] = None

    @property
    def landmark_count(self) -> int:
        return self.landmarks.shape[0]

    def validate(self, protocol: Optional[ProtocolSpec] = None) -> LandmarkSample:
        if self.image.dtype != np.uint8 or self.image.ndim != 3 or self.image.shape[2] != 3:
            raise GeometryError(f'Image must be 8-bit RGB (H, W, 3), got {self.image.dtype} {self.image.shape}')
        if self.landmarks.ndim != 2 or self.landmarks.shape[1] != 2:
            raise GeometryError(f'Landmarks must have shape (L, 2), got {self.landmarks.shape}')

        _, _, w, h = self.bbox
        if not (np.isfinite(self.bbox).all() and w > 0 and h > 0):
            raise GeometryError(f'Degenerate bounding box {self.bbox}')

        if protocol is not None and protocol.landmarks != self.landmark_count:
            raise GeometryError(
                f'Protocol {protocol.id} expects {protocol.landmarks} landmarks, sample has {self.landmark_count}')

        return self


@dataclass
class LandmarkDataset:
    samples: List[LandmarkSample]
    protocols: Dict[str, ProtocolSpec]

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, index: int) -> LandmarkSample:
        return self.samples[index]

    def __iter__(self) -> Iterator[LandmarkSample]:
        return iter(self.samples)

    @property
    def protocol(self) -> ProtocolSpec:
        ids = {sample.protocol_id for sample in self.samples} or set(self.protocols)
        if len(ids) != 1:
            raise ConfigurationError(f'Dataset mixes protocols {sorted(ids)}')
        return self.protocols[ids.pop()]

    @property
    def domains(self) -> List[Optional[int]]:
        return [sample.domain for sample in self.samples]


@dataclass(frozen=True)
class LandmarkTemplate:
    name: str
    points: Tuple[Tuple[float, float], ...]
    flip_perm: Tuple[int, ...]
    # horizontal offset per unit sin(yaw), gives the profile parallax
    depths: Tuple[float, ...]
    norm_rule: str
    eye_indices: Optional[Tuple[int, int]] = None

    def protocol(self, protocol_id: str) -> ProtocolSpec:
        return ProtocolSpec(
            id=protocol_id,
            landmarks=len(self.points),
            flip_perm=self.flip_perm,
            norm_rule=self.norm_rule,
            eye_indices=self.eye_indices,
        ).validate()


FIVE_POINT = LandmarkTemplate(
    name='five_point',
    points=((0.30, 0.35), (0.70, 0.35), (0.50, 0.55), (0.35, 0.75), (0.65, 0.75)),
    flip_perm=(1, 0, 2, 4, 3),
    depths=(0.05, 0.05, 0.15, 0.06, 0.06),
    norm_rule=NormRule.BboxSize,
)

NINE_POINT = LandmarkTemplate(
    name='nine_point',
    points=((0.25, 0.35), (0.40, 0.35), (0.60, 0.35), (0.75, 0.35), (0.50, 0.55),
            (0.35, 0.75), (0.65, 0.75), (0.50, 0.70), (0.50, 0.92)),
    flip_perm=(3, 2, 1, 0, 4, 6, 5, 7, 8),
    depths=(0.02, 0.06, 0.06, 0.02, 0.15, 0.06, 0.06, 0.08, 0.05),
    norm_rule=NormRule.InterOcular,
    eye_indices=(0, 3),
)

TEMPLATES = {template.name: template for template in (FIVE_POINT, NINE_POINT)}

MARKER_COLORS = np.array([
    (255, 40, 40), (40, 255, 40), (40, 40, 255), (255, 255, 40), (255, 40, 255),
    (40, 255, 255), (255, 140, 0), (140, 0, 255), (0, 140, 80),
], dtype=np.float64)


def template_for(landmarks: int) -> LandmarkTemplate:
    for template in TEMPLATES.values():
        if len(template.points) == landmarks:
            return template
    raise ConfigurationError(f'No synthetic template with {landmarks} landmarks, available: '
                             f'{sorted(len(t.points) for t in TEMPLATES.values())}')


@dataclass(frozen=True)
class AugmentConfig:
    rot_deg: float = 25.0
    bbox_jitter_frac: float = 0.15
    hflip_prob: float = 0.5
    shear_max: float = 0.1
    seed: int = 0

    def validate(self) -> AugmentConfig:
        for name in ('rot_deg', 'bbox_jitter_frac', 'hflip_prob', 'shear_max'):
            if getattr(self, name) < 0:
                raise ConfigurationError(f'Augmentation {name} must be nonnegative')
        if self.hflip_prob > 1:
            raise ConfigurationError('Augmentation hflip_prob must lie in [0, 1]')
        if self.bbox_jitter_frac >= 0.5:
            raise ConfigurationError('Augmentation bbox_jitter_frac must be below 0.5')
        return self

    @classmethod
    def disabled(cls, seed: int = 0) -> AugmentConfig:
        return cls(rot_deg=0, bbox_jitter_frac=0, hflip_prob=0, shear_max=0, seed=seed)


@dataclass(frozen=True)
class SynthConfig:
    n_samples: int = 256
    image_size: int = 64
    landmarks: int = 5
    domain_weights: Tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)
    yaw_centers: Tuple[float, ...] = (-40.0, 0.0, 40.0)
    yaw_jitter: float = 10.0
    brightness: Tuple[float, ...] = (0.0, -30.0, 30.0)
    contrast: Tuple[float, ...] = (1.0, 0.8, 1.2)
    noise_sigma: float = 0.5
    protocol_id: str = 'synth'
    seed: int = 0

    @property
    def domain_count(self) -> int:
        return len(self.domain_weights)

    @property
    def template(self) -> LandmarkTemplate:
        return template_for(self.landmarks)

    def validate(self) -> SynthConfig:
        if self.domain_count < 1:
            raise ConfigurationError('At least one domain is required')
        for name in ('yaw_centers', 'brightness', 'contrast'):
            if len(getattr(self, name)) != self.domain_count:
                raise ConfigurationError(f'{name} needs {self.domain_count} entries, one per domain')

        weights = np.asarray(self.domain_weights, dtype=np.float64)
        if (weights < 0).any() or not math.isclose(weights.sum(), 1.0, abs_tol=1e-9):
            raise ConfigurationError(f'Domain weights must lie on the simplex, got {self.domain_weights}')

        if self.n_samples < 0 or self.image_size < 8:
            raise ConfigurationError('n_samples must be nonnegative and image_size at least 8')
        if self.noise_sigma < 0 or self.yaw_jitter < 0:
            raise ConfigurationError('noise_sigma and yaw_jitter must be nonnegative')

        template_for(self.landmarks)
        return self


def write_ppm(path: Union[str, Path], image: np.ndarray):
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise GeometryError(f'PPM needs an 8-bit RGB image, got {image.dtype} {image.shape}')
    height, width, _ = image.shape
    Path(path).write_bytes(b'P6\n%d %d\n255\n' % (width, height) + np.ascontiguousarray(image).tobytes())


def read_ppm(path: Union[str, Path]) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise DatasetLoadError(f'Cannot read image {path}: {e}') from e

    match = _PPM_HEADER.match(raw)
    if not match:
        raise DatasetLoadError(f'{path} is not a binary PPM (P6)')

    width, height, maxval = (int(v) for v in match.groups())
    if maxval != 255:
        raise DatasetLoadError(f'{path}: only maxval 255 is supported, got {maxval}')

    body = raw[match.end():]
    if len(body) != width * height * 3:
        raise DatasetLoadError(f'{path}: expected {width * height * 3} pixel bytes, got {len(body)}')

    return np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3).copy()


def manifest_header(landmarks: int) -> List[str]:
    return MANIFEST_PREFIX + [f'{axis}{i + 1}' for i in range(landmarks) for axis in ('x', 'y')]


def save_dataset(dataset: LandmarkDataset, out_dir: Union[str, Path]) -> Path:
    out_dir = Path(out_dir)
    try:
        (out_dir / IMAGES_DIR).mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetLoadError(f'Cannot create dataset directory {out_dir}: {e}') from e

    landmarks = {sample.landmark_count for sample in dataset.samples}
    if len(landmarks) > 1:
        raise ConfigurationError(f'One manifest holds one landmark count, got {sorted(landmarks)}')
    count = landmarks.pop() if landmarks else next(iter(dataset.protocols.values())).landmarks

    with open(out_dir / MANIFEST_NAME, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(manifest_header(count))

        for i, sample in enumerate(dataset.samples):
            name = f'{IMAGES_DIR}/{i:06d}.ppm'
            write_ppm(out_dir / name, sample.image)
            writer.writerow(
                [name, sample.protocol_id, '' if sample.domain is None else sample.domain]
                + [format_float(v) for v in sample.bbox]
                + [format_float(v) for v in sample.landmarks.reshape(-1)]
            )

    (out_dir / PROTOCOLS_NAME).write_text(json.dumps(
        [protocol.to_dict() for protocol in dataset.protocols.values()], indent=2) + '\n')

    logger.info('Wrote %d samples to %s', len(dataset), out_dir)

    return out_dir


def _read_protocols(path: Path) -> Dict[str, ProtocolSpec]:
    try:
        entries = json.loads(path.read_text())
    except OSError as e:
        raise DatasetLoadError(f'Cannot read protocols {path}: {e}') from e
    except ValueError as e:
        raise DatasetLoadError(f'Malformed protocols file {path}: {e}') from e

    if not isinstance(entries, list):
        raise DatasetLoadError(f'{path} must hold a list of protocol specs')

    protocols = {}
    for entry in entries:
        try:
            protocol = ProtocolSpec.from_dict(entry)
        except ConfigurationError as e:
            raise DatasetLoadError(f'{path}: {e}') from e
        protocols[protocol.id] = protocol

    return protocols


def load_dataset(manifest_path: Union[str, Path]) -> LandmarkDataset:
    """
    Loads a dataset written by :func:`save_dataset`.
    ``manifest_path`` is either the manifest file or the directory holding it.
    """
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    root = manifest_path.parent

    if not manifest_path.is_file():
        raise DatasetLoadError(f'Manifest {manifest_path} does not exist')

    protocols = _read_protocols(root / PROTOCOLS_NAME)

    with open(manifest_path, newline='') as f:
        rows = list(csv.reader(f))

    if not rows:
        raise DatasetLoadError(f'{manifest_path} has no header')

    header = rows[0]
    coordinates = header[len(MANIFEST_PREFIX):]
    if header[:len(MANIFEST_PREFIX)] != MANIFEST_PREFIX or len(coordinates) % 2 \
            or header != manifest_header(len(coordinates) // 2):
        raise DatasetLoadError(f'{manifest_path}: malformed header {header}')
    landmarks = len(coordinates) // 2

    samples = []
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DatasetLoadError(f'{manifest_path}:{line}: expected {len(header)} columns, got {len(row)}')

        file, protocol_id, domain = row[:3]
        protocol = protocols.get(protocol_id)
        if protocol is None:
            raise DatasetLoadError(f'{manifest_path}:{line}: unknown protocol {protocol_id!r}')
        if protocol.landmarks != landmarks:
            raise DatasetLoadError(
                f'{manifest_path}:{line}: protocol {protocol_id} has {protocol.landmarks} landmarks, '
                f'manifest has {landmarks}')

        try:
            values = np.array([float(v) for v in row[3:]], dtype=np.float64)
            domain = int(domain) if domain != '' else None
        except ValueError as e:
            raise DatasetLoadError(f'{manifest_path}:{line}: {e}') from e

        sample = LandmarkSample(
            image=read_ppm(root / file),
            landmarks=values[4:].reshape(landmarks, 2),
            bbox=tuple(float(v) for v in values[:4]),
            protocol_id=protocol_id,
            domain=domain,
        )
        try:
            samples.append(sample.validate(protocol))
        except GeometryError as e:
            raise DatasetLoadError(f'{manifest_path}:{line}: {e}') from e

    if not samples:
        raise EmptyDatasetError(f'{manifest_path} lists no samples')

    logger.debug('Loaded %d samples from %s', len(samples), manifest_path)

    return LandmarkDataset(samples=samples, protocols=protocols)


def _rotation(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def _render(cfg: SynthConfig, landmarks: np.ndarray, center: np.ndarray,
            box: float, yaw: float, roll: float, domain: int, rng: np.random.Generator) -> np.ndarray:
    size = cfg.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    image = np.empty((size, size, 3), dtype=np.float64)
    image[:] = (70.0, 80.0, 90.0)

    # face ellipse in its own rotated frame
    dx, dy = xx - center[0], yy - center[1]
    c, s = math.cos(roll), math.sin(roll)
    u, v = c * dx + s * dy, -s * dx + c * dy
    half_width = box * (0.15 + 0.35 * abs(math.cos(yaw)))
    face = (u / half_width) ** 2 + (v / (box * 0.5)) ** 2 <= 1.0
    image[face] = (205.0, 170.0, 150.0)

    radius = max(1.0, box / 28)
    for j, (x, y) in enumerate(landmarks):
        marker = (xx - x) ** 2 + (yy - y) ** 2 <= radius ** 2
        image[marker] = MARKER_COLORS[j % len(MARKER_COLORS)]

    image = (image - 128.0) * cfg.contrast[domain] + 128.0 + cfg.brightness[domain]
    image += rng.normal(0.0, 3.0, size=image.shape)

    return np.clip(np.rint(image), 0, 255).astype(np.uint8)


def synth_samples(cfg: SynthConfig) -> LandmarkDataset:
    cfg.validate()
    template = cfg.template
    protocol = template.protocol(cfg.protocol_id)
    rng = np.random.default_rng(cfg.seed)

    points = np.asarray(template.points, dtype=np.float64)
    depths = np.asarray(template.depths, dtype=np.float64)
    cumulative = np.cumsum(cfg.domain_weights)
    size = cfg.image_size

    samples = []
    for _ in range(cfg.n_samples):
        domain = min(int(np.searchsorted(cumulative, rng.random(), side='right')), cfg.domain_count - 1)
        yaw = math.radians(cfg.yaw_centers[domain] + rng.uniform(-cfg.yaw_jitter, cfg.yaw_jitter))

        unit = points.copy()
        unit[:, 0] = 0.5 + (points[:, 0] - 0.5) * math.cos(yaw) + depths * math.sin(yaw)

        box = size * rng.uniform(0.55, 0.75)
        center = size / 2 + rng.uniform(-0.08, 0.08, size=2) * size
        roll = math.radians(rng.uniform(-10.0, 10.0))

        landmarks = center + ((unit - 0.5) * box) @ _rotation(roll).T
        landmarks = landmarks + rng.normal(0.0, cfg.noise_sigma, size=landmarks.shape)

        image = _render(cfg, landmarks, center, box, yaw, roll, domain, rng)
        bbox = (float(center[0] - box / 2), float(center[1] - box / 2), float(box), float(box))

        samples.append(LandmarkSample(
            image=image, landmarks=landmarks, bbox=bbox, protocol_id=protocol.id, domain=domain,
        ).validate(protocol))

    return LandmarkDataset(samples=samples, protocols={protocol.id: protocol})


def synth_generate(cfg: SynthConfig, out_dir: Union[str, Path]) -> LandmarkDataset:
    dataset = synth_samples(cfg)
    if dataset.samples:
        counts = np.bincount([s.domain for s in dataset.samples], minlength=cfg.domain_count)
        logger.info('Generated %d synthetic samples, per-domain counts %s', len(dataset), counts.tolist())
    save_dataset(dataset, out_dir)
    return dataset


def apply_affine(matrix: np.ndarray, points: np.ndarray) -> np.ndarray:
    return points @ matrix[:2, :2].T + matrix[:2, 2]


def warp_image(image: np.ndarray, matrix: np.ndarray, output_shape: Tuple[int, int]) -> np.ndarray:
    """
    Bilinear resampling of ``image`` under ``matrix`` (source pixel -> destination pixel),
    zero outside the source. Returns float64 (H, W, 3).
    """
    height, width = output_shape
    inverse = np.linalg.inv(matrix)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    destination = np.stack([xx.ravel(), yy.ravel()], axis=1)
    source = apply_affine(inverse, destination)
    coordinates = [source[:, 1], source[:, 0]]

    channels = [
        ndimage.map_coordinates(image[..., c].astype(np.float64), coordinates, order=1, mode='constant', cval=0.0)
        for c in range(image.shape[2])
    ]

    return np.stack(channels, axis=1).reshape(height, width, image.shape[2])


@dataclass
class CroppedSample:
    """A network-ready crop; ``affine`` maps original pixels into crop pixels."""

    image: np.ndarray
    landmarks: np.ndarray
    affine: np.ndarray
    protocol_id: str
    domain: Optional[int] = None


def crop_affine(bbox: Sequence[float], target: int) -> np.ndarray:
    bx, by, bw, bh = bbox
    if not (np.isfinite(bbox).all() and bw > 0 and bh > 0):
        raise GeometryError(f'Degenerate bounding box {tuple(bbox)}')

    return np.array([
        [target / bw, 0.0, -bx * target / bw],
        [0.0, target / bh, -by * target / bh],
        [0.0, 0.0, 1.0],
    ])


def crop_resize(sample: LandmarkSample, target: int) -> CroppedSample:
    bx, by, bw, bh = sample.bbox
    height, width = sample.image.shape[:2]
    matrix = crop_affine(sample.bbox, target)

    if bx >= width or by >= height or bx + bw <= 0 or by + bh <= 0:
        raise GeometryError(f'Bounding box {sample.bbox} does not intersect the {width}x{height} image')

    return CroppedSample(
        image=warp_image(sample.image, matrix, (target, target)),
        landmarks=apply_affine(matrix, sample.landmarks),
        affine=matrix,
        protocol_id=sample.protocol_id,
        domain=sample.domain,
    )


@dataclass(frozen=True)
class AugmentParams:
    bbox: Tuple[float, float, float, float]
    angle_deg: float = 0.0
    shear: float = 0.0
    flip: bool = False

    @property
    def center(self) -> np.ndarray:
        bx, by, bw, bh = self.bbox
        return np.array([bx + bw / 2, by + bh / 2])

    @property
    def matrix(self) -> np.ndarray:
        return augmentation_matrix(self.center, self.angle_deg, self.shear, self.flip)


def augmentation_matrix(center: Sequence[float], angle_deg: float, shear: float, flip: bool) -> np.ndarray:
    """Rotation, then shear, then horizontal flip, all about ``center``."""
    cx, cy = center

    to_origin = np.array([[1.0, 0.0, -cx], [0.0, 1.0, -cy], [0.0, 0.0, 1.0]])
    back = np.array([[1.0, 0.0, cx], [0.0, 1.0, cy], [0.0, 0.0, 1.0]])

    rotation = np.eye(3)
    rotation[:2, :2] = _rotation(math.radians(angle_deg))
    shearing = np.array([[1.0, shear, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    mirror = np.diag([-1.0 if flip else 1.0, 1.0, 1.0])

    return back @ mirror @ shearing @ rotation @ to_origin


def draw_augmentation(sample: LandmarkSample, cfg: AugmentConfig, rng: np.random.Generator) -> AugmentParams:
    bx, by, bw, bh = sample.bbox
    # corners jitter independently
    x0, x1 = np.array([bx, bx + bw]) + rng.uniform(-1.0, 1.0, size=2) * cfg.bbox_jitter_frac * bw
    y0, y1 = np.array([by, by + bh]) + rng.uniform(-1.0, 1.0, size=2) * cfg.bbox_jitter_frac * bh

    angle = rng.uniform(-cfg.rot_deg, cfg.rot_deg)
    shear = rng.uniform(-cfg.shear_max, cfg.shear_max)
    flip = bool(rng.random() < cfg.hflip_prob)

    return AugmentParams(
        bbox=(float(x0), float(y0), float(x1 - x0), float(y1 - y0)),
        angle_deg=float(angle),
        shear=float(shear),
        flip=flip,
    )


def apply_augmentation(sample: LandmarkSample, params: AugmentParams, protocol: ProtocolSpec) -> LandmarkSample:
    matrix = params.matrix

    if np.array_equal(matrix, np.eye(3)):
        image, landmarks = sample.image.copy(), sample.landmarks.copy()
    else:
        warped = warp_image(sample.image, matrix, sample.image.shape[:2])
        image = np.clip(np.rint(warped), 0, 255).astype(np.uint8)
        landmarks = apply_affine(matrix, sample.landmarks)

    if params.flip:
        landmarks = landmarks[list(protocol.flip_perm)]

    return dataclasses.replace(sample, image=image, landmarks=landmarks, bbox=params.bbox)


def augment(sample: LandmarkSample, cfg: AugmentConfig, rng: np.random.Generator,
            protocol: ProtocolSpec) -> LandmarkSample:
    return apply_augmentation(sample, draw_augmentation(sample, cfg, rng), protocol)


def to_network_input(crops: Sequence[CroppedSample]) -> np.ndarray:
    """Stacks crops into an (N, 3, S, S) batch scaled to [0, 1]."""
    return np.stack([crop.image.transpose(2, 0, 1) for crop in crops]) / 255.0


def normalize_landmarks(landmarks: np.ndarray, size: int) -> np.ndarray:
    return landmarks / size - 0.5


def denormalize_landmarks(coordinates: np.ndarray, size: int) -> np.ndarray:
    return (coordinates + 0.5) * size


@dataclass
class ProportionalSampler:
    """
    Draws ``(dataset_id, index)`` with dataset probability proportional to its size.
    Inside a dataset indices come from a fresh permutation every pass.
    """

    datasets: Sequence[Tuple[str, int]]
    rng: np.random.Generator
    _orders: Dict[str, List[int]] = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        sizes = [size for _, size in self.datasets]
        if not sizes or sum(sizes) <= 0:
            raise ConfigurationError('Proportional sampling needs a positive total size')
        if any(size <= 0 for size in sizes):
            raise ConfigurationError(f'Every dataset needs samples, got sizes {sizes}')

        ids = [dataset_id for dataset_id, _ in self.datasets]
        if len(set(ids)) != len(ids):
            raise ConfigurationError(f'Duplicate dataset ids {ids}')

    @property
    def ids(self) -> List[str]:
        return [dataset_id for dataset_id, _ in self.datasets]

    @property
    def total(self) -> int:
        return sum(size for _, size in self.datasets)

    @property
    def probabilities(self) -> np.ndarray:
        sizes = np.array([size for _, size in self.datasets], dtype=np.float64)
        return sizes / sizes.sum()

    def choose_dataset(self) -> str:
        if len(self.datasets) == 1:
            return self.datasets[0][0]
        return self.ids[int(self.rng.choice(len(self.datasets), p=self.probabilities))]

    def next_index(self, dataset_id: str) -> int:
        order = self._orders.get(dataset_id)
        if not order:
            size = dict(self.datasets)[dataset_id]
            order = self.rng.permutation(size).tolist()
            self._orders[dataset_id] = order
        return order.pop()

    def draw(self) -> Tuple[str, int]:
        dataset_id = self.choose_dataset()
        return dataset_id, self.next_index(dataset_id)

    def draw_batch(self, batch_size: int) -> Tuple[str, List[int]]:
        """One dataset chosen proportionally, all indices from it."""
        dataset_id = self.choose_dataset()
        return dataset_id, [self.next_index(dataset_id) for _ in range(batch_size)]

    def __iter__(self) -> Iterator[Tuple[str, int]]:
        while True:
            yield self.draw()


def proportional_sampler(datasets: Sequence[Tuple[str, int]], rng: np.random.Generator) -> Iterator[Tuple[str, int]]:
    return iter(ProportionalSampler(datasets, rng))
