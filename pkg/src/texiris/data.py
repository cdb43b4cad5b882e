"""Image files, dataset manifests and the synthetic texture generator."""
from __future__ import annotations

import csv
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError, InputError

RAW_MAGIC = b"IRFL"
EYES = ("left", "right")


# ---------------------------------------------------------------------------
# single images
# ---------------------------------------------------------------------------

def _pgm_token(buf, pos):
    """Next whitespace-delimited header token, skipping ``#`` comments."""
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("truncated PGM header", start)
    return buf[start:pos], pos


def decode_pgm(buf):
    if buf[:2] != b"P5":
        raise FormatError(f"bad magic {buf[:2]!r}, expected binary PGM 'P5'", 0)
    pos = 2
    values = []
    for what in ("width", "height", "maxval"):
        token, end = _pgm_token(buf, pos)
        if not token.isdigit():
            raise FormatError(f"PGM {what} is not an integer: {token!r}", pos)
        values.append(int(token))
        pos = end
    width, height, maxval = values
    if width < 1 or height < 1:
        raise FormatError("PGM extents must be positive", 2)
    if not 0 < maxval < 256:
        raise FormatError(f"only 8-bit PGM supported, maxval={maxval}", pos)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after PGM header", pos)
    pos += 1
    need = width * height
    if len(buf) - pos < need:
        raise FormatError(f"truncated pixel data: need {need} bytes, have {len(buf) - pos}", len(buf))
    pixels = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return (pixels.reshape(height, width) / np.float32(maxval)).astype(np.float32)


def encode_pgm(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise InputError(f"PGM images are 2-D, got shape {image.shape}")
    h, w = image.shape
    pixels = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def decode_raw(buf):
    if buf[:4] != RAW_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {RAW_MAGIC!r}", 0)
    if len(buf) < 12:
        raise FormatError("truncated raw image header", len(buf))
    width, height = struct.unpack_from("<II", buf, 4)
    need = 4 * width * height
    if len(buf) - 12 < need:
        raise FormatError(f"truncated raw pixel data: need {need} bytes", len(buf))
    pixels = np.frombuffer(buf, dtype="<f4", count=width * height, offset=12)
    if not np.all(np.isfinite(pixels)):
        raise FormatError("raw image contains non-finite values", 12)
    return np.clip(pixels.reshape(height, width), 0.0, 1.0).astype(np.float32)


def encode_raw(image):
    image = np.asarray(image, dtype="<f4")
    h, w = image.shape
    return RAW_MAGIC + struct.pack("<II", w, h) + image.tobytes()


def load_image(path):
    """Read a P5 PGM (scaled by 1/maxval) or a raw float image into [0, 1].

    Returns a (height, width) float32 array.
    """
    buf = Path(path).read_bytes()
    if buf[:4] == RAW_MAGIC:
        return decode_raw(buf)
    return decode_pgm(buf)


def save_image(path, image):
    path = Path(path)
    data = encode_raw(image) if path.suffix == ".irf" else encode_pgm(image)
    path.write_bytes(data)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Record:
    path: str
    class_id: int
    subject_id: int
    eye: str


@dataclass
class DatasetManifest:
    records: list
    root: str = "."
    resolution: tuple = (32, 128)  # height, width

    def __len__(self):
        return len(self.records)

    @property
    def num_classes(self):
        return len({r.class_id for r in self.records})

    def write(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["path", "class_id", "subject_id", "eye"])
            for r in self.records:
                writer.writerow([r.path, r.class_id, r.subject_id, r.eye])

    @classmethod
    def read(cls, path):
        path = Path(path)
        records = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["path", "class_id", "subject_id", "eye"]:
                raise FormatError(f"{path}: manifest header must be path,class_id,subject_id,eye")
            for line, row in enumerate(reader, start=2):
                try:
                    rec = Record(row["path"], int(row["class_id"]), int(row["subject_id"]), row["eye"])
                except (TypeError, ValueError):
                    raise FormatError(f"{path}: malformed row on line {line}") from None
                if rec.eye not in EYES:
                    raise FormatError(f"{path}: eye must be left/right on line {line}")
                records.append(rec)
        return cls(records, root=str(path.parent))


def compact_classes(records):
    """Renumber classes as 2*subject_rank + eye_index.

    Left and right eyes of a subject are separate classes. Returns the
    relabelled records and a dict mapping class id -> (subject_id, eye).
    """
    subjects = sorted({r.subject_id for r in records})
    pairs = sorted({(r.subject_id, r.eye) for r in records},
                   key=lambda p: (subjects.index(p[0]), EYES.index(p[1])))
    class_of = {}
    for subject, eye in pairs:
        class_of[(subject, eye)] = 2 * subjects.index(subject) + EYES.index(eye)
    # squeeze out gaps left by subjects with a single eye
    dense = {cid: i for i, cid in enumerate(sorted(class_of.values()))}
    class_of = {k: dense[v] for k, v in class_of.items()}
    relabelled = [Record(r.path, class_of[(r.subject_id, r.eye)], r.subject_id, r.eye)
                  for r in records]
    return relabelled, {cid: pair for pair, cid in class_of.items()}


@dataclass
class Dataset:
    """Images as an N x 1 x H x W float32 array with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim == 3:
            self.images = self.images[:, None]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.sample_ids is None:
            self.sample_ids = np.arange(len(self.labels))
        if len(self.images) != len(self.labels):
            raise InputError("images and labels differ in length")

    def __len__(self):
        return len(self.labels)

    @property
    def classes(self):
        return np.unique(self.labels)

    def subset(self, index):
        index = np.asarray(index)
        return Dataset(self.images[index], self.labels[index], self.sample_ids[index])

    def of_classes(self, classes):
        return self.subset(np.flatnonzero(np.isin(self.labels, list(classes))))

    def relabelled(self):
        """Copy with labels mapped onto 0..K-1 in sorted order."""
        mapping = {c: i for i, c in enumerate(self.classes)}
        return Dataset(self.images, np.array([mapping[c] for c in self.labels]), self.sample_ids)


def write_dataset(directory, manifest, images):
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    for rec, img in zip(manifest.records, images):
        save_image(directory / rec.path, img)
    manifest.root = str(directory)
    manifest.write(directory / "manifest.csv")


def load_dataset(directory):
    directory = Path(directory)
    manifest_path = directory / "manifest.csv"
    if not manifest_path.exists():
        raise InputError(f"no manifest.csv in {directory}")
    manifest = DatasetManifest.read(manifest_path)
    if not manifest.records:
        raise InputError(f"{manifest_path} lists no images")
    records, _ = compact_classes(manifest.records)
    images = [load_image(directory / r.path) for r in records]
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise FormatError(f"images in {directory} have mixed resolutions {sorted(shapes)}")
    manifest.records = records
    manifest.resolution = shapes.pop()
    return manifest, Dataset(np.stack(images), [r.class_id for r in records])


# ---------------------------------------------------------------------------
# synthetic textures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 20
    samples_per_class: int = 20
    height: int = 32
    width: int = 128
    min_components: int = 2
    max_components: int = 4
    frequency_range: tuple = (0.04, 0.22)  # cycles per pixel
    amplitude_range: tuple = (0.4, 1.0)
    phase_jitter: float = 0.5  # radians, std of per-image phase shift
    noise_sigma: float = 0.05
    min_class_distance: float = 0.12
    seed: int = 7

    def validate(self):
        if self.height % 16 or self.width % 16:
            raise ConfigurationError(
                f"resolution {self.height}x{self.width} must be divisible by 16")
        lo, hi = self.frequency_range
        if not 0 < lo <= hi:
            raise ConfigurationError("frequencies must be positive")
        if self.noise_sigma < 0 or self.phase_jitter < 0:
            raise ConfigurationError("noise sigma and phase jitter must be >= 0")
        if not 1 <= self.min_components <= self.max_components:
            raise ConfigurationError("need 1 <= min_components <= max_components")
        if self.num_classes < 1 or self.samples_per_class < 1:
            raise ConfigurationError("need at least one class and one sample per class")

    def shifted(self, seed=None):
        """A second texture distribution (for cross-dataset runs): higher
        frequencies, more noise, different draw."""
        lo, hi = self.frequency_range
        return SynthSpec(**{**self.__dict__, "frequency_range": (lo * 1.5, hi * 1.3),
                            "noise_sigma": self.noise_sigma * 1.5,
                            "seed": self.seed + 1000 if seed is None else seed})


@dataclass(frozen=True)
class TextureComponent:
    frequency: float
    orientation: float
    amplitude: float
    phase: float


def _class_distance(a, b, spec):
    """Symmetric chamfer distance between component sets in (frequency, orientation)."""
    lo, hi = spec.frequency_range
    span = max(hi - lo, 1e-9)

    def d(p, q):
        df = (p.frequency - q.frequency) / span
        dt = abs(p.orientation - q.orientation) % math.pi
        dt = min(dt, math.pi - dt) / (math.pi / 2)
        return math.hypot(df, dt)

    ab = np.mean([min(d(p, q) for q in b) for p in a])
    ba = np.mean([min(d(q, p) for p in a) for q in b])
    return 0.5 * (ab + ba)


def _draw_class(rng, spec):
    k = int(rng.integers(spec.min_components, spec.max_components + 1))
    return tuple(
        TextureComponent(
            frequency=float(rng.uniform(*spec.frequency_range)),
            orientation=float(rng.uniform(0.0, math.pi)),
            amplitude=float(rng.uniform(*spec.amplitude_range)),
            phase=float(rng.uniform(0.0, 2 * math.pi)),
        )
        for _ in range(k)
    )


def texture_classes(spec, max_tries=10000):
    """Per-class texture parameters, pairwise at least ``min_class_distance`` apart."""
    rng = np.random.default_rng(spec.seed)
    classes = []
    tries = 0
    while len(classes) < spec.num_classes:
        tries += 1
        if tries > max_tries:
            raise ConfigurationError(
                f"could not place {spec.num_classes} classes at distance "
                f">= {spec.min_class_distance}; lower min_class_distance")
        cand = _draw_class(rng, spec)
        if all(_class_distance(cand, c, spec) >= spec.min_class_distance for c in classes):
            classes.append(cand)
    return classes


def render_texture(components, height, width, phase_shifts=None):
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    field_ = np.zeros((height, width))
    total = sum(c.amplitude for c in components)
    for i, c in enumerate(components):
        shift = 0.0 if phase_shifts is None else phase_shifts[i]
        arg = 2 * math.pi * c.frequency * (x * math.cos(c.orientation) + y * math.sin(c.orientation))
        field_ += c.amplitude * np.sin(arg + c.phase + shift)
    return 0.5 + 0.5 * field_ / total


def generate_synthetic(spec=SynthSpec()):
    """Deterministic texture dataset: (manifest, images[N, H, W]).

    Pixel values are quantised to multiples of 1/255 so that the on-disk PGM
    copy is lossless.
    """
    spec.validate()
    classes = texture_classes(spec)
    rng = np.random.default_rng([spec.seed, 1])
    images, records = [], []
    for cid, comps in enumerate(classes):
        for s in range(spec.samples_per_class):
            shifts = rng.normal(0.0, spec.phase_jitter, size=len(comps)) if spec.phase_jitter else None
            img = render_texture(comps, spec.height, spec.width, shifts)
            if spec.noise_sigma:
                img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
            img = np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
            images.append(img.astype(np.float32))
            records.append(Record(os.path.join("images", f"c{cid:04d}_s{s:04d}.pgm"),
                                  cid, cid // 2, EYES[cid % 2]))
    manifest = DatasetManifest(records, resolution=(spec.height, spec.width))
    return manifest, np.stack(images)


def synthetic_dataset(spec=SynthSpec()):
    manifest, images = generate_synthetic(spec)
    return Dataset(images, [r.class_id for r in manifest.records])
