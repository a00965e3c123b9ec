"""Synthetic datasets, binary PGM/PPM image files and dataset manifests."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .io_util import atomic_write_bytes, atomic_write_text

SPLITS = ("victim", "prior", "train")


class ImageFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs for a synthetic classification set.

    ``sigma_intra`` is the largest per-pixel deviation of a sample from its
    class prototype.
    ``separation`` in [0, 1] blends each prototype between a pattern shared by
    all classes (0) and a class-specific pattern (1).
    """

    num_classes: int = 10
    victims_per_class: int = 2
    priors_per_class: int = 3
    train_per_class: int = 4
    channels: int = 1
    height: int = 16
    width: int = 16
    sigma_intra: float = 0.1
    separation: float = 1.0
    smoothness: float = 2.5
    noise_smoothness: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.sigma_intra <= 1.0:
            raise ValueError(f"sigma_intra must lie in [0, 1], got {self.sigma_intra}")
        if not 0.0 <= self.separation <= 1.0:
            raise ValueError(f"separation must lie in [0, 1], got {self.separation}")
        if min(self.num_classes, self.channels, self.height, self.width) < 1:
            raise ValueError("class count and image sizes must be positive")
        if min(self.victims_per_class, self.priors_per_class, self.train_per_class) < 0:
            raise ValueError("split sizes must be non-negative")

    @property
    def shape(self):
        return (self.channels, self.height, self.width)


@dataclass(frozen=True)
class Sample:
    id: int
    label: int
    split: str
    image: np.ndarray


@dataclass
class Dataset:
    spec: SyntheticSpec | None
    samples: list

    def split(self, name: str) -> list:
        return [s for s in self.samples if s.split == name]

    def by_id(self, sample_id: int) -> Sample:
        for s in self.samples:
            if s.id == sample_id:
                return s
        raise KeyError(sample_id)


def _field(rng, shape, sigma):
    """Zero-mean, unit-std smooth random field."""
    c, h, w = shape
    white = rng.standard_normal(shape)
    smooth = gaussian_filter(white, sigma=(0, sigma, sigma), mode="wrap") if sigma > 0 else white
    smooth = smooth - smooth.mean()
    std = smooth.std()
    return smooth / std if std > 0 else smooth


def _peak_normalized(field):
    # sigma_intra then bounds the per-pixel deviation from the prototype
    peak = np.abs(field).max()
    return field / peak if peak > 0 else field


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Per class, a smooth prototype; samples add ``sigma_intra`` times a noise field.

    The noise field is scaled to unit peak magnitude, so no pixel deviates
    from its prototype by more than ``sigma_intra`` before clamping.

    Sample ids are assigned split by split (victims first), so the splits are
    disjoint by construction.
    """
    root = np.random.SeedSequence([int(spec.seed), 0xDA7A])
    shared_seq, *class_seqs = root.spawn(spec.num_classes + 1)
    shared = _field(np.random.default_rng(shared_seq), spec.shape, spec.smoothness)
    counts = {"victim": spec.victims_per_class, "prior": spec.priors_per_class, "train": spec.train_per_class}
    per_class = []
    for k, seq in enumerate(class_seqs):
        proto_seq, noise_seq = seq.spawn(2)
        own = _field(np.random.default_rng(proto_seq), spec.shape, spec.smoothness)
        mix = spec.separation * own + (1.0 - spec.separation) * shared
        mix = mix / (mix.std() or 1.0)
        prototype = np.clip(0.5 + 0.22 * mix, 0.0, 1.0)
        rng = np.random.default_rng(noise_seq)
        images = {}
        for split in SPLITS:
            images[split] = [
                np.clip(prototype + spec.sigma_intra * _peak_normalized(_field(rng, spec.shape, spec.noise_smoothness)),
                        0.0, 1.0)
                for _ in range(counts[split])
            ]
        per_class.append(images)
    samples, next_id = [], 0
    for split in SPLITS:
        for k in range(spec.num_classes):
            for image in per_class[k][split]:
                samples.append(Sample(next_id, k, split, image))
                next_id += 1
    return Dataset(spec, samples)


# --------------------------------------------------------------------------
# netpbm


def _read_token(data: bytes, pos: int):
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ImageFormatError("truncated header")
    return data[start:pos], pos


def decode_pnm(data: bytes) -> np.ndarray:
    magic, pos = _read_token(data, 0)
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {magic!r}; expected P5 or P6")
    fields = []
    for _ in range(3):
        tok, pos = _read_token(data, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise ImageFormatError(f"malformed header field {tok!r}") from None
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise ImageFormatError(f"invalid size {width}x{height}")
    if not 0 < maxval < 65536:
        raise ImageFormatError(f"invalid maxval {maxval}")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ImageFormatError("missing whitespace after header")
    pos += 1
    channels = 1 if magic == b"P5" else 3
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    payload = data[pos:pos + count * dtype.itemsize]
    if len(payload) < count * dtype.itemsize:
        raise ImageFormatError(f"truncated payload: {len(payload)} of {count * dtype.itemsize} bytes")
    values = np.frombuffer(payload, dtype=dtype).astype(np.float64)
    if values.max(initial=0) > maxval:
        raise ImageFormatError("pixel value exceeds maxval")
    return (values.reshape(height, width, channels) / maxval).transpose(2, 0, 1).copy()


def encode_pnm(image, maxval: int = 65535) -> bytes:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ImageFormatError(f"expected a (1|3, H, W) image, got {image.shape}")
    if not 0 < maxval < 65536:
        raise ImageFormatError(f"invalid maxval {maxval}")
    c, h, w = image.shape
    q = np.rint(np.clip(image, 0.0, 1.0) * maxval).transpose(1, 2, 0)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    magic = "P5" if c == 1 else "P6"
    return f"{magic}\n{w} {h}\n{maxval}\n".encode("ascii") + q.astype(dtype).tobytes()


def read_image(path) -> np.ndarray:
    return decode_pnm(Path(path).read_bytes())


def write_image(image, path, maxval: int = 65535):
    atomic_write_bytes(path, encode_pnm(image, maxval))


# --------------------------------------------------------------------------
# manifests: one "id class split path" line per image, relative paths
# resolved against the manifest's directory


@dataclass(frozen=True)
class ManifestEntry:
    id: int
    label: int
    split: str
    path: Path


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    entries = []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 'id class split path'")
        sid, label, split, rel = parts
        entries.append(ManifestEntry(int(sid), int(label), split, path.parent / rel))
    return entries


def load_manifest(path) -> Dataset:
    return Dataset(None, [Sample(e.id, e.label, e.split, read_image(e.path)) for e in read_manifest(path)])


def write_dataset(dataset: Dataset, directory, maxval: int = 65535) -> Path:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in dataset.samples:
        rel = f"images/{s.split}_{s.id:05d}.pgm" if s.image.shape[0] == 1 else f"images/{s.split}_{s.id:05d}.ppm"
        write_image(s.image, directory / rel, maxval)
        lines.append(f"{s.id} {s.label} {s.split} {rel}")
    manifest = directory / "manifest.txt"
    atomic_write_text(manifest, "\n".join(lines) + "\n")
    return manifest


def default_threads() -> int:
    value = os.environ.get("GRADINVERT_THREADS", "")
    try:
        return max(1, int(value))
    except ValueError:
        return 1
