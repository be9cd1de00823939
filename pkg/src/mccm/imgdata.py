"""Toy face-image stand-ins, augmentations, PPM I/O and dataset splits.

Images are ``(size, size, 3)`` float64 arrays in ``[0, 1]``. Three procedural
generators stand in for real data:

* ``pristine``    smooth colour noise with a gradient and fine grain,
* ``freqfake``    the same recipe rendered at half size and upsampled by
                  pixel replication, which leaves spectral replicas,
* ``spatialfake`` a pristine rendering with a hue-rotated ellipse.

Label convention: pristine = 1, synthetic = 0.
"""

from __future__ import annotations

import csv
import io
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

GENERATORS = ("pristine", "freqfake", "spatialfake")
JPEG_QUALITIES = (60, 70, 80, 90, 100)
DEFAULT_RATIOS = (35 / 70, 15 / 70, 20 / 70)
SPLITS = ("train", "val", "test")

MANIFEST_NAME = "manifest.csv"
MANIFEST_FIELDS = ("id", "file", "label", "generator", "split")

_MASK64 = (1 << 64) - 1


def label_of(generator: str) -> int:
    if generator not in GENERATORS:
        raise ValueError(f"unknown generator {generator!r}; expected one of {GENERATORS}")
    return 1 if generator == "pristine" else 0


def round_half_away(x):
    """Round to nearest integer, ties away from zero (``np.round`` rounds to even)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


# --------------------------------------------------------------------------- PRNG


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & _MASK64
    return h


class SplitMix64:
    """SplitMix64 generator; ``uniform`` uses the top 53 bits."""

    def __init__(self, state: int):
        self.state = state & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))


@dataclass(frozen=True)
class AugmentSpec:
    sigma: float
    quality: int

    def __post_init__(self):
        if not 0.0 <= self.sigma <= 2.0:
            raise ValueError(f"sigma must lie in [0, 2], got {self.sigma}")
        if self.quality not in JPEG_QUALITIES:
            raise ValueError(f"quality must be one of {JPEG_QUALITIES}, got {self.quality}")


def deterministic_eval_aug(image_id: str, eval_seed: int) -> AugmentSpec:
    """Per-image evaluation augmentation, identical for every model and run."""
    rng = SplitMix64((eval_seed & _MASK64) ^ fnv1a64(image_id))
    sigma = rng.uniform() * 2.0
    quality = JPEG_QUALITIES[int(math.floor(rng.uniform() * len(JPEG_QUALITIES)))]
    return AugmentSpec(sigma, quality)


def apply_augment(img: np.ndarray, spec: AugmentSpec) -> np.ndarray:
    """Blur then JPEG, the fixed capture-then-compress order."""
    return jpeg_sim(gaussian_blur(img, spec.sigma), spec.quality)


# --------------------------------------------------------------------------- generators


def _check_size(size: int) -> None:
    if size < 16 or size % 2:
        raise ValueError(f"image size must be even and >= 16, got {size}")


def _check_count(n: int) -> None:
    if n < 1:
        raise ValueError(f"need n >= 1 images, got {n}")


def _image_rng(seed: int, index: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index, stream])))


def _gauss_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-(k * k) / (2.0 * sigma * sigma))
    return w / w.sum()


def _filter_axis(img: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = len(kernel) // 2
    pad = [(0, 0)] * img.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(img, pad, mode="reflect")
    n = img.shape[axis]
    out = np.zeros_like(img)
    for i, weight in enumerate(kernel):
        out += weight * np.take(padded, np.arange(i, i + n), axis=axis)
    return out


def _smooth(img: np.ndarray, sigma: float) -> np.ndarray:
    kernel = _gauss_kernel(sigma)
    return _filter_axis(_filter_axis(img, kernel, 0), kernel, 1)


def _render_base(rng: np.random.Generator, size: int) -> np.ndarray:
    field_ = _smooth(rng.standard_normal((size, size, 3)), 3.0)
    lo = field_.min(axis=(0, 1))
    hi = field_.max(axis=(0, 1))
    img = 0.1 + 0.8 * (field_ - lo) / np.maximum(hi - lo, 1e-12)

    angle = rng.uniform(0.0, 2.0 * math.pi)
    amplitude = rng.uniform(-0.1, 0.1, size=3)
    ramp = np.linspace(-0.5, 0.5, size)
    plane = math.cos(angle) * ramp[None, :] + math.sin(angle) * ramp[:, None]
    img = img + plane[:, :, None] * amplitude[None, None, :]

    img = img + 0.02 * rng.standard_normal((size, size, 3))
    return np.clip(img, 0.0, 1.0)


def gen_pristine(seed: int, n: int, size: int = 64) -> list[np.ndarray]:
    _check_count(n)
    _check_size(size)
    return [_render_base(_image_rng(seed, i, 0), size) for i in range(n)]


def gen_freqfake(seed: int, n: int, size: int = 64) -> list[np.ndarray]:
    _check_count(n)
    _check_size(size)
    images = []
    for i in range(n):
        rng = _image_rng(seed, i, 0)
        small = _render_base(rng, size // 2)
        big = np.repeat(np.repeat(small, 2, axis=0), 2, axis=1)
        big = big + 0.005 * _image_rng(seed, i, 1).standard_normal(big.shape)
        images.append(np.clip(big, 0.0, 1.0))
    return images


def hue_rotation_matrix(degrees: float) -> np.ndarray:
    """Rotation about the grey axis (1, 1, 1) in RGB space."""
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    k = 1.0 / 3.0
    r = math.sqrt(k)
    return np.array(
        [
            [c + (1 - c) * k, k * (1 - c) - r * s, k * (1 - c) + r * s],
            [k * (1 - c) + r * s, c + (1 - c) * k, k * (1 - c) - r * s],
            [k * (1 - c) - r * s, k * (1 - c) + r * s, c + (1 - c) * k],
        ]
    )


def ellipse_mask(size: int, cy: float, cx: float, ay: float, ax: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0


def _spatialfake_one(seed: int, index: int, size: int) -> tuple[np.ndarray, np.ndarray]:
    base = _render_base(_image_rng(seed, index, 0), size)
    rng = _image_rng(seed, index, 2)
    cy, cx = rng.uniform(size / 4, 3 * size / 4, size=2)
    ay, ax = rng.uniform(size / 8, size / 4, size=2)
    degrees = rng.uniform(60.0, 120.0)
    mask = ellipse_mask(size, cy, cx, ay, ax)
    rotated = np.clip(base @ hue_rotation_matrix(degrees).T, 0.0, 1.0)
    out = base.copy()
    out[mask] = 0.8 * rotated[mask] + 0.2 * base[mask]
    return out, mask


def gen_spatialfake(seed: int, n: int, size: int = 64) -> list[np.ndarray]:
    _check_count(n)
    _check_size(size)
    return [_spatialfake_one(seed, i, size)[0] for i in range(n)]


_GENERATOR_FUNCS = {
    "pristine": gen_pristine,
    "freqfake": gen_freqfake,
    "spatialfake": gen_spatialfake,
}


def generate(generator: str, seed: int, n: int, size: int = 64) -> list[np.ndarray]:
    label_of(generator)
    return _GENERATOR_FUNCS[generator](seed, n, size)


# --------------------------------------------------------------------------- augmentation


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if not 0.0 <= sigma <= 2.0:
        raise ValueError(f"blur sigma must lie in [0, 2], got {sigma}")
    if sigma == 0.0:
        return np.array(img, dtype=np.float64, copy=True)
    return _smooth(np.asarray(img, dtype=np.float64), sigma)


def hflip(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img[:, ::-1])


# Annex K tables, row-major.
LUMA_QTABLE = np.array(
    [
        16, 11, 10, 16, 24, 40, 51, 61,
        12, 12, 14, 19, 26, 58, 60, 55,
        14, 13, 16, 24, 40, 57, 69, 56,
        14, 17, 22, 29, 51, 87, 80, 62,
        18, 22, 37, 56, 68, 109, 103, 77,
        24, 35, 55, 64, 81, 104, 113, 92,
        49, 64, 78, 87, 103, 121, 120, 101,
        72, 92, 95, 98, 112, 100, 103, 99,
    ],
    dtype=np.int64,
).reshape(8, 8)

CHROMA_QTABLE = np.array(
    [
        17, 18, 24, 47, 99, 99, 99, 99,
        18, 21, 26, 66, 99, 99, 99, 99,
        24, 26, 56, 99, 99, 99, 99, 99,
        47, 66, 99, 99, 99, 99, 99, 99,
        99, 99, 99, 99, 99, 99, 99, 99,
        99, 99, 99, 99, 99, 99, 99, 99,
        99, 99, 99, 99, 99, 99, 99, 99,
        99, 99, 99, 99, 99, 99, 99, 99,
    ],
    dtype=np.int64,
).reshape(8, 8)


def scaled_qtable(base: np.ndarray, quality: int) -> np.ndarray:
    """IJG quality scaling for Q >= 50."""
    if quality not in JPEG_QUALITIES:
        raise ValueError(f"JPEG quality must be one of {JPEG_QUALITIES}, got {quality}")
    scale = 200 - 2 * quality
    return np.clip((base * scale + 50) // 100, 1, 255)


def _dct_matrix() -> np.ndarray:
    n = np.arange(8)
    c = np.cos((2 * n[None, :] + 1) * n[:, None] * np.pi / 16) * 0.5
    c[0] *= 1 / math.sqrt(2)
    return c


_DCT = _dct_matrix()

_RGB2YCC = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ]
)
_YCC2RGB = np.array(
    [
        [1.0, 0.0, 1.402],
        [1.0, -0.344136, -0.714136],
        [1.0, 1.772, 0.0],
    ]
)


def jpeg_sim(img: np.ndarray, quality: int) -> np.ndarray:
    """Block-DCT quantisation round trip; no subsampling, no entropy coding."""
    tables = [scaled_qtable(LUMA_QTABLE, quality)] + [scaled_qtable(CHROMA_QTABLE, quality)] * 2
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    ph, pw = -h % 8, -w % 8
    x = np.pad(img * 255.0, ((0, ph), (0, pw), (0, 0)), mode="edge")
    ycc = x @ _RGB2YCC.T
    ycc[..., 1:] += 128.0

    H, W = x.shape[:2]
    out = np.empty_like(ycc)
    for c in range(3):
        blocks = (ycc[..., c] - 128.0).reshape(H // 8, 8, W // 8, 8).transpose(0, 2, 1, 3)
        coef = _DCT @ blocks @ _DCT.T
        q = tables[c]
        coef = round_half_away(coef / q) * q
        rec = _DCT.T @ coef @ _DCT
        out[..., c] = rec.transpose(0, 2, 1, 3).reshape(H, W) + 128.0
    out = np.clip(out, 0.0, 255.0)
    out[..., 1:] -= 128.0
    rgb = np.clip(out @ _YCC2RGB.T, 0.0, 255.0) / 255.0
    return rgb[:h, :w]


# --------------------------------------------------------------------------- PPM


class PpmError(ValueError):
    pass


class PpmHeaderError(PpmError):
    pass


class PpmTruncatedError(PpmError):
    pass


def to_bytes(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.size and (img.min() < -1e-9 or img.max() > 1.0 + 1e-9):
        raise ValueError("pixel values must lie in [0, 1]")
    return round_half_away(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_ppm(img: np.ndarray) -> bytes:
    data = img if img.dtype == np.uint8 else to_bytes(img)
    h, w = data.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(data).tobytes()


def write_ppm(img: np.ndarray, path) -> None:
    atomic_write_bytes(path, encode_ppm(img))


def _header_tokens(buf: bytes) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PpmHeaderError("incomplete PPM header")
        tokens.append(buf[start:pos])
    if pos >= len(buf):
        raise PpmHeaderError("PPM header not terminated")
    return tokens, pos + 1


def decode_ppm_bytes(buf: bytes) -> np.ndarray:
    """Decode to a ``(h, w, 3)`` uint8 array."""
    if not buf.startswith(b"P6"):
        raise PpmHeaderError("not a binary P6 file")
    tokens, offset = _header_tokens(buf)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise PpmHeaderError(f"non-numeric PPM header field: {exc}") from None
    if w <= 0 or h <= 0 or maxval != 255:
        raise PpmHeaderError(f"unsupported PPM geometry {w}x{h} maxval={maxval}")
    need = w * h * 3
    payload = buf[offset : offset + need]
    if len(payload) < need:
        raise PpmTruncatedError(f"PPM payload has {len(payload)} of {need} bytes")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()


def read_ppm_bytes(path) -> np.ndarray:
    return decode_ppm_bytes(Path(path).read_bytes())


def read_ppm(path) -> np.ndarray:
    return read_ppm_bytes(path).astype(np.float64) / 255.0


# --------------------------------------------------------------------------- files


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# --------------------------------------------------------------------------- manifests


@dataclass(frozen=True)
class SampleRecord:
    id: str
    label: int
    generator: str
    file: str

    def __post_init__(self):
        if label_of(self.generator) != self.label:
            raise ValueError(f"record {self.id}: label {self.label} inconsistent with {self.generator}")


@dataclass
class DatasetManifest:
    records: list[SampleRecord]
    split: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.id in seen:
                raise ValueError(f"duplicate sample id {r.id!r}")
            seen.add(r.id)

    def ids(self, split: str | None = None) -> list[str]:
        if split is None:
            return [r.id for r in self.records]
        return [r.id for r in self.records if self.split.get(r.id) == split]

    def subset(self, split: str) -> list[SampleRecord]:
        return [r for r in self.records if self.split.get(r.id) == split]


def split_counts(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items to ``ratios``."""
    raw = [n * r for r in ratios]
    counts = [int(math.floor(x + 1e-9)) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_protocol(
    manifest: DatasetManifest, ratios: Sequence[float] = DEFAULT_RATIOS, seed: int = 0
) -> DatasetManifest:
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-6:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    assignment: dict[str, str] = {}
    for label in (1, 0):
        members = [r.id for r in manifest.records if r.label == label]
        present = any(r.label == label for r in manifest.records)
        if not present:
            continue
        order = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, label]))).permutation(len(members))
        counts = split_counts(len(members), ratios)
        bounds = np.cumsum([0] + counts)
        for k, name in enumerate(SPLITS):
            for j in order[bounds[k] : bounds[k + 1]]:
                assignment[members[j]] = name
    if not assignment:
        raise ValueError("cannot split an empty manifest")
    return DatasetManifest(list(manifest.records), assignment)


def write_manifest(manifest: DatasetManifest, path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n", quoting=csv.QUOTE_NONE)
    writer.writerow(MANIFEST_FIELDS)
    for r in manifest.records:
        writer.writerow([r.id, r.file, r.label, r.generator, manifest.split.get(r.id, "")])
    atomic_write_text(path, buf.getvalue())


def read_manifest(path) -> DatasetManifest:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise ValueError(f"{path}: manifest header must be {','.join(MANIFEST_FIELDS)}")
        records, split = [], {}
        for row in reader:
            rec = SampleRecord(row["id"], int(row["label"]), row["generator"], row["file"])
            records.append(rec)
            if row["split"]:
                split[rec.id] = row["split"]
    return DatasetManifest(records, split)


@dataclass
class Dataset:
    """In-memory dataset; pixels kept as uint8 to bound memory."""

    manifest: DatasetManifest
    pixels: np.ndarray  # (n, size, size, 3) uint8, manifest order
    root: Path | None = None

    def __len__(self) -> int:
        return len(self.manifest.records)

    @property
    def ids(self) -> list[str]:
        return self.manifest.ids()

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.manifest.records], dtype=np.int64)

    def image(self, i: int) -> np.ndarray:
        return self.pixels[i].astype(np.float64) / 255.0

    def indices(self, split: str) -> np.ndarray:
        return np.array(
            [i for i, r in enumerate(self.manifest.records) if self.manifest.split.get(r.id) == split],
            dtype=np.int64,
        )

    def select(self, split: str) -> "Dataset":
        idx = self.indices(split)
        recs = [self.manifest.records[i] for i in idx]
        return Dataset(DatasetManifest(recs, {r.id: split for r in recs}), self.pixels[idx], self.root)


def concat_datasets(parts: Iterable[Dataset]) -> Dataset:
    parts = list(parts)
    recs = [r for p in parts for r in p.manifest.records]
    split = {k: v for p in parts for k, v in p.manifest.split.items()}
    return Dataset(DatasetManifest(recs, split), np.concatenate([p.pixels for p in parts]), None)


def build_dataset(
    generator: str,
    count: int,
    size: int = 64,
    seed: int = 0,
    ratios: Sequence[float] = DEFAULT_RATIOS,
) -> Dataset:
    images = generate(generator, seed, count, size)
    width = len(str(count - 1))
    records = [
        SampleRecord(f"{generator}-{seed}-{i:0{width}d}", label_of(generator), generator, f"img/{i:0{width}d}.ppm")
        for i in range(count)
    ]
    manifest = split_protocol(DatasetManifest(records), ratios, seed)
    return Dataset(manifest, np.stack([to_bytes(im) for im in images]))


def save_dataset(ds: Dataset, root) -> None:
    root = Path(root)
    for rec, pix in zip(ds.manifest.records, ds.pixels):
        target = root / rec.file
        target.parent.mkdir(parents=True, exist_ok=True)
        write_ppm(pix, target)
    write_manifest(ds.manifest, root / MANIFEST_NAME)


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {root}")
    manifest = read_manifest(manifest_path)
    if not manifest.records:
        raise ValueError(f"dataset {root} is empty")
    pixels = np.stack([read_ppm_bytes(root / r.file) for r in manifest.records])
    return Dataset(manifest, pixels, root)


def pack_images(images: Sequence[np.ndarray]) -> bytes:
    """Stable little-endian float64 serialisation, used to hash model inputs."""
    return b"".join(
        struct.pack("<II", *im.shape[:2]) + np.ascontiguousarray(im, dtype="<f8").tobytes() for im in images
    )
