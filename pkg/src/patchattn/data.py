"""Samples, manifests, splits, augmentation and the synthetic patch dataset."""

from __future__ import annotations

import csv
import logging
from collections import Counter
from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image

from patchattn.cropping import CropGrid, make_grid

log = logging.getLogger(__name__)

HAM_CLASSES = ("MEL", "NV", "BCC", "AKIEC", "BKL", "DF", "VASC")
HAM_COUNTS = (1113, 6705, 514, 327, 1099, 115, 142)
PARTS = ("fold0", "fold1", "fold2", "test")


class DataError(ValueError):
    pass


class DiagnosisMethod(str, Enum):
    EXPERT_CONSENSUS = "expert_consensus"
    SERIAL_IMAGING = "serial_imaging"
    CONFOCAL_MICROSCOPY = "confocal_microscopy"
    HISTOPATHOLOGY = "histopathology"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class SampleRecord:
    image_ref: str
    label: int
    diagnosis_method: str = DiagnosisMethod.UNKNOWN.value


# ---------------------------------------------------------------------------
# Image IO
# ---------------------------------------------------------------------------


def read_ppm(path: str | Path) -> np.ndarray:
    """Binary P6 PPM with maxval 255."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise DataError(f"{path}: only binary P6 PPM with maxval 255 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    pixels = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return pixels.reshape(h, w, 3).copy()


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + image.tobytes())


def read_image(path: str | Path) -> np.ndarray:
    """Decode to ``H x W x 3`` uint8."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".ppm":
            return read_ppm(path)
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (OSError, ValueError, IndexError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc


def write_image(path: str | Path, image: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        write_ppm(path, image)
    else:
        Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path)


def to_float(image: np.ndarray) -> np.ndarray:
    return image.astype(np.float32) / 255.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


def _parse_label(raw: str, class_names: Sequence[str]) -> int:
    raw = raw.strip()
    if raw in class_names:
        return class_names.index(raw)
    if raw.lstrip("-").isdigit() and 0 <= int(raw) < len(class_names):
        return int(raw)
    raise DataError(f"unknown label {raw!r}")


def load_manifest(
    path: str | Path, class_names: Sequence[str] = HAM_CLASSES, verify_images: bool = True
) -> list[SampleRecord]:
    """Read an ``image,label[,diagnosis_method]`` CSV. Relative image paths resolve against the manifest's folder."""
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    methods = {m.value for m in DiagnosisMethod}
    records = []
    with fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        if "image" not in fields or "label" not in fields:
            raise DataError(f"{path}: header must contain 'image' and 'label', got {fields}")
        for row_no, row in enumerate(reader, start=2):
            if row.get("image") in (None, "") or row.get("label") is None or None in row:
                raise DataError(f"{path}:{row_no}: malformed row")
            try:
                label = _parse_label(row["label"], class_names)
            except DataError as exc:
                raise DataError(f"{path}:{row_no}: {exc}") from None
            method = (row.get("diagnosis_method") or DiagnosisMethod.UNKNOWN.value).strip()
            if method not in methods:
                raise DataError(f"{path}:{row_no}: unknown diagnosis method {method!r}")
            image = Path(row["image"])
            if not image.is_absolute():
                image = path.parent / image
            if verify_images:
                read_image(image)
            records.append(SampleRecord(str(image), label, method))
    dupes = [ref for ref, n in Counter(r.image_ref for r in records).items() if n > 1]
    if dupes:
        log.warning("manifest %s lists %d image(s) more than once, e.g. %s", path, len(dupes), dupes[0])
    return records


def write_manifest(path: str | Path, records: Sequence[SampleRecord], class_names: Sequence[str], root=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image", "label", "diagnosis_method"])
        for r in records:
            ref = Path(r.image_ref)
            if root is not None:
                ref = ref.relative_to(root)
            w.writerow([ref.as_posix(), class_names[r.label], r.diagnosis_method])


# ---------------------------------------------------------------------------
# Split
# ---------------------------------------------------------------------------


@dataclass
class SplitSpec:
    parts: list[str]
    seed: int

    def indices(self, part: str) -> list[int]:
        return [i for i, p in enumerate(self.parts) if p == part]


def stratified_split(labels: Sequence[int], seed: int) -> SplitSpec:
    """Four parts with the same class mix: per-class shuffle, then round-robin.

    The round-robin start rotates from class to class so that leftover samples
    spread over the parts instead of piling up in the first one.
    """
    labels = np.asarray(labels, dtype=int)
    rng = np.random.default_rng(seed)
    parts = [""] * len(labels)
    start = 0
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        if len(idx) < len(PARTS):
            log.warning("class %d has only %d samples; some parts get none", c, len(idx))
        for j, i in enumerate(idx):
            parts[i] = PARTS[(start + j) % len(PARTS)]
        start = (start + len(idx)) % len(PARTS)
    return SplitSpec(parts, seed)


def write_split(path: str | Path, records: Sequence[SampleRecord], split: SplitSpec) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image", "part"])
        for r, p in zip(records, split.parts):
            w.writerow([r.image_ref, p])


def read_split(path: str | Path, records: Sequence[SampleRecord]) -> SplitSpec:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != len(records):
        raise DataError(f"split {path} has {len(rows)} rows for {len(records)} records")
    parts = []
    for r, row in zip(records, rows):
        if row["image"] != r.image_ref or row["part"] not in PARTS:
            raise DataError(f"split {path} does not match manifest at {row['image']}")
        parts.append(row["part"])
    return SplitSpec(parts, -1)


# ---------------------------------------------------------------------------
# In-memory dataset
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    records: list[SampleRecord]
    images: list[np.ndarray]  # uint8 H x W x 3
    class_names: tuple[str, ...] = HAM_CLASSES

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=int)

    @property
    def methods(self) -> list[str]:
        return [r.diagnosis_method for r in self.records]

    def image(self, i: int) -> np.ndarray:
        return to_float(self.images[i])

    def subset(self, indices: Sequence[int]) -> Dataset:
        return Dataset([self.records[i] for i in indices], [self.images[i] for i in indices], self.class_names)

    @classmethod
    def from_manifest(cls, path: str | Path, class_names: Sequence[str] = HAM_CLASSES) -> Dataset:
        records = load_manifest(path, class_names, verify_images=False)
        return cls(records, [read_image(r.image_ref) for r in records], tuple(class_names))


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


def augment(image: np.ndarray, rng, jitter: tuple[float, float] = (0.85, 1.15)) -> np.ndarray:
    """Random flips on both axes, brightness scaling and saturation blending toward luma."""
    out = image
    if rng.random() < 0.5:
        out = out[:, ::-1]
    if rng.random() < 0.5:
        out = out[::-1, :]
    brightness = rng.uniform(*jitter)
    saturation = rng.uniform(*jitter)
    out = out * np.float32(brightness)
    luma = (out @ LUMA)[..., None]
    out = luma + np.float32(saturation) * (out - luma)
    return np.clip(out, 0.0, 1.0).astype(image.dtype, copy=False)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Images where one grid cell carries the class signal and the others carry distractors.

    Every cell holds a disk filled with an oriented grating; the orientation
    encodes a class. The signal cell's grating shows the true class; the other
    cells show uniformly random classes. All blobs of an image share a random
    base amplitude and the signal blob is ``signal_gain`` times brighter, so
    which blob carries the label can only be told by comparing patches.
    """

    n_per_class: tuple[int, ...] = (10,) * 7
    image_size: int = 192
    crop_size: int = 64
    n_crops: int = 9
    signal_patch_policy: str = "random"
    blob_radius: int | None = None  # default: 3/8 of the crop size
    frequency: float = 0.18
    noise_std: float = 0.06
    base_amplitude: tuple[float, float] = (0.08, 0.3)
    signal_gain: float = 1.6
    distractor_prob: float = 1.0
    diagnosis_probs: dict[str, float] = field(
        default_factory=lambda: {
            "expert_consensus": 0.4,
            "serial_imaging": 0.2,
            "confocal_microscopy": 0.1,
            "histopathology": 0.3,
        }
    )
    seed: int = 0

    def __post_init__(self):
        if self.blob_radius is None:
            self.blob_radius = max(1, 3 * self.crop_size // 8)

    @property
    def n_classes(self) -> int:
        return len(self.n_per_class)

    def grid(self) -> CropGrid:
        return make_grid((self.image_size, self.image_size), self.crop_size, self.n_crops)

    def orientation(self, cls: int) -> float:
        return np.pi * cls / self.n_classes


@dataclass(frozen=True)
class SyntheticInfo:
    signal_cell: int
    cell_classes: tuple[int, ...]  # -1 for an empty cell
    amplitude: float


def _grating_blob(size: int, radius: int, theta: float, freq: float, phase: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) - (size - 1) / 2
    wave = np.cos(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    mask = np.clip(radius + 0.5 - np.hypot(xx, yy), 0.0, 1.0)
    return wave * mask


def gen_synthetic(spec: SyntheticSpec) -> tuple[list[SampleRecord], list[np.ndarray], list[SyntheticInfo]]:
    """Generate records, uint8 images and per-image generator metadata."""
    grid = spec.grid()
    cw, ch = grid.crop_size
    blob = 2 * spec.blob_radius + 1
    if blob > min(cw, ch):
        raise DataError(f"blob diameter {blob} does not fit in a {cw}x{ch} cell")
    if spec.signal_patch_policy not in ("random", "center"):
        raise DataError(f"unknown signal_patch_policy {spec.signal_patch_policy!r}")
    if spec.signal_patch_policy == "center" and spec.n_crops not in (5, 9):
        raise DataError("center policy needs a grid with a center cell (n_crops 5 or 9)")
    methods = list(spec.diagnosis_probs)
    probs = np.array([spec.diagnosis_probs[m] for m in methods], dtype=np.float64)
    probs /= probs.sum()

    rng = np.random.default_rng(spec.seed)
    labels = np.concatenate([np.full(n, c, dtype=int) for c, n in enumerate(spec.n_per_class)])
    records, images, infos = [], [], []
    size = spec.image_size
    for i, label in enumerate(labels):
        background = rng.uniform(0.4, 0.6, size=3)
        img = background + rng.normal(0.0, spec.noise_std, size=(size, size, 3))
        amp = rng.uniform(*spec.base_amplitude)
        signal = grid.n_crops // 2 if spec.signal_patch_policy == "center" else int(rng.integers(grid.n_crops))
        cell_classes = []
        for cell, (x0, y0) in enumerate(grid.offsets):
            if cell == signal:
                cls, a = int(label), amp * spec.signal_gain
            elif rng.random() < spec.distractor_prob:
                cls, a = int(rng.integers(spec.n_classes)), amp
            else:
                cell_classes.append(-1)
                continue
            bx = x0 + int(rng.integers(0, cw - blob + 1))
            by = y0 + int(rng.integers(0, ch - blob + 1))
            pattern = _grating_blob(blob, spec.blob_radius, spec.orientation(cls), spec.frequency, rng.uniform(0, 2 * np.pi))
            img[by : by + blob, bx : bx + blob] += a * pattern[..., None]
            cell_classes.append(cls)
        method = methods[int(rng.choice(len(methods), p=probs))]
        records.append(SampleRecord(f"synth-{i:05d}", int(label), method))
        images.append(to_uint8(img))
        infos.append(SyntheticInfo(signal, tuple(cell_classes), float(amp)))
    return records, images, infos


def oracle_label(image: np.ndarray, grid: CropGrid, cell: int, spec: SyntheticSpec) -> int:
    """Recover a cell's class by matched filtering against each class's grating orientation."""
    x0, y0, x1, y1 = grid.rectangles()[cell]
    patch = np.asarray(image, dtype=np.float64)[y0:y1, x0:x1].mean(axis=2)
    patch = patch - patch.mean()
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    energy = []
    for c in range(spec.n_classes):
        th = spec.orientation(c)
        carrier = np.exp(-2j * np.pi * spec.frequency * (xx * np.cos(th) + yy * np.sin(th)))
        energy.append(abs((patch * carrier).sum()))
    return int(np.argmax(energy))


def write_synthetic(
    out_dir: str | Path,
    records: Sequence[SampleRecord],
    images: Sequence[np.ndarray],
    infos: Sequence[SyntheticInfo],
    class_names: Sequence[str],
    fmt: str = "png",
) -> list[SampleRecord]:
    """Write images, ``manifest.csv`` and ``signal.csv``; returns records pointing at the files."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    on_disk = []
    for r, im in zip(records, images):
        path = out_dir / "images" / f"{r.image_ref}.{fmt}"
        write_image(path, im)
        on_disk.append(SampleRecord(str(path), r.label, r.diagnosis_method))
    write_manifest(out_dir / "manifest.csv", on_disk, class_names, root=out_dir)
    with open(out_dir / "signal.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image", "signal_cell", "amplitude", "cell_classes"])
        for r, info in zip(on_disk, infos):
            w.writerow(
                [Path(r.image_ref).relative_to(out_dir).as_posix(), info.signal_cell, f"{info.amplitude:.6f}",
                 " ".join(map(str, info.cell_classes))]
            )
    return on_disk
