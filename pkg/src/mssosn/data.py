"""Image ingestion, scale variants, episode sampling and the synthetic texture set."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError, ProtocolError
from .rng import SplitMix64


@dataclass
class Dataset:
    """Class name -> list of (C, H, W) float images in [0, 1]."""

    classes: dict[str, list[np.ndarray]]
    split: str = "all"

    @property
    def names(self) -> list[str]:
        return sorted(self.classes)

    def __len__(self) -> int:
        return len(self.classes)


@dataclass
class Episode:
    classes: list[str]
    support: list[np.ndarray]  # per scale, (L*Z, C, H_s, W_s), class-major
    query: list[np.ndarray]  # per scale, (L*Q, C, H_s, W_s), class-major
    support_labels: np.ndarray
    query_labels: np.ndarray
    support_ids: list[tuple[str, int]] = field(default_factory=list)
    query_ids: list[tuple[str, int]] = field(default_factory=list)

    @property
    def way(self) -> int:
        return len(self.classes)

    @property
    def scales(self) -> int:
        return len(self.support)


# PPM ----------------------------------------------------------------------


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PPM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{path}: malformed PPM header") from None
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported (need 255)")
    if width <= 0 or height <= 0:
        raise FormatError(f"{path}: bad extents {width}x{height}")
    pos += 1  # single whitespace byte after maxval
    body = raw[pos:pos + 3 * width * height]
    if len(body) != 3 * width * height:
        raise FormatError(f"{path}: expected {3 * width * height} pixel bytes, found {len(body)}")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3)
    return pixels.transpose(2, 0, 1).astype(np.float64) / 255.0


def write_ppm(path, image: np.ndarray) -> None:
    """Write a (3, H, W) image with values in [0, 1]."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ContractError(f"write_ppm expects (3, H, W), got {image.shape}")
    _, h, w = image.shape
    q = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(q.transpose(1, 2, 0).tobytes())


def load_dataset(root, split: str = "all") -> Dataset:
    root = Path(root)
    if not root.is_dir():
        raise FormatError(f"{root}: dataset root is not a directory")
    classes = {}
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(sub.glob("*.ppm"))
        if files:
            classes[sub.name] = [read_ppm(f) for f in files]
    if not classes:
        raise FormatError(f"{root}: no class subdirectories with .ppm images")
    channels = {img.shape[0] for imgs in classes.values() for img in imgs}
    if len(channels) != 1:
        raise FormatError(f"{root}: mixed channel counts {sorted(channels)}")
    return Dataset(classes, split)


def split_dataset(ds: Dataset, mode: str = "classes") -> dict[str, Dataset]:
    """Deterministic train/val/test partition.

    ``classes``: sorted classes alternate train/test (no val).
    ``images``: every class keeps its first 60% of images for train, the
    next 15% for val and the rest for test.
    """
    if mode == "classes":
        names = ds.names
        return {
            "train": Dataset({n: ds.classes[n] for n in names[0::2]}, "train"),
            "val": Dataset({}, "val"),
            "test": Dataset({n: ds.classes[n] for n in names[1::2]}, "test"),
        }
    if mode == "images":
        parts: dict[str, dict] = {"train": {}, "val": {}, "test": {}}
        for n in ds.names:
            imgs = ds.classes[n]
            a = int(round(0.6 * len(imgs)))
            b = a + int(round(0.15 * len(imgs)))
            parts["train"][n], parts["val"][n], parts["test"][n] = imgs[:a], imgs[a:b], imgs[b:]
        return {k: Dataset(v, k) for k, v in parts.items()}
    raise ContractError(f"unknown split mode {mode!r}")


# scales -------------------------------------------------------------------


def rescale(image: np.ndarray, target) -> np.ndarray:
    """Area-average a (C, H, W) image down a chain of 2x halvings."""
    th, tw = (target, target) if isinstance(target, int) else target
    _, h, w = image.shape
    out = image
    while (h, w) != (th, tw):
        if h < th or w < tw or h % 2 or w % 2 or (h // 2 < th) != (w // 2 < tw):
            raise ContractError(f"rescale: {image.shape[1:]} -> {(th, tw)} is not a halving chain")
        h, w = h // 2, w // 2
        out = out.reshape(out.shape[0], h, 2, w, 2).mean(axis=(2, 4))
    return out.copy() if out is image else out


def check_scales(scales) -> list[int]:
    scales = [int(s) for s in scales]
    if not scales:
        raise ContractError("scales must be nonempty")
    for a, b in zip(scales, scales[1:]):
        if a != 2 * b:
            raise ContractError(f"scale chain broken: {a} -> {b} (each scale must halve)")
    if scales[-1] < 16 or scales[-1] % 4:
        raise ContractError(f"smallest scale {scales[-1]} must be >= 16 and divisible by 4")
    return scales


def pyramid(image: np.ndarray, scales) -> list[np.ndarray]:
    return [rescale(image, s) for s in scales]


def sample_episode(ds: Dataset, rng: SplitMix64, way: int, shot: int, query: int, scales) -> Episode:
    scales = check_scales(scales)
    names = ds.names
    if len(names) < way:
        raise ProtocolError(f"{ds.split}: {len(names)} classes available, {way} requested")
    for n in names:
        if len(ds.classes[n]) < shot + query:
            raise ProtocolError(
                f"{ds.split}: class {n!r} has {len(ds.classes[n])} images, needs {shot + query}")
    chosen = [names[i] for i in rng.sample(len(names), way)]
    sup = [[] for _ in scales]
    qry = [[] for _ in scales]
    sup_ids, qry_ids = [], []
    for name in chosen:
        imgs = ds.classes[name]
        picks = rng.sample(len(imgs), shot + query)
        for rank, i in enumerate(picks):
            variants = pyramid(imgs[i], scales)
            dest, ids = (sup, sup_ids) if rank < shot else (qry, qry_ids)
            for s, v in enumerate(variants):
                dest[s].append(v)
            ids.append((name, i))
    return Episode(
        classes=chosen,
        support=[np.stack(x) for x in sup],
        query=[np.stack(x) for x in qry],
        support_labels=np.repeat(np.arange(way), shot),
        query_labels=np.repeat(np.arange(way), query),
        support_ids=sup_ids,
        query_ids=qry_ids,
    )


# synthetic textures -------------------------------------------------------


def class_frequency(k: int, n_classes: int, low: float = 2.0, high: float = 16.0) -> float:
    """Cycles per image of class ``k``; geometric spacing from ``low`` to ``high``."""
    if n_classes == 1:
        return low
    return low * (high / low) ** (k / (n_classes - 1))


def render_texture(freq: float, res: int, rng: SplitMix64, noise: float = 0.1) -> np.ndarray:
    theta = 2 * math.pi * rng.random()
    phase = 2 * math.pi * rng.random()
    coords = (np.arange(res) + 0.5) / res
    y, x = np.meshgrid(coords, coords, indexing="ij")
    wave = 0.5 + 0.4 * np.sin(2 * math.pi * freq * (x * math.cos(theta) + y * math.sin(theta)) + phase)
    img = wave[None] + rng.uniform((3, res, res), -noise, noise)
    return np.clip(img, 0.0, 1.0)


def synth_generate(out, classes: int = 10, per_class: int = 40, res: int = 64, seed: int = 7,
                   scale_confounded: bool = False) -> Path:
    """Write ``classes`` x ``per_class`` sinusoid-texture PPMs under ``out``.

    With ``scale_confounded`` each image is rendered at a random member of
    the chain ``res, res/2, res/4`` and nearest-upsampled back to ``res``.
    """
    if res < 16 or res % 4:
        raise ContractError(f"base resolution {res} must be >= 16 and divisible by 4")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    master = SplitMix64(seed)
    chain = [res, res // 2, res // 4]
    for k in range(classes):
        cdir = out / f"class_{k:02d}"
        cdir.mkdir(exist_ok=True)
        freq = class_frequency(k, classes)
        stream = master.split()
        for i in range(per_class):
            r = chain[stream.below(len(chain))] if scale_confounded else res
            img = render_texture(freq, r, stream)
            if r != res:
                f = res // r
                img = np.repeat(np.repeat(img, f, axis=1), f, axis=2)
            write_ppm(cdir / f"{i:03d}.ppm", img)
    return out
