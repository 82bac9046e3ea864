"""Image ingestion: CIFAR binary batches, image folders, procedural fixtures
and deterministic batching. All pixels are floats in [0, 1]."""
from __future__ import annotations

import enum
import hashlib
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
import torch

log = logging.getLogger(__name__)

CIFAR_SIDE = 32
CIFAR_PIXELS = 3 * CIFAR_SIDE * CIFAR_SIDE  # 3072 bytes: R plane, G plane, B plane


class FormatError(ValueError):
    pass


@dataclass
class ImageDataset:
    images: torch.Tensor  # [N, 3, H, W] float in [0, 1]
    source_ids: list = field(default_factory=list)

    def __post_init__(self):
        if not self.source_ids:
            self.source_ids = [f"img{i}" for i in range(len(self.images))]
        if len(self.source_ids) != len(self.images):
            raise ValueError("one source id per image required")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, idx) -> "ImageDataset":
        idx = list(idx)
        return ImageDataset(self.images[idx], [self.source_ids[i] for i in idx])


@dataclass
class ImageBatch:
    images: torch.Tensor
    source_ids: list


def load_cifar_format(path: str | os.PathLike, label_bytes: int = 1) -> ImageDataset:
    """Read a CIFAR-10/100 style binary batch.

    Each record is ``label_bytes`` label bytes followed by 3072 pixel bytes
    (row-major 32x32 planes in R, G, B order). CIFAR-10 uses one label byte,
    CIFAR-100 two; pass 0 for bare pixel records.
    """
    path = Path(path)
    raw = path.read_bytes()
    rec = label_bytes + CIFAR_PIXELS
    if len(raw) == 0:
        raise FormatError(f"{path}: empty file")
    if len(raw) % rec:
        offset = (len(raw) // rec) * rec
        raise FormatError(f"{path}: truncated record at byte offset {offset} "
                          f"({len(raw) - offset} of {rec} bytes present)")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)[:, label_bytes:]
    images = torch.from_numpy(arr.reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).astype(np.float32) / 255.0)
    log.info("loaded %d images from %s (sha256 %s)", len(images), path,
             hashlib.sha256(raw).hexdigest()[:16])
    return ImageDataset(images, [f"{path.name}#{i}" for i in range(len(images))])


def save_cifar_format(images: torch.Tensor, path: str | os.PathLike,
                      labels: Optional[Sequence[int]] = None, label_bytes: int = 1) -> None:
    """Write ``[N, 3, 32, 32]`` images in [0, 1] as a CIFAR binary batch."""
    if tuple(images.shape[1:]) != (3, CIFAR_SIDE, CIFAR_SIDE):
        raise ValueError(f"CIFAR records hold 3x32x32 images, got {tuple(images.shape[1:])}")
    pix = (images.detach().double().clamp(0, 1) * 255).round().to(torch.uint8).numpy()
    n = pix.shape[0]
    lab = np.zeros((n, label_bytes), dtype=np.uint8)
    if labels is not None and label_bytes:
        lab[:, -1] = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(np.concatenate([lab, pix.reshape(n, -1)], axis=1).tobytes())


def crop_random(image: torch.Tensor, size: int = 256,
                generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Axis-aligned ``size`` x ``size`` crop at a uniformly random offset."""
    H, W = image.shape[-2:]
    for axis, n in (("height", H), ("width", W)):
        if n < size:
            raise ValueError(f"image {axis} {n} is smaller than crop size {size}")
    top = int(torch.randint(H - size + 1, (), generator=generator))
    left = int(torch.randint(W - size + 1, (), generator=generator))
    return image[..., top:top + size, left:left + size]


def center_crop(image: torch.Tensor, size: int) -> torch.Tensor:
    H, W = image.shape[-2:]
    if H < size or W < size:
        raise ValueError(f"image {H}x{W} smaller than crop size {size}")
    top, left = (H - size) // 2, (W - size) // 2
    return image[..., top:top + size, left:left + size]


def _pil_decode(path: Path) -> torch.Tensor:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


IMAGE_SUFFIXES = (".png", ".ppm", ".jpg", ".jpeg", ".bmp")


def load_folder(path: str | os.PathLike, size: int = 256, mode: str = "center",
                generator: Optional[torch.Generator] = None,
                decoder: Optional[Callable[[Path], torch.Tensor]] = None) -> ImageDataset:
    """Load every image in a directory and crop it to ``size``.

    ``mode`` is ``"random"`` (training crops) or ``"center"`` (evaluation).
    ``decoder`` maps a file path to a ``[3, H, W]`` float tensor; Pillow is
    used when omitted.
    """
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"image folder not found: {root}")
    decode = decoder or _pil_decode
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ValueError(f"no images in {root}")
    crops = []
    for f in files:
        img = decode(f)
        crops.append(crop_random(img, size, generator) if mode == "random"
                     else center_crop(img, size))
    return ImageDataset(torch.stack(crops).clamp(0, 1), [f.name for f in files])


class SynthKind(str, enum.Enum):
    GRADIENT = "gradient"
    CHECKER = "checker"
    NOISE = "noise"
    SHAPES = "shapes"


def synth_images(n: int, H: int = 32, W: int = 32, kind: SynthKind | str = SynthKind.GRADIENT,
                 seed: int = 0, cell: int = 8) -> ImageDataset:
    """Deterministic procedural images.

    GRADIENT: pixel (i, j) = j / (W - 1) on all channels. CHECKER: 0/1 squares
    of side ``cell``. NOISE: i.i.d. uniform pixels. SHAPES: random coloured
    rectangles and discs over a colour ramp, a cheap stand-in for natural
    images in training runs.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    kind = SynthKind(kind)
    gen = torch.Generator().manual_seed(seed)
    if kind is SynthKind.GRADIENT:
        ramp = torch.arange(W, dtype=torch.float32) / max(W - 1, 1)
        imgs = ramp.expand(n, 3, H, W).clone()
    elif kind is SynthKind.CHECKER:
        ii = torch.arange(H)[:, None] // cell
        jj = torch.arange(W)[None, :] // cell
        board = ((ii + jj) % 2).float()
        imgs = board.expand(n, 3, H, W).clone()
    elif kind is SynthKind.NOISE:
        imgs = torch.rand(n, 3, H, W, generator=gen)
    else:
        imgs = torch.stack([_shapes_image(H, W, gen) for _ in range(n)])
    return ImageDataset(imgs, [f"{kind.value}{seed}-{i}" for i in range(n)])


def _shapes_image(H: int, W: int, gen: torch.Generator) -> torch.Tensor:
    yy = torch.linspace(0, 1, H)[:, None].expand(H, W)
    xx = torch.linspace(0, 1, W)[None, :].expand(H, W)
    c0, c1 = torch.rand(3, 1, 1, generator=gen), torch.rand(3, 1, 1, generator=gen)
    t = (xx + yy) / 2 if torch.rand((), generator=gen) < 0.5 else xx
    img = c0 + (c1 - c0) * t
    for _ in range(int(torch.randint(2, 5, (), generator=gen))):
        color = torch.rand(3, 1, 1, generator=gen)
        cy, cx = torch.rand(2, generator=gen).tolist()
        r = 0.1 + 0.25 * torch.rand((), generator=gen).item()
        if torch.rand((), generator=gen) < 0.5:
            mask = ((yy - cy) ** 2 + (xx - cx) ** 2) < r * r
        else:
            mask = ((yy - cy).abs() < r) & ((xx - cx).abs() < r * 0.7)
        img = torch.where(mask, color.expand(3, H, W), img)
    return img.clamp(0, 1)


def batches(dataset: ImageDataset, batch_size: int, shuffle: bool = True, seed: int = 0,
            train: bool = True, epoch: int = 0) -> Iterator[ImageBatch]:
    """One epoch of batches. Train mode drops the trailing partial batch."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot batch an empty dataset")
    order = epoch_order(n, seed, epoch) if shuffle else list(range(n))
    stop = (n // batch_size) * batch_size if train else n
    for start in range(0, stop, batch_size):
        idx = order[start:start + batch_size]
        yield ImageBatch(dataset.images[idx], [dataset.source_ids[i] for i in idx])


def epoch_order(n: int, seed: int, epoch: int) -> list[int]:
    gen = torch.Generator().manual_seed(seed * 1_000_003 + epoch)
    return torch.randperm(n, generator=gen).tolist()


def load_dataset(ref: str, image_size: int = 32, label_bytes: int = 1, mode: str = "center",
                 seed: int = 0) -> ImageDataset:
    """Resolve a dataset reference.

    ``synthetic:<kind>:<n>[:<seed>]`` builds procedural images; a directory
    is read with :func:`load_folder`; any other path is a CIFAR binary batch.
    """
    if ref.startswith("synthetic:"):
        parts = ref.split(":")[1:]
        if len(parts) not in (2, 3):
            raise ValueError(f"bad synthetic dataset reference {ref!r}")
        kind, n = parts[0], int(parts[1])
        s = int(parts[2]) if len(parts) == 3 else 0
        return synth_images(n, image_size, image_size, kind, seed=s)
    path = Path(ref)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    if path.is_dir():
        gen = torch.Generator().manual_seed(seed)
        return load_folder(path, image_size, mode=mode, generator=gen)
    ds = load_cifar_format(path, label_bytes)
    if image_size != CIFAR_SIDE:
        raise ValueError(f"CIFAR batches hold 32x32 images; model expects {image_size}")
    return ds
