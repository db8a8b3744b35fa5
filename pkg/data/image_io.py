"""PPM / PGM / PFM readers and writers (see FILE_FORMATS_GUIDE.md)."""
from pathlib import Path
from typing import Tuple

import numpy as np

from core.errors import ShapeMismatchError


def _read_header_tokens(f, count: int) -> Tuple[str, ...]:
    tokens = []
    while len(tokens) < count:
        line = f.readline()
        if not line:
            raise ValueError("truncated image header")
        line = line.split(b"#", 1)[0]
        tokens.extend(t.decode("ascii") for t in line.split())
    return tuple(tokens)


def write_ppm(path: Path, image: np.ndarray):
    """8-bit binary RGB (P6); values in [0, 1] are rounded to 0..255."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeMismatchError(f"PPM needs (H, W, 3), got {image.shape}")
    h, w, _ = image.shape
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path: Path) -> np.ndarray:
    """(H, W, 3) float32 in [0, 1]."""
    with open(path, "rb") as f:
        magic, w, h, maxval = _read_header_tokens(f, 4)
        if magic != "P6":
            raise ValueError(f"{path}: not a binary PPM")
        data = np.frombuffer(f.read(), dtype=np.uint8, count=int(w) * int(h) * 3)
    return data.reshape(int(h), int(w), 3).astype(np.float32) / float(maxval)


def write_pgm(path: Path, image: np.ndarray):
    """8-bit binary grayscale (P5); bool masks map to 0 / 255."""
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[..., 0]
    if image.ndim != 2:
        raise ShapeMismatchError(f"PGM needs (H, W), got {image.shape}")
    if image.dtype == bool:
        data = image.astype(np.uint8) * 255
    else:
        data = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    """(H, W) float32 in [0, 1]."""
    with open(path, "rb") as f:
        magic, w, h, maxval = _read_header_tokens(f, 4)
        if magic != "P5":
            raise ValueError(f"{path}: not a binary PGM")
        data = np.frombuffer(f.read(), dtype=np.uint8, count=int(w) * int(h))
    return data.reshape(int(h), int(w)).astype(np.float32) / float(maxval)


def write_pfm(path: Path, image: np.ndarray):
    """Little-endian float32 PFM; 'Pf' for (H, W), 'PF' for (H, W, 3). Rows stored bottom-up."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[..., 0]
    if image.ndim == 2:
        magic = "Pf"
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = "PF"
    else:
        raise ShapeMismatchError(f"PFM needs (H, W) or (H, W, 3), got {image.shape}")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(f"{magic}\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.flipud(image).astype("<f4").tobytes())


def read_pfm(path: Path) -> np.ndarray:
    """(H, W) or (H, W, 3) float32."""
    with open(path, "rb") as f:
        magic, w, h, scale = _read_header_tokens(f, 4)
        if magic not in ("PF", "Pf"):
            raise ValueError(f"{path}: not a PFM file")
        channels = 3 if magic == "PF" else 1
        dtype = "<f4" if float(scale) < 0 else ">f4"
        data = np.frombuffer(f.read(), dtype=dtype, count=int(w) * int(h) * channels)
    shape = (int(h), int(w), 3) if channels == 3 else (int(h), int(w))
    return np.flipud(data.reshape(shape)).astype(np.float32)
