"""IDX datasets, synthetic Gaussian batches, augmentation and batching."""
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import BadMagicError, CountMismatchError, TruncatedPayloadError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray   # (count, H, W, C) in [0, 1]
    labels: np.ndarray   # (count,) int64

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise CountMismatchError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, count, offset=0):
        if offset + count > len(self):
            raise ValueError(f"subset {offset}+{count} exceeds {len(self)} samples")
        sl = slice(offset, offset + count)
        return Dataset(self.images[sl], self.labels[sl])


def _read_idx(path, magic):
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncatedPayloadError(f"{path}: file shorter than the IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise BadMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise TruncatedPayloadError(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    size = int(np.prod(dims))
    if len(raw) - head < size:
        raise TruncatedPayloadError(f"{path}: payload has {len(raw) - head} bytes, need {size}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=head).reshape(dims)


def load_idx(images_path, labels_path):
    """Parse an IDX image/label pair; pixels are scaled to [0, 1].

    Three-dimensional image files are single-channel; a fourth dimension
    is read as the channel axis.
    """
    imgs = _read_idx(images_path, IMAGES_MAGIC) if _ndim_of(images_path) == 3 \
        else _read_idx(images_path, IMAGES_MAGIC + 1)
    labels = _read_idx(labels_path, LABELS_MAGIC)
    if imgs.shape[0] != labels.shape[0]:
        raise CountMismatchError(
            f"{images_path} holds {imgs.shape[0]} images, {labels_path} holds {labels.shape[0]} labels")
    if imgs.ndim == 3:
        imgs = imgs[..., None]
    return Dataset(imgs.astype(np.float64) / 255.0, labels.astype(np.int64))


def _ndim_of(path):
    with open(path, "rb") as fh:
        head = fh.read(4)
    if len(head) == 4 and head[:3] == b"\x00\x00\x08" and head[3] == 4:
        return 4
    return 3


def write_idx(path, array):
    """Write a uint8 array as IDX (used for fixtures and SVHN conversion)."""
    a = np.asarray(array)
    if a.dtype != np.uint8:
        raise TypeError(f"IDX writer supports uint8 only, got {a.dtype}")
    header = struct.pack(">I", 0x00000800 | a.ndim) + struct.pack(f">{a.ndim}I", *a.shape)
    Path(path).write_bytes(header + a.tobytes(order="C"))


def write_dataset(images_path, labels_path, ds):
    imgs = np.clip(np.rint(ds.images * 255.0), 0, 255).astype(np.uint8)
    if imgs.shape[3] == 1:
        imgs = imgs[..., 0]
    write_idx(images_path, imgs)
    write_idx(labels_path, ds.labels.astype(np.uint8))


def synth_gaussian(n, m, sigma_true, seed):
    """``X = C Z`` with ``C C^T = sigma_true`` and ``Z`` standard normal.

    The factor is taken from an eigendecomposition so that singular PSD
    matrices (including 0) are accepted.
    """
    s = np.asarray(sigma_true, dtype=np.float64)
    if s.shape != (n, n) or not np.allclose(s, s.T):
        raise ValueError("sigma_true must be a symmetric n x n matrix")
    lam, v = np.linalg.eigh(s)
    tol = 1e-12 * max(1.0, float(np.abs(lam).max(initial=0.0)))
    if lam.min(initial=0.0) < -tol:
        raise ValueError(f"sigma_true is not PSD (min eigenvalue {lam.min():.3e})")
    factor = v * np.sqrt(np.clip(lam, 0.0, None))
    z = np.random.default_rng(seed).standard_normal((n, m))
    return factor @ z


def _zoom(img, offset):
    """Pad (offset < 0) or crop (offset > 0) ``|offset|`` pixels per side, then resize back."""
    h = img.shape[0]
    if offset == 0:
        return img
    if offset > 0:
        work = img[offset:h - offset, offset:h - offset]
    else:
        k = -offset
        work = np.pad(img, ((k, k), (k, k), (0, 0)), mode="edge")
    f = h / work.shape[0]
    out = ndimage.zoom(work, (f, f, 1), order=1, mode="nearest", grid_mode=True)
    return out[:h, :h]


def augment(img, db, rng, params=None):
    """Random zoom (and rotation for MNIST) of one ``(H, W, C)`` image.

    ``params`` overrides the random draws with ``(offset, angle)``.
    """
    if img.shape[0] != img.shape[1]:
        raise ValueError("augment expects square images")
    if params is None:
        if db == "mnist":
            params = (int(rng.integers(-4, 5)), float(rng.uniform(-20.0, 20.0)))
        elif db == "svhn":
            params = (int(rng.integers(0, 3)), 0.0)
        else:
            raise ValueError(f"unknown database {db!r}")
    offset, angle = params
    out = _zoom(img, offset)
    if angle != 0.0:
        out = ndimage.rotate(out, angle, axes=(1, 0), reshape=False, order=1, mode="nearest")
    return np.clip(out, 0.0, 1.0)


def batch_iter(ds, batch_size, seed, epoch):
    """Seeded shuffle per epoch; the final partial batch is dropped."""
    if batch_size > len(ds):
        raise ValueError(f"batch size {batch_size} exceeds dataset size {len(ds)}")
    order = np.random.default_rng([seed, epoch]).permutation(len(ds))
    for k in range(len(ds) // batch_size):
        idx = order[k * batch_size:(k + 1) * batch_size]
        yield ds.images[idx], ds.labels[idx]
