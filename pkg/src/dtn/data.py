"""Dataset acquisition, decoding, caching and batching for SVHN and MNIST.

Splits are stored as uint8 pixel arrays (N, H, W, C) and normalized to
[-1, 1] on access with ``x / 127.5 - 1``. The on-disk cache lives at
``<cache_dir>/<dataset>/<split>/`` and holds ``images.npy``, ``labels.npy``
and a ``manifest.json`` with keys ``url``, ``sha256``, ``count`` and
``decode_version``.
"""

from __future__ import annotations

import enum
import gzip
import hashlib
import json
import logging
import os
import shutil
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from filelock import FileLock

from .exceptions import CorruptionError, DownloadError, UsageError

logger = logging.getLogger(__name__)

DECODE_VERSION = 1
IMAGE_SIZE = 32
NUM_CLASSES = 10
UNLABELED = -1


class Domain(enum.Enum):
    SOURCE = "source"
    TARGET = "target"


class Resource(NamedTuple):
    url: str
    md5: str | None


class SplitSource(NamedTuple):
    resources: tuple[Resource, ...]
    count: int
    domain: Domain


_SVHN = "https://ufldl.stanford.edu/housenumbers/"
_MNIST = "https://ossci-datasets.s3.amazonaws.com/mnist/"

SOURCES: dict[tuple[str, str], SplitSource] = {
    ("svhn", "extra"): SplitSource(
        (Resource(_SVHN + "extra_32x32.mat", "a93ce644f1a588dc4d68dda5feec44a7"),),
        531_131,
        Domain.SOURCE,
    ),
    ("svhn", "train"): SplitSource(
        (Resource(_SVHN + "train_32x32.mat", "e26dedcc434d2e4c54c9b2d4a06d8373"),),
        73_257,
        Domain.SOURCE,
    ),
    ("svhn", "test"): SplitSource(
        (Resource(_SVHN + "test_32x32.mat", "eb5a983be6a315427106f1b164d9cef3"),),
        26_032,
        Domain.SOURCE,
    ),
    ("mnist", "train"): SplitSource(
        (
            Resource(_MNIST + "train-images-idx3-ubyte.gz", "f68b3c2dcbeaaa9fbdd348bbdeb94873"),
            Resource(_MNIST + "train-labels-idx1-ubyte.gz", "d53e105ee54ea40749a09fcbcd1e9432"),
        ),
        60_000,
        Domain.TARGET,
    ),
    ("mnist", "test"): SplitSource(
        (
            Resource(_MNIST + "t10k-images-idx3-ubyte.gz", "9fb629c4189551a2d022fa330f9573f3"),
            Resource(_MNIST + "t10k-labels-idx1-ubyte.gz", "ec29112dd5afa0611ce80d1b7f02629c"),
        ),
        10_000,
        Domain.TARGET,
    ),
}

SVHN_SPLITS = ("extra", "test", "train")
MNIST_SPLITS = ("train", "test")


def normalize(pixels: np.ndarray) -> np.ndarray:
    """Map uint8 pixels to float32 in [-1, 1]."""
    return pixels.astype(np.float32) / np.float32(127.5) - np.float32(1.0)


@dataclass(frozen=True)
class ImageSample:
    pixels: np.ndarray
    label: int | None
    domain: Domain

    def __post_init__(self):
        if self.pixels.ndim != 3:
            raise UsageError(f"pixels must be (H, W, C), got shape {self.pixels.shape}")
        if self.pixels.size and (self.pixels.min() < -1 or self.pixels.max() > 1):
            raise UsageError("pixel values must lie in [-1, 1]")
        if self.label is not None and not 0 <= self.label < NUM_CLASSES:
            raise UsageError(f"label {self.label} outside 0..9")


class DatasetSplit:
    """An immutable, ordered collection of images sharing one shape.

    ``data`` is either raw uint8 (0..255) or float32 already in [-1, 1].
    ``labels`` uses -1 for unlabeled samples; pass ``None`` for a fully
    unlabeled split.
    """

    def __init__(self, data, labels=None, *, name="", domain=Domain.SOURCE, source_checksum=""):
        data = np.asarray(data)
        if data.ndim != 4:
            raise UsageError(f"split data must be (N, H, W, C), got shape {data.shape}")
        if data.dtype != np.uint8:
            data = np.asarray(data, dtype=np.float32)
        if labels is None:
            labels = np.full(len(data), UNLABELED, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if len(labels) != len(data):
            raise UsageError(f"{len(labels)} labels for {len(data)} images")
        if ((labels < UNLABELED) | (labels >= NUM_CLASSES)).any():
            raise UsageError("labels must be in 0..9 (or -1 for unlabeled)")
        if data.flags.writeable:
            data = data.view()
            data.flags.writeable = False
        labels.flags.writeable = False
        self._data = data
        self._labels = labels
        self.name = name
        self.domain = Domain(domain)
        self.source_checksum = source_checksum

    def __len__(self):
        return len(self._data)

    def __repr__(self):
        return f"DatasetSplit(name={self.name!r}, n={len(self)}, shape={self.image_shape})"

    def __getitem__(self, i) -> ImageSample:
        label = int(self._labels[i])
        return ImageSample(
            self.images([i])[0], None if label == UNLABELED else label, self.domain
        )

    @property
    def raw(self) -> np.ndarray:
        return self._data

    @property
    def labels(self) -> np.ndarray:
        return self._labels

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self._data.shape[1:])

    @property
    def channels(self) -> int:
        return self._data.shape[3]

    @property
    def is_labeled(self) -> bool:
        return bool(len(self) and (self._labels != UNLABELED).all())

    @property
    def samples(self) -> list[ImageSample]:
        return [self[i] for i in range(len(self))]

    def images(self, indices=None) -> np.ndarray:
        """Pixels as float32 in [-1, 1], optionally for a subset of indices."""
        data = self._data if indices is None else self._data[np.asarray(indices)]
        if data.dtype == np.uint8:
            return normalize(data)
        return np.array(data, dtype=np.float32)

    def subset(self, indices, name=None) -> "DatasetSplit":
        indices = np.asarray(indices, dtype=np.int64)
        return DatasetSplit(
            np.ascontiguousarray(self._data[indices]),
            self._labels[indices].copy(),
            name=self.name if name is None else name,
            domain=self.domain,
            source_checksum=self.source_checksum,
        )

    def with_domain(self, domain) -> "DatasetSplit":
        return DatasetSplit(
            self._data, self._labels, name=self.name, domain=domain,
            source_checksum=self.source_checksum,
        )

    def unlabeled(self) -> "DatasetSplit":
        return DatasetSplit(
            self._data, None, name=self.name, domain=self.domain,
            source_checksum=self.source_checksum,
        )


@dataclass(frozen=True)
class ClassOmissionFilter:
    omit_from_s: int | None = None
    omit_from_t: int | None = None
    omit_from_f_training: int | None = None

    def __post_init__(self):
        for digit in (self.omit_from_s, self.omit_from_t, self.omit_from_f_training):
            if digit is not None and not 0 <= digit < NUM_CLASSES:
                raise UsageError(f"omitted digit {digit} outside 0..9")


def replicate_channels(x):
    """Repeat a single grayscale channel three times.

    Accepts an :class:`ImageSample`, a :class:`DatasetSplit`, or an array
    whose last axis is the channel axis.
    """
    if isinstance(x, ImageSample):
        if x.pixels.shape[-1] != 1:
            raise UsageError(f"expected 1 channel, got {x.pixels.shape[-1]}")
        return ImageSample(np.repeat(x.pixels, 3, axis=-1), x.label, x.domain)
    if isinstance(x, DatasetSplit):
        if x.channels != 1:
            raise UsageError(f"expected 1 channel, got {x.channels}")
        return DatasetSplit(
            np.repeat(x.raw, 3, axis=-1), x.labels, name=x.name, domain=x.domain,
            source_checksum=x.source_checksum,
        )
    x = np.asarray(x)
    if x.shape[-1] != 1:
        raise UsageError(f"expected 1 channel, got {x.shape[-1]}")
    return np.repeat(x, 3, axis=-1)


def apply_omission(split: DatasetSplit, digit: int | None) -> DatasetSplit:
    """Drop every sample labeled ``digit``; relative order is preserved."""
    if digit is None:
        return split
    if not 0 <= digit < NUM_CLASSES:
        raise UsageError(f"digit {digit} outside 0..9")
    if not split.is_labeled:
        raise UsageError(f"cannot omit a class from unlabeled split {split.name!r}")
    keep = np.flatnonzero(split.labels != digit)
    return split.subset(keep, name=f"{split.name}-no{digit}")


def subsample(split: DatasetSplit, n: int | None, seed: int) -> DatasetSplit:
    """First ``n`` samples after a seeded shuffle; ``None`` returns the split."""
    if n is None or n >= len(split):
        return split
    if n < 1:
        raise UsageError("subsample size must be >= 1")
    order = np.random.default_rng(seed).permutation(len(split))[:n]
    return split.subset(np.sort(order), name=f"{split.name}[{n}]")


class Batch(NamedTuple):
    indices: np.ndarray
    images: np.ndarray
    labels: np.ndarray


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def make_batches(split: DatasetSplit, batch_size: int, seed: int, *, epochs=1,
                 drop_last=False) -> Iterator[Batch]:
    """Yield seeded minibatches; ``epochs=None`` streams forever.

    Each epoch visits a fresh permutation derived from ``(seed, epoch)``.
    """
    if batch_size < 1:
        raise UsageError("batch_size must be >= 1")
    n = len(split)
    if n == 0:
        raise UsageError(f"cannot batch empty split {split.name!r}")
    if drop_last and n < batch_size:
        raise UsageError(f"split of {n} samples is smaller than batch_size {batch_size}")
    epoch = 0
    while epochs is None or epoch < epochs:
        order = epoch_permutation(n, seed, epoch)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            if drop_last and len(idx) < batch_size:
                break
            yield Batch(idx, split.images(idx), split.labels[idx])
        epoch += 1


# -- decoding ---------------------------------------------------------------

_IDX_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def decode_idx(path) -> np.ndarray:
    """Decode a (possibly gzip-compressed) IDX file."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise CorruptionError(f"{path}: bad IDX magic")
    dtype_code, ndim = raw[2], raw[3]
    if dtype_code not in _IDX_DTYPES:
        raise CorruptionError(f"{path}: unknown IDX dtype 0x{dtype_code:02x}")
    dims = np.frombuffer(raw, dtype=">u4", count=ndim, offset=4).astype(np.int64)
    dtype = np.dtype(_IDX_DTYPES[dtype_code])
    offset = 4 + 4 * ndim
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - offset != expected:
        raise CorruptionError(
            f"{path}: header declares {expected} payload bytes, found {len(raw) - offset}"
        )
    return np.frombuffer(raw, dtype=dtype, offset=offset).reshape(dims).astype(dtype.newbyteorder("="))


def encode_idx(array: np.ndarray, path) -> None:
    """Write ``array`` as a gzip IDX file (used to build fixtures)."""
    codes = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_DTYPES.items()}
    array = np.asarray(array)
    code = codes[array.dtype.newbyteorder("=")]
    header = bytes([0, 0, code, array.ndim]) + np.asarray(array.shape, dtype=">u4").tobytes()
    with gzip.open(path, "wb") as fh:
        fh.write(header + array.astype(array.dtype.newbyteorder(">")).tobytes())


def resize_bilinear(images: np.ndarray, size: int = IMAGE_SIZE, chunk: int = 4096) -> np.ndarray:
    """Bilinear resize of uint8 (N, H, W) images to (N, size, size, 1) uint8."""
    out = np.empty((len(images), size, size, 1), dtype=np.uint8)
    for start in range(0, len(images), chunk):
        block = torch.from_numpy(np.asarray(images[start:start + chunk], dtype=np.float32))
        block = F.interpolate(block[:, None], size=(size, size), mode="bilinear",
                              align_corners=False)
        block = block.round().clamp(0, 255).to(torch.uint8)
        out[start:start + chunk] = block.permute(0, 2, 3, 1).numpy()
    return out


def decode_mnist(image_path, label_path) -> tuple[np.ndarray, np.ndarray]:
    images = decode_idx(image_path)
    labels = decode_idx(label_path).astype(np.int64)
    if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
        raise CorruptionError(
            f"inconsistent MNIST files: images {images.shape}, labels {labels.shape}"
        )
    return resize_bilinear(images), labels


def decode_svhn(mat_path) -> tuple[np.ndarray, np.ndarray]:
    """Decode an SVHN ``*_32x32.mat`` file; label 10 encodes digit 0."""
    from scipy.io import loadmat

    mat = loadmat(str(mat_path))
    x, y = mat["X"], mat["y"]
    if x.ndim != 4 or x.shape[:3] != (32, 32, 3):
        raise CorruptionError(f"{mat_path}: unexpected X shape {x.shape}")
    labels = y.reshape(-1).astype(np.int64)
    labels[labels == 10] = 0
    images = np.empty((x.shape[3], 32, 32, 3), dtype=np.uint8)
    step = 65536
    for start in range(0, x.shape[3], step):
        images[start:start + step] = np.moveaxis(x[..., start:start + step], 3, 0)
    return images, labels


# -- cache ------------------------------------------------------------------

def default_cache_dir() -> Path:
    env = os.environ.get("DTN_DATA_DIR")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "dtn"


def split_dir(cache_dir, dataset, split) -> Path:
    return Path(cache_dir) / dataset / split


def _sha256_files(*paths) -> str:
    h = hashlib.sha256()
    for path in paths:
        with open(path, "rb") as fh:
            for block in iter(lambda: fh.read(1 << 20), b""):
                h.update(block)
    return h.hexdigest()


def write_cache(cache_dir, dataset, split, images, labels, urls=()) -> Path:
    """Store decoded arrays plus manifest; returns the split directory."""
    target = split_dir(cache_dir, dataset, split)
    target.mkdir(parents=True, exist_ok=True)
    np.save(target / "images.npy", np.ascontiguousarray(images, dtype=np.uint8))
    np.save(target / "labels.npy", np.asarray(labels, dtype=np.int64))
    manifest = {
        "url": list(urls),
        "sha256": _sha256_files(target / "images.npy", target / "labels.npy"),
        "count": int(len(labels)),
        "decode_version": DECODE_VERSION,
    }
    (target / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return target


def load_cached(cache_dir, dataset, split, *, domain=None, verify=True) -> DatasetSplit | None:
    """Load a cached split, or ``None`` when the cache is cold or stale."""
    target = split_dir(cache_dir, dataset, split)
    manifest_path = target / "manifest.json"
    if not manifest_path.exists():
        return None
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("decode_version") != DECODE_VERSION:
        logger.info("cache for %s/%s has stale decode version, refetching", dataset, split)
        return None
    images_path, labels_path = target / "images.npy", target / "labels.npy"
    if verify and _sha256_files(images_path, labels_path) != manifest["sha256"]:
        raise CorruptionError(f"checksum mismatch for cached {dataset}/{split} in {target}")
    images = np.load(images_path, mmap_mode="r")
    labels = np.load(labels_path)
    if len(labels) != manifest["count"] or len(images) != manifest["count"]:
        raise CorruptionError(f"count mismatch for cached {dataset}/{split}")
    if domain is None:
        source = SOURCES.get((dataset, split))
        domain = source.domain if source else Domain.SOURCE
    return DatasetSplit(images, labels, name=f"{dataset}-{split}", domain=domain,
                        source_checksum=manifest["sha256"])


def download(url, dest, *, md5=None, timeout=30.0, retries=3) -> Path:
    """Stream ``url`` to ``dest``, verifying ``md5`` when given."""
    dest = Path(dest)
    dest.parent.mkdir(parents=True, exist_ok=True)
    if dest.exists() and (md5 is None or _md5(dest) == md5):
        return dest
    part = dest.with_name(dest.name + ".part")
    last_error = None
    for attempt in range(retries):
        try:
            with urllib.request.urlopen(url, timeout=timeout) as resp, open(part, "wb") as fh:
                shutil.copyfileobj(resp, fh, 1 << 20)
            break
        except (urllib.error.URLError, OSError, TimeoutError) as exc:
            last_error = exc
            logger.warning("download %s failed (attempt %d/%d): %s", url, attempt + 1, retries, exc)
            if attempt + 1 < retries:
                time.sleep(min(2 ** attempt, 10))
    else:
        part.unlink(missing_ok=True)
        raise DownloadError(url, last_error)
    if md5 is not None and _md5(part) != md5:
        part.unlink(missing_ok=True)
        raise CorruptionError(f"md5 mismatch for {url}")
    part.replace(dest)
    return dest


def _md5(path) -> str:
    h = hashlib.md5()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def fetch(dataset: str, split: str, cache_dir=None, *, timeout=30.0, retries=3,
          keep_raw=False) -> DatasetSplit:
    """Return a decoded split, downloading and caching it on first use."""
    dataset, split = dataset.lower(), split.lower()
    if (dataset, split) not in SOURCES:
        valid = ", ".join(f"{d}/{s}" for d, s in SOURCES)
        raise UsageError(f"unknown split {dataset}/{split}; valid: {valid}")
    source = SOURCES[dataset, split]
    cache_dir = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    target = split_dir(cache_dir, dataset, split)
    target.mkdir(parents=True, exist_ok=True)
    with FileLock(str(target / ".lock")):
        cached = load_cached(cache_dir, dataset, split)
        if cached is not None:
            logger.info("cached %s/%s (%d samples)", dataset, split, len(cached))
            return cached
        raw_dir = target / "raw"
        files = [
            download(r.url, raw_dir / r.url.rsplit("/", 1)[-1], md5=r.md5,
                     timeout=timeout, retries=retries)
            for r in source.resources
        ]
        if dataset == "svhn":
            images, labels = decode_svhn(files[0])
        else:
            images, labels = decode_mnist(files[0], files[1])
        if len(labels) != source.count:
            raise CorruptionError(
                f"{dataset}/{split}: decoded {len(labels)} samples, expected {source.count}"
            )
        write_cache(cache_dir, dataset, split, images, labels,
                    urls=[r.url for r in source.resources])
        if not keep_raw:
            shutil.rmtree(raw_dir, ignore_errors=True)
        del images, labels
        return load_cached(cache_dir, dataset, split, verify=False)


def fetch_svhn(split: str, cache_dir=None, **kwargs) -> DatasetSplit:
    if str(split).lower() not in SVHN_SPLITS:
        raise UsageError(f"unknown SVHN split {split!r}; valid: {', '.join(SVHN_SPLITS)}")
    return fetch("svhn", split, cache_dir, **kwargs)


def fetch_mnist(split: str, cache_dir=None, **kwargs) -> DatasetSplit:
    if str(split).lower() not in MNIST_SPLITS:
        raise UsageError(f"unknown MNIST split {split!r}; valid: {', '.join(MNIST_SPLITS)}")
    return fetch("mnist", split, cache_dir, **kwargs)
