"""Quantitative protocols: transferred-sample accuracy, nearest-neighbor
domain adaptation, retrieval ranks, representative selection and basis
visualization of a generator head."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import NUM_CLASSES, DatasetSplit
from .exceptions import EmptyClassError, UsageError
from .networks import replicate
from .validation import to_tensor


@dataclass
class MetricsReport:
    name: str
    accuracy: float
    per_class_accuracy: dict[int, float]
    sample_count: int
    run_config_hash: str = ""
    per_class_count: dict[int, int] = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["per_class_accuracy"] = {str(k): v for k, v in self.per_class_accuracy.items()}
        d["per_class_count"] = {str(k): v for k, v in self.per_class_count.items()}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["per_class_accuracy"] = {int(k): v for k, v in d["per_class_accuracy"].items()}
        d["per_class_count"] = {int(k): v for k, v in d.get("per_class_count", {}).items()}
        return cls(**d)

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return Path(path)

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class RetrievalResult:
    """Rank statistics. Ties count in the probe's favor: only gallery items
    strictly closer than the true match push its rank down."""

    ranks: list[int]
    median_rank: float
    mean_rank: float
    rank_1: float
    rank_5: float

    @classmethod
    def from_ranks(cls, ranks):
        ranks = [int(r) for r in ranks]
        arr = np.asarray(ranks)
        return cls(ranks, float(np.median(arr)), float(arr.mean()),
                   float((arr <= 1).mean()), float((arr <= 5).mean()))

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")
        return Path(path)


def metrics_from_predictions(name, predictions, labels, run_config_hash=""):
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise UsageError("no samples to score")
    correct = predictions == labels
    per_class, counts = {}, {}
    for digit in range(NUM_CLASSES):
        mask = labels == digit
        if mask.any():
            counts[digit] = int(mask.sum())
            per_class[digit] = float(correct[mask].mean())
    return MetricsReport(name, int(correct.sum()) / len(labels), per_class, len(labels),
                         run_config_hash, counts)


@torch.no_grad()
def _batched(fn, X, batch_size):
    out = []
    for start in range(0, len(X), batch_size):
        out.append(fn(X[start:start + batch_size]))
    return torch.cat(out)


@torch.no_grad()
def classify(clf, images, batch_size=512):
    """Predicted digits for NCHW images; grayscale is replicated first."""
    clf.eval()
    logits = _batched(lambda x: clf(replicate(x)), images, batch_size)
    return logits.argmax(dim=1).numpy()


@torch.no_grad()
def apply_transfer(G, images, batch_size=512):
    return _batched(G, images, batch_size)


def transferred_accuracy(G, clf, labeled_source_test: DatasetSplit, *, name="transferred",
                         batch_size=512, run_config_hash="") -> MetricsReport:
    """Classify G(x) for each labeled source sample; score against source labels.

    ``G`` maps NCHW tensors to NCHW tensors (pass ``lambda x: x`` to score the
    classifier on raw inputs).
    """
    if not labeled_source_test.is_labeled:
        raise UsageError("transferred_accuracy needs a labeled split")
    n = len(labeled_source_test)
    preds = []
    for start in range(0, n, batch_size):
        x = to_tensor(labeled_source_test.images(np.arange(start, min(start + batch_size, n))))
        preds.append(classify(clf, apply_transfer(G, x, batch_size), batch_size))
    return metrics_from_predictions(name, np.concatenate(preds), labeled_source_test.labels,
                                    run_config_hash)


def per_class_accuracy(predictions, labels, digit) -> float:
    labels = np.asarray(labels)
    mask = labels == digit
    if not mask.any():
        raise EmptyClassError(f"no samples labeled {digit}")
    return float((np.asarray(predictions)[mask] == digit).mean())


def _squared_distances(queries, gallery):
    q = queries.reshape(len(queries), -1).astype(np.float64)
    g = gallery.reshape(len(gallery), -1).astype(np.float64)
    d = (q ** 2).sum(1)[:, None] - 2.0 * q @ g.T + (g ** 2).sum(1)[None, :]
    return np.maximum(d, 0.0)


def nearest_neighbor_labels(queries, gallery, gallery_labels, chunk=1024):
    """Label of the Euclidean-nearest gallery item; ties go to the lowest index."""
    if len(gallery) == 0:
        raise UsageError("empty gallery")
    gallery_labels = np.asarray(gallery_labels)
    out = np.empty(len(queries), dtype=gallery_labels.dtype)
    for start in range(0, len(queries), chunk):
        d = _squared_distances(queries[start:start + chunk], gallery)
        out[start:start + chunk] = gallery_labels[d.argmin(axis=1)]
    return out


def domain_adapt_nn(gallery_images, gallery_labels, queries: DatasetSplit, *,
                    name="adapt-nn", run_config_hash="") -> MetricsReport:
    """Nearest-neighbor adaptation: each query takes the label of the closest
    transferred (labeled) gallery image in raw pixel space."""
    gallery_images = np.asarray(gallery_images, dtype=np.float32)
    if len(gallery_images) == 0:
        raise UsageError("empty gallery")
    if gallery_images.shape[1:] != queries.image_shape:
        raise UsageError(
            f"gallery images {gallery_images.shape[1:]} do not match queries {queries.image_shape}"
        )
    if not queries.is_labeled:
        raise UsageError("domain_adapt_nn needs labeled queries")
    preds = np.concatenate([
        nearest_neighbor_labels(queries.images(np.arange(s, min(s + 1024, len(queries)))),
                                gallery_images, gallery_labels)
        for s in range(0, len(queries), 1024)
    ])
    return metrics_from_predictions(name, preds, queries.labels, run_config_hash)


def retrieval_rank_metrics(probes, gallery, true_match) -> RetrievalResult:
    """Rank of each probe's true match among the gallery by Euclidean distance.

    ``gallery`` is (G, D) shared by all probes or (P, G, D) per probe.
    """
    probes = np.asarray(probes, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if true_match is None:
        raise UsageError("true match indices are required")
    true_match = np.asarray(true_match)
    if true_match.shape != (len(probes),):
        raise UsageError("need exactly one true match index per probe")
    if gallery.ndim == 2:
        gallery = np.broadcast_to(gallery, (len(probes),) + gallery.shape)
    if gallery.shape[0] != len(probes) or gallery.shape[2] != probes.shape[1]:
        raise UsageError("probes and gallery must share the embedding dimension")
    if (true_match < 0).any() or (true_match >= gallery.shape[1]).any():
        raise UsageError("true match index outside the gallery")
    dist = np.sqrt(((gallery - probes[:, None, :]) ** 2).sum(-1))
    true_d = dist[np.arange(len(probes)), true_match]
    ranks = 1 + (dist < true_d[:, None]).sum(axis=1)
    return RetrievalResult.from_ranks(ranks)


def constancy_distances(X, f, G):
    """||f(x) - f(G(x))|| for each x; ``f`` and ``G`` act on NCHW tensors."""
    with torch.no_grad():
        fx = f(replicate(X))
        fgx = f(replicate(G(X)))
    return torch.linalg.vector_norm((fx - fgx).flatten(1), dim=1).numpy()


def representative_selection(X, f, G, *, return_index=False):
    """The element of ``X`` whose transfer best preserves f; first wins ties."""
    if len(X) == 0:
        raise UsageError("representative_selection needs a nonempty set")
    idx = int(np.argmin(constancy_distances(X, f, G)))
    return (X[idx], idx) if return_index else X[idx]


@torch.no_grad()
def basis_tiles(g, dims):
    if dims != g.in_dim:
        raise UsageError(f"generator expects {g.in_dim}-D input, got dims={dims}")
    g.eval()
    # one vector per call so each tile matches a standalone generate(g, e_i) bitwise
    eye = torch.eye(dims)
    return torch.cat([g(eye[i:i + 1]) for i in range(dims)])


def grid_shape(n):
    cols = math.ceil(math.sqrt(n))
    return math.ceil(n / cols), cols


def tile_grid(tiles, cols=None, pad=0, fill=-1.0):
    """Arrange (N, C, H, W) tiles row-major into one (C, rows*H, cols*W) array."""
    tiles = tiles.detach().cpu().numpy() if torch.is_tensor(tiles) else np.asarray(tiles)
    n, c, h, w = tiles.shape
    rows, cols = grid_shape(n) if cols is None else (math.ceil(n / cols), cols)
    grid = np.full((c, rows * (h + pad) - pad, cols * (w + pad) - pad), fill, dtype=np.float32)
    for i in range(n):
        r, k = divmod(i, cols)
        grid[:, r * (h + pad):r * (h + pad) + h, k * (w + pad):k * (w + pad) + w] = tiles[i]
    return grid


def basis_visualization(g, dims, path=None):
    """Images of g applied to each standard basis vector, laid out row-major.

    Returns ``(tiles, grid)``; writes a PNG when ``path`` is given.
    """
    tiles = basis_tiles(g, dims)
    grid = tile_grid(tiles)
    if path is not None:
        save_png(grid, path)
    return tiles, grid


def mode_diversity_score(tiles) -> float:
    """Mean pairwise MSE between distinct tiles."""
    tiles = tiles.detach().cpu().numpy() if torch.is_tensor(tiles) else np.asarray(tiles)
    n = len(tiles)
    if n < 2:
        raise UsageError("need at least two tiles")
    flat = tiles.reshape(n, -1).astype(np.float64)
    sq = (flat ** 2).sum(1)
    d = sq[:, None] - 2 * flat @ flat.T + sq[None, :]
    d = np.maximum(d, 0.0) / flat.shape[1]
    iu = np.triu_indices(n, k=1)
    return float(d[iu].mean())


def save_png(image, path):
    """Write a (C, H, W) or (H, W) array in [-1, 1] as an 8-bit PNG."""
    from PIL import Image

    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 3:
        image = image[0] if image.shape[0] == 1 else np.moveaxis(image, 0, -1)
    pixels = np.clip(np.round((image + 1.0) * 127.5), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels).save(path)
    return Path(path)


def pair_grid(inputs, outputs):
    """Inputs in odd columns, their transfers in even columns, one row."""
    inputs = replicate(inputs)
    outputs = replicate(outputs)
    tiles = torch.stack([inputs, outputs], dim=1).flatten(0, 1)
    return tile_grid(tiles, cols=len(tiles))

