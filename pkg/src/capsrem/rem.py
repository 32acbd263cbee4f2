"""Routing-entropy analysis: coupling quantization, parse-tree dictionaries,
entropy, saliency maps and parse-tree graphs."""
from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .capsnet import CapsNetModel, class_norms, predict
from .errors import ConfigError, DataError

DEFAULT_LEVELS = 11
LABEL_SOURCES = ("predicted", "true")


def _check_levels(K: int) -> int:
    if int(K) != K or K < 2:
        raise ConfigError(f"quantization needs K >= 2 levels, got {K}")
    return int(K)


def quantize(c, K: int = DEFAULT_LEVELS, return_clamped: bool = False):
    """Level index ``floor(c * (K-1) + 1/2)`` for couplings clamped to [0, 1].

    Works on scalars and arrays. With ``return_clamped`` a boolean mask of the
    inputs that fell outside [0, 1] is returned as well.
    """
    K = _check_levels(K)
    arr = np.asarray(c, dtype=np.float64)
    clamped = (arr < 0) | (arr > 1)
    idx = np.floor(np.clip(arr, 0.0, 1.0) * (K - 1) + 0.5).astype(np.int64)
    if idx.ndim == 0:
        idx = int(idx)
    if return_clamped:
        return idx, clamped
    return idx


def level_value(index, K: int = DEFAULT_LEVELS):
    """Coupling value represented by a level index."""
    K = _check_levels(K)
    return np.asarray(index, dtype=np.float64) / (K - 1)


@dataclass(frozen=True)
class Quantizer:
    K: int = DEFAULT_LEVELS

    def __post_init__(self):
        _check_levels(self.K)

    @property
    def levels(self) -> np.ndarray:
        return np.arange(self.K) / (self.K - 1)

    def indices(self, c):
        return quantize(c, self.K)

    def values(self, c) -> np.ndarray:
        return level_value(quantize(c, self.K), self.K)


def make_key(indices: Sequence[int]) -> str:
    return "-".join(str(int(i)) for i in indices)


@dataclass
class ParseTreeDictionary:
    """Per-class counts of parse-tree keys."""

    num_classes: int
    counts: list = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = [Counter() for _ in range(self.num_classes)]

    def add(self, j: int, key: str, n: int = 1) -> None:
        self.counts[j][key] += n

    def samples(self, j: int) -> int:
        return sum(self.counts[j].values())

    def keys(self, j: int) -> int:
        return len(self.counts[j])

    def merge(self, other: "ParseTreeDictionary") -> "ParseTreeDictionary":
        if other.num_classes != self.num_classes:
            raise ConfigError(f"cannot merge dictionaries over {self.num_classes} and {other.num_classes} classes")
        return ParseTreeDictionary(self.num_classes, [a + b for a, b in zip(self.counts, other.counts)])

    def __eq__(self, other) -> bool:
        return (isinstance(other, ParseTreeDictionary) and self.num_classes == other.num_classes
                and all(dict(a) == dict(b) for a, b in zip(self.counts, other.counts)))


@dataclass
class CouplingDump:
    """Final-iteration couplings [N, I, J] plus what the analysis needs alongside them."""

    couplings: np.ndarray
    predictions: np.ndarray
    labels: np.ndarray
    primary_norms: np.ndarray


def collect_couplings(model: CapsNetModel, dataset, r: Optional[int] = None,
                      batch_size: int = 256) -> CouplingDump:
    r = model.config.routing_iterations if r is None else r
    cs, preds, norms = [], [], []
    with T.no_grad():
        for start in range(0, len(dataset), batch_size):
            out = model.run(dataset.images[start:start + batch_size], r=r)
            cs.append(out.couplings.data)
            preds.append(predict(out.class_poses))
            norms.append(class_norms(out.primary_poses))
    J = model.config.num_classes
    I = model.config.num_primary
    if not cs:
        return CouplingDump(np.zeros((0, I, J)), np.zeros(0, np.int64), dataset.labels.copy(), np.zeros((0, I)))
    return CouplingDump(np.concatenate(cs), np.concatenate(preds), dataset.labels.copy(), np.concatenate(norms))


def dictionary_from_couplings(couplings: np.ndarray, labels, num_classes: int,
                              K: int = DEFAULT_LEVELS) -> ParseTreeDictionary:
    """Key each sample by the quantized column of couplings toward its label."""
    idx = quantize(couplings, K)
    labels = np.asarray(labels, dtype=np.int64)
    d = ParseTreeDictionary(num_classes)
    for n, j in enumerate(labels):
        d.add(int(j), make_key(idx[n, :, j]))
    return d


def build_dictionary(model: CapsNetModel, dataset, K: int = DEFAULT_LEVELS, label_source: str = "predicted",
                     r: Optional[int] = None, batch_size: int = 256) -> ParseTreeDictionary:
    _check_levels(K)
    if label_source not in LABEL_SOURCES:
        raise ConfigError(f"label_source must be one of {LABEL_SOURCES}, got {label_source!r}")
    dump = collect_couplings(model, dataset, r=r, batch_size=batch_size)
    labels = dump.predictions if label_source == "predicted" else dump.labels
    return dictionary_from_couplings(dump.couplings, labels, model.config.num_classes, K)


def entropy_from_counts(counts) -> float:
    """Shannon entropy in bits of the empirical distribution given by ``counts``."""
    values = [c for c in (counts.values() if hasattr(counts, "values") else counts) if c > 0]
    total = sum(values)
    if total == 0:
        raise DataError("entropy of an empty count table")
    h = -sum((c / total) * math.log2(c / total) for c in values)
    return h if h > 0 else 0.0


def class_entropy(dictionary: ParseTreeDictionary, j: int) -> Optional[float]:
    """H_j in bits, or ``None`` when class ``j`` received no samples."""
    if dictionary.samples(j) == 0:
        return None
    return entropy_from_counts(dictionary.counts[j])


@dataclass
class EntropyReport:
    per_class: list
    samples: list
    keys: list
    K: int
    sparsity: float = 0.0

    @property
    def mean(self) -> float:
        return mean_entropy(self)


def mean_entropy(report) -> float:
    """Mean of H_j over the classes that received at least one sample."""
    values = report.per_class if isinstance(report, EntropyReport) else list(report)
    present = [h for h in values if h is not None]
    if not present:
        raise DataError("no class received any sample; mean entropy is undefined")
    return float(sum(present) / len(present))


def entropy_report(dictionary: ParseTreeDictionary, K: int = DEFAULT_LEVELS, sparsity: float = 0.0) -> EntropyReport:
    J = dictionary.num_classes
    return EntropyReport([class_entropy(dictionary, j) for j in range(J)],
                         [dictionary.samples(j) for j in range(J)],
                         [dictionary.keys(j) for j in range(J)], K, sparsity)


def sparsity(model: CapsNetModel, tau: float = 0.0) -> float:
    """Fraction of prunable weights that are pruned.

    ``tau == 0`` counts exact zeros; a positive ``tau`` counts ``|w| < tau``.
    """
    total = zeroed = 0
    for name in model.prunable_names():
        w = model.params[name].data
        total += w.size
        zeroed += int(np.count_nonzero(w == 0) if tau <= 0 else np.count_nonzero(np.abs(w) < tau))
    return zeroed / total if total else 0.0


# -- saliency ---------------------------------------------------------------

@dataclass
class SaliencyMap:
    grid: np.ndarray
    upsampled: np.ndarray
    predicted: int


def saliency_grid(norms: np.ndarray, coupling_column: np.ndarray, grid_shape: tuple, num_types: int,
                  K: int = DEFAULT_LEVELS) -> np.ndarray:
    """E[m, n]: mean over capsule types of pose norm times quantized coupling level.

    ``norms`` and ``coupling_column`` are flat over (m, n, o) in that order.
    """
    m, n = grid_shape
    weighted = np.asarray(norms, np.float64) * level_value(quantize(coupling_column, K), K)
    return weighted.reshape(m, n, num_types).mean(axis=2)


def bilinear_upsample(grid: np.ndarray, size: tuple) -> np.ndarray:
    """Corner-aligned bilinear resize: grid corners land on output corners."""
    grid = np.asarray(grid, dtype=np.float64)
    m, n = grid.shape
    h, w = size

    def axis(src: int, dst: int):
        if src == 1 or dst == 1:
            pos = np.zeros(dst)
        else:
            pos = np.arange(dst) * (src - 1) / (dst - 1)
        lo = np.minimum(np.floor(pos).astype(np.int64), src - 1)
        hi = np.minimum(lo + 1, src - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(m, h)
    x0, x1, fx = axis(n, w)
    top = grid[y0][:, x0] * (1 - fx) + grid[y0][:, x1] * fx
    bottom = grid[y1][:, x0] * (1 - fx) + grid[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bottom * fy[:, None]


def saliency_map(model: CapsNetModel, image, K: int = DEFAULT_LEVELS, r: Optional[int] = None) -> SaliencyMap:
    cfg = model.config
    with T.no_grad():
        out = model.run(image, r=r)
    j = int(predict(out.class_poses)[0])
    norms = class_norms(out.primary_poses)[0]
    grid = saliency_grid(norms, out.couplings.data[0, :, j], cfg.grid_shape(), cfg.num_types, K)
    return SaliencyMap(grid, bilinear_upsample(grid, (cfg.image_height, cfg.image_width)), j)


# -- parse-tree graph -------------------------------------------------------

@dataclass
class ParseTreeGraph:
    predicted: int
    class_activation: float
    edges: list          # (primary index, coupling weight, primary activation)

    def to_dot(self) -> str:
        lines = ["digraph {", f'  "class_{self.predicted}" [activation={self.class_activation:.6f}];']
        for i, _, act in self.edges:
            lines.append(f'  "p_{i}" [activation={act:.6f}];')
        for i, weight, _ in self.edges:
            lines.append(f'  "p_{i}" -> "class_{self.predicted}" [weight={weight:.6f}];')
        lines.append("}")
        return "\n".join(lines) + "\n"


def parse_tree_from(couplings_column, primary_norms, predicted: int, class_activation: float,
                    threshold: float, K: Optional[int] = DEFAULT_LEVELS) -> ParseTreeGraph:
    """Backtrack from the predicted class: keep primary capsules whose coupling
    toward it reaches ``threshold``. ``K=None`` uses raw couplings."""
    col = np.asarray(couplings_column, dtype=np.float64)
    weights = col if K is None else level_value(quantize(col, K), K)
    edges = [(i, float(weights[i]), float(primary_norms[i])) for i in np.flatnonzero(weights >= threshold)]
    return ParseTreeGraph(int(predicted), float(class_activation), edges)


def parse_tree_graph(model: CapsNetModel, image, coupling_threshold: float, K: Optional[int] = DEFAULT_LEVELS,
                     r: Optional[int] = None) -> ParseTreeGraph:
    with T.no_grad():
        out = model.run(image, r=r)
    j = int(predict(out.class_poses)[0])
    return parse_tree_from(out.couplings.data[0, :, j], class_norms(out.primary_poses)[0], j,
                           class_norms(out.class_poses)[0, j], coupling_threshold, K)


# -- quantized-coupling inference -------------------------------------------

def quantized_predict(model: CapsNetModel, images, K: int = DEFAULT_LEVELS, r: Optional[int] = None,
                      batch_size: int = 256):
    """Predictions with the final couplings replaced by their quantized levels.

    Returns ``(continuous, quantized)`` label arrays.
    """
    cont, quant = [], []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            out = model.run(images[start:start + batch_size], r=r)
            c_tilde = level_value(quantize(out.couplings.data, K), K)
            s = np.einsum("bij,bijd->bjd", c_tilde, out.votes.data.astype(np.float64))
            cont.append(predict(out.class_poses))
            # squash preserves the ordering of norms, so argmax over |s| suffices
            quant.append(np.argmax(np.sqrt((s * s).sum(-1)), axis=-1))
    if not cont:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    return np.concatenate(cont), np.concatenate(quant)


# -- exporters --------------------------------------------------------------

def write_coupling_csv(path, couplings: np.ndarray, sample_offset: int = 0) -> None:
    """One row per (sample, i, j) with the raw coupling value."""
    N, I, J = couplings.shape
    with open(path, "w", newline="") as fh:
        fh.write("sample,i,j,c\n")
        for n in range(N):
            rows = couplings[n].astype(np.float64).tolist()
            fh.writelines(f"{n + sample_offset},{i},{j},{rows[i][j]!r}\n" for i in range(I) for j in range(J))


def read_coupling_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataError(f"{path}: no coupling rows")
    s = np.array([int(r["sample"]) for r in rows])
    i = np.array([int(r["i"]) for r in rows])
    j = np.array([int(r["j"]) for r in rows])
    out = np.zeros((s.max() - s.min() + 1, i.max() + 1, j.max() + 1))
    out[s - s.min(), i, j] = [float(r["c"]) for r in rows]
    return out


def write_entropy_csv(path, report: EntropyReport) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("class,samples,keys,entropy_bits\n")
        for j, (h, n, k) in enumerate(zip(report.per_class, report.samples, report.keys)):
            fh.write(f"{j},{n},{k},{'' if h is None else repr(h)}\n")
        fh.write(f"# mean_entropy_bits={report.mean!r} K={report.K} sparsity={report.sparsity!r}\n")


def write_pgm(path, values: np.ndarray, binary: bool = False, maxval: int = 255) -> None:
    """Grayscale image; values in [0, 1] map linearly onto 0..maxval."""
    values = np.asarray(values, dtype=np.float64)
    h, w = values.shape
    pix = np.clip(np.rint(values * maxval), 0, maxval).astype(np.int64)
    header = f"{'P5' if binary else 'P2'}\n{w} {h}\n{maxval}\n"
    if binary:
        Path(path).write_bytes(header.encode("ascii") + pix.astype(np.uint8).tobytes())
    else:
        body = "\n".join(" ".join(str(v) for v in row) for row in pix)
        Path(path).write_text(header + body + "\n")


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic = raw[:2]
    if magic == b"P2":
        tokens = raw.split()
        w, h, _ = int(tokens[1]), int(tokens[2]), int(tokens[3])
        return np.array([int(t) for t in tokens[4:4 + w * h]]).reshape(h, w)
    if magic == b"P5":
        tokens = raw.split(maxsplit=4)
        w, h = int(tokens[1]), int(tokens[2])
        return np.frombuffer(raw[-w * h:], dtype=np.uint8).reshape(h, w).astype(np.int64)
    raise DataError(f"{path}: not a PGM file")
