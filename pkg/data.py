"""Multivariate time series datasets: UEA ``.ts`` files, normalization,
supervision masks and a synthetic generator."""
import csv
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from tensor import ConfigurationError, SmateError

logger = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-8
NORMALIZATION_MODES = ("per_variable_global", "none")


class ParseError(SmateError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class UnsupportedFeatureError(ParseError):
    pass


class MtsDataset:
    """N equal-length samples of shape ``(T, M)`` with class labels.

    Labels hidden by the supervision mask are only reachable through
    ``evaluation_labels``; everything training uses goes through
    ``visible_labels`` / ``class_indices``.
    """

    def __init__(self, samples, labels, label_set=None, mask=None, name="dataset"):
        samples = np.array(samples, dtype=np.float64)
        if samples.ndim != 3:
            raise ConfigurationError(f"samples must be (N, T, M), got shape {samples.shape}")
        labels = [str(label) for label in labels]
        if len(labels) != samples.shape[0]:
            raise ConfigurationError(f"{len(labels)} labels for {samples.shape[0]} samples")
        label_set = list(label_set) if label_set is not None else sorted(set(labels))
        if len(label_set) < 2:
            raise ConfigurationError(f"{name}: need at least 2 classes, got {label_set}")
        mask = np.ones(len(labels), dtype=bool) if mask is None else np.array(mask, dtype=bool)
        if mask.shape != (len(labels),):
            raise ConfigurationError(f"mask length {mask.size} does not match {len(labels)} samples")
        samples.setflags(write=False)
        mask.setflags(write=False)
        self.samples = samples
        self._labels = labels
        self.label_set = label_set
        self.mask = mask
        self.name = name

    def __len__(self):
        return self.samples.shape[0]

    def __repr__(self):
        return f"MtsDataset({self.name!r}, N={self.N}, T={self.T}, M={self.M}, K={self.K}, labeled={int(self.mask.sum())})"

    @property
    def N(self):
        return self.samples.shape[0]

    @property
    def T(self):
        return self.samples.shape[1]

    @property
    def M(self):
        return self.samples.shape[2]

    @property
    def K(self):
        return len(self.label_set)

    def visible_labels(self):
        return [label if visible else None for label, visible in zip(self._labels, self.mask)]

    def class_indices(self):
        """Index into ``label_set`` for visible labels, -1 for hidden ones."""
        lookup = {label: k for k, label in enumerate(self.label_set)}
        return np.array(
            [lookup[label] if visible else -1 for label, visible in zip(self._labels, self.mask)],
            dtype=int,
        )

    def evaluation_labels(self):
        """All ground-truth labels, hidden ones included. Never used for training."""
        return list(self._labels)

    def with_samples(self, samples):
        return MtsDataset(samples, self._labels, self.label_set, self.mask, self.name)

    def with_mask(self, mask):
        return MtsDataset(self.samples, self._labels, self.label_set, mask, self.name)


# .ts format

def _parse_bool(value, directive, line):
    lowered = value.strip().lower()
    if lowered not in ("true", "false"):
        raise ParseError(f"{directive} expects true or false, got {value!r}", line)
    return lowered == "true"


def _parse_float(token, line):
    token = token.strip()
    if token == "?":
        raise UnsupportedFeatureError("missing values are not supported", line)
    try:
        value = float(token)
    except ValueError:
        raise ParseError(f"invalid number {token!r}", line) from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite value {token!r}", line)
    return value


def _decode_lines(raw: bytes):
    lines = []
    for line_no, chunk in enumerate(raw.splitlines(), start=1):
        try:
            lines.append(chunk.decode("utf-8-sig" if line_no == 1 else "utf-8"))
        except UnicodeDecodeError:
            raise ParseError("invalid UTF-8", line_no) from None
    return lines


def parse_ts(source, name=None):
    """Parses a ``.ts`` document given as a path, raw bytes or text."""
    if isinstance(source, os.PathLike) or (
        isinstance(source, str) and "\n" not in source and os.path.isfile(source)
    ):
        path = Path(source)
        lines = _decode_lines(path.read_bytes())
        name = name or path.stem.rsplit("_", 1)[0]
    elif isinstance(source, bytes):
        lines = _decode_lines(source)
    else:
        lines = source.splitlines()

    header = {}
    class_labels = None
    n_dims = None
    series_length = None
    in_data = False
    samples, labels = [], []

    for line_no, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if not in_data:
            if not line.startswith("@"):
                raise ParseError(f"expected a header directive, got {line[:40]!r}", line_no)
            directive, _, rest = line.partition(" ")
            directive = directive.lower()
            rest = rest.strip()
            if directive == "@problemname":
                header["problemName"] = rest
            elif directive == "@timestamps":
                if _parse_bool(rest, directive, line_no):
                    raise UnsupportedFeatureError("timestamped series are not supported", line_no)
            elif directive == "@univariate":
                if _parse_bool(rest, directive, line_no):
                    n_dims = 1
            elif directive == "@dimensions":
                try:
                    n_dims = int(rest)
                except ValueError:
                    raise ParseError(f"@dimensions expects an integer, got {rest!r}", line_no) from None
            elif directive == "@equallength":
                if not _parse_bool(rest, directive, line_no):
                    raise UnsupportedFeatureError("unequal-length series are not supported", line_no)
            elif directive == "@serieslength":
                try:
                    series_length = int(rest)
                except ValueError:
                    raise ParseError(f"@seriesLength expects an integer, got {rest!r}", line_no) from None
            elif directive == "@classlabel":
                tokens = rest.split()
                if not tokens or not _parse_bool(tokens[0], directive, line_no):
                    raise UnsupportedFeatureError("files without class labels are not supported", line_no)
                class_labels = tokens[1:]
                if not class_labels:
                    raise ParseError("@classLabel true declares no labels", line_no)
            elif directive == "@targetlabel":
                raise UnsupportedFeatureError("regression targets are not supported", line_no)
            elif directive == "@missing":
                if _parse_bool(rest, directive, line_no):
                    raise UnsupportedFeatureError("missing values are not supported", line_no)
            elif directive == "@data":
                if class_labels is None:
                    raise ParseError("@data before @classLabel", line_no)
                in_data = True
            else:
                raise ParseError(f"unknown directive {directive}", line_no)
            continue

        if "(" in line:
            raise UnsupportedFeatureError("timestamped series are not supported", line_no)
        fields = line.split(":")
        label = fields[-1].strip()
        dims = fields[:-1]
        if n_dims is None:
            n_dims = len(dims)
        if len(dims) != n_dims:
            raise ParseError(f"expected {n_dims} dimensions, found {len(dims)}", line_no)
        if label not in class_labels:
            raise ParseError(f"class label {label!r} not declared in @classLabel", line_no)
        series = [[_parse_float(v, line_no) for v in dim.split(",")] for dim in dims]
        lengths = {len(s) for s in series}
        if len(lengths) != 1:
            raise UnsupportedFeatureError("dimensions of one sample differ in length", line_no)
        length = lengths.pop()
        if series_length is None:
            series_length = length
        elif length != series_length:
            raise UnsupportedFeatureError(
                f"series length {length} differs from {series_length}", line_no
            )
        samples.append(np.array(series).T)
        labels.append(label)

    if not in_data:
        raise ParseError("no @data section")
    if not samples:
        raise ParseError("no samples after @data")
    name = name or header.get("problemName", "dataset")
    logger.debug("parsed %s: %d samples, T=%d, M=%d", name, len(samples), series_length, n_dims)
    return MtsDataset(np.stack(samples), labels, class_labels, name=name)


def serialize_ts(ds: MtsDataset):
    lines = [
        f"@problemName {ds.name}",
        "@timeStamps false",
        "@missing false",
        f"@univariate {'true' if ds.M == 1 else 'false'}",
        f"@dimensions {ds.M}",
        "@equalLength true",
        f"@seriesLength {ds.T}",
        "@classLabel true " + " ".join(ds.label_set),
        "@data",
    ]
    for sample, label in zip(ds.samples, ds.evaluation_labels()):
        dims = [",".join(repr(float(v)) for v in sample[:, j]) for j in range(ds.M)]
        lines.append(":".join(dims + [label]))
    return "\n".join(lines) + "\n"


def write_ts(ds: MtsDataset, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(serialize_ts(ds), encoding="utf-8")
    return path


def split_paths(data_dir, name):
    """``<dir>/<name>/<name>_TRAIN.ts`` (UEA layout) or ``<dir>/<name>_TRAIN.ts``."""
    data_dir = Path(data_dir)
    for base in (data_dir / name, data_dir):
        train, test = base / f"{name}_TRAIN.ts", base / f"{name}_TEST.ts"
        if train.exists():
            return train, test
    return data_dir / name / f"{name}_TRAIN.ts", data_dir / name / f"{name}_TEST.ts"


def load_split(data_dir, name, split):
    train, test = split_paths(data_dir, name)
    path = train if split == "train" else test
    if not path.exists():
        raise FileNotFoundError(f"{split} split not found: {path}")
    return parse_ts(path, name=name)


# Normalization

@dataclass
class Normalizer:
    mode: str
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, ds: MtsDataset, mode="per_variable_global"):
        if mode not in NORMALIZATION_MODES:
            raise ConfigurationError(f"unknown normalization mode {mode!r}")
        if mode == "none":
            return cls(mode, np.zeros(ds.M), np.ones(ds.M))
        mean = ds.samples.mean(axis=(0, 1))
        std = np.maximum(ds.samples.std(axis=(0, 1)), SIGMA_FLOOR)
        return cls(mode, mean, std)

    def apply(self, ds: MtsDataset):
        if self.mode == "none":
            return ds
        if ds.M != self.mean.size:
            raise ConfigurationError(f"normalizer fitted on {self.mean.size} variables, dataset has {ds.M}")
        return ds.with_samples((ds.samples - self.mean) / self.std)

    def to_dict(self):
        return {"mode": self.mode, "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, payload):
        return cls(payload["mode"], np.array(payload["mean"]), np.array(payload["std"]))


def z_normalize(ds: MtsDataset, mode="per_variable_global", stats: Normalizer = None):
    """Normalizes each variable with ``stats`` (fitted on ``ds`` when omitted)."""
    stats = stats or Normalizer.fit(ds, mode)
    return stats.apply(ds)


# Supervision

@dataclass(frozen=True)
class SplitSpec:
    ratio: float
    seed: int = 0
    stratified: bool = True
    floor: int = 1

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ConfigurationError(f"supervision ratio must be in [0, 1], got {self.ratio}")
        if self.floor < 0:
            raise ConfigurationError(f"floor must be non-negative, got {self.floor}")


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def apply_supervision(ds: MtsDataset, spec: SplitSpec):
    """Hides labels so that a fraction ``spec.ratio`` stays visible."""
    labels = ds.evaluation_labels()
    if spec.ratio * ds.N + 1e-9 < spec.floor * ds.K:
        raise ConfigurationError(
            f"ratio {spec.ratio} leaves {spec.ratio * ds.N:.1f} labels for {ds.K} classes "
            f"with a floor of {spec.floor}"
        )
    rng = np.random.default_rng(spec.seed)
    mask = np.zeros(ds.N, dtype=bool)
    if spec.stratified:
        for label in ds.label_set:
            members = np.array([i for i, y in enumerate(labels) if y == label], dtype=int)
            if len(members) < spec.floor:
                raise ConfigurationError(
                    f"class {label!r} has {len(members)} samples, floor is {spec.floor}"
                )
            visible = min(len(members), max(spec.floor, _round_half_up(spec.ratio * len(members))))
            mask[rng.permutation(members)[:visible]] = True
    else:
        visible = _round_half_up(spec.ratio * ds.N)
        mask[rng.permutation(ds.N)[:visible]] = True
        for label in ds.label_set:
            count = sum(1 for y, m in zip(labels, mask) if m and y == label)
            if count < spec.floor:
                raise ConfigurationError(
                    f"class {label!r} has {count} visible labels, floor is {spec.floor}"
                )
    logger.info("%s: %d of %d labels visible (r=%.3f)", ds.name, int(mask.sum()), ds.N, spec.ratio)
    return ds.with_mask(mask)


# Synthetic data

def make_synthetic(K=3, N=120, T=64, M=4, seed=0, noise=0.05, phase_jitter=0.0, name="synthetic"):
    """Coupled sinusoids: class k oscillates at frequency ``2 + k`` and
    shifts variable j by a class-specific phase, so classes differ both in
    time (frequency) and across variables (phase couplings)."""
    if K < 2 or M < 2:
        raise ConfigurationError(f"synthetic data needs K >= 2 and M >= 2, got K={K}, M={M}")
    rng = np.random.default_rng(seed)
    t = np.arange(T)
    samples = np.empty((N, T, M))
    labels = []
    for i in range(N):
        k = i % K
        frequency = 2.0 + k
        offset = 2 * np.pi * phase_jitter * rng.uniform()
        for j in range(M):
            phase = 2 * np.pi * j * (k + 1) / (M * (K + 1))
            samples[i, :, j] = np.sin(2 * np.pi * frequency * t / T + phase + offset)
        samples[i] += noise * rng.standard_normal((T, M))
        labels.append(f"class_{k}")
    return MtsDataset(samples, labels, [f"class_{k}" for k in range(K)], name=name)


# Embedding export

def write_embedding_csv(path, sample_ids, labels, is_labeled, embeddings):
    """One row per embedding, flattened row-major into ``dim_0..dim_{L*D-1}``."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    flat = embeddings.reshape(embeddings.shape[0], -1)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "label", "is_labeled"] + [f"dim_{i}" for i in range(flat.shape[1])])
        for sample_id, label, labeled, row in zip(sample_ids, labels, is_labeled, flat):
            writer.writerow([sample_id, label, str(bool(labeled)).lower()] + [repr(float(v)) for v in row])
    return path


def read_embedding_csv(path):
    """Returns ``(sample_ids, labels, is_labeled, flat_embeddings)``."""
    sample_ids, labels, flags, rows = [], [], [], []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        next(reader)
        for record in reader:
            sample_ids.append(record[0])
            labels.append(record[1])
            flags.append(record[2] == "true")
            rows.append([float(v) for v in record[3:]])
    return sample_ids, labels, np.array(flags), np.array(rows)
