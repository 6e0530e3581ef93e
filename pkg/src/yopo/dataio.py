"""Datasets, metrics sinks, checkpoints and JSON config documents."""
import csv
import gzip
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynsys import NetworkSpec, Params
from .errors import FormatError, UsageError
from .trainer import METRIC_FIELDS, EpochSampler, MetricsRecord, TrainConfig, TrainState

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
DATA_DIR_ENV = "YOPO_DATA_DIR"


@dataclass
class Dataset:
    inputs: np.ndarray  # (S, d_x), entries in [0, 1]
    labels: np.ndarray  # (S,), integers in [0, classes)
    name: str = ""
    normalization: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise UsageError(f"inputs must be (S, d) with S >= 1, got {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise UsageError(f"{self.labels.shape[0]} labels for {self.inputs.shape[0]} inputs")
        if np.any(self.inputs < 0) or np.any(self.inputs > 1):
            raise UsageError("dataset inputs must lie in [0, 1]")
        if np.any(self.labels < 0):
            raise UsageError("labels must be nonnegative")

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def dim(self):
        return self.inputs.shape[1]

    @property
    def num_classes(self):
        return int(self.labels.max()) + 1

    def subset(self, idx, name=None):
        return Dataset(self.inputs[idx], self.labels[idx], name or self.name, dict(self.normalization))

    def split(self, n_first):
        if not 0 < n_first < len(self):
            raise UsageError(f"cannot split {len(self)} samples at {n_first}")
        return self.subset(slice(0, n_first), self.name + ":head"), self.subset(slice(n_first, None), self.name + ":tail")


def _read_bytes(path):
    data = Path(path).read_bytes()
    if data[:2] == b"\x1f\x8b":
        try:
            data = gzip.decompress(data)
        except (OSError, EOFError) as exc:
            raise FormatError(f"{path}: corrupt gzip stream ({exc})") from exc
    return data


def parse_idx(data, expected_magic, what="idx"):
    """Decode one IDX payload into a uint8 array, checking magic and length."""
    if len(data) < 4:
        raise FormatError(f"{what}: truncated header")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise FormatError(f"{what}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError(f"{what}: truncated dimension header")
    dims = struct.unpack(">" + "I" * ndim, data[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if len(data) != header + count:
        raise FormatError(f"{what}: payload has {len(data) - header} bytes, header promises {count}")
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, name=None):
    """MNIST-style IDX pair (optionally gzipped) -> Dataset with pixels scaled by 1/255."""
    for p in (images_path, labels_path):
        if not os.path.exists(p):
            raise UsageError(f"no such file: {p}")
    images = parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, str(images_path))
    labels = parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, str(labels_path))
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    inputs = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(inputs, labels.astype(np.int64), name or Path(images_path).name,
                   {"scale": 1.0 / 255.0, "shape": list(images.shape[1:])})


def encode_idx_images(images):
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise UsageError("images must be (count, rows, cols)")
    return struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape) + images.tobytes()


def encode_idx_labels(labels):
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]) + labels.tobytes()


def write_idx(images_path, labels_path, images, labels, compress=False):
    opener = gzip.open if compress else open
    with opener(images_path, "wb") as f:
        f.write(encode_idx_images(images))
    with opener(labels_path, "wb") as f:
        f.write(encode_idx_labels(labels))


def data_dir():
    return Path(os.environ.get(DATA_DIR_ENV, "data"))


MNIST_SUBSET_FILES = ("mnist-10k-images-idx3-ubyte.gz", "mnist-10k-labels-idx1-ubyte.gz")


def load_mnist_subset(directory=None):
    d = Path(directory) if directory is not None else data_dir()
    return load_idx(d / MNIST_SUBSET_FILES[0], d / MNIST_SUBSET_FILES[1], name="mnist-10k")


def synth_gaussians(rng, S, d_x, classes=2, margin=4.0):
    """Isotropic unit-variance Gaussian classes, squashed affinely into [0, 1].

    Class c has mean ``(margin / sqrt(2)) * e_c`` before squashing, so any two
    means are ``margin`` apart.  The squash maps [-R, s + R] onto [0, 1] with
    R = 4 standard deviations, then clips the rare outliers.
    """
    if margin < 0:
        raise UsageError("margin must be nonnegative")
    if not 2 <= classes <= d_x:
        raise UsageError("need 2 <= classes <= d_x (class means sit on coordinate axes)")
    if S < 1:
        raise UsageError("S must be >= 1")
    s = margin / np.sqrt(2.0)
    R = 4.0
    labels = rng.permutation(np.arange(S) % classes)
    z = rng.normal(size=(S, d_x))
    z[np.arange(S), labels] += s
    lo, width = -R, s + 2 * R
    x = np.clip((z - lo) / width, 0.0, 1.0)
    norm = {"offset": lo, "width": width, "mean_shift": s, "sigma": 1.0 / width}
    return Dataset(x, labels, f"gauss-{classes}x{d_x}-m{margin:g}", norm)


def synth_class_means(ds):
    """Pre-clip target means for a dataset produced by synth_gaussians."""
    n = ds.normalization
    base = (0.0 - n["offset"]) / n["width"]
    means = np.full((ds.num_classes, ds.dim), base)
    for c in range(ds.num_classes):
        means[c, c] = (n["mean_shift"] - n["offset"]) / n["width"]
    return means


# metrics CSV

def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_metrics(path, records, append=False):
    """Write records under the fixed header; with ``append`` the header is written only once."""
    path = Path(path)
    fresh = not (append and path.exists() and path.stat().st_size > 0)
    with open(path, "a" if append else "w", newline="") as f:
        w = csv.writer(f)
        if fresh:
            w.writerow(METRIC_FIELDS)
        for r in records:
            w.writerow([_fmt(v) for v in r.astuple()])


def read_metrics(path):
    out = []
    with open(path, newline="") as f:
        rows = csv.reader(f)
        try:
            header = next(rows)
        except StopIteration:
            raise FormatError(f"{path}: empty metrics file") from None
        if tuple(header) != METRIC_FIELDS:
            raise FormatError(f"{path}:1: unexpected header {header}")
        for lineno, row in enumerate(rows, start=2):
            if len(row) != len(METRIC_FIELDS):
                raise FormatError(f"{path}:{lineno}: expected {len(METRIC_FIELDS)} fields, got {len(row)}")
            try:
                vals = [int(row[0])] + [float(v) for v in row[1:6]] + [int(row[6]), float(row[7])]
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            out.append(MetricsRecord(*vals))
    return out


def write_rows(path, rows, fields):
    """Generic CSV report: one dict per row."""
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(fields))
        w.writeheader()
        for r in rows:
            w.writerow({k: (_fmt(v) if isinstance(v, (float, int, np.floating, np.integer)) and not isinstance(v, bool) else v)
                        for k, v in r.items()})


def read_rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None


# checkpoints: magic, 8-byte little-endian header length, JSON header, raw <f8 params

CHECKPOINT_MAGIC = b"YOPOCKPT"
CHECKPOINT_VERSION = 1


def config_digest(cfg):
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(path, state):
    header = {
        "format_version": CHECKPOINT_VERSION,
        "spec": state.spec.to_dict(),
        "train_config": state.config.to_dict(),
        "config_digest": config_digest(state.config),
        "step": state.step,
        "gamma": state.gamma,
        "backprops": state.backprops,
        "rng": {"seed": state.config.seed, "sampler": state.sampler.state() if state.sampler else None},
        "num_params": state.params.size,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    payload = state.params.flat().astype("<f8").tobytes()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC + struct.pack("<Q", len(hb)) + hb + payload)


def load_checkpoint(path, n_items=None):
    """Rebuild a TrainState; ``n_items`` restores the batch sampler (dataset size)."""
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC or len(data) < 16:
        raise FormatError(f"{path}: not a checkpoint")
    (hlen,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16:16 + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: bad checkpoint header ({exc})") from None
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    payload = data[16 + hlen:]
    if len(payload) != 8 * header["num_params"]:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {8 * header['num_params']}")
    spec = NetworkSpec.from_dict(header["spec"])
    params = Params.from_flat(spec, np.frombuffer(payload, dtype="<f8").astype(np.float64))
    cfg = TrainConfig.from_dict(header["train_config"])
    if config_digest(cfg) != header["config_digest"]:
        raise FormatError(f"{path}: config digest mismatch")
    sampler = None
    smp = header["rng"]["sampler"]
    if n_items is not None and smp is not None:
        sampler = EpochSampler(n_items, cfg.batch_size, cfg.seed, smp["epoch"], smp["cursor"])
    return TrainState(spec, params, cfg, header["step"], sampler, header["gamma"], header["backprops"])

