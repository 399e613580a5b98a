"""Synthetic few-shot classification tasks with base/new splits and shifts.

Classes are Gaussian blobs around seeded prototype vectors.  A task exposes
three splits: base-train (exactly `shots` samples per base class), base-test,
and new-test (classes never seen in training).  Parametric domain shifts
(additive noise, rotation in a random 2-plane) act on test features only.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import DataError

MANIFEST_VERSION = 1
SPLITS = ("base-train", "base-test", "new-test")


@dataclass(frozen=True)
class TaskSpec:
    n_classes: int = 10
    d_x: int = 16
    shots: int = 16
    test_shots: int = 25
    proto_scale: float = 1.0
    noise: float | None = None  # None: 0.6 * min pairwise prototype distance
    base_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.shots < 1:
            raise DataError("TaskSpec: shots must be >= 1")
        if self.n_classes < 4:
            raise DataError("TaskSpec: need at least 4 classes")
        if not (0.0 < self.base_fraction < 1.0):
            raise DataError("TaskSpec: base_fraction must lie strictly between 0 and 1")
        if self.test_shots < 1:
            raise DataError("TaskSpec: test_shots must be >= 1")

    @staticmethod
    def from_dict(d):
        known = {f for f in TaskSpec.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise DataError(f"TaskSpec: unknown keys {sorted(extra)}")
        return TaskSpec(**d)


@dataclass(frozen=True)
class Sample:
    sample_id: int
    split: str
    class_id: int
    features: np.ndarray


@dataclass
class Dataset:
    spec: TaskSpec
    prototypes: np.ndarray  # (d_x, n_classes)
    base_classes: list
    new_classes: list
    samples: list  # of Sample

    def split(self, name):
        if name not in SPLITS:
            raise DataError(f"unknown split {name!r}")
        return [s for s in self.samples if s.split == name]

    def features_and_labels(self, name):
        part = self.split(name)
        x = np.stack([s.features for s in part], axis=1) if part else np.zeros((self.spec.d_x, 0))
        y = np.array([s.class_id for s in part], dtype=int)
        return x, y

    def digest(self):
        h = hashlib.sha256()
        h.update(json.dumps(asdict(self.spec), sort_keys=True).encode())
        h.update(np.ascontiguousarray(self.prototypes).tobytes())
        for s in self.samples:
            h.update(f"{s.sample_id},{s.split},{s.class_id}".encode())
            h.update(np.ascontiguousarray(s.features).tobytes())
        return h.hexdigest()

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.digest() == other.digest()


def _draw_prototypes(rng, spec, max_redraws=100):
    min_dist = 0.5 * spec.proto_scale
    for _ in range(max_redraws):
        protos = rng.normal(0.0, spec.proto_scale, (spec.d_x, spec.n_classes))
        dmin = np.inf
        for i in range(spec.n_classes):
            for j in range(i + 1, spec.n_classes):
                dmin = min(dmin, float(np.linalg.norm(protos[:, i] - protos[:, j])))
        if dmin >= min_dist:
            return protos, dmin
    raise DataError(
        "generate: failed to draw well-separated prototypes after "
        f"{max_redraws} attempts; try a larger d_x"
    )


def generate(spec):
    """Draw a dataset deterministically from the spec (including its seed)."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[spec.seed, 0x7a5c]))
    protos, dmin = _draw_prototypes(rng, spec)
    sigma = spec.noise if spec.noise is not None else 0.6 * dmin
    perm = rng.permutation(spec.n_classes)
    n_base = int(np.ceil(spec.base_fraction * spec.n_classes))
    base_classes = sorted(int(c) for c in perm[:n_base])
    new_classes = sorted(int(c) for c in perm[n_base:])

    samples = []
    next_id = 0

    def emit(split, class_id, count):
        nonlocal next_id
        for _ in range(count):
            feats = protos[:, class_id] + rng.normal(0.0, sigma, spec.d_x)
            samples.append(Sample(next_id, split, class_id, feats))
            next_id += 1

    for c in base_classes:
        emit("base-train", c, spec.shots)
    for c in base_classes:
        emit("base-test", c, spec.test_shots)
    for c in new_classes:
        emit("new-test", c, spec.test_shots)

    return Dataset(spec=spec, prototypes=protos, base_classes=base_classes,
                   new_classes=new_classes, samples=samples)


# -- domain shifts ----------------------------------------------------------

def parse_shift(descriptor):
    """Parse 'none', 'noise:SIGMA', or 'rotation:ANGLE' into (kind, value)."""
    if descriptor in (None, "", "none"):
        return ("none", 0.0)
    try:
        kind, raw = descriptor.split(":", 1)
        value = float(raw)
    except ValueError as e:
        raise DataError(f"invalid shift descriptor {descriptor!r}") from e
    if kind not in ("noise", "rotation"):
        raise DataError(f"unknown shift kind {kind!r}")
    if kind == "noise" and value < 0:
        raise DataError("noise shift needs a nonnegative sigma")
    return (kind, value)


def _rotation_matrix(d, angle, rng):
    """Rotation by `angle` in a random 2-plane of R^d (identity elsewhere)."""
    a = rng.normal(size=d)
    a /= np.linalg.norm(a)
    b = rng.normal(size=d)
    b -= (b @ a) * a
    b /= np.linalg.norm(b)
    c, s = np.cos(angle), np.sin(angle)
    # R = I + (c-1)(aa^T + bb^T) + s(ba^T - ab^T)
    return (np.eye(d) + (c - 1.0) * (np.outer(a, a) + np.outer(b, b))
            + s * (np.outer(b, a) - np.outer(a, b)))


def domain_shift(dataset, descriptor):
    """Apply a shift to all test features; labels and splits are unchanged."""
    kind, value = parse_shift(descriptor)
    if kind == "none" or value == 0.0:
        return dataset
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[dataset.spec.seed, 0x51f7]))
    d = dataset.spec.d_x
    rot = _rotation_matrix(d, value, rng) if kind == "rotation" else None
    shifted = []
    for s in dataset.samples:
        feats = s.features
        if s.split != "base-train":
            if kind == "noise":
                feats = feats + rng.normal(0.0, value, d)
            else:
                feats = rot @ feats
        shifted.append(Sample(s.sample_id, s.split, s.class_id, feats))
    return Dataset(spec=dataset.spec, prototypes=dataset.prototypes,
                   base_classes=list(dataset.base_classes),
                   new_classes=list(dataset.new_classes), samples=shifted)


# -- persistence ------------------------------------------------------------

def save(dataset, directory):
    """Write manifest.json + samples.csv under `directory`."""
    os.makedirs(directory, exist_ok=True)
    counts = {name: len(dataset.split(name)) for name in SPLITS}
    manifest = {
        "version": MANIFEST_VERSION,
        "spec": asdict(dataset.spec),
        "base_classes": dataset.base_classes,
        "new_classes": dataset.new_classes,
        "sample_counts": counts,
        "prototypes": [[repr(float(v)) for v in col] for col in dataset.prototypes.T],
    }
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    with open(os.path.join(directory, "samples.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "split", "class"] + [f"f{i}" for i in range(dataset.spec.d_x)])
        for s in dataset.samples:
            writer.writerow([s.sample_id, s.split, s.class_id]
                            + [repr(float(v)) for v in s.features])


def load(directory):
    """Read a dataset back; validates ids, splits, and manifest counts."""
    man_path = os.path.join(directory, "manifest.json")
    try:
        with open(man_path) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as e:
        raise DataError(f"{man_path}: malformed JSON at line {e.lineno}: {e.msg}") from e
    except FileNotFoundError as e:
        raise DataError(f"{man_path}: not found") from e
    if manifest.get("version") != MANIFEST_VERSION:
        raise DataError(f"unsupported dataset version {manifest.get('version')!r}")
    spec = TaskSpec.from_dict(manifest["spec"])
    protos = np.array([[float(v) for v in col] for col in manifest["prototypes"]]).T
    samples = []
    seen_ids = set()
    csv_path = os.path.join(directory, "samples.csv")
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:3] != ["id", "split", "class"]:
            raise DataError(f"{csv_path}: line 1: bad header")
        for lineno, row in enumerate(reader, start=2):
            try:
                sid, split, cls = int(row[0]), row[1], int(row[2])
                feats = np.array([float(v) for v in row[3:]])
            except (ValueError, IndexError) as e:
                raise DataError(f"{csv_path}: line {lineno}: unparseable row") from e
            if sid in seen_ids:
                raise DataError(f"{csv_path}: line {lineno}: duplicated sample id {sid}")
            if split not in SPLITS:
                raise DataError(f"{csv_path}: line {lineno}: unknown split {split!r}")
            if feats.size != spec.d_x:
                raise DataError(f"{csv_path}: line {lineno}: expected {spec.d_x} features")
            seen_ids.add(sid)
            samples.append(Sample(sid, split, cls, feats))
    ds = Dataset(spec=spec, prototypes=protos,
                 base_classes=[int(c) for c in manifest["base_classes"]],
                 new_classes=[int(c) for c in manifest["new_classes"]], samples=samples)
    for name, count in manifest["sample_counts"].items():
        if len(ds.split(name)) != count:
            raise DataError(f"{csv_path}: split {name!r} has {len(ds.split(name))} samples, "
                            f"manifest says {count}")
    return ds
