"""Bag datasets: in-memory types, the on-disk format and synthetic generators.

A dataset is a directory with a text manifest plus one binary feature file
per bag (32-bit floats; training upcasts to 64-bit). Synthetic bags carry
two sidecar text files: integer grid coordinates and latent per-instance
labels. Latent labels exist so metrics can score how well distillation
finds the witnesses; the training path never reads them, which is why they
live in a sidecar rather than the feature file.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .rng import ALGORITHM_ID, make_rng

FEATURE_MAGIC = b"AFDF"
FEATURE_VERSION = 1
MANIFEST_FORMAT = "afd-dataset v1"

# latent instance labels
LATENT_NEGATIVE = 0
LATENT_POSITIVE = 1
LATENT_OTHER = 2


@dataclass
class Bag:
    """One bag: an ordered set of instance feature vectors with one label."""

    id: str
    label: int
    features: np.ndarray  # (K, n) float64 in memory
    coords: np.ndarray | None = None  # (K, 2) grid coordinates
    instance_labels: np.ndarray | None = None  # (K,) latent labels, synthetic only

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise FormatError(f"bag {self.id!r}: features must be (K>=1, n), got {self.features.shape}")
        if self.label not in (0, 1):
            raise FormatError(f"bag {self.id!r}: label must be 0 or 1, got {self.label!r}")
        self.label = int(self.label)
        K = self.features.shape[0]
        if self.coords is not None:
            self.coords = np.asarray(self.coords, dtype=np.float64)
            if self.coords.shape != (K, 2):
                raise FormatError(f"bag {self.id!r}: coords shape {self.coords.shape} != ({K}, 2)")
        if self.instance_labels is not None:
            self.instance_labels = np.asarray(self.instance_labels, dtype=np.int64)
            if self.instance_labels.shape != (K,):
                raise FormatError(
                    f"bag {self.id!r}: instance labels shape {self.instance_labels.shape} != ({K},)"
                )

    @property
    def n_instances(self) -> int:
        return self.features.shape[0]


@dataclass
class Dataset:
    name: str
    feature_dim: int
    bags: list[Bag]
    provenance: dict = field(default_factory=dict)

    def bag_by_id(self, bag_id: str) -> Bag:
        for bag in self.bags:
            if bag.id == bag_id:
                return bag
        raise KeyError(bag_id)

    def labels(self) -> np.ndarray:
        return np.array([b.label for b in self.bags], dtype=np.int64)


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the synthetic bag generators."""

    kind: str = "binary"  # binary | subtype
    bags_per_class: int = 150
    k_min: int = 50
    k_max: int = 200
    feature_dim: int = 32
    witness_rate: float = 0.05
    separation: float = 2.0
    noise_sigma: float = 1.0

    def __post_init__(self):
        if self.kind not in ("binary", "subtype"):
            raise ConfigError(f"unknown synthetic kind {self.kind!r} (expected binary or subtype)")
        if not (0.0 < self.witness_rate <= 1.0):
            raise ConfigError(f"witness rate must be in (0, 1], got {self.witness_rate}")
        if self.k_min < 1 or self.k_max < self.k_min:
            raise ConfigError(f"need 1 <= k_min <= k_max, got [{self.k_min}, {self.k_max}]")
        if self.separation <= 0:
            raise ConfigError(f"class separation must be > 0, got {self.separation}")
        if self.noise_sigma <= 0:
            raise ConfigError(f"noise sigma must be > 0, got {self.noise_sigma}")
        if self.bags_per_class < 1:
            raise ConfigError(f"bags per class must be >= 1, got {self.bags_per_class}")
        if self.feature_dim < 2:
            raise ConfigError(f"feature dim must be >= 2, got {self.feature_dim}")


# -- binary feature files ----------------------------------------------------


def write_features(features: np.ndarray, path: str | Path) -> None:
    """Write a (K, n) feature block: magic, version, K, n, then f32 LE payload."""
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim != 2:
        raise FormatError(f"feature block must be 2-D, got shape {arr.shape}")
    K, n = arr.shape
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<III", FEATURE_VERSION, K, n))
        f.write(arr.astype("<f4").tobytes())


def read_features(path: str | Path) -> np.ndarray:
    """Read a feature block back as float64; exact at 32-bit precision."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: not a feature file (bad magic)")
    version, K, n = struct.unpack("<III", raw[4:16])
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported feature format version {version}")
    expected = 16 + 4 * K * n
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload length mismatch (header says {K}x{n}, "
            f"file has {len(raw) - 16} payload bytes, expected {expected - 16})"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=16).reshape(K, n)
    return data.astype(np.float64)


# -- dataset directory layout ------------------------------------------------


def _coords_path(root: Path, bag_id: str) -> Path:
    return root / "coords" / f"{bag_id}.csv"


def _latents_path(root: Path, bag_id: str) -> Path:
    return root / "latents" / f"{bag_id}.txt"


def write_dataset(dataset: Dataset, root: str | Path) -> Path:
    """Write manifest, feature files and sidecars; returns the manifest path.

    The manifest is deterministic given the dataset (no timestamps, only
    relative paths), so identical generator runs produce identical bytes.
    """
    root = Path(root)
    (root / "features").mkdir(parents=True, exist_ok=True)
    lines = [
        f"format: {MANIFEST_FORMAT}",
        f"name: {dataset.name}",
        f"feature_dim: {dataset.feature_dim}",
        f"rng: {ALGORITHM_ID}",
    ]
    for key in sorted(dataset.provenance):
        value = dataset.provenance[key]
        if isinstance(value, (str, int, float)):  # derived arrays (cluster means) stay in memory
            lines.append(f"generator_{key}: {value}")
    lines.append(f"bag_count: {len(dataset.bags)}")
    for bag in dataset.bags:
        feat_rel = f"features/{bag.id}.afdf"
        write_features(bag.features, root / feat_rel)
        entry = f"bag: id={bag.id} label={bag.label} instances={bag.n_instances} features={feat_rel}"
        if bag.coords is not None:
            coords_rel = f"coords/{bag.id}.csv"
            path = _coords_path(root, bag.id)
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("".join(f"{int(x)},{int(y)}\n" for x, y in bag.coords))
            entry += f" coords={coords_rel}"
        if bag.instance_labels is not None:
            latents_rel = f"latents/{bag.id}.txt"
            path = _latents_path(root, bag.id)
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("".join(f"{int(v)}\n" for v in bag.instance_labels))
            entry += f" latents={latents_rel}"
        lines.append(entry)
    manifest = root / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def _parse_manifest(path: Path) -> tuple[dict[str, str], list[dict[str, str]]]:
    header: dict[str, str] = {}
    bag_entries: list[dict[str, str]] = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if ":" not in line:
            raise FormatError(f"{path}:{lineno}: expected 'key: value', got {line!r}")
        key, value = line.split(":", 1)
        key, value = key.strip(), value.strip()
        if key == "bag":
            fields = {}
            for token in value.split():
                if "=" not in token:
                    raise FormatError(f"{path}:{lineno}: malformed bag field {token!r}")
                fk, fv = token.split("=", 1)
                fields[fk] = fv
            bag_entries.append(fields)
        else:
            header[key] = value
    return header, bag_entries


def load_dataset(root: str | Path, with_latent: bool = True) -> Dataset:
    """Load a dataset directory, validating every file against the manifest."""
    root = Path(root)
    manifest = root / "manifest.txt"
    if not manifest.is_file():
        raise FormatError(f"{root}: no manifest.txt")
    header, entries = _parse_manifest(manifest)
    if header.get("format") != MANIFEST_FORMAT:
        raise FormatError(f"{manifest}: unsupported format {header.get('format')!r}")
    feature_dim = int(header["feature_dim"])
    declared = int(header.get("bag_count", len(entries)))
    if declared != len(entries):
        raise FormatError(f"{manifest}: bag_count {declared} != {len(entries)} bag entries")

    provenance = {
        key[len("generator_"):]: value
        for key, value in header.items()
        if key.startswith("generator_")
    }
    bags = []
    for entry in entries:
        bag_id = entry["id"]
        feat_path = root / entry["features"]
        if not feat_path.is_file():
            raise FormatError(f"{manifest}: bag {bag_id!r} references missing file {feat_path}")
        features = read_features(feat_path)
        K = int(entry["instances"])
        if features.shape != (K, feature_dim):
            raise FormatError(
                f"{feat_path}: header {features.shape} disagrees with manifest ({K}, {feature_dim})"
            )
        coords = None
        if "coords" in entry:
            rows = (root / entry["coords"]).read_text().splitlines()
            if len(rows) != K:
                raise FormatError(f"{root / entry['coords']}: {len(rows)} rows, expected {K}")
            coords = np.array([[float(v) for v in row.split(",")] for row in rows])
        instance_labels = None
        if with_latent and "latents" in entry:
            rows = (root / entry["latents"]).read_text().split()
            if len(rows) != K:
                raise FormatError(f"{root / entry['latents']}: {len(rows)} labels, expected {K}")
            instance_labels = np.array([int(v) for v in rows], dtype=np.int64)
        bags.append(
            Bag(
                id=bag_id,
                label=int(entry["label"]),
                features=features,
                coords=coords,
                instance_labels=instance_labels,
            )
        )
    return Dataset(
        name=header.get("name", root.name),
        feature_dim=feature_dim,
        bags=bags,
        provenance=provenance,
    )


# -- synthetic generators ----------------------------------------------------


def _grid_coords(K: int) -> np.ndarray:
    width = math.ceil(math.sqrt(K))
    idx = np.arange(K)
    return np.stack([idx % width, idx // width], axis=1).astype(np.float64)


def _random_unit(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=n)
    return v / np.linalg.norm(v)


def _witness_count(config: SynthConfig, K: int) -> int:
    w = max(1, math.ceil(config.witness_rate * K))
    if w > K:
        raise ConfigError(f"witness count {w} exceeds bag size {K}")
    return w


def _finish_bag(rng, bag_id, label, parts, latents):
    features = np.concatenate(parts, axis=0)
    latent = np.concatenate(latents)
    perm = rng.permutation(features.shape[0])
    return Bag(
        id=bag_id,
        label=label,
        features=features[perm],
        coords=_grid_coords(features.shape[0]),
        instance_labels=latent[perm],
    )


def gen_binary(config: SynthConfig, seed: int) -> Dataset:
    """Positive-vs-negative bags: two gaussian instance clusters.

    Positive bags contain ceil(witness_rate * K) instances from the
    positive cluster (always at least one) and negatives otherwise;
    negative bags are all-negative. A bag is positive iff it contains a
    latent-positive instance, by construction.
    """
    if config.kind != "binary":
        raise ConfigError(f"gen_binary needs kind='binary', got {config.kind!r}")
    rng = make_rng(seed)
    n = config.feature_dim
    direction = _random_unit(rng, n)
    mu_neg = np.zeros(n)
    mu_pos = config.separation * direction

    def draw(mu, count):
        return rng.normal(size=(count, n)) * config.noise_sigma + mu

    bags = []
    for i in range(config.bags_per_class):  # negative bags
        K = int(rng.integers(config.k_min, config.k_max + 1))
        bags.append(
            _finish_bag(rng, f"bag{i:04d}", 0, [draw(mu_neg, K)], [np.zeros(K, dtype=np.int64)])
        )
    for j in range(config.bags_per_class):  # positive bags
        K = int(rng.integers(config.k_min, config.k_max + 1))
        w = _witness_count(config, K)
        parts = [draw(mu_pos, w), draw(mu_neg, K - w)]
        latents = [np.ones(w, dtype=np.int64), np.zeros(K - w, dtype=np.int64)]
        bags.append(_finish_bag(rng, f"bag{config.bags_per_class + j:04d}", 1, parts, latents))

    return Dataset(
        name="synthetic-binary",
        feature_dim=n,
        bags=bags,
        provenance=_provenance(config, seed) | {"mu_neg": mu_neg, "mu_pos": mu_pos},
    )


def gen_subtype(config: SynthConfig, seed: int) -> Dataset:
    """Subtype-vs-subtype bags: two tumor clusters plus neutral filler.

    Cluster means form an equilateral triangle with side ``separation``
    in a random 2-D subspace: subtype A (latent label 1, bag label 1),
    subtype B (latent label 0, bag label 0) and an "other tissue" cluster
    (latent label 2) midway between them. Each bag holds witnesses of
    exactly one subtype plus neutral filler; no bag mixes subtypes.
    """
    if config.kind != "subtype":
        raise ConfigError(f"gen_subtype needs kind='subtype', got {config.kind!r}")
    rng = make_rng(seed)
    n = config.feature_dim
    u = _random_unit(rng, n)
    v = rng.normal(size=n)
    v -= (v @ u) * u
    v /= np.linalg.norm(v)
    sep = config.separation
    mu_a = np.zeros(n)
    mu_b = sep * u
    mu_other = (sep / 2.0) * u + (sep * math.sqrt(3.0) / 2.0) * v

    def draw(mu, count):
        return rng.normal(size=(count, n)) * config.noise_sigma + mu

    def subtype_bag(bag_id, bag_label, mu_witness, witness_latent):
        K = int(rng.integers(config.k_min, config.k_max + 1))
        w = _witness_count(config, K)
        parts = [draw(mu_witness, w), draw(mu_other, K - w)]
        latents = [
            np.full(w, witness_latent, dtype=np.int64),
            np.full(K - w, LATENT_OTHER, dtype=np.int64),
        ]
        return _finish_bag(rng, bag_id, bag_label, parts, latents)

    bags = []
    for i in range(config.bags_per_class):
        bags.append(subtype_bag(f"bag{i:04d}", 0, mu_b, LATENT_NEGATIVE))
    for j in range(config.bags_per_class):
        bags.append(subtype_bag(f"bag{config.bags_per_class + j:04d}", 1, mu_a, LATENT_POSITIVE))

    return Dataset(
        name="synthetic-subtype",
        feature_dim=n,
        bags=bags,
        provenance=_provenance(config, seed)
        | {"mu_a": mu_a, "mu_b": mu_b, "mu_other": mu_other},
    )


def generate(config: SynthConfig, seed: int) -> Dataset:
    return gen_binary(config, seed) if config.kind == "binary" else gen_subtype(config, seed)


def _provenance(config: SynthConfig, seed: int) -> dict:
    return {
        "kind": config.kind,
        "seed": seed,
        "bags_per_class": config.bags_per_class,
        "k_min": config.k_min,
        "k_max": config.k_max,
        "witness_rate": config.witness_rate,
        "separation": config.separation,
        "noise_sigma": config.noise_sigma,
    }


# -- splitting ----------------------------------------------------------------


def split(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified train/test split; disjoint, exhaustive, seed-deterministic."""
    if not (0.0 < test_fraction < 1.0):
        raise ConfigError(f"test fraction must be in (0, 1), got {test_fraction}")
    labels = dataset.labels()
    if labels.min() == labels.max():
        raise ConfigError("split needs both classes present")
    rng = make_rng(seed)
    test_ids: set[str] = set()
    for cls in (0, 1):
        members = [b.id for b in dataset.bags if b.label == cls]
        n_test = int(len(members) * test_fraction + 0.5)
        order = rng.permutation(len(members))
        test_ids.update(members[i] for i in order[:n_test])
    train_bags = [b for b in dataset.bags if b.id not in test_ids]
    test_bags = [b for b in dataset.bags if b.id in test_ids]
    make = lambda tag, bags: Dataset(
        name=f"{dataset.name}-{tag}",
        feature_dim=dataset.feature_dim,
        bags=bags,
        provenance=dict(dataset.provenance),
    )
    return make("train", train_bags), make("test", test_bags)
