"""On-disk formats, dataset loading/validation, synthetic worlds, checkpoints.

Feature file (little-endian, ``.bmpf``):
    magic b"BMPF" | u32 version | u32 count | u32 dim | count*dim float32

Manifest: a JSON document with the vocabularies, the pair lists per split and
one record per image row. Checkpoints use the same byte-stable discipline
(JSON header with sorted keys followed by raw arrays) so save -> load -> save
reproduces identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .concepts import PairUniverse
from .model import ModelState

FEATURE_MAGIC = b"BMPF"
FEATURE_VERSION = 1
CHECKPOINT_MAGIC = b"BMPC"
CHECKPOINT_VERSION = 1

SPLITS = ("train", "val", "test")

PAIR_LIST_KEYS = ("train_seen", "val_seen", "val_unseen", "test_seen", "test_unseen")


class DatasetError(ValueError):
    """Manifest or feature file violates a format invariant."""


class CheckpointError(ValueError):
    """Checkpoint is malformed or incompatible with its consumer."""


# ---------------------------------------------------------------------------
# feature files


def write_features(path, features):
    features = np.ascontiguousarray(features, dtype="<f4")
    if features.ndim != 2:
        raise DatasetError(f"feature array must be 2-d, got shape {features.shape}")
    count, dim = features.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, count, dim))
        fh.write(features.tobytes())


def read_features(path):
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != FEATURE_MAGIC:
        raise DatasetError(f"{path}: not a feature file (bad magic)")
    version, count, dim = struct.unpack("<III", raw[4:16])
    if version != FEATURE_VERSION:
        raise DatasetError(
            f"{path}: feature file version {version} != supported {FEATURE_VERSION}"
        )
    expected = 16 + 4 * count * dim
    if len(raw) != expected:
        raise DatasetError(
            f"{path}: expected {expected} bytes for {count}x{dim} features, got {len(raw)}"
        )
    data = np.frombuffer(raw[16:], dtype="<f4").reshape(count, dim)
    return data.copy()


def csv_to_features(csv_path, out_path):
    """Convert a plain CSV of float rows (one image per line) to a feature file."""
    rows = np.loadtxt(csv_path, delimiter=",", dtype=np.float64, ndmin=2)
    write_features(out_path, rows.astype(np.float32))
    return rows.shape


# ---------------------------------------------------------------------------
# datasets


@dataclass
class ImageRecord:
    row: int
    attr: int
    obj: int
    split: str

    @property
    def pair(self):
        return (self.attr, self.obj)


@dataclass
class TrainIndex:
    """Precomputed negative-sampling tables over the training images."""

    images: list  # ImageRecord, train split only
    pair_rows: dict  # pair -> np.ndarray of feature rows
    same_object: dict  # pair -> list of seen pairs sharing the object
    same_attribute: dict  # pair -> list of seen pairs sharing the attribute


@dataclass
class Dataset:
    """Validated, immutable bundle of a universe, features, and image records."""

    universe: PairUniverse
    features: np.ndarray
    images: list
    pair_lists: dict = field(default_factory=dict)

    _train_index: TrainIndex = field(default=None, init=False, repr=False, compare=False)

    @property
    def feature_dim(self):
        return self.features.shape[1]

    @property
    def n_images(self):
        return len(self.images)

    def split_images(self, split):
        if split not in SPLITS:
            raise DatasetError(f"unknown split {split!r}; expected one of {SPLITS}")
        return [img for img in self.images if img.split == split]

    def train_index(self):
        if self._train_index is None:
            train = self.split_images("train")
            pair_rows = {}
            for img in train:
                pair_rows.setdefault(img.pair, []).append(img.row)
            pair_rows = {p: np.asarray(rows) for p, rows in pair_rows.items()}
            trained_pairs = sorted(pair_rows)
            same_object, same_attribute = {}, {}
            for a, o in trained_pairs:
                same_object[(a, o)] = [
                    (a2, o2) for a2, o2 in trained_pairs if o2 == o and a2 != a
                ]
                same_attribute[(a, o)] = [
                    (a2, o2) for a2, o2 in trained_pairs if a2 == a and o2 != o
                ]
            self._train_index = TrainIndex(
                images=train,
                pair_rows=pair_rows,
                same_object=same_object,
                same_attribute=same_attribute,
            )
        return self._train_index

    def manifest_dict(self):
        return {
            "attributes": list(self.universe.attributes),
            "objects": list(self.universe.objects),
            "pairs": {key: [list(p) for p in self.pair_lists[key]] for key in PAIR_LIST_KEYS},
            "images": [
                {"row": img.row, "pair": [img.attr, img.obj], "split": img.split}
                for img in self.images
            ],
        }

    def save(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest_path = out_dir / "manifest.json"
        features_path = out_dir / "features.bmpf"
        manifest_path.write_text(
            json.dumps(self.manifest_dict(), sort_keys=True, indent=2) + "\n"
        )
        write_features(features_path, self.features)
        return manifest_path, features_path


def _pairs_from(manifest, key):
    try:
        raw = manifest["pairs"][key]
    except KeyError:
        raise DatasetError(f"manifest missing pair list {key!r}") from None
    return [tuple(int(v) for v in p) for p in raw]


def load_dataset(manifest_path, features_path):
    """Load and validate a dataset; any violated invariant is a DatasetError."""
    try:
        manifest = json.loads(Path(manifest_path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise DatasetError(f"{manifest_path}: cannot parse manifest ({err})") from err
    features = read_features(features_path)

    expected_keys = {"attributes", "objects", "pairs", "images"}
    unknown = set(manifest) - expected_keys
    if unknown:
        raise DatasetError(f"manifest has unknown keys {sorted(unknown)}")
    missing = expected_keys - set(manifest)
    if missing:
        raise DatasetError(f"manifest missing keys {sorted(missing)}")

    attributes = list(manifest["attributes"])
    objects = list(manifest["objects"])
    pair_lists = {key: _pairs_from(manifest, key) for key in PAIR_LIST_KEYS}

    n_a, n_o = len(attributes), len(objects)
    for key, pairs in pair_lists.items():
        for a, o in pairs:
            if not (0 <= a < n_a and 0 <= o < n_o):
                raise DatasetError(
                    f"pair ({a}, {o}) in {key} references an unknown concept id"
                )

    seen = pair_lists["train_seen"]
    seen_set = set(seen)
    unseen = []
    unseen_set = set()
    for key in ("val_unseen", "test_unseen"):
        for pair in pair_lists[key]:
            if pair in seen_set:
                raise DatasetError(
                    f"pair {pair} appears in both train_seen and {key} (split leak)"
                )
            if pair not in unseen_set:
                unseen_set.add(pair)
                unseen.append(pair)
    for key in ("val_seen", "test_seen"):
        for pair in pair_lists[key]:
            if pair not in seen_set:
                raise DatasetError(f"pair {pair} in {key} is not in train_seen")

    universe = PairUniverse(
        attributes=attributes, objects=objects, seen_pairs=seen, unseen_pairs=unseen
    )

    raw_images = manifest["images"]
    if len(raw_images) != features.shape[0]:
        raise DatasetError(
            f"manifest lists {len(raw_images)} images but feature file holds "
            f"{features.shape[0]} rows"
        )
    allowed = {
        "train": set(pair_lists["train_seen"]),
        "val": set(pair_lists["val_seen"]) | set(pair_lists["val_unseen"]),
        "test": set(pair_lists["test_seen"]) | set(pair_lists["test_unseen"]),
    }
    images = []
    for i, rec in enumerate(raw_images):
        try:
            row = int(rec["row"])
            a, o = (int(v) for v in rec["pair"])
            split = rec["split"]
        except (KeyError, TypeError, ValueError):
            raise DatasetError(f"image record {i} is malformed: {rec!r}") from None
        if split not in SPLITS:
            raise DatasetError(f"image record {i} has unknown split {split!r}")
        if not 0 <= row < features.shape[0]:
            raise DatasetError(f"image record {i} row {row} outside feature file")
        if (a, o) not in allowed[split]:
            raise DatasetError(
                f"image record {i} labels pair ({a}, {o}) absent from the {split} pair lists"
            )
        images.append(ImageRecord(row=row, attr=a, obj=o, split=split))

    if not np.isfinite(features).all():
        raise DatasetError("feature file contains non-finite values")

    return Dataset(universe=universe, features=features, images=images, pair_lists=pair_lists)


# ---------------------------------------------------------------------------
# synthetic worlds


@dataclass
class SyntheticWorldConfig:
    """Compositional toy world whose image features factor through primitives."""

    n_attributes: int = 8
    n_objects: int = 8
    dim: int = 64
    unseen_fraction: float = 0.25
    images_per_pair: int = 20
    noise: float = 0.1
    seed: int = 0

    def validate(self):
        if self.n_attributes < 1 or self.n_objects < 1:
            raise DatasetError("n_attributes and n_objects must be positive")
        if not 0.0 <= self.unseen_fraction < 1.0:
            raise DatasetError(
                f"unseen_fraction must be in [0, 1), got {self.unseen_fraction}"
            )
        if self.images_per_pair < 1:
            raise DatasetError("images_per_pair must be positive")
        if self.dim < 1:
            raise DatasetError("dim must be positive")
        if self.noise < 0:
            raise DatasetError("noise must be non-negative")


def _choose_unseen(pairs, n_attrs, n_objects, target, rng):
    """Pick unseen pairs while keeping every primitive in at least one seen pair."""
    attr_count = np.zeros(n_attrs, dtype=int)
    obj_count = np.zeros(n_objects, dtype=int)
    for a, o in pairs:
        attr_count[a] += 1
        obj_count[o] += 1
    for _ in range(50):
        order = list(pairs)
        rng.shuffle(order)
        chosen = []
        ac, oc = attr_count.copy(), obj_count.copy()
        for a, o in order:
            if len(chosen) == target:
                break
            if ac[a] >= 2 and oc[o] >= 2:
                chosen.append((a, o))
                ac[a] -= 1
                oc[o] -= 1
        if len(chosen) == target:
            return chosen
    raise DatasetError(
        f"cannot pick {target} unseen pairs while keeping every primitive seen"
    )


def generate_synthetic(config):
    """Deterministic toy dataset: features = tanh(mix(e_attr, e_obj)) + noise."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    n_a, n_o, dim = config.n_attributes, config.n_objects, config.dim

    e_attr = rng.normal(0.0, 1.0 / np.sqrt(dim), (n_a, dim))
    e_obj = rng.normal(0.0, 1.0 / np.sqrt(dim), (n_o, dim))
    mixer = rng.normal(0.0, 1.0 / np.sqrt(2 * dim), (2 * dim, dim))

    all_pairs = [(a, o) for a in range(n_a) for o in range(n_o)]
    target_unseen = int(round(config.unseen_fraction * len(all_pairs)))
    if target_unseen > len(all_pairs) - max(n_a, n_o):
        raise DatasetError(
            f"unseen_fraction {config.unseen_fraction} leaves too few seen pairs "
            f"to cover every primitive"
        )
    unseen = _choose_unseen(all_pairs, n_a, n_o, target_unseen, rng) if target_unseen else []
    unseen_set = set(unseen)
    seen = [p for p in all_pairs if p not in unseen_set]

    n_train = max(1, int(round(config.images_per_pair * 0.6)))
    n_val = max(0 if config.images_per_pair < 3 else 1,
                (config.images_per_pair - n_train) // 2)
    features = []
    images = []
    pair_lists = {key: [] for key in PAIR_LIST_KEYS}
    pair_lists["train_seen"] = list(seen)
    pair_lists["val_seen"] = list(seen)
    pair_lists["test_seen"] = list(seen)
    pair_lists["val_unseen"] = list(unseen)
    pair_lists["test_unseen"] = list(unseen)

    def emit(pair, split_plan):
        a, o = pair
        base = np.tanh(np.concatenate([e_attr[a], e_obj[o]]) @ mixer)
        for split, count in split_plan:
            for _ in range(count):
                noise = rng.normal(0.0, config.noise, dim) if config.noise > 0 else 0.0
                features.append((base + noise).astype(np.float32))
                images.append(ImageRecord(row=len(features) - 1, attr=a, obj=o, split=split))

    for pair in seen:
        n_test = config.images_per_pair - n_train - n_val
        emit(pair, [("train", n_train), ("val", n_val), ("test", n_test)])
    for pair in unseen:
        n_val_u = config.images_per_pair // 2
        emit(pair, [("val", n_val_u), ("test", config.images_per_pair - n_val_u)])

    universe = PairUniverse(
        attributes=[f"attr_{i}" for i in range(n_a)],
        objects=[f"obj_{i}" for i in range(n_o)],
        seen_pairs=seen,
        unseen_pairs=unseen,
    )
    return Dataset(
        universe=universe,
        features=np.stack(features),
        images=images,
        pair_lists=pair_lists,
    )


# ---------------------------------------------------------------------------
# checkpoints


def _encode_arrays(named_arrays):
    manifest = []
    blobs = []
    for name, arr in named_arrays:
        arr = np.ascontiguousarray(arr)
        manifest.append({
            "name": name,
            "dtype": str(arr.dtype),
            "shape": list(arr.shape),
        })
        blobs.append(arr.tobytes())
    return manifest, b"".join(blobs)


def save_checkpoint(path, model, optimizer=None, rng=None, train_config=None, epoch=0):
    """Serialize parameters, optimizer slots, RNG state, and config to one file."""
    named = [(name, t.data) for name, t in model.parameters()]
    if optimizer is not None:
        named += [(f"adam.m.{name}", arr) for name, arr in sorted(optimizer.m.items())]
        named += [(f"adam.v.{name}", arr) for name, arr in sorted(optimizer.v.items())]
    arrays_manifest, payload = _encode_arrays(named)

    header = {
        "format_version": CHECKPOINT_VERSION,
        "dtype": model.dtype,
        "d_in": model.d_in,
        "dim": model.dim,
        "blocking": model.blocking,
        "use_residue": model.use_residue,
        "conditioned_residue": model.visual.condition is not None,
        "universe": model.universe.to_dict(),
        "epoch": int(epoch),
        "train_config": dict(train_config) if train_config is not None else None,
        "optimizer": (
            {"lr": optimizer.lr, "beta1": optimizer.beta1, "beta2": optimizer.beta2,
             "eps": optimizer.eps, "t": optimizer.t}
            if optimizer is not None else None
        ),
        "rng_state": _rng_state_to_json(rng) if rng is not None else None,
        "arrays": arrays_manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)


def _rng_state_to_json(rng):
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=int))


def restore_rng(state):
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


@dataclass
class CheckpointBundle:
    model: ModelState
    epoch: int
    train_config: dict
    rng_state: dict
    optimizer_state: dict  # {"hyper": {...}, "m": {...}, "v": {...}} or None


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, header_len = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {version} != supported {CHECKPOINT_VERSION}"
        )
    header = json.loads(raw[12 : 12 + header_len].decode())
    offset = 12 + header_len
    arrays = {}
    for spec in header["arrays"]:
        dtype = np.dtype(spec["dtype"])
        shape = tuple(spec["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        chunk = raw[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated array payload at {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(chunk, dtype=dtype).reshape(shape).copy()
        offset += nbytes

    universe = PairUniverse.from_dict(header["universe"])
    model = ModelState.init(
        universe=universe,
        d_in=header["d_in"],
        dim=header["dim"],
        rng=np.random.default_rng(0),
        dtype=header["dtype"],
        blocking=header["blocking"],
        use_residue=header["use_residue"],
        conditioned_residue=header["conditioned_residue"],
    )
    try:
        model.load_arrays(arrays)
    except (KeyError, ValueError) as err:
        raise CheckpointError(
            f"{path}: parameter arrays do not match the stored vocabulary ({err})"
        ) from err

    optimizer_state = None
    if header["optimizer"] is not None:
        m = {k[len("adam.m."):]: v for k, v in arrays.items() if k.startswith("adam.m.")}
        v = {k[len("adam.v."):]: v for k, v in arrays.items() if k.startswith("adam.v.")}
        optimizer_state = {"hyper": header["optimizer"], "m": m, "v": v}

    return CheckpointBundle(
        model=model,
        epoch=header["epoch"],
        train_config=header["train_config"],
        rng_state=header["rng_state"],
        optimizer_state=optimizer_state,
    )
