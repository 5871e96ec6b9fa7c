"""Training-pair construction from noisy sources, with regenerable provenance.

Pairs are never stored as pixels: each corrupted copy is a pure function of
(master seed, source id, copy index), so a PairSet keeps only its sources
and an index of (source, input copy, target copy) entries and rebuilds any
pair bit-identically on demand.

Two pairing modes:
  n2n_pair   - both input and target are independent corruptions of the
               same source; all ordered pairs of the copies are emitted.
  nac_target - the input is a corruption, the target is the uncorrupted
               source itself.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .errors import ConfigError, ShapeError
from .imaging import ImageGrid, load_image
from .noise import NoiseSpec, corrupt, rng_from_seed, stream_for, stream_key

PAIR_MODES = ("n2n_pair", "nac_target")

# Copy index reserved for the simulated observed-noise layer; never used for
# training-pair corruption copies.
OBSERVED_COPY = 2**31


class Pair(NamedTuple):
    input: ImageGrid
    target: ImageGrid
    source_id: str
    input_seed: tuple[int, ...]
    target_seed: tuple[int, ...] | None


@dataclass(frozen=True)
class PairEntry:
    source_index: int
    input_copy: int
    target_copy: int | None  # None in nac_target mode


class PairSet:
    """Indexed, lazily materialized collection of (input, target) pairs."""

    def __init__(
        self,
        sources: list[ImageGrid],
        spec: NoiseSpec,
        mode: str,
        copies: int,
        master_seed: int,
        entries: list[PairEntry],
        epoch_salt: int = 0,
    ):
        self.sources = list(sources)
        self.spec = spec
        self.mode = mode
        self.copies = copies
        self.master_seed = int(master_seed)
        self.entries = list(entries)
        # Nonzero only when the trainer resamples noise per epoch.
        self.epoch_salt = int(epoch_salt)

    def __len__(self) -> int:
        return len(self.entries)

    def corruption(self, source_index: int, copy: int) -> ImageGrid:
        """Regenerate one corrupted copy of a source, bit-identically."""
        src = self.sources[source_index]
        rng = stream_for(self.master_seed + self.epoch_salt, src.id, copy)
        return corrupt(src, self.spec, rng)

    def pair(self, i: int) -> Pair:
        entry = self.entries[i]
        src = self.sources[entry.source_index]
        seed = self.master_seed + self.epoch_salt
        inp = self.corruption(entry.source_index, entry.input_copy)
        input_seed = stream_key(seed, src.id, entry.input_copy)
        if entry.target_copy is None:
            return Pair(inp, src, src.id, input_seed, None)
        tgt = self.corruption(entry.source_index, entry.target_copy)
        return Pair(inp, tgt, src.id, input_seed, stream_key(seed, src.id, entry.target_copy))

    def __iter__(self) -> Iterator[Pair]:
        for i in range(len(self)):
            yield self.pair(i)

    def pairs(self) -> list[Pair]:
        """Materialize every pair; intended for small desk-scale sets."""
        return [self.pair(i) for i in range(len(self))]

    def with_epoch_salt(self, salt: int) -> "PairSet":
        return PairSet(
            self.sources, self.spec, self.mode, self.copies, self.master_seed,
            self.entries, epoch_salt=salt,
        )

    def provenance(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "mode": self.mode,
            "copies": self.copies,
            "master_seed": self.master_seed,
        }


def build_pairs(
    images: list[ImageGrid],
    spec: NoiseSpec,
    copies: int = 2,
    mode: str = "n2n_pair",
    master_seed: int = 0,
) -> PairSet:
    """Index all training pairs for the given sources.

    n2n_pair emits every ordered pair of the `copies` corruptions of each
    source (copies * (copies - 1) pairs per source); nac_target emits
    (corruption, source) once per copy.
    """
    if mode not in PAIR_MODES:
        raise ConfigError(f"unknown pairing mode '{mode}'")
    if mode == "n2n_pair" and copies < 2:
        raise ConfigError(f"n2n_pair mode needs copies >= 2, got {copies}")
    if copies < 1:
        raise ConfigError(f"copies must be >= 1, got {copies}")
    entries: list[PairEntry] = []
    for s in range(len(images)):
        if mode == "n2n_pair":
            for a in range(copies):
                for b in range(copies):
                    if a != b:
                        entries.append(PairEntry(s, a, b))
        else:
            for a in range(copies):
                entries.append(PairEntry(s, a, None))
    return PairSet(images, spec, mode, copies, master_seed, entries)


def split(
    images: list[ImageGrid], train_fraction: float, master_seed: int
) -> tuple[list[str], list[str]]:
    """Deterministic train/test split of image ids, grouped when tagged.

    Images carrying a group tag are kept together; the shuffle and the cut
    both happen at group level. Both partitions must end up nonempty.
    """
    if not 0 < train_fraction < 1:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    groups: dict[str, list[str]] = {}
    for img in images:
        key = img.group if img.group is not None else img.id
        groups.setdefault(key, []).append(img.id)
    keys = sorted(groups)
    rng = rng_from_seed(master_seed, 0x5B117)
    order = [keys[i] for i in rng.permutation(len(keys))]
    n_train = int(np.floor(train_fraction * len(order) + 0.5))
    if n_train < 1 or n_train >= len(order):
        raise ConfigError(
            f"train_fraction {train_fraction} cannot split {len(order)} group(s) "
            "into two nonempty partitions"
        )
    train_ids = [i for k in order[:n_train] for i in groups[k]]
    test_ids = [i for k in order[n_train:] for i in groups[k]]
    return train_ids, test_ids


def extract_patches(img: ImageGrid, size: int, stride: int) -> list[ImageGrid]:
    """Row-major sliding-window crops; patch ids encode source id and offset."""
    h, w = img.shape
    if size > min(h, w):
        raise ShapeError(f"patch size {size} exceeds image {h}x{w}")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    patches = []
    for y in range(0, h - size + 1, stride):
        for x in range(0, w - size + 1, stride):
            patch = img.pixels[y : y + size, x : x + size]
            patches.append(
                ImageGrid(patch.copy(), img.value_range, f"{img.id}+y{y}x{x}", img.group)
            )
    return patches


def save_manifest(pairset: PairSet, path, source_paths: dict[str, str]) -> None:
    """Write the pixel-free JSON manifest from which a PairSet regenerates."""
    sources = []
    for img in pairset.sources:
        if img.id not in source_paths:
            raise ConfigError(f"no source path recorded for image '{img.id}'")
        sources.append({"path": str(source_paths[img.id]), "id": img.id, "group": img.group})
    manifest = dict(pairset.provenance(), sources=sources)
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_manifest(path) -> PairSet:
    """Rebuild a PairSet from its manifest; pairs come back bit-identical."""
    manifest = json.loads(Path(path).read_text())
    base = Path(path).parent
    images = []
    for entry in manifest["sources"]:
        src_path = Path(entry["path"])
        if not src_path.is_absolute():
            src_path = base / src_path
        img = load_image(src_path, id=entry["id"])
        if entry.get("group"):
            img = ImageGrid(img.pixels, img.value_range, img.id, entry["group"])
        images.append(img)
    return build_pairs(
        images,
        NoiseSpec.from_dict(manifest["spec"]),
        copies=int(manifest["copies"]),
        mode=manifest["mode"],
        master_seed=int(manifest["master_seed"]),
    )
