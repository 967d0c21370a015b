"""Slice datasets, synthetic data, perturbations, semi-supervised batching.

On disk a dataset is a directory of grayscale PNG slices plus a
manifest:

    root/
      images/<id>.png     8- or 16-bit grayscale
      masks/<id>.png      class indices, required for labeled slices
      manifest.tsv        columns: id, split, labeled

Images are min-max normalized per slice at load time. All randomness in
this module flows through numpy Generators so that sampling and
perturbation streams can be checkpointed and restored exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

VALID_SPLITS = ("train", "val", "test")


@dataclass
class SliceSample:
    """One 2D slice: image [1, H, W] in [0, 1], mask [H, W] or None."""

    sample_id: str
    image: np.ndarray
    mask: np.ndarray | None
    split: str
    labeled: bool


@dataclass
class DatasetSplits:
    """Slices grouped the way the trainer consumes them."""

    root: Path
    train_labeled: list[SliceSample]
    train_unlabeled: list[SliceSample]
    val: list[SliceSample]
    test: list[SliceSample]

    def summary(self) -> str:
        return (
            f"{len(self.train_labeled)} labeled / "
            f"{len(self.train_unlabeled)} unlabeled train, "
            f"{len(self.val)} val, {len(self.test)} test"
        )


class DatasetError(ValueError):
    """Manifest or slice files violate the dataset contract."""


def _normalize(raw: np.ndarray) -> np.ndarray:
    # Per-slice min-max to [0, 1]; a constant slice maps to zeros.
    raw = raw.astype(np.float32)
    lo, hi = float(raw.min()), float(raw.max())
    if hi > lo:
        raw = (raw - lo) / (hi - lo)
    else:
        raw = np.zeros_like(raw)
    return raw[None, :, :]


def _read_image(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.ndim != 2:
        raise DatasetError(f"{path} is not single-channel grayscale")
    return _normalize(arr)


def _read_mask(path: Path, expected_classes: int | None) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.ndim != 2:
        raise DatasetError(f"{path} is not a single-channel index mask")
    arr = arr.astype(np.int64)
    if arr.min() < 0:
        raise DatasetError(f"{path} contains negative class indices")
    if expected_classes is not None and arr.max() >= expected_classes:
        raise DatasetError(
            f"{path} contains class {int(arr.max())} but only "
            f"{expected_classes} classes are expected"
        )
    return arr


def load_dataset(root: str | Path, expected_classes: int | None = None) -> DatasetSplits:
    """Read a manifest dataset into memory, grouped by split.

    Masks are loaded for labeled training slices and for all val/test
    slices; a mask file that happens to exist for an unlabeled slice is
    deliberately ignored so it cannot leak into training.
    """
    root = Path(root)
    manifest = root / "manifest.tsv"
    if not manifest.is_file():
        raise DatasetError(f"manifest not found: {manifest}")

    rows: list[tuple[str, str, bool]] = []
    seen: set[str] = set()
    with open(manifest, newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        required = {"id", "split", "labeled"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise DatasetError(
                f"manifest must have columns id/split/labeled, got {reader.fieldnames}"
            )
        for line_no, row in enumerate(reader, start=2):
            sid, split, labeled = row["id"], row["split"], row["labeled"]
            if split not in VALID_SPLITS:
                raise DatasetError(f"{manifest}:{line_no}: unknown split {split!r}")
            if labeled not in ("0", "1"):
                raise DatasetError(f"{manifest}:{line_no}: labeled must be 0 or 1")
            if sid in seen:
                raise DatasetError(f"{manifest}:{line_no}: duplicate id {sid!r}")
            seen.add(sid)
            rows.append((sid, split, labeled == "1"))

    if not rows:
        raise DatasetError(f"{manifest} lists no slices")
    rows.sort(key=lambda r: r[0])  # deterministic order regardless of file order

    splits = DatasetSplits(root, [], [], [], [])
    for sid, split, labeled in rows:
        image_path = root / "images" / f"{sid}.png"
        if not image_path.is_file():
            raise DatasetError(f"missing image for id {sid!r}: {image_path}")
        needs_mask = labeled or split in ("val", "test")
        mask = None
        if needs_mask:
            mask_path = root / "masks" / f"{sid}.png"
            if not mask_path.is_file():
                raise DatasetError(f"missing mask for id {sid!r}: {mask_path}")
            mask = _read_mask(mask_path, expected_classes)
        image = _read_image(image_path)
        if mask is not None and mask.shape != image.shape[1:]:
            raise DatasetError(
                f"id {sid!r}: mask shape {mask.shape} does not match "
                f"image {image.shape[1:]}"
            )
        sample = SliceSample(sid, image, mask, split, labeled)
        if split == "train" and labeled:
            splits.train_labeled.append(sample)
        elif split == "train":
            splits.train_unlabeled.append(sample)
        elif split == "val":
            splits.val.append(sample)
        else:
            splits.test.append(sample)
    return splits


# ---------------------------------------------------------------------------
# Synthetic data


@dataclass
class SynthSummary:
    root: Path
    count: int
    side: int
    train_labeled: int
    train_unlabeled: int
    val: int
    test: int


def _ellipse(yy, xx, cy, cx, ry, rx, angle):
    dy, dx = yy - cy, xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u = ca * dx + sa * dy
    v = -sa * dx + ca * dy
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _draw_synthetic_slice(side: int, rng: np.random.Generator):
    """One pseudo-cardiac slice: bright inner disk, dark ring, lateral blob.

    Appearance varies widely on purpose: structure intensities are drawn
    from overlapping ranges, a smooth texture field and a bias field sit
    on top, and distractor shapes mimic the real structures. A handful
    of labeled examples underdetermines the task; shape context does
    not.
    """
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float32)
    s = float(side)

    cy = s / 2 + rng.uniform(-0.12, 0.12) * s
    cx = s / 2 + rng.uniform(-0.12, 0.12) * s
    outer_r = rng.uniform(0.15, 0.28) * s
    wall = rng.uniform(0.04, 0.09) * s
    inner_r = max(outer_r - wall, 2.0)

    dist2 = (yy - cy) ** 2 + (xx - cx) ** 2
    lv = dist2 <= inner_r ** 2
    myo = (dist2 <= outer_r ** 2) & ~lv

    blob_r = rng.uniform(0.09, 0.17) * s
    phi = rng.uniform(0.0, 2.0 * np.pi)
    reach = outer_r + 0.6 * blob_r
    by = float(np.clip(cy + reach * np.sin(phi), 0.1 * s, 0.9 * s))
    bx = float(np.clip(cx + reach * np.cos(phi), 0.1 * s, 0.9 * s))
    squash = rng.uniform(0.6, 1.0)
    tilt = rng.uniform(0.0, np.pi)
    rv = _ellipse(yy, xx, by, bx, blob_r, blob_r * squash, tilt) & ~lv & ~myo

    mask = np.zeros((side, side), dtype=np.uint8)
    mask[rv] = 1
    mask[myo] = 2
    mask[lv] = 3

    # overlapping intensity ranges: no threshold separates the classes
    image = np.full((side, side), rng.uniform(0.05, 0.30), dtype=np.float32)
    image[rv] = rng.uniform(0.35, 0.80)
    image[myo] = rng.uniform(0.15, 0.50)
    image[lv] = rng.uniform(0.50, 0.95)

    for _ in range(int(rng.integers(0, 4))):  # structure-mimicking distractors
        dcy, dcx = rng.uniform(0.1, 0.9, size=2) * s
        if rng.random() < 0.5:  # bright disk, an inner-chamber lookalike
            dr = rng.uniform(0.04, 0.12) * s
            blob = _ellipse(yy, xx, dcy, dcx, dr, dr * rng.uniform(0.6, 1.0), rng.uniform(0, np.pi))
            shade = rng.uniform(0.4, 0.95)
        else:  # annulus, a ring lookalike
            d_out = rng.uniform(0.08, 0.18) * s
            d_in = max(d_out - rng.uniform(0.03, 0.07) * s, 1.0)
            dd = (yy - dcy) ** 2 + (xx - dcx) ** 2
            blob = (dd <= d_out ** 2) & (dd > d_in ** 2)
            shade = rng.uniform(0.15, 0.50)
        image[blob & (mask == 0)] = shade

    # smooth texture so structures are not flat patches
    fy, fx = rng.uniform(0.5, 2.5, size=2)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    amp = rng.uniform(0.04, 0.12)
    image = image + amp * np.sin(2 * np.pi * (fy * yy + fx * xx) / s + phase)

    gx, gy, gr = rng.uniform(-0.25, 0.25, size=3)
    u, v = xx / s - 0.5, yy / s - 0.5
    image = image + gx * u + gy * v + gr * (u ** 2 + v ** 2)
    image = image + rng.normal(0.0, rng.uniform(0.02, 0.05), size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    return image, mask


def generate_synthetic(
    out_dir: str | Path,
    count: int = 200,
    side: int = 64,
    seed: int = 0,
    labeled_fraction: float = 0.1,
    split_fractions: tuple[float, float, float] = (0.7, 0.1, 0.2),
) -> SynthSummary:
    """Write a synthetic manifest dataset; fully determined by the seed."""
    if count < 10:
        raise ValueError(f"need at least 10 slices to populate all splits, got {count}")
    if side < 16:
        raise ValueError(f"side must be at least 16, got {side}")
    if not 0.0 < labeled_fraction <= 1.0:
        raise ValueError(f"labeled_fraction must lie in (0, 1], got {labeled_fraction}")
    if abs(sum(split_fractions) - 1.0) > 1e-9 or min(split_fractions) <= 0:
        raise ValueError(f"split fractions must be positive and sum to 1, got {split_fractions}")

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    n_train = int(round(count * split_fractions[0]))
    n_val = max(int(round(count * split_fractions[1])), 1)
    n_test = count - n_train - n_val
    n_labeled = max(int(round(n_train * labeled_fraction)), 1)

    order = rng.permutation(count)
    split_of = {}
    labeled_of = {}
    for rank, idx in enumerate(order):
        if rank < n_train:
            split_of[idx] = "train"
            labeled_of[idx] = rank < n_labeled
        elif rank < n_train + n_val:
            split_of[idx] = "val"
            labeled_of[idx] = True
        else:
            split_of[idx] = "test"
            labeled_of[idx] = True

    rows = []
    for i in range(count):
        image, mask = _draw_synthetic_slice(side, rng)
        sid = f"synth_{i:04d}"
        Image.fromarray((image * 255).round().astype(np.uint8), mode="L").save(
            out / "images" / f"{sid}.png"
        )
        Image.fromarray(mask, mode="L").save(out / "masks" / f"{sid}.png")
        rows.append((sid, split_of[i], "1" if labeled_of[i] else "0"))

    with open(out / "manifest.tsv", "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(["id", "split", "labeled"])
        writer.writerows(rows)

    return SynthSummary(
        root=out,
        count=count,
        side=side,
        train_labeled=sum(1 for r in rows if r[1] == "train" and r[2] == "1"),
        train_unlabeled=sum(1 for r in rows if r[1] == "train" and r[2] == "0"),
        val=sum(1 for r in rows if r[1] == "val"),
        test=sum(1 for r in rows if r[1] == "test"),
    )


# ---------------------------------------------------------------------------
# Perturbations


@dataclass(frozen=True)
class Perturbation:
    """Stochastic input transform: flip, quarter-turn rotation, noise."""

    noise_sigma: float = 0.1
    flip_prob: float = 0.5
    rotations: tuple[int, ...] = (0, 90, 180, 270)

    def __post_init__(self) -> None:
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must lie in [0, 1]")
        if any(r % 90 != 0 for r in self.rotations):
            raise ValueError(f"rotations must be multiples of 90, got {self.rotations}")


@dataclass(frozen=True)
class GeometricDraw:
    """A realized geometric transform, shareable across views and masks."""

    flip: bool
    quarter_turns: int


def sample_geometry(p: Perturbation, rng: np.random.Generator) -> GeometricDraw:
    """Draw the geometric half of a perturbation.

    Always consumes one uniform for the flip and, when any rotations are
    configured, one choice for the angle. The fixed consumption pattern
    is what keeps restored RNG streams aligned.
    """
    flip = bool(rng.random() < p.flip_prob)
    turns = 0
    if p.rotations:
        turns = (int(rng.choice(np.asarray(p.rotations))) // 90) % 4
    return GeometricDraw(flip=flip, quarter_turns=turns)


def apply_geometry(arr: np.ndarray, g: GeometricDraw) -> np.ndarray:
    """Apply a geometric draw over the trailing two (spatial) axes."""
    if g.flip:
        arr = np.flip(arr, axis=-1)
    if g.quarter_turns:
        arr = np.rot90(arr, g.quarter_turns, axes=(-2, -1))
    return np.ascontiguousarray(arr)


def add_noise(image: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Additive Gaussian noise, clipped back to [0, 1]."""
    if sigma == 0:
        return image.copy()
    noisy = image + rng.normal(0.0, sigma, size=image.shape)
    return np.clip(noisy, 0.0, 1.0).astype(np.float32)


def perturb(image: np.ndarray, p: Perturbation, rng: np.random.Generator) -> np.ndarray:
    """Full single-view perturbation: flip, then rotate, then noise."""
    return add_noise(apply_geometry(image, sample_geometry(p, rng)), p.noise_sigma, rng)


# ---------------------------------------------------------------------------
# Semi-supervised batching


@dataclass
class SemiBatch:
    """One training batch: labeled slices first, then unlabeled."""

    labeled: list[SliceSample]
    unlabeled: list[SliceSample]


class _PoolCycler:
    """Endless shuffled walk over index range [0, size)."""

    def __init__(self, size: int):
        self.size = size
        self.order: list[int] = []
        self.pos = 0

    def draw(self, n: int, rng: np.random.Generator) -> list[int]:
        out: list[int] = []
        while len(out) < n:
            if self.pos >= len(self.order):
                self.order = [int(i) for i in rng.permutation(self.size)]
                self.pos = 0
            take = min(n - len(out), len(self.order) - self.pos)
            out.extend(self.order[self.pos : self.pos + take])
            self.pos += take
        return out

    def state(self) -> dict:
        return {"size": self.size, "order": list(self.order), "pos": self.pos}

    def restore(self, state: dict) -> None:
        if state["size"] != self.size:
            raise ValueError(
                f"sampler state is for a pool of {state['size']}, have {self.size}"
            )
        self.order = list(state["order"])
        self.pos = state["pos"]


class SemiBatchSampler:
    """Draws fixed-composition batches from independent labeled/unlabeled pools.

    Each pool is an independently reshuffled cycle, so the (smaller)
    labeled pool simply repeats more often. State can be captured and
    restored mid-stream for exact training resumption.
    """

    def __init__(
        self,
        labeled: list[SliceSample],
        unlabeled: list[SliceSample],
        labeled_per_batch: int,
        unlabeled_per_batch: int,
        seed: int | np.random.SeedSequence = 0,
        cycle: bool = True,
    ):
        if labeled_per_batch < 1:
            raise ValueError("labeled_per_batch must be at least 1")
        if unlabeled_per_batch < 0:
            raise ValueError("unlabeled_per_batch must be non-negative")
        if not labeled:
            raise ValueError("labeled pool is empty")
        if unlabeled_per_batch > 0 and not unlabeled:
            raise ValueError("unlabeled pool is empty but an unlabeled quota was requested")
        if not cycle:
            if labeled_per_batch > len(labeled):
                raise ValueError(
                    f"labeled quota {labeled_per_batch} exceeds pool size "
                    f"{len(labeled)} and cycling is disabled"
                )
            if unlabeled_per_batch > len(unlabeled):
                raise ValueError(
                    f"unlabeled quota {unlabeled_per_batch} exceeds pool size "
                    f"{len(unlabeled)} and cycling is disabled"
                )
        self.labeled = labeled
        self.unlabeled = unlabeled
        self.labeled_per_batch = labeled_per_batch
        self.unlabeled_per_batch = unlabeled_per_batch
        self.rng = np.random.default_rng(seed)
        self._labeled_cycle = _PoolCycler(len(labeled))
        self._unlabeled_cycle = _PoolCycler(len(unlabeled))

    def next_batch(self) -> SemiBatch:
        lab_idx = self._labeled_cycle.draw(self.labeled_per_batch, self.rng)
        unl_idx = []
        if self.unlabeled_per_batch:
            unl_idx = self._unlabeled_cycle.draw(self.unlabeled_per_batch, self.rng)
        return SemiBatch(
            labeled=[self.labeled[i] for i in lab_idx],
            unlabeled=[self.unlabeled[i] for i in unl_idx],
        )

    def state(self) -> dict:
        return {
            "rng": self.rng.bit_generator.state,
            "labeled": self._labeled_cycle.state(),
            "unlabeled": self._unlabeled_cycle.state(),
        }

    def restore(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
        self._labeled_cycle.restore(state["labeled"])
        self._unlabeled_cycle.restore(state["unlabeled"])
