"""Dataset handling: captioned images, deterministic augmentation, synthetic
desk-scale dataset generation, on-disk layout, and matched/mismatched batch
sampling.

Images are H x W x 3 float32 arrays with pixel values in [-1, 1]. Every image
carries one or more precomputed caption-embedding vectors plus an integer
class label. Datasets are immutable after construction; batch sampling takes
an explicit numpy random generator so callers may run parallel samplers with
partitioned streams.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

EMBEDDING_FILE_MAGIC = b"CEMB"
EMBEDDING_FILE_NAME = "embeddings.bin"
MANIFEST_FILE_NAME = "manifest.txt"

# 48 crop offsets x 2 flip states
AUGMENT_VARIANTS = 96
CROP_VARIANTS = 48
CROP_MARGIN_FRACTION = 0.125

SHAPE_NAMES = ("square", "disk", "triangle", "cross", "ring", "diamond")
# RGB anchors in [-1, 1]
COLOR_ANCHORS = (
    (1.0, -1.0, -1.0),
    (-1.0, 1.0, -1.0),
    (-1.0, -1.0, 1.0),
    (1.0, 1.0, -1.0),
    (1.0, -1.0, 1.0),
    (-1.0, 1.0, 1.0),
    (1.0, 1.0, 1.0),
    (1.0, 0.0, -1.0),
)
MAX_SYNTHETIC_CLASSES = len(SHAPE_NAMES) * len(COLOR_ANCHORS)


@dataclass(frozen=True)
class CaptionedImage:
    """One image with its caption embeddings and class label."""

    pixels: np.ndarray
    embeddings: tuple
    class_id: int

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"pixels must be HxWx3, got shape {px.shape}")
        if px.min() < -1.0 or px.max() > 1.0:
            raise ValueError("pixel values must lie in [-1, 1]")
        if len(self.embeddings) == 0:
            raise ValueError("embeddings list must be non-empty")
        dims = {e.shape for e in self.embeddings}
        if len(dims) != 1 or len(next(iter(dims))) != 1:
            raise ValueError("all embeddings must be vectors of one shared dimension")
        if self.class_id < 0:
            raise ValueError("class_id must be >= 0")

    @property
    def embedding_dim(self) -> int:
        return self.embeddings[0].shape[0]


@dataclass(frozen=True)
class DatasetManifest:
    """Declarative description of one dataset split on disk."""

    root: Path
    split: str
    image_size: int
    embedding_dim: int
    class_ids: frozenset

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")
        if self.image_size <= 0 or self.embedding_dim <= 0:
            raise ValueError("image_size and embedding_dim must be positive")


@dataclass(frozen=True)
class MatchingBatch:
    """Aligned arrays for one training step.

    Row i pairs ``images[i]`` with a matching caption embedding, a caption
    embedding taken from an image of a different class, and a standard-normal
    noise vector.
    """

    images: np.ndarray
    matched_embeddings: np.ndarray
    mismatched_embeddings: np.ndarray
    noise: np.ndarray
    class_ids: np.ndarray


class CaptionDataset:
    """Immutable in-memory collection of captioned images."""

    def __init__(self, images, manifest: DatasetManifest):
        if len(images) == 0:
            raise ValueError("dataset must contain at least one image")
        self._images = tuple(images)
        self.manifest = manifest
        dims = {im.embedding_dim for im in self._images}
        if dims != {manifest.embedding_dim}:
            raise ValueError("embedding dimensions disagree with manifest")
        ids = {im.class_id for im in self._images}
        if not ids <= set(manifest.class_ids):
            raise ValueError("image class ids not covered by manifest")
        self._by_class = {}
        for idx, im in enumerate(self._images):
            self._by_class.setdefault(im.class_id, []).append(idx)

    def __len__(self):
        return len(self._images)

    def __getitem__(self, idx) -> CaptionedImage:
        return self._images[idx]

    def __iter__(self):
        return iter(self._images)

    @property
    def class_ids(self):
        return sorted(self._by_class)

    @property
    def image_size(self) -> int:
        return self.manifest.image_size

    @property
    def embedding_dim(self) -> int:
        return self.manifest.embedding_dim

    def indices_of_class(self, class_id: int):
        return tuple(self._by_class[class_id])


def _crop_offsets(margin: int):
    """The first CROP_VARIANTS displacements of the (2m+1)^2 grid, ordered
    by Chebyshev ring so that (0, 0) comes first."""
    grid = [
        (dy, dx)
        for dy in range(-margin, margin + 1)
        for dx in range(-margin, margin + 1)
    ]
    grid.sort(key=lambda d: (max(abs(d[0]), abs(d[1])), d[0], d[1]))
    return grid[:CROP_VARIANTS]


def crop_margin(height: int, width: int) -> int:
    """Maximum crop displacement per side: 12.5% of the short side, but at
    least 3 so that 48 distinct offsets exist even for tiny desk images."""
    return max(3, round(CROP_MARGIN_FRACTION * min(height, width)))


def augment(image: CaptionedImage, variant_index: int) -> CaptionedImage:
    """Return one of the 96 deterministic crop-and-flip variants of an image.

    The crop is a shifted window over the edge-replicated padding of the
    input, so variant 0 (zero displacement, no flip) returns the input pixels
    unchanged. Embeddings and class label are carried over untouched.
    """
    if not 0 <= variant_index < AUGMENT_VARIANTS:
        raise ValueError(
            f"variant_index must be in [0, {AUGMENT_VARIANTS}), got {variant_index}"
        )
    crop_index, flip = divmod(variant_index, 2)
    h, w, _ = image.pixels.shape
    margin = crop_margin(h, w)
    dy, dx = _crop_offsets(margin)[crop_index]
    if (dy, dx) == (0, 0):
        px = image.pixels
    else:
        padded = np.pad(
            image.pixels, ((margin, margin), (margin, margin), (0, 0)), mode="edge"
        )
        px = padded[margin + dy : margin + dy + h, margin + dx : margin + dx + w]
    if flip:
        px = px[:, ::-1, :]
    return CaptionedImage(
        pixels=np.ascontiguousarray(px),
        embeddings=image.embeddings,
        class_id=image.class_id,
    )


def _class_attributes(class_id: int) -> tuple:
    # consecutive classes differ in both shape and color; the pairing is
    # injective for all 48 representable classes
    shape = class_id % len(SHAPE_NAMES)
    color = (class_id + class_id // len(SHAPE_NAMES)) % len(COLOR_ANCHORS)
    return shape, color


def _render_shape(shape: int, color: int, image_size: int, rng) -> np.ndarray:
    n = image_size
    background = rng.uniform(0.1, 0.5)
    px = np.full((n, n, 3), background, dtype=np.float64)
    px += rng.normal(0.0, 0.02, size=px.shape)

    cy = n / 2 + rng.uniform(-0.08, 0.08) * n
    cx = n / 2 + rng.uniform(-0.08, 0.08) * n
    radius = rng.uniform(0.26, 0.38) * n

    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    yy += 0.5 - cy
    xx += 0.5 - cx
    name = SHAPE_NAMES[shape]
    if name == "square":
        mask = np.maximum(np.abs(xx), np.abs(yy)) <= radius
    elif name == "disk":
        mask = xx**2 + yy**2 <= radius**2
    elif name == "triangle":
        mask = (yy >= -radius) & (yy <= radius) & (np.abs(xx) <= (yy + radius) / 2)
    elif name == "cross":
        bar = radius / 2.5
        mask = ((np.abs(xx) <= bar) & (np.abs(yy) <= radius)) | (
            (np.abs(yy) <= bar) & (np.abs(xx) <= radius)
        )
    elif name == "ring":
        rsq = xx**2 + yy**2
        mask = (rsq <= radius**2) & (rsq >= (radius / 2) ** 2)
    else:  # diamond
        mask = np.abs(xx) + np.abs(yy) <= radius
    px[mask] = np.asarray(COLOR_ANCHORS[color], dtype=np.float64)
    px[mask] += rng.normal(0.0, 0.02, size=(int(mask.sum()), 3))
    return np.clip(px, -1.0, 1.0).astype(np.float32)


def _class_embedding_anchor(projection: np.ndarray, shape: int, color: int):
    attr = np.zeros(len(SHAPE_NAMES) + len(COLOR_ANCHORS), dtype=np.float64)
    attr[shape] = 1.0
    attr[len(SHAPE_NAMES) + color] = 1.0
    anchor = projection @ attr
    return anchor / np.linalg.norm(anchor)


def make_synthetic_dataset(
    num_classes: int,
    images_per_class: int,
    image_size: int,
    embedding_dim: int,
    seed: int,
    captions_per_image: int = 5,
    class_id_offset: int = 0,
    split: str = "train",
) -> CaptionDataset:
    """Procedurally render a desk-scale dataset of colored shapes.

    Each class gets a distinct (shape, color) pair. Caption embeddings are
    noisy encodings of the class attributes, so same-class embeddings are
    closer in cosine similarity than cross-class ones. The result is
    bit-identical for identical arguments.

    The attribute-to-embedding projection is drawn before any class-dependent
    randomness, so two calls with the same seed but different
    ``class_id_offset`` produce splits living in the same embedding space.
    """
    if num_classes <= 0 or images_per_class <= 0 or image_size <= 0:
        raise ValueError("num_classes, images_per_class, image_size must be positive")
    if embedding_dim < num_classes:
        raise ValueError("embedding_dim must be >= num_classes")
    if class_id_offset + num_classes > MAX_SYNTHETIC_CLASSES:
        raise ValueError(
            f"at most {MAX_SYNTHETIC_CLASSES} distinct (shape, color) classes exist"
        )

    rng = np.random.default_rng(seed)
    projection = rng.normal(
        0.0, 1.0, size=(embedding_dim, len(SHAPE_NAMES) + len(COLOR_ANCHORS))
    )

    images = []
    for local_class in range(num_classes):
        class_id = class_id_offset + local_class
        shape, color = _class_attributes(class_id)
        anchor = _class_embedding_anchor(projection, shape, color)
        class_rng = np.random.default_rng([seed, class_id])
        for _ in range(images_per_class):
            px = _render_shape(shape, color, image_size, class_rng)
            embeddings = []
            for _ in range(captions_per_image):
                noisy = anchor + 0.35 * class_rng.normal(0.0, 1.0, size=embedding_dim)
                embeddings.append((noisy / np.linalg.norm(noisy)).astype(np.float32))
            images.append(
                CaptionedImage(
                    pixels=px, embeddings=tuple(embeddings), class_id=class_id
                )
            )

    manifest = DatasetManifest(
        root=Path("."),
        split=split,
        image_size=image_size,
        embedding_dim=embedding_dim,
        class_ids=frozenset(range(class_id_offset, class_id_offset + num_classes)),
    )
    return CaptionDataset(images, manifest)


class MismatchError(ValueError):
    """Raised when no mismatching class exists to sample from."""


def sample_batch(
    dataset: CaptionDataset, batch_size: int, noise_dim: int, rng
) -> MatchingBatch:
    """Draw one batch of (image, matched, mismatched, noise) rows.

    The matched embedding is uniform among the image's captions; the
    mismatched embedding comes from a uniformly chosen image of a different
    class; the noise is standard normal. A fixed generator state reproduces
    the batch exactly.
    """
    if len(dataset.class_ids) < 2:
        raise MismatchError("cannot form mismatching pairs from a single-class dataset")
    n = len(dataset)
    images = np.empty(
        (batch_size, dataset.image_size, dataset.image_size, 3), dtype=np.float32
    )
    matched = np.empty((batch_size, dataset.embedding_dim), dtype=np.float32)
    mismatched = np.empty_like(matched)
    class_ids = np.empty(batch_size, dtype=np.int64)

    for i in range(batch_size):
        idx = int(rng.integers(n))
        im = dataset[idx]
        images[i] = im.pixels
        matched[i] = im.embeddings[int(rng.integers(len(im.embeddings)))]
        class_ids[i] = im.class_id
        while True:
            other = dataset[int(rng.integers(n))]
            if other.class_id != im.class_id:
                break
        mismatched[i] = other.embeddings[int(rng.integers(len(other.embeddings)))]

    noise = rng.standard_normal((batch_size, noise_dim)).astype(np.float32)
    return MatchingBatch(
        images=images,
        matched_embeddings=matched,
        mismatched_embeddings=mismatched,
        noise=noise,
        class_ids=class_ids,
    )


def assert_disjoint_splits(train: DatasetManifest, test: DatasetManifest) -> None:
    overlap = set(train.class_ids) & set(test.class_ids)
    if overlap:
        raise ValueError(f"train and test class sets overlap: {sorted(overlap)}")


# ---------------------------------------------------------------------------
# On-disk layout: one directory per class with PNG images plus a flat binary
# embedding file (little-endian float32 with a magic/count/dim header), and a
# key = value manifest file at the split root.
# ---------------------------------------------------------------------------


def _write_embeddings(path: Path, rows: np.ndarray) -> None:
    count, dim = rows.shape
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_FILE_MAGIC)
        fh.write(struct.pack("<II", count, dim))
        fh.write(rows.astype("<f4").tobytes())


def _read_embeddings(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if raw[:4] != EMBEDDING_FILE_MAGIC:
        raise ValueError(f"{path}: bad embedding file magic")
    count, dim = struct.unpack("<II", raw[4:12])
    data = np.frombuffer(raw, dtype="<f4", offset=12)
    if data.size != count * dim:
        raise ValueError(f"{path}: embedding payload size mismatch")
    return data.reshape(count, dim).astype(np.float32)


def save_dataset(dataset: CaptionDataset, root) -> Path:
    """Write a dataset to the class-per-directory layout. Returns the path
    of the manifest file."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for class_id in dataset.class_ids:
        class_dir = root / f"class_{class_id:04d}"
        class_dir.mkdir(exist_ok=True)
        rows = []
        for j, idx in enumerate(dataset.indices_of_class(class_id)):
            im = dataset[idx]
            u8 = np.round((im.pixels + 1.0) / 2.0 * 255.0).astype(np.uint8)
            Image.fromarray(u8).save(class_dir / f"{j:05d}.png")
            rows.extend(im.embeddings)
        _write_embeddings(class_dir / EMBEDDING_FILE_NAME, np.stack(rows))

    manifest_path = root / MANIFEST_FILE_NAME
    lines = [
        "root = .",
        f"split = {dataset.manifest.split}",
        f"image_size = {dataset.manifest.image_size}",
        f"embedding_dim = {dataset.manifest.embedding_dim}",
        "class_ids = " + ",".join(str(c) for c in dataset.class_ids),
        "",
    ]
    manifest_path.write_text("\n".join(lines))
    return manifest_path


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_FILE_NAME
    fields = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    missing = {"root", "split", "image_size", "embedding_dim", "class_ids"} - set(fields)
    if missing:
        raise ValueError(f"{path}: manifest missing keys {sorted(missing)}")
    root = (path.parent / fields["root"]).resolve()
    return DatasetManifest(
        root=root,
        split=fields["split"],
        image_size=int(fields["image_size"]),
        embedding_dim=int(fields["embedding_dim"]),
        class_ids=frozenset(int(c) for c in fields["class_ids"].split(",")),
    )


def load_dataset(path) -> CaptionDataset:
    """Load a dataset from its manifest file (or the directory holding it)."""
    manifest = read_manifest(path)
    images = []
    for class_id in sorted(manifest.class_ids):
        class_dir = manifest.root / f"class_{class_id:04d}"
        png_paths = sorted(class_dir.glob("*.png"))
        if not png_paths:
            raise ValueError(f"{class_dir}: no images found")
        rows = _read_embeddings(class_dir / EMBEDDING_FILE_NAME)
        if rows.shape[1] != manifest.embedding_dim:
            raise ValueError(f"{class_dir}: embedding dim disagrees with manifest")
        if rows.shape[0] % len(png_paths) != 0:
            raise ValueError(f"{class_dir}: embedding count not divisible by images")
        per_image = rows.shape[0] // len(png_paths)
        for j, png in enumerate(png_paths):
            u8 = np.asarray(Image.open(png), dtype=np.float32)
            px = u8 / 255.0 * 2.0 - 1.0
            embeddings = tuple(rows[j * per_image : (j + 1) * per_image])
            images.append(
                CaptionedImage(pixels=px, embeddings=embeddings, class_id=class_id)
            )
    return CaptionDataset(images, manifest)
