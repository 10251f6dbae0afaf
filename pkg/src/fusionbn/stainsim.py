"""Deterministic multi-center synthetic benchmark.

Each sample is a procedural tissue-like texture with embedded elliptical
"nuclei" blobs; the class label is the blob-density band and the mask is
the union of blob pixels. A per-center stain transform (channel mixing in
log-absorbance space plus HSV jitter) is applied last, so morphology is
pixel-identical across centers generated from the same content seed and
only the chromatic distribution moves.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import ConfigurationError, LoadError
from .seeding import derive_rng

Array = np.ndarray

LOG_GUARD = 1e-6  # keeps -log(I) finite on zero pixels


# ---------------------------------------------------------------------------
# color conversion (vectorized over [..., 3] arrays, values in [0, 1])


def rgb_to_hsv(rgb: Array) -> Array:
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        dd = np.where(delta > 0, delta, 1.0)
        rc = (maxc - r) / dd
        gc = (maxc - g) / dd
        bc = (maxc - b) / dd
    # priority r > g > b on ties, matching colorsys
    h = 4.0 + gc - rc
    h = np.where(maxc == g, 2.0 + rc - bc, h)
    h = np.where(maxc == r, bc - gc, h)
    h = np.where(delta == 0, 0.0, (h / 6.0) % 1.0)
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv: Array) -> Array:
    hsv = np.asarray(hsv, dtype=np.float64)
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


# ---------------------------------------------------------------------------
# stain transform


@dataclass(frozen=True)
class StainTransform:
    """Per-center chromatic transform: affine mixing in log-absorbance
    space followed by HSV jitter; identity parameters are a pixel-exact
    identity map."""

    matrix: tuple  # 3x3 row tuples
    offset: tuple  # length 3
    hue_shift: float = 0.0
    sat_scale: float = 1.0
    val_scale: float = 1.0

    @classmethod
    def identity(cls) -> "StainTransform":
        return cls(
            matrix=((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)),
            offset=(0.0, 0.0, 0.0),
        )

    @property
    def matrix_array(self) -> Array:
        return np.asarray(self.matrix, dtype=np.float64)

    @property
    def offset_array(self) -> Array:
        return np.asarray(self.offset, dtype=np.float64)

    def is_identity(self) -> bool:
        return (
            np.array_equal(self.matrix_array, np.eye(3))
            and not self.offset_array.any()
            and self.hue_shift == 0.0
            and self.sat_scale == 1.0
            and self.val_scale == 1.0
        )

    def validate(self) -> None:
        if abs(np.linalg.det(self.matrix_array)) <= 1e-6:
            raise ConfigurationError(
                f"stain mixing matrix is singular (|det| <= 1e-6): {self.matrix}"
            )

    def to_json(self) -> str:
        return json.dumps(
            {
                "matrix": [list(row) for row in self.matrix],
                "offset": list(self.offset),
                "hue_shift": self.hue_shift,
                "sat_scale": self.sat_scale,
                "val_scale": self.val_scale,
            },
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, text: str) -> "StainTransform":
        d = json.loads(text)
        return cls(
            matrix=tuple(tuple(row) for row in d["matrix"]),
            offset=tuple(d["offset"]),
            hue_shift=d["hue_shift"],
            sat_scale=d["sat_scale"],
            val_scale=d["val_scale"],
        )


def stain_transform_for_center(center_id: int, shift: float) -> StainTransform:
    """Deterministic transform whose distance from identity scales with
    `shift`; the direction depends only on the center id, so one center
    at growing shift moves along a fixed chromatic ray."""
    if shift < 0:
        raise ConfigurationError(f"shift magnitude must be >= 0, got {shift}")
    if shift == 0:
        return StainTransform.identity()
    rng = derive_rng(center_id, "stain-direction")
    mix = rng.uniform(-1.0, 1.0, size=(3, 3))
    np.fill_diagonal(mix, 0.0)
    mix /= max(np.abs(mix).sum(axis=1).max(), 1e-9)  # rows dominated by the diagonal
    offset_dir = rng.uniform(-1.0, 1.0, size=3)
    offset_dir /= np.linalg.norm(offset_dir)
    hue_dir = rng.choice([-1.0, 1.0])
    sat_dir = rng.uniform(-1.0, 1.0)

    matrix = np.eye(3) + 0.10 * shift * mix
    offset = 0.22 * shift * offset_dir
    t = StainTransform(
        matrix=tuple(tuple(row) for row in matrix),
        offset=tuple(offset),
        hue_shift=0.03 * shift * hue_dir,
        sat_scale=float(np.clip(1.0 + 0.10 * shift * sat_dir, 0.4, 1.8)),
        val_scale=1.0,
    )
    t.validate()
    return t


def apply_stain(image: Array, transform: StainTransform) -> Array:
    """Transform an image (or batch) [..., 3, H, W] in [0, 1].

    I' = clamp(hsv_jitter(exp(-(A (-log(I + d)) + b))), 0, 1) with a small
    guard d on the log. Identity parameters return the input unchanged.
    """
    image = np.asarray(image)
    if image.ndim < 3 or image.shape[-3] != 3:
        raise ConfigurationError(f"expected [..., 3, H, W] image, got {image.shape}")
    transform.validate()
    if transform.is_identity():
        return image.copy()

    dtype = image.dtype
    chan_last = np.moveaxis(image.astype(np.float64), -3, -1)  # [..., H, W, 3]
    od = -np.log(chan_last + LOG_GUARD)
    od = od @ transform.matrix_array.T + transform.offset_array
    out = np.exp(-od)
    if (
        transform.hue_shift != 0.0
        or transform.sat_scale != 1.0
        or transform.val_scale != 1.0
    ):
        hsv = rgb_to_hsv(np.clip(out, 0.0, 1.0))
        hsv[..., 0] = (hsv[..., 0] + transform.hue_shift) % 1.0
        hsv[..., 1] = np.clip(hsv[..., 1] * transform.sat_scale, 0.0, 1.0)
        hsv[..., 2] = np.clip(hsv[..., 2] * transform.val_scale, 0.0, 1.0)
        out = hsv_to_rgb(hsv)
    out = np.clip(out, 0.0, 1.0)
    return np.ascontiguousarray(np.moveaxis(out, -1, -3)).astype(dtype)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class CenterDataset:
    """Labeled patches from one center with a known stain transform."""

    center_id: str
    task: str
    images: Array  # [N, 3, H, W], float32 in [0, 1]
    labels: Optional[Array]  # [N] int64, None on the label-free path
    masks: Optional[Array]  # [N, 1, H, W] float32 in {0, 1}
    seed: int
    transform: StainTransform

    @property
    def n(self) -> int:
        return self.images.shape[0]

    def class_proportions(self) -> Array:
        if self.labels is None:
            raise ConfigurationError("dataset carries no labels")
        counts = np.bincount(self.labels, minlength=int(self.labels.max()) + 1)
        return counts / counts.sum()

    def without_labels(self) -> "CenterDataset":
        """The unsupervised view handed to adaptation: no labels at all."""
        return replace(self, labels=None, masks=None)


@dataclass
class ShiftMagnitude:
    """Scalar knob for how far a center's transform sits from identity."""

    value: float

    def __post_init__(self):
        if self.value < 0:
            raise ConfigurationError(f"shift magnitude must be >= 0, got {self.value}")


def _ellipse_mask(size: int, cx, cy, rx, ry, theta) -> Array:
    yy, xx = np.mgrid[0:size, 0:size]
    x = xx - cx
    y = yy - cy
    ct, st = np.cos(theta), np.sin(theta)
    xr = x * ct + y * st
    yr = -x * st + y * ct
    return (xr / rx) ** 2 + (yr / ry) ** 2 <= 1.0


def _render_sample(rng: np.random.Generator, size: int, label: int) -> tuple[Array, Array]:
    """One tissue-like patch: smooth eosin-toned background plus darker
    elliptical nuclei; returns (image [3,H,W], mask [H,W])."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = np.array([0.82, 0.62, 0.74]) + rng.uniform(-0.05, 0.05, size=3)
    img = np.empty((size, size, 3))
    img[:] = base
    for _ in range(3):
        fx, fy = rng.uniform(0.5, 3.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.01, 0.04)
        wave = amp * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
        img += wave[..., None] * rng.uniform(0.4, 1.0, size=3)
    img += rng.normal(0.0, 0.015, size=img.shape)

    scale = size / 32.0
    n_blobs = int(rng.integers(2, 6)) if label == 0 else int(rng.integers(9, 15))
    mask = np.zeros((size, size), dtype=bool)
    nucleus_base = np.array([0.36, 0.22, 0.52])
    for _ in range(n_blobs):
        rx = rng.uniform(2.2, 4.0) * scale
        ry = rng.uniform(2.2, 4.0) * scale
        margin = max(rx, ry) + 1.0
        cx = rng.uniform(margin, size - margin)
        cy = rng.uniform(margin, size - margin)
        theta = rng.uniform(0, np.pi)
        blob = _ellipse_mask(size, cx, cy, rx, ry, theta)
        mask |= blob
        color = nucleus_base + rng.uniform(-0.05, 0.05, size=3)
        img[blob] = 0.25 * img[blob] + 0.75 * color

    img = np.clip(img, 0.04, 0.96)
    return np.moveaxis(img, -1, 0), mask


def generate_center(
    center_id: int,
    n_samples: int,
    task: str,
    shift: float | ShiftMagnitude,
    seed: int,
    patch_size: int = 32,
    split: str = "train",
) -> CenterDataset:
    """Generate one center's dataset deterministically.

    Content derives from (seed, split, sample index) only, so two centers
    built from the same seed share morphology exactly; the stain transform
    derives from (center_id, shift) and is applied last.
    """
    if n_samples < 1:
        raise ConfigurationError(f"need at least one sample, got {n_samples}")
    if patch_size < 16:
        raise ConfigurationError(f"patch size must be >= 16, got {patch_size}")
    magnitude = shift.value if isinstance(shift, ShiftMagnitude) else float(shift)
    transform = stain_transform_for_center(center_id, magnitude)

    images = np.empty((n_samples, 3, patch_size, patch_size), dtype=np.float32)
    labels = np.empty(n_samples, dtype=np.int64)
    masks = np.empty((n_samples, 1, patch_size, patch_size), dtype=np.float32)
    for i in range(n_samples):
        rng = derive_rng(seed, f"{split}:sample:{i}")
        label = int(rng.random() < 0.5)
        img, mask = _render_sample(rng, patch_size, label)
        images[i] = img
        labels[i] = label
        masks[i, 0] = mask

    images = apply_stain(images, transform)
    return CenterDataset(
        center_id=f"C{center_id}",
        task=task,
        images=images,
        labels=labels,
        masks=masks if task == "dense-prediction" else None,
        seed=seed,
        transform=transform,
    )


def chromatic_distance(a: CenterDataset, b: CenterDataset) -> float:
    """Euclidean distance between the (per-channel mean, per-channel std)
    summaries of two pixel distributions; symmetric, zero on itself."""
    def summary(ds: CenterDataset) -> Array:
        px = ds.images.astype(np.float64)
        return np.concatenate([px.mean(axis=(0, 2, 3)), px.std(axis=(0, 2, 3))])

    if a.n == 0 or b.n == 0:
        raise ConfigurationError("chromatic distance needs non-empty datasets")
    return float(np.linalg.norm(summary(a) - summary(b)))


# ---------------------------------------------------------------------------
# multi-center benchmark


DEFAULT_SHIFTS = (0.0, 0.5, 1.0, 1.5, 2.0)


@dataclass
class CenterBundle:
    train: CenterDataset
    test: CenterDataset


def make_benchmark(
    n_train: int = 2000,
    n_test: int = 500,
    task: str = "classification",
    shifts: tuple = DEFAULT_SHIFTS,
    seed: int = 7,
    patch_size: int = 32,
) -> dict[str, CenterBundle]:
    """The default desk-scale benchmark: one bundle per center, C0 at
    shift 0 acting as the source, the rest increasingly shifted."""
    centers: dict[str, CenterBundle] = {}
    for cid, shift in enumerate(shifts):
        train = generate_center(cid, n_train, task, shift, seed, patch_size, split="train")
        test = generate_center(cid, n_test, task, shift, seed, patch_size, split="test")
        centers[train.center_id] = CenterBundle(train=train, test=test)
    return centers


# ---------------------------------------------------------------------------
# optional ingestion of a directory of real images


def load_image_directory(path, manifest_path) -> CenterDataset:
    """Load 8-bit RGB images named by a tab-separated manifest
    (filename, label[, mask filename]). Rows are sorted by filename, all
    images must share one size, and every manifest entry must resolve."""
    from pathlib import Path

    from PIL import Image

    path = Path(path)
    manifest_path = Path(manifest_path)
    if not path.is_dir():
        raise LoadError(f"image directory not found: {path}")
    if not manifest_path.is_file():
        raise LoadError(f"manifest not found: {manifest_path}")

    rows = []
    for lineno, line in enumerate(manifest_path.read_text("utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) < 2:
            raise LoadError(f"manifest line {lineno} needs filename<TAB>label: {line!r}")
        rows.append((parts[0], parts[1], parts[2] if len(parts) > 2 else "", lineno))
    if not rows:
        raise LoadError(f"manifest {manifest_path} lists no images (empty dataset)")
    rows.sort(key=lambda r: r[0])

    images, labels, masks = [], [], []
    size = None
    any_mask = any(r[2] for r in rows)
    for fname, label, maskname, lineno in rows:
        f = path / fname
        if not f.is_file():
            raise LoadError(f"manifest line {lineno}: file {fname!r} not found in {path}")
        arr = np.asarray(Image.open(f).convert("RGB"), dtype=np.float32) / 255.0
        if size is None:
            size = arr.shape[:2]
        elif arr.shape[:2] != size:
            raise LoadError(
                f"image size mismatch: {fname} is {arr.shape[:2]}, expected {size}"
            )
        images.append(np.moveaxis(arr, -1, 0))
        try:
            labels.append(int(label))
        except ValueError:
            raise LoadError(f"manifest line {lineno}: label {label!r} is not an integer")
        if maskname:
            mf = path / maskname
            if not mf.is_file():
                raise LoadError(
                    f"manifest line {lineno}: mask {maskname!r} not found in {path}"
                )
            m = np.asarray(Image.open(mf).convert("L"), dtype=np.float32) / 255.0
            if m.shape != size:
                raise LoadError(
                    f"mask size mismatch: {maskname} is {m.shape}, expected {size}"
                )
            masks.append((m >= 0.5).astype(np.float32)[None])

    return CenterDataset(
        center_id=path.name,
        task="dense-prediction" if any_mask else "classification",
        images=np.stack(images),
        labels=np.asarray(labels, dtype=np.int64),
        masks=np.stack(masks) if masks else None,
        seed=0,
        transform=StainTransform.identity(),
    )
