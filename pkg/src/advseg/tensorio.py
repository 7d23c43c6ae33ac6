"""Dataset representation, file formats, normalization, patching, phantoms."""

from __future__ import annotations

import gzip
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

STD_EPS = 1e-8

_NIFTI_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}
_NIFTI_CODES = {np.dtype(np.float32): 16, np.dtype(np.int32): 8}


class TensorIOError(Exception):
    """Raised for malformed volumes, labels, or files."""


@dataclass
class Volume:
    voxels: np.ndarray  # (slices, H, W) float32
    spacing: tuple[float, float, float] | None = None
    subject_id: str = ""

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise TensorIOError(f"volume must be 3D with all dims >= 1, got {self.voxels.shape}")
        if not np.all(np.isfinite(self.voxels)):
            raise TensorIOError("volume contains NaN/Inf")


@dataclass
class LabelMap:
    labels: np.ndarray  # integer grid, 2D or 3D
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int32)
        if self.labels.size == 0:
            raise TensorIOError("empty label map")
        lo, hi = int(self.labels.min()), int(self.labels.max())
        if lo < 0 or hi > self.num_classes:
            raise TensorIOError(
                f"label out of range: values in [{lo}, {hi}] but num_classes={self.num_classes}"
            )


@dataclass
class DatasetSplit:
    train_ids: list[str]
    val_ids: list[str]
    test_ids: list[str]
    seed: int

    def __post_init__(self):
        groups = [set(self.train_ids), set(self.val_ids), set(self.test_ids)]
        total = sum(len(g) for g in groups)
        if len(groups[0] | groups[1] | groups[2]) != total:
            raise TensorIOError("split groups are not disjoint")


@dataclass
class Patch:
    image: np.ndarray  # (h, w) float32
    labels: np.ndarray  # (h, w) int32
    origin: tuple[int, int] = (0, 0)


def normalize(v: Volume) -> Volume:
    """Zero-mean unit-std normalization over the whole subject volume."""
    x = v.voxels.astype(np.float64)
    std = x.std()
    if std < STD_EPS:
        out = np.zeros_like(x)
    else:
        out = (x - x.mean()) / std
    return Volume(out.astype(np.float32), spacing=v.spacing, subject_id=v.subject_id)


def normalize_image(img: np.ndarray) -> np.ndarray:
    """Same normalization applied to a single 2D slice."""
    v = normalize(Volume(np.asarray(img, dtype=np.float32)[None]))
    return v.voxels[0]


def split_dataset(ids: list[str], counts: tuple[int, int, int], seed: int) -> DatasetSplit:
    n_train, n_val, n_test = counts
    if n_train + n_val + n_test != len(ids):
        raise TensorIOError(
            f"split counts {counts} do not sum to number of ids ({len(ids)})"
        )
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return DatasetSplit(
        train_ids=shuffled[:n_train],
        val_ids=shuffled[n_train : n_train + n_val],
        test_ids=shuffled[n_train + n_val :],
        seed=seed,
    )


def extract_patches(
    image: np.ndarray,
    labels: np.ndarray,
    size: tuple[int, int],
    n: int,
    rng: np.random.Generator,
) -> list[Patch]:
    """Sample n patches; at least half contain foreground when any exists."""
    image = np.asarray(image, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int32)
    H, W = image.shape
    h, w = size
    if h > H or w > W:
        raise TensorIOError(f"patch size {size} exceeds slice shape {(H, W)}")
    fg_rows, fg_cols = np.nonzero(labels > 0)
    has_fg = fg_rows.size > 0
    patches = []
    for i in range(n):
        if has_fg and i % 2 == 0:
            # pick a foreground pixel, then a uniform origin whose patch covers it
            k = rng.integers(fg_rows.size)
            r, c = int(fg_rows[k]), int(fg_cols[k])
            r0 = int(rng.integers(max(0, r - h + 1), min(r, H - h) + 1))
            c0 = int(rng.integers(max(0, c - w + 1), min(c, W - w) + 1))
        else:
            r0 = int(rng.integers(0, H - h + 1))
            c0 = int(rng.integers(0, W - w + 1))
        patches.append(
            Patch(image[r0 : r0 + h, c0 : c0 + w].copy(),
                  labels[r0 : r0 + h, c0 : c0 + w].copy(),
                  origin=(r0, c0))
        )
    return patches


def _ellipse_radius(shape, center, axes, theta):
    """Normalized elliptical radius map (1.0 on the ellipse boundary)."""
    H, W = shape
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    y = yy - center[0]
    x = xx - center[1]
    ct, st = np.cos(theta), np.sin(theta)
    u = x * ct + y * st
    v = -x * st + y * ct
    return np.sqrt((u / axes[1]) ** 2 + (v / axes[0]) ** 2)


def _smooth_noise(rng, shape, coarse=8, amplitude=1.0):
    """Low-frequency random texture from bilinearly upsampled coarse noise."""
    H, W = shape
    grid = rng.normal(0.0, amplitude, size=(coarse + 1, coarse + 1))
    ry = np.linspace(0, coarse, H)
    rx = np.linspace(0, coarse, W)
    y0 = np.clip(ry.astype(int), 0, coarse - 1)
    x0 = np.clip(rx.astype(int), 0, coarse - 1)
    fy = (ry - y0)[:, None]
    fx = (rx - x0)[None, :]
    g = grid
    return ((1 - fy) * (1 - fx) * g[np.ix_(y0, x0)]
            + (1 - fy) * fx * g[np.ix_(y0, x0 + 1)]
            + fy * (1 - fx) * g[np.ix_(y0 + 1, x0)]
            + fy * fx * g[np.ix_(y0 + 1, x0 + 1)])


def make_phantom(seed: int, shape: tuple[int, int] = (64, 64), n_classes: int = 4):
    """Synthetic slice: C soft-edged ellipses on a textured noisy background.

    Class 1 is small (<= 2% of pixels), class 2 is large (>= 8%); the rest
    interpolate. Deterministic given seed.
    """
    if n_classes < 1:
        raise TensorIOError("need at least one foreground class")
    H, W = shape
    if H < 32 or W < 32:
        raise TensorIOError("phantom shape must be at least 32x32")
    rng = np.random.default_rng(seed)
    n_pix = H * W

    # target area fractions per class; index 0 -> class 1 (small), 1 -> class 2 (large)
    fracs = [0.012, 0.10] + [0.04] * (n_classes - 2)
    fracs = fracs[:n_classes]
    # distinct mean intensities, well separated from the ~0 background
    levels = [1.6 + 0.7 * k if k % 2 == 0 else -1.2 - 0.6 * k for k in range(n_classes)]

    image = 0.4 * _smooth_noise(rng, shape, coarse=6)
    labels = np.zeros(shape, dtype=np.int32)
    occupied = np.zeros(shape, dtype=bool)

    tries = 0
    for cls in range(1, n_classes + 1):
        area = fracs[cls - 1] * n_pix
        placed = False
        while not placed:
            tries += 1
            if tries > 1000:
                raise TensorIOError(
                    f"could not place {n_classes} non-overlapping ellipses in 1000 tries"
                )
            ecc = rng.uniform(0.6, 1.0)
            a = np.sqrt(area / (np.pi * ecc))
            b = a * ecc
            if 2 * a >= min(H, W) - 4:
                continue
            cy = rng.uniform(a + 2, H - a - 2)
            cx = rng.uniform(a + 2, W - a - 2)
            theta = rng.uniform(0, np.pi)
            r = _ellipse_radius(shape, (cy, cx), (a, b), theta)
            mask = r <= 1.0
            halo = r <= 1.35  # keep a margin between organs
            if mask.sum() < 4 or (halo & occupied).any():
                continue
            soft = np.clip((1.25 - r) / 0.5, 0.0, 1.0)  # soft edge ramp
            image += levels[cls - 1] * soft
            labels[mask] = cls
            occupied |= halo
            placed = True

    image += rng.normal(0.0, 0.08, size=shape)
    return image.astype(np.float32), LabelMap(labels, num_classes=n_classes)


def make_phantom_subject(seed: int, shape=(64, 64), n_classes: int = 4,
                         n_slices: int = 4, subject_id: str = ""):
    """Stack of phantom slices forming one synthetic subject."""
    slice_seeds = np.random.SeedSequence(seed).generate_state(n_slices)
    imgs, labs = [], []
    for s in slice_seeds:
        img, lab = make_phantom(int(s), shape, n_classes)
        imgs.append(img)
        labs.append(lab.labels)
    vol = Volume(np.stack(imgs), subject_id=subject_id)
    return vol, LabelMap(np.stack(labs), num_classes=n_classes)


# ---------------------------------------------------------------------------
# Portable raw tensor format: directory with manifest.json + flat LE binaries.

_DTYPE_TAGS = {"f32": np.dtype("<f4"), "i32": np.dtype("<i4")}


def save_arrays(path: str, arrays: dict[str, np.ndarray], meta: dict | None = None):
    """Write arrays bit-exactly as little-endian flat files plus a manifest."""
    os.makedirs(path, exist_ok=True)
    manifest = {"byte_order": "little", "arrays": {}, "meta": meta or {}}
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.kind == "f":
            tag, dt = "f32", _DTYPE_TAGS["f32"]
        elif arr.dtype.kind in "iub":
            tag, dt = "i32", _DTYPE_TAGS["i32"]
        else:
            raise TensorIOError(f"unsupported dtype {arr.dtype} for array {name!r}")
        fname = name.replace("/", "__") + ".bin"
        with open(os.path.join(path, fname), "wb") as f:
            f.write(arr.astype(dt, copy=False).tobytes())
        manifest["arrays"][name] = {"dtype": tag, "shape": list(arr.shape), "file": fname}
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def load_arrays(path: str) -> tuple[dict[str, np.ndarray], dict]:
    mpath = os.path.join(path, "manifest.json")
    if not os.path.isfile(mpath):
        raise TensorIOError(f"no manifest.json under {path}")
    with open(mpath) as f:
        manifest = json.load(f)
    if manifest.get("byte_order") != "little":
        raise TensorIOError("unsupported byte order")
    arrays = {}
    for name, entry in manifest["arrays"].items():
        dt = _DTYPE_TAGS[entry["dtype"]]
        raw = np.fromfile(os.path.join(path, entry["file"]), dtype=dt)
        expected = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if raw.size != expected:
            raise TensorIOError(f"array {name!r}: file size does not match shape")
        arrays[name] = raw.reshape(entry["shape"])
    return arrays, manifest.get("meta", {})


def save_volume(path: str, v: Volume, l: LabelMap):
    if v.voxels.shape != l.labels.shape:
        raise TensorIOError(
            f"volume shape {v.voxels.shape} != label shape {l.labels.shape}"
        )
    meta = {"subject_id": v.subject_id, "num_classes": l.num_classes}
    if v.spacing is not None:
        meta["spacing"] = list(v.spacing)
    save_arrays(path, {"image": v.voxels, "labels": l.labels}, meta=meta)


def load_volume(path: str) -> tuple[Volume, LabelMap]:
    """Load a subject: raw tensor directory, or a NIfTI `<id>_img.nii[.gz]` file."""
    if os.path.isdir(path):
        arrays, meta = load_arrays(path)
        if "image" not in arrays or "labels" not in arrays:
            raise TensorIOError(f"{path}: manifest lacks image/labels arrays")
        img, lab = arrays["image"], arrays["labels"]
        if img.shape != lab.shape:
            raise TensorIOError("image/label shape mismatch")
        spacing = tuple(meta["spacing"]) if "spacing" in meta else None
        n_cls = int(meta.get("num_classes", int(lab.max())))
        return (
            Volume(img, spacing=spacing, subject_id=str(meta.get("subject_id", ""))),
            LabelMap(lab, num_classes=n_cls),
        )
    if path.endswith((".nii", ".nii.gz")):
        return _load_nifti_pair(path)
    raise TensorIOError(f"unsupported volume path: {path}")


# ---------------------------------------------------------------------------
# Minimal NIfTI-1 support (single file, little-endian).

def _read_nifti(path: str) -> tuple[np.ndarray, tuple[float, ...]]:
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as f:
        hdr = f.read(352)
        if len(hdr) < 348 or struct.unpack("<i", hdr[:4])[0] != 348:
            raise TensorIOError(f"{path}: not a NIfTI-1 file")
        dim = struct.unpack("<8h", hdr[40:56])
        datatype = struct.unpack("<h", hdr[70:72])[0]
        pixdim = struct.unpack("<8f", hdr[76:108])
        vox_offset = int(struct.unpack("<f", hdr[108:112])[0])
        slope, inter = struct.unpack("<2f", hdr[112:120])
        if datatype not in _NIFTI_DTYPES:
            raise TensorIOError(f"{path}: unsupported NIfTI datatype {datatype}")
        ndim = dim[0]
        shape_xyz = [max(1, dim[1 + i]) for i in range(min(ndim, 3))]
        while len(shape_xyz) < 3:
            shape_xyz.append(1)
        f.seek(vox_offset)
        data = np.frombuffer(f.read(), dtype=_NIFTI_DTYPES[datatype])
    n = int(np.prod(shape_xyz))
    data = data[:n].reshape(shape_xyz, order="F")
    if slope not in (0.0, 1.0) or inter != 0.0:
        s = slope if slope != 0.0 else 1.0
        data = data * s + inter
    # NIfTI is (x, y, z); volumes here are (slices, rows, cols)
    return np.ascontiguousarray(data.transpose(2, 1, 0)), tuple(pixdim[1:4])


def _write_nifti(path: str, vol: np.ndarray, spacing=None):
    vol = np.ascontiguousarray(vol)
    if vol.dtype not in _NIFTI_CODES:
        vol = vol.astype(np.float32 if vol.dtype.kind == "f" else np.int32)
    code = _NIFTI_CODES[np.dtype(vol.dtype)]
    S, H, W = vol.shape
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, W, H, S, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, vol.dtype.itemsize * 8)
    sp = spacing or (1.0, 1.0, 1.0)
    struct.pack_into("<8f", hdr, 76, 1.0, sp[2] if len(sp) > 2 else 1.0, sp[1], sp[0], 1, 1, 1, 1)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    hdr344 = bytes(hdr) + b"n+1\x00"
    payload = vol.transpose(2, 1, 0).tobytes(order="F")
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(hdr344 + payload)


def _label_path_for(img_path: str) -> str:
    for ext in (".nii.gz", ".nii"):
        if img_path.endswith("_img" + ext):
            return img_path[: -len("_img" + ext)] + "_lbl" + ext
    raise TensorIOError(
        f"{img_path}: expected `<id>_img.nii[.gz]` naming to locate the label file"
    )


def _load_nifti_pair(img_path: str) -> tuple[Volume, LabelMap]:
    lbl_path = _label_path_for(img_path)
    if not os.path.isfile(lbl_path):
        raise TensorIOError(f"label volume not found: {lbl_path}")
    img, spacing = _read_nifti(img_path)
    lab, _ = _read_nifti(lbl_path)
    if img.shape != lab.shape:
        raise TensorIOError("image/label shape mismatch")
    lab = np.rint(lab).astype(np.int32)
    if lab.min() < 0:
        raise TensorIOError("label out of range: negative labels")
    subject = os.path.basename(img_path).split("_img")[0]
    return (
        Volume(img.astype(np.float32), spacing=spacing, subject_id=subject),
        LabelMap(lab, num_classes=int(lab.max())),
    )


def save_nifti_pair(img_path: str, v: Volume, l: LabelMap):
    if v.voxels.shape != l.labels.shape:
        raise TensorIOError("volume/label shape mismatch")
    _write_nifti(img_path, v.voxels, v.spacing)
    _write_nifti(_label_path_for(img_path), l.labels, v.spacing)
