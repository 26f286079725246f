"""Dataset ingestion, export, and seeded synthetic generators.

On-disk contract (bit-exact):

    root/manifest.json
    root/<patient_id>/slices/NNNN.png
    root/<patient_id>/masks/NNNN.png     # labeled slices only

The manifest is JSON with keys ``name``, ``patients`` (list of
``{id, split, labeled}``), and ``preprocess``
(``{resize, dropped, normalized}``).  Masks are single-channel rasters with
values {0, 255}; 255 maps to 1.

Ingestion resizes to the configured target, replicates grayscale to three
channels, and min-max normalizes intensities per slice.  Data exported by
this module is already normalized; its manifest says ``normalized: true``
and ingestion then only rescales from uint8, which keeps the
export->ingest round trip within one quantization step per channel.

The synthetic generators stand in for the two domains: a multi-class
shape-family source set, and patient volumes built from a smoothly
deforming blob with per-patient intensity bias and noise texture.  Val and
test patients additionally carry a sealed all-slice mask store that only
evaluation may read; training code must never touch it.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from falconseg.errors import (
    CorruptImageError,
    DataError,
    MaskShapeMismatchError,
    MissingFileError,
    MissingGroundTruthError,
)


@dataclass
class PatientVolume:
    patient_id: str
    slices: list  # ordered, each HxWx3 float64 in [0,1]
    masks: dict  # slice index -> HxW uint8, labeled slices only
    split: str = "train"
    eval_masks: dict = None  # sealed; evaluation-only ground truth

    def __post_init__(self):
        for idx, m in self.masks.items():
            if m.shape != self.slices[idx].shape[:2]:
                raise MaskShapeMismatchError(
                    f"patient {self.patient_id} slice {idx}: mask {m.shape} vs "
                    f"slice {self.slices[idx].shape[:2]}"
                )

    @property
    def n_slices(self) -> int:
        return len(self.slices)

    @property
    def labeled_indices(self) -> list:
        return sorted(self.masks)

    @property
    def unlabeled_indices(self) -> list:
        return [i for i in range(len(self.slices)) if i not in self.masks]

    def eval_mask(self, idx: int) -> np.ndarray:
        """Ground truth from the sealed store (falls back to the labeled
        masks).  Evaluation-only: training code must not call this."""
        if self.eval_masks is not None and idx in self.eval_masks:
            return self.eval_masks[idx]
        if idx in self.masks:
            return self.masks[idx]
        raise MissingGroundTruthError(
            f"patient {self.patient_id} has no ground truth for slice {idx}"
        )


@dataclass
class SourceDataset:
    classes: list
    samples: dict = field(default_factory=dict)  # class_id -> [(image, mask)]

    def __post_init__(self):
        if len(self.classes) < 2:
            raise DataError("source dataset needs at least 2 classes")


# ------------------------------------------------------------------ raster IO

def _read_image(path):
    if not os.path.exists(path):
        raise MissingFileError(f"missing file: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            return im.convert("RGB") if im.mode not in ("L", "RGB") else im.copy()
    except MissingFileError:
        raise
    except Exception as e:
        raise CorruptImageError(f"cannot read {path}: {e}") from e


def _resize(im: Image.Image, target, resample):
    h, w = target
    if im.size != (w, h):  # PIL size is (W, H)
        im = im.resize((w, h), resample)
    return im


def _load_slice_raw(path, target):
    """Resized HxWx3 float64 array still on the 0..255 scale."""
    im = _resize(_read_image(path), target, Image.BILINEAR)
    arr = np.asarray(im, dtype=np.float64)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return arr


def _normalize_slice(raw, normalized: bool):
    if normalized:
        return raw / 255.0
    lo, hi = raw.min(), raw.max()
    if hi > lo:
        return (raw - lo) / (hi - lo)
    return np.zeros_like(raw)


def load_slice(path, target, normalized: bool):
    return _normalize_slice(_load_slice_raw(path, target), normalized)


def load_mask(path, target):
    im = _resize(_read_image(path).convert("L"), target, Image.NEAREST)
    arr = np.asarray(im)
    bad = set(np.unique(arr)) - {0, 255}
    if bad:
        raise CorruptImageError(f"mask {path} holds values besides 0/255: {sorted(bad)}")
    return (arr == 255).astype(np.uint8)


# ------------------------------------------------------------------ manifest

def _check_manifest(manifest: dict):
    for key in ("name", "patients", "preprocess"):
        if key not in manifest:
            raise DataError(f"manifest missing key {key!r}")
    seen = set()
    for entry in manifest["patients"]:
        for key in ("id", "split", "labeled"):
            if key not in entry:
                raise DataError(f"manifest patient entry missing {key!r}: {entry}")
        if entry["id"] in seen:
            raise DataError(f"patient {entry['id']} appears twice in manifest")
        seen.add(entry["id"])
        if entry["split"] not in ("train", "val", "test"):
            raise DataError(f"patient {entry['id']} has unknown split {entry['split']!r}")


def read_manifest(root_dir) -> dict:
    path = os.path.join(root_dir, "manifest.json")
    if not os.path.exists(path):
        raise MissingFileError(f"missing manifest: {path}")
    with open(path) as f:
        manifest = json.load(f)
    _check_manifest(manifest)
    return manifest


# ------------------------------------------------------------------ ingest

def drop_empty(slices, masks=None, drop_empty_masks: bool = False):
    """Filter out exactly-black slices (max intensity 0).

    With ``drop_empty_masks`` also drops labeled slices whose mask has no
    object pixels.  Returns (kept_slices, kept_masks, dropped_indices) with
    mask keys remapped to the new positions.
    """
    masks = masks or {}
    dropped = []
    for i, s in enumerate(slices):
        if np.asarray(s).max() == 0:
            dropped.append(i)
        elif drop_empty_masks and i in masks and not masks[i].any():
            dropped.append(i)
    kept = [s for i, s in enumerate(slices) if i not in dropped]
    remap = {}
    new_i = 0
    for i in range(len(slices)):
        if i not in dropped:
            remap[i] = new_i
            new_i += 1
    kept_masks = {remap[i]: m for i, m in masks.items() if i in remap}
    return kept, kept_masks, dropped


def ingest_patients(root_dir, manifest: dict = None, drop_empty_masks: bool = False):
    """Load every patient listed in the manifest.

    Returns (volumes, manifest) where the manifest's preprocess record has
    been updated with the indices dropped per patient (original positions,
    pre-drop numbering).
    """
    if manifest is None:
        manifest = read_manifest(root_dir)
    else:
        _check_manifest(manifest)
    pre = manifest["preprocess"]
    target = tuple(pre.get("resize") or (224, 224))
    normalized = bool(pre.get("normalized", False))
    dropped_record = []
    volumes = []
    for entry in manifest["patients"]:
        pid = entry["id"]
        slice_dir = os.path.join(root_dir, pid, "slices")
        if not os.path.isdir(slice_dir):
            raise MissingFileError(f"missing slice directory: {slice_dir}")
        names = sorted(n for n in os.listdir(slice_dir) if n.endswith(".png"))
        if not names:
            raise MissingFileError(f"no slices under {slice_dir}")
        # emptiness is judged on raw intensities: min-max scaling would
        # collapse a constant nonzero slice to zeros and mis-drop it
        raws = [_load_slice_raw(os.path.join(slice_dir, n), target) for n in names]
        masks = {}
        for li in entry["labeled"]:
            if not 0 <= li < len(raws):
                raise DataError(
                    f"patient {pid}: labeled index {li} outside 0..{len(raws) - 1}"
                )
            mask_path = os.path.join(root_dir, pid, "masks", names[li])
            masks[li] = load_mask(mask_path, target)
        raws, masks, dropped = drop_empty(raws, masks, drop_empty_masks)
        slices = [_normalize_slice(r, normalized) for r in raws]
        dropped_record.extend({"patient": pid, "index": i} for i in dropped)
        volumes.append(
            PatientVolume(pid, slices, masks, split=entry["split"])
        )
    manifest = dict(manifest)
    manifest["preprocess"] = dict(pre, dropped=dropped_record)
    return volumes, manifest


def export_patients(volumes, root_dir, name: str = "export"):
    """Write volumes to the directory contract; returns the manifest.

    Slices are quantized to uint8; the manifest marks them as already
    normalized so re-ingestion skips min-max scaling.
    """
    os.makedirs(root_dir, exist_ok=True)
    entries = []
    size = None
    for vol in volumes:
        pdir = os.path.join(root_dir, vol.patient_id)
        os.makedirs(os.path.join(pdir, "slices"), exist_ok=True)
        if vol.masks:
            os.makedirs(os.path.join(pdir, "masks"), exist_ok=True)
        for i, s in enumerate(vol.slices):
            arr = np.clip(np.round(np.asarray(s) * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(arr, "RGB").save(
                os.path.join(pdir, "slices", f"{i:04d}.png")
            )
            size = s.shape[:2]
        for i, m in vol.masks.items():
            Image.fromarray((m * 255).astype(np.uint8), "L").save(
                os.path.join(pdir, "masks", f"{i:04d}.png")
            )
        entries.append(
            {"id": vol.patient_id, "split": vol.split, "labeled": vol.labeled_indices}
        )
    manifest = {
        "name": name,
        "patients": entries,
        "preprocess": {"resize": list(size), "dropped": [], "normalized": True},
    }
    with open(os.path.join(root_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    return manifest


def export_source(dataset: SourceDataset, root_dir, name: str = "synth_source"):
    """Write a source dataset as class trees; returns the manifest.

    Layout: root/<class_id>/images/NNNN.png plus masks/NNNN.png. Images are
    quantized to uint8 like export_patients, so a round trip stays within
    1/255 per channel with masks exact.
    """
    os.makedirs(root_dir, exist_ok=True)
    for cid in dataset.classes:
        cdir = os.path.join(root_dir, cid)
        os.makedirs(os.path.join(cdir, "images"), exist_ok=True)
        os.makedirs(os.path.join(cdir, "masks"), exist_ok=True)
        for i, (img, mask) in enumerate(dataset.samples[cid]):
            arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(arr, "RGB").save(
                os.path.join(cdir, "images", f"{i:04d}.png")
            )
            Image.fromarray((mask * 255).astype(np.uint8), "L").save(
                os.path.join(cdir, "masks", f"{i:04d}.png")
            )
    manifest = {"name": name, "kind": "source",
                "classes": [str(c) for c in dataset.classes]}
    with open(os.path.join(root_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    return manifest


def read_source(root_dir) -> SourceDataset:
    """Load a class tree written by export_source, at native resolution."""
    mpath = os.path.join(root_dir, "manifest.json")
    if not os.path.exists(mpath):
        raise MissingFileError(f"missing file: {mpath}")
    with open(mpath) as f:
        try:
            manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise DataError(f"{mpath} is not valid JSON: {e}") from e
    if manifest.get("kind") != "source":
        raise DataError(f"{mpath} does not describe a source dataset")
    samples = {}
    for cid in manifest["classes"]:
        cdir = os.path.join(root_dir, cid)
        idir = os.path.join(cdir, "images")
        names = sorted(os.listdir(idir)) if os.path.isdir(idir) else []
        if not names:
            raise DataError(f"class {cid} has no images under {idir}")
        with Image.open(os.path.join(idir, names[0])) as first:
            target = (first.size[1], first.size[0])
        pairs = []
        for n in names:
            img = load_slice(os.path.join(idir, n), target, normalized=True)
            mask = load_mask(os.path.join(cdir, "masks", n), target)
            if mask.shape != img.shape[:2]:
                raise MaskShapeMismatchError(
                    f"mask {n} of class {cid}: {mask.shape} vs {img.shape[:2]}"
                )
            pairs.append((img, mask))
        samples[cid] = pairs
    return SourceDataset(classes=list(manifest["classes"]), samples=samples)


# ------------------------------------------------------------------ synthetic

def _texture(rng, size, coarse: int, lo: float, hi: float):
    """Smooth-ish random field in [lo, hi] from an upsampled coarse grid."""
    g = rng.random((max(size // coarse, 1) + 1, max(size // coarse, 1) + 1))
    reps = int(np.ceil(size / g.shape[0]))
    fine = np.kron(g, np.ones((reps, reps)))[:size, :size]
    return lo + (hi - lo) * fine


def _shape_mask(family: str, rng, size: int) -> np.ndarray:
    """One random instance of a shape family; non-empty, inside borders."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    margin = max(2.0, size * 0.08)
    cx = rng.uniform(margin + size * 0.22, size - margin - size * 0.22)
    cy = rng.uniform(margin + size * 0.22, size - margin - size * 0.22)
    lim = min(cx, cy, size - 1 - cx, size - 1 - cy) - margin / 2
    big = max(lim, 3.0)
    rot = rng.uniform(0, np.pi)
    dx, dy = xx - cx, yy - cy
    xr = np.cos(rot) * dx + np.sin(rot) * dy
    yr = -np.sin(rot) * dx + np.cos(rot) * dy

    if family == "ellipse":
        rx = rng.uniform(0.55, 1.0) * big
        ry = rng.uniform(0.45, 0.9) * big
        m = (xr / rx) ** 2 + (yr / ry) ** 2 <= 1.0
    elif family == "rectangle":
        # half-diagonal stays under big so rotation cannot leave the margin
        a = rng.uniform(0.45, 0.75) * big
        b = rng.uniform(0.3, 0.6) * big
        m = (np.abs(xr) <= a) & (np.abs(yr) <= b)
    elif family == "ring":
        ro = rng.uniform(0.6, 1.0) * big
        ri = rng.uniform(0.35, 0.6) * ro
        r = np.hypot(xr, yr)
        m = (r <= ro) & (r >= ri)
    elif family == "diamond":
        a = rng.uniform(0.6, 1.0) * big
        b = rng.uniform(0.5, 0.9) * big
        m = np.abs(xr) / a + np.abs(yr) / b <= 1.0
    elif family == "cross":
        a = rng.uniform(0.18, 0.28) * big
        L = rng.uniform(0.7, 0.95) * big
        m = ((np.abs(xr) <= a) & (np.abs(yr) <= L)) | (
            (np.abs(yr) <= a) & (np.abs(xr) <= L)
        )
    elif family == "capsule":
        # L + r <= 0.98 * big keeps the rounded ends inside the margin
        L = rng.uniform(0.35, 0.6) * big
        r = rng.uniform(0.2, 0.38) * big
        t = np.clip(xr, -L, L)
        m = np.hypot(xr - t, yr) <= r
    else:
        raise ValueError(f"unknown shape family {family!r}")
    out = m.astype(np.uint8)
    if not out.any():  # tiny grids can round a shape away; force one pixel
        out[int(cy), int(cx)] = 1
    return out


SHAPE_FAMILIES = ("ellipse", "rectangle", "ring", "diamond", "cross", "capsule")


def synth_source(n_classes: int, samples_per_class: int, size: int = 32,
                 seed: int = 0) -> SourceDataset:
    """Multi-class source domain: one parameterized shape family per class."""
    if n_classes < 2:
        raise DataError("synth_source needs n_classes >= 2")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF5]))
    classes = [f"class{c:02d}" for c in range(n_classes)]
    samples = {}
    for c, name in enumerate(classes):
        family = SHAPE_FAMILIES[c % len(SHAPE_FAMILIES)]
        pairs = []
        for _ in range(samples_per_class):
            mask = _shape_mask(family, rng, size)
            bg = _texture(rng, size, coarse=6, lo=0.05, hi=0.45)
            fg = _texture(rng, size, coarse=3, lo=0.55, hi=0.95)
            gray = np.where(mask == 1, fg, bg)
            gray += rng.normal(0.0, 0.02, gray.shape)
            tint = rng.uniform(0.9, 1.0, 3)
            img = np.clip(gray[:, :, None] * tint[None, None, :], 0.0, 1.0)
            pairs.append((img, mask))
        samples[name] = pairs
    return SourceDataset(classes=classes, samples=samples)


def _blob_mask(size, cx, cy, r0, amps, phases, harmonics):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    r = np.hypot(dx, dy)
    theta = np.arctan2(dy, dx)
    radius = np.full_like(r, r0)
    for k, (a, ph) in enumerate(zip(amps, phases)):
        radius += r0 * a * np.cos(harmonics[k] * theta + ph)
    return (r <= radius).astype(np.uint8)


def synth_patients(n_patients: int, slices_per_patient: int,
                   labeled_fraction: float = 0.4, size: int = 32, seed: int = 0,
                   split: str = "train") -> list:
    """Patient volumes: a smooth blob deforming gradually across slices.

    Each patient gets its own intensity bias and noise texture.  Labeled
    slice indices are evenly interleaved.  Masks exist internally for all
    slices; the public ``masks`` dict exposes only the labeled subset, and
    val/test volumes keep the full set in the sealed ``eval_masks`` store.
    """
    if not 0.0 < labeled_fraction < 1.0:
        raise DataError("labeled_fraction must lie in (0, 1)")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB10B]))
    n = slices_per_patient
    n_l = max(1, round(n * labeled_fraction))
    labeled = sorted({int(np.floor(i * n / n_l)) for i in range(n_l)})
    volumes = []
    for p in range(n_patients):
        cx0 = size / 2 + rng.uniform(-size * 0.04, size * 0.04)
        cy0 = size / 2 + rng.uniform(-size * 0.04, size * 0.04)
        r0 = size * rng.uniform(0.22, 0.28)
        harmonics = (2, 3, 4)
        amps = rng.uniform(0.02, 0.06, 3)
        phases = rng.uniform(0, 2 * np.pi, 3)
        breath_phase = rng.uniform(0, 2 * np.pi)
        # boundary moves well under a pixel per slice so adjacent masks
        # stay within a few percent of each other by area
        drift = rng.uniform(-0.08, 0.08, 2)  # px per slice
        bias = rng.uniform(0.15, 0.35)
        contrast = rng.uniform(0.3, 0.45)
        noise_amp = rng.uniform(0.01, 0.035)
        tint = rng.uniform(0.88, 1.0, 3)
        texture = _texture(rng, size, coarse=int(rng.integers(4, 9)), lo=-0.06, hi=0.06)

        slices = []
        all_masks = {}
        for t in range(n):
            frac = t / max(n - 1, 1)
            r_t = r0 * (1.0 + 0.06 * np.sin(np.pi * frac + breath_phase))
            amps_t = amps * (1.0 + 0.2 * frac)
            mask = _blob_mask(
                size, cx0 + drift[0] * t, cy0 + drift[1] * t, r_t, amps_t,
                phases, harmonics,
            )
            gray = bias + contrast * mask + texture
            gray = gray + rng.normal(0.0, noise_amp, gray.shape)
            img = np.clip(gray[:, :, None] * tint[None, None, :], 0.0, 1.0)
            slices.append(img)
            all_masks[t] = mask
        public = {i: all_masks[i] for i in labeled}
        sealed = dict(all_masks) if split in ("val", "test") else None
        volumes.append(
            PatientVolume(f"{split}_p{p:02d}", slices, public, split=split,
                          eval_masks=sealed)
        )
    return volumes


def synth_cohort(n_train: int, n_val: int, n_test: int, slices_per_patient: int,
                 labeled_fraction: float = 0.4, size: int = 32, seed: int = 0) -> dict:
    """Train/val/test patient groups from disjoint seed streams."""
    return {
        "train": synth_patients(n_train, slices_per_patient, labeled_fraction,
                                size, seed * 3 + 1, "train"),
        "val": synth_patients(n_val, slices_per_patient, labeled_fraction,
                              size, seed * 3 + 2, "val"),
        "test": synth_patients(n_test, slices_per_patient, labeled_fraction,
                               size, seed * 3 + 3, "test"),
    }
