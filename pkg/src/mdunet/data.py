"""Multi-modal cases, slice-wise sampling, the MDT container and a synthetic cohort.

MDT layout (all integers little-endian)::

    b"MDTC" | u16 version | u32 manifest length | UTF-8 JSON manifest
    | float32 LE payload per modality (manifest order, C order D*H*W)
    | mask bytes {0,1} (only when manifest.has_mask)

The manifest is ``{case_id, modalities, shape: [D,H,W], spacing, has_mask}``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np
from scipy import ndimage

MAGIC = b"MDTC"
VERSION = 1
DEFAULT_MODALITIES = ("CBV", "CTP", "DWI", "MTT")


class MDTError(ValueError):
    pass


class BadMagicError(MDTError):
    pass


class TruncatedPayloadError(MDTError):
    pass


class ManifestMismatchError(MDTError):
    pass


@dataclass
class Case:
    case_id: str
    volumes: dict[str, np.ndarray]
    mask: np.ndarray | None = None
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.volumes = {k: np.ascontiguousarray(v, dtype=np.float32) for k, v in self.volumes.items()}
        shapes = {k: v.shape for k, v in self.volumes.items()}
        if self.mask is not None:
            self.mask = np.ascontiguousarray(self.mask, dtype=np.uint8)
            if not np.isin(self.mask, (0, 1)).all():
                raise ValueError(f"case {self.case_id}: mask is not binary")
            shapes["<mask>"] = self.mask.shape
        if len(set(shapes.values())) > 1:
            raise ValueError(f"case {self.case_id}: volumes disagree in shape {shapes}")
        for s in shapes.values():
            if len(s) != 3:
                raise ValueError(f"case {self.case_id}: volumes must be [D,H,W], got {s}")
        self.spacing = tuple(float(v) for v in self.spacing)

    @property
    def modalities(self) -> tuple[str, ...]:
        return tuple(self.volumes)

    @property
    def shape(self) -> tuple[int, int, int]:
        if self.volumes:
            return next(iter(self.volumes.values())).shape
        return self.mask.shape

    def check_modalities(self, expected: Sequence[str]) -> None:
        if tuple(self.modalities) != tuple(expected):
            raise ManifestMismatchError(
                f"case {self.case_id}: modalities {list(self.modalities)} do not match expected {list(expected)}"
            )


@dataclass
class SliceSample:
    images: list[np.ndarray]  # per modality, [H, W]
    label: np.ndarray | None
    case_id: str
    index: int


def normalize(volume: np.ndarray) -> np.ndarray:
    """Min-max rescale to [0, 1]; a constant volume maps to zeros."""
    v = np.asarray(volume)
    out_dtype = v.dtype if v.dtype.kind == "f" else np.float32
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros(v.shape, dtype=out_dtype)
    return ((v - lo) / (hi - lo)).astype(out_dtype)


def normalize_case(case: Case) -> Case:
    return Case(case.case_id, {k: normalize(v) for k, v in case.volumes.items()}, case.mask, case.spacing)


def slice_case(case: Case) -> list[SliceSample]:
    D = case.shape[0]
    vols = list(case.volumes.values())
    return [
        SliceSample([v[d] for v in vols], None if case.mask is None else case.mask[d], case.case_id, d)
        for d in range(D)
    ]


def stack_slices(samples: Sequence[SliceSample], modalities: Sequence[str], spacing=(1.0, 1.0, 1.0)) -> Case:
    samples = sorted(samples, key=lambda s: s.index)
    ids = {s.case_id for s in samples}
    if len(ids) != 1:
        raise ValueError(f"slices come from several cases: {sorted(ids)}")
    vols = {m: np.stack([s.images[i] for s in samples]) for i, m in enumerate(modalities)}
    mask = None if samples[0].label is None else np.stack([s.label for s in samples])
    return Case(samples[0].case_id, vols, mask, spacing)


# --- MDT container ----------------------------------------------------------


def write_container(fh: BinaryIO, magic: bytes, manifest: dict, payloads: Sequence[bytes]) -> None:
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    fh.write(magic)
    fh.write(struct.pack("<HI", VERSION, len(blob)))
    fh.write(blob)
    for p in payloads:
        fh.write(p)


def read_container(raw: bytes, magic: bytes) -> tuple[dict, memoryview]:
    """Split a container into (manifest, payload bytes)."""
    if raw[:4] != magic:
        raise BadMagicError(f"bad magic {raw[:4]!r}, expected {magic!r}")
    if len(raw) < 10:
        raise TruncatedPayloadError(f"header truncated: {len(raw)} bytes")
    version, n = struct.unpack_from("<HI", raw, 4)
    if version != VERSION:
        raise MDTError(f"unsupported format version {version} (reader handles {VERSION})")
    if len(raw) < 10 + n:
        raise TruncatedPayloadError(f"manifest truncated: need {n} bytes, have {len(raw) - 10}")
    try:
        manifest = json.loads(bytes(raw[10 : 10 + n]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MDTError(f"manifest is not valid UTF-8 JSON: {e}") from None
    return manifest, memoryview(raw)[10 + n :]


def save_case(path, case: Case) -> None:
    manifest = {
        "case_id": case.case_id,
        "modalities": list(case.modalities),
        "shape": list(case.shape),
        "spacing": list(case.spacing),
        "has_mask": case.mask is not None,
    }
    payloads = [v.astype("<f4").tobytes() for v in case.volumes.values()]
    if case.mask is not None:
        payloads.append(case.mask.astype(np.uint8).tobytes())
    with open(path, "wb") as fh:
        write_container(fh, MAGIC, manifest, payloads)


def load_case(path) -> Case:
    raw = Path(path).read_bytes()
    manifest, payload = read_container(raw, MAGIC)
    required = ("case_id", "modalities", "shape", "spacing", "has_mask")
    missing = [k for k in required if k not in manifest]
    if missing:
        raise MDTError(f"manifest missing keys {missing}")
    shape = tuple(int(v) for v in manifest["shape"])
    if len(shape) != 3 or min(shape) < 1:
        raise ManifestMismatchError(f"manifest shape {shape} is not a positive [D,H,W]")
    nvox = int(np.prod(shape))
    mods = list(manifest["modalities"])
    mask_bytes = nvox if manifest["has_mask"] else 0
    expected = 4 * nvox * len(mods) + mask_bytes
    have = len(payload)
    if have != expected:
        body = have - mask_bytes
        if have > expected or (body >= 0 and body % (4 * nvox) == 0):
            found = body / (4 * nvox) if body >= 0 else 0
            raise ManifestMismatchError(
                f"manifest declares {len(mods)} modalities {mods} but payload holds {found:g} "
                f"({have} bytes, expected {expected})"
            )
        raise TruncatedPayloadError(f"payload truncated: {have} bytes, expected {expected}")
    vols = {}
    for i, m in enumerate(mods):
        chunk = payload[4 * nvox * i : 4 * nvox * (i + 1)]
        vols[m] = np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(shape)
    mask = None
    if manifest["has_mask"]:
        mask = np.frombuffer(payload[4 * nvox * len(mods) :], dtype=np.uint8).reshape(shape).copy()
        if not np.isin(mask, (0, 1)).all():
            raise MDTError("mask payload contains values other than 0/1")
    return Case(str(manifest["case_id"]), vols, mask, tuple(manifest["spacing"]))


def save_dataset(directory, cases: Sequence[Case]) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for c in cases:
        save_case(d / f"{c.case_id}.mdt", c)


def load_dataset(directory) -> list[Case]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"data directory {d} does not exist")
    files = sorted(d.glob("*.mdt"))
    if not files:
        raise FileNotFoundError(f"no .mdt cases in {d}")
    return [load_case(f) for f in files]


# --- synthetic cohort --------------------------------------------------------

MIN_LESION_FRACTION = 0.002
MAX_LESION_FRACTION = 0.08
BLOB_AREA_RANGE = (4.0, 400.0)


@dataclass
class _Blob:
    cy: float
    cx: float
    a: float
    b: float
    theta: float

    def raster(self, H, W) -> np.ndarray:
        yy, xx = np.mgrid[0:H, 0:W]
        dy, dx = yy - self.cy, xx - self.cx
        c, s = np.cos(self.theta), np.sin(self.theta)
        u, v = c * dx + s * dy, -s * dx + c * dy
        return (u / self.a) ** 2 + (v / self.b) ** 2 <= 1.0


def _blob_with_area(rng, area: float) -> _Blob:
    ratio = rng.uniform(0.6, 1.0)
    a = np.sqrt(area / (np.pi * ratio))
    return _Blob(0.0, 0.0, a, a * ratio, rng.uniform(0, np.pi))


def _place(rng, blobs: list[_Blob], H: int, W: int, margin: int = 2, tries: int = 200) -> list[np.ndarray] | None:
    """Position blobs without overlap (dilated by ``margin``); None if it fails."""
    occupied = np.zeros((H, W), dtype=bool)
    out: dict[int, np.ndarray] = {}
    for i in sorted(range(len(blobs)), key=lambda i: -blobs[i].a):
        blob = blobs[i]
        for _ in range(tries):
            r = int(np.ceil(blob.a))
            blob.cy = rng.uniform(r + 1, H - r - 2)
            blob.cx = rng.uniform(r + 1, W - r - 2)
            m = blob.raster(H, W)
            if m.sum() == 0:
                continue
            if not (ndimage.binary_dilation(m, iterations=margin) & occupied).any():
                occupied |= m
                out[i] = m
                break
        else:
            return None
    return [out[i] for i in range(len(blobs))]


def _texture(rng, H, W) -> np.ndarray:
    t = ndimage.gaussian_filter(rng.standard_normal((H, W)), sigma=3.0)
    t = (t - t.min()) / (t.max() - t.min() + 1e-12)
    return 0.45 * t


def _synth_slice(rng, H, W, n_mod, conjunctive):
    area_lo, area_hi = BLOB_AREA_RANGE
    n_vox = H * W
    while True:
        k = int(rng.integers(1, 4))
        areas = np.exp(rng.uniform(np.log(area_lo), np.log(area_hi), size=k))
        if not MIN_LESION_FRACTION * n_vox <= areas.sum() <= MAX_LESION_FRACTION * n_vox:
            continue
        lesion = [_blob_with_area(rng, a) for a in areas]
        # per informative modality, two same-sized decoys for every lesion blob
        n_decoy_mods = 2 if conjunctive else 0
        decoys = [[_blob_with_area(rng, a * rng.uniform(0.8, 1.2)) for a in areas for _ in range(2)] for _ in range(n_decoy_mods)]
        placed = _place(rng, lesion + [b for group in decoys for b in group], H, W)
        if placed is None:
            continue
        masks_lesion = placed[:k]
        label = np.any(masks_lesion, axis=0)
        frac = label.sum() / n_vox
        if not MIN_LESION_FRACTION < frac < MAX_LESION_FRACTION:
            continue
        decoy_masks = []
        pos = k
        for group in decoys:
            decoy_masks.append(np.any(placed[pos : pos + len(group)], axis=0))
            pos += len(group)
        break

    images = []
    for m in range(n_mod):
        img = _texture(rng, H, W)
        amp = rng.uniform(0.6, 1.0)
        if conjunctive:
            if m < 2:
                img = img + amp * (label | decoy_masks[m])
            else:
                extra = [_blob_with_area(rng, a) for a in areas]
                spots = _place(rng, extra, H, W)
                if spots is not None:
                    img = img + amp * np.any(spots, axis=0)
        else:
            img = img + amp * label
        img = img + rng.normal(0.0, 0.03, size=(H, W))
        images.append(img)
    return images, label.astype(np.uint8)


def synth_dataset(
    seed: int,
    num_cases: int,
    size: tuple[int, int] = (64, 64),
    depth: int | Sequence[int] = 1,
    num_modalities: int = 2,
    conjunctive: bool = True,
    modalities: Sequence[str] | None = None,
    id_offset: int = 0,
) -> list[Case]:
    """Textured pseudo-modalities with 1-3 lesion blobs per slice.

    Blob areas are log-uniform over two orders of magnitude. In conjunctive
    mode the first two modalities each show the lesion plus their own decoy
    blobs of matching size and brightness, so only the co-occurrence of both
    signals identifies lesion voxels. Volumes come out in arbitrary intensity
    units; :func:`normalize` maps them to [0, 1]. ``depth`` is a fixed slice
    count or a sequence to draw from per case (e.g. ``(2, 4)`` for thin volumes).
    """
    H, W = size
    if H % 16 or W % 16 or H < 16 or W < 16:
        raise ValueError(f"size {size} must be a positive multiple of 16")
    if conjunctive and num_modalities < 2:
        raise ValueError("conjunctive mode needs at least two modalities")
    if num_modalities < 1 or num_cases < 0:
        raise ValueError("need num_modalities >= 1 and num_cases >= 0")
    if modalities is None:
        modalities = DEFAULT_MODALITIES if num_modalities == 4 else tuple(f"M{i + 1}" for i in range(num_modalities))
    if len(modalities) != num_modalities:
        raise ValueError(f"{len(modalities)} modality names for {num_modalities} modalities")
    cases = []
    for c in range(num_cases):
        idx = id_offset + c
        rng = np.random.default_rng([seed, idx])
        D = int(depth) if np.isscalar(depth) else int(rng.choice(list(depth)))
        if D < 1:
            raise ValueError(f"depth must be >= 1, got {D}")
        vols = [[] for _ in range(num_modalities)]
        labels = []
        for _ in range(D):
            images, label = _synth_slice(rng, H, W, num_modalities, conjunctive)
            for m in range(num_modalities):
                vols[m].append(images[m])
            labels.append(label)
        gain, offset = rng.uniform(50, 400, size=num_modalities), rng.uniform(-100, 100, size=num_modalities)
        volumes = {name: (np.stack(vols[m]) * gain[m] + offset[m]).astype(np.float32) for m, name in enumerate(modalities)}
        cases.append(Case(f"case{idx:04d}", volumes, np.stack(labels), (1.0, 1.0, 1.0)))
    return cases
