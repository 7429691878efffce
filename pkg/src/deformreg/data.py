"""Synthetic labeled phantoms, volume IO, and dataset pairing.

Phantoms are textured ellipsoid scenes deformed by a known smooth field so
the whole pipeline can be exercised and scored on a CPU in minutes. Volume IO
supports two formats: a minimal NIfTI-1 subset (dims, float32 data, pixdim
spacing, affine stored verbatim) and a portable raw format (little-endian
binary plus a JSON sidecar) whose round-trip is bit-exact.
"""

from __future__ import annotations

import gzip
import itertools
import json
import struct
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .grid import (
    AffineTransform,
    DisplacementField,
    LabelMap,
    Volume,
    affine_to_field,
    compose,
    identity_coords,
    jacobian_determinant,
    warp,
    warp_array,
)

__all__ = [
    "VolumeIOError",
    "MalformedHeaderError",
    "UnsupportedRankError",
    "ShapeOverflowError",
    "UnsupportedDtypeError",
    "ManifestError",
    "PhantomSpec",
    "PhantomPair",
    "generate_phantom_pair",
    "invert_displacement",
    "read_volume",
    "write_volume",
    "read_labels",
    "write_labels",
    "read_field",
    "write_field",
    "RegistrationDataset",
    "PairRecord",
    "build_dataset",
    "make_phantom_dataset",
    "save_phantom_dataset",
]


# ---------------------------------------------------------------------------
# errors
# ---------------------------------------------------------------------------

class VolumeIOError(Exception):
    """Base class for volume IO failures."""


class MalformedHeaderError(VolumeIOError):
    """Header bytes do not parse as the advertised format."""


class UnsupportedRankError(VolumeIOError):
    """NIfTI dim[0] is not 3; only scalar 3D volumes are supported."""


class ShapeOverflowError(VolumeIOError):
    """Declared dimensions are non-positive or implausibly large."""


class UnsupportedDtypeError(VolumeIOError):
    """On-disk dtype is not in the supported subset."""


class ManifestError(Exception):
    """Dataset manifest is missing files, malformed, or inconsistent."""


# ---------------------------------------------------------------------------
# phantoms
# ---------------------------------------------------------------------------

@dataclass
class PhantomSpec:
    """Recipe for one synthetic pair.

    ``max_displacement`` should stay within the solver capture range
    (roughly quant * radius * effective stride * 2 voxels); exceeding it is a
    legitimate stress test, not an error. Defaults are calibrated so the
    zero-field Dice of a pair lands near 0.5.

    With ``independent_texture`` the moving image is rebuilt from the warped
    labels with a fresh texture draw (and optional per-structure
    ``intensity_jitter``), so the pair shares geometry but not appearance
    detail, in the spirit of cross-subject registration; by default the
    moving image is a plain resampling of the fixed scene.
    """

    shape: tuple[int, int, int] = (48, 48, 48)
    n_structures: int = 6
    radius_range: tuple[float, float] = (4.0, 7.5)
    deform_sigma: float = 6.0
    max_displacement: float = 7.5
    affine_rotation_deg: float = 6.0
    affine_translation: float = 3.2
    affine_scale_jitter: float = 0.03
    texture_sigma: float = 2.0
    texture_strength: float = 0.18
    independent_texture: bool = False
    intensity_jitter: float = 0.0
    seed: int = 0
    max_tries: int = 20


@dataclass
class PhantomPair:
    """A generated pair: the moving image is the fixed scene pushed through
    ``true_field``; ``target_field`` is its numerical inverse, i.e. the field
    that warps the moving image (and labels) back onto the fixed grid."""

    fixed: Volume
    moving: Volume
    labels_fixed: LabelMap
    labels_moving: LabelMap
    true_field: DisplacementField
    target_field: DisplacementField


def _ellipsoid_scene(spec: PhantomSpec, rng: np.random.Generator):
    shape = spec.shape
    labels = np.zeros(shape, dtype=np.int32)
    coords = identity_coords(shape, dtype=np.float64)
    margin = spec.radius_range[1] + 2.0
    placed = []
    for k in range(1, spec.n_structures + 1):
        for _ in range(200):
            center = np.array(
                [rng.uniform(margin, n - 1 - margin) for n in shape]
            )
            radii = rng.uniform(*spec.radius_range, size=3)
            # keep centers apart so structures rarely merge
            if all(np.linalg.norm(center - c) > 0.9 * (r + radii.max())
                   for c, r in placed):
                break
        angles = rng.uniform(0, np.pi, size=3)

        def rot(axis_angle):
            a, b, g = axis_angle
            rz = np.array([[1, 0, 0], [0, np.cos(a), -np.sin(a)], [0, np.sin(a), np.cos(a)]])
            ry = np.array([[np.cos(b), 0, np.sin(b)], [0, 1, 0], [-np.sin(b), 0, np.cos(b)]])
            rx = np.array([[np.cos(g), -np.sin(g), 0], [np.sin(g), np.cos(g), 0], [0, 0, 1]])
            return rz @ ry @ rx

        rel = coords - center.reshape(3, 1, 1, 1)
        local = np.einsum("ij,j...->i...", rot(angles), rel)
        dist = sum((local[i] / radii[i]) ** 2 for i in range(3))
        inside = dist <= 1.0
        labels[inside] = k
        placed.append((center, radii.max()))
    intensity = _paint_intensity(labels, spec, rng, jitter=0.0)
    return intensity, labels


def _paint_intensity(
    labels: np.ndarray, spec: PhantomSpec, rng: np.random.Generator, jitter: float
) -> np.ndarray:
    """Base intensity per structure plus a smooth texture field."""
    intensity = np.full(labels.shape, 0.12, dtype=np.float64)
    for k in range(1, spec.n_structures + 1):
        base = 0.35 + 0.1 * k
        if jitter > 0:
            base += jitter * rng.uniform(-1.0, 1.0)
        intensity[labels == k] = base
    texture = gaussian_filter(rng.standard_normal(labels.shape), spec.texture_sigma)
    std = texture.std()
    if std > 0:
        texture = texture / std
    return np.clip(intensity + spec.texture_strength * texture, 0.0, 1.0).astype(np.float32)


def _random_deformation(spec: PhantomSpec, rng: np.random.Generator, shrink: float):
    shape = spec.shape
    smooth = np.stack(
        [gaussian_filter(rng.standard_normal(shape), spec.deform_sigma) for _ in range(3)]
    )
    mags = np.sqrt((smooth**2).sum(axis=0))
    peak = mags.max()
    if peak > 0:
        smooth *= shrink * spec.max_displacement / peak
    smooth_field = DisplacementField(smooth.astype(np.float32))

    angles = np.deg2rad(rng.uniform(-spec.affine_rotation_deg, spec.affine_rotation_deg, 3))
    ca, sa = np.cos(angles[0]), np.sin(angles[0])
    cb, sb = np.cos(angles[1]), np.sin(angles[1])
    cg, sg = np.cos(angles[2]), np.sin(angles[2])
    rz = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])
    ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    rx = np.array([[cg, -sg, 0], [sg, cg, 0], [0, 0, 1]])
    scale = np.diag(1.0 + rng.uniform(-spec.affine_scale_jitter, spec.affine_scale_jitter, 3))
    linear = rz @ ry @ rx @ scale
    center = (np.asarray(shape, dtype=np.float64) - 1) / 2
    shift = rng.uniform(-spec.affine_translation, spec.affine_translation, 3) * shrink
    translation = center - linear @ center + shift
    affine_field = affine_to_field(AffineTransform(linear, translation), shape)
    return compose(smooth_field, affine_field)


def invert_displacement(field: DisplacementField, iters: int = 12) -> DisplacementField:
    """Fixed-point displacement inversion: v(p) = -u(p + v(p)).

    Converges for the smooth, moderate-magnitude fields the phantom generator
    produces; used to turn the generative field into a registration target.
    """
    u = field.vectors
    v = np.zeros_like(u)
    for _ in range(iters):
        v = -np.stack([warp_array(u[c], v) for c in range(3)], axis=0)
    return DisplacementField(v)


def generate_phantom_pair(spec: PhantomSpec) -> PhantomPair:
    """Deterministic (seed-pure) generation of one labeled, deformed pair.

    The deformation is redrawn (and gently shrunk after repeated failures)
    until its Jacobian determinant is positive everywhere.
    """
    rng = np.random.default_rng(spec.seed)
    intensity, labels = _ellipsoid_scene(spec, rng)
    fixed = Volume(intensity)
    labels_fixed = LabelMap(labels)

    true_field = None
    for attempt in range(spec.max_tries):
        shrink = 0.9 ** max(0, attempt - 4)
        candidate = _random_deformation(spec, rng, shrink)
        if spec.max_displacement == 0 and spec.affine_translation == 0:
            true_field = candidate
            break
        if jacobian_determinant(candidate).min() > 0.05:
            true_field = candidate
            break
    if true_field is None:
        raise RuntimeError("could not draw a fold-free deformation; lower max_displacement")

    labels_moving = warp(labels_fixed, true_field)
    if spec.independent_texture:
        # same geometry, fresh appearance: rebuild the moving image from the
        # warped labels instead of resampling the fixed intensities
        moving = Volume(
            _paint_intensity(labels_moving.labels, spec, rng, spec.intensity_jitter)
        )
    else:
        moving = warp(fixed, true_field)
    target_field = invert_displacement(true_field)
    return PhantomPair(fixed, moving, labels_fixed, labels_moving, true_field, target_field)


# ---------------------------------------------------------------------------
# raw format: little-endian binary + JSON sidecar
# ---------------------------------------------------------------------------

_RAW_DTYPES = {"float32": "<f4", "int32": "<i4"}


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".json")


def _write_raw(path: Path, array: np.ndarray, spacing, dtype: str, kind: str | None):
    arr = np.ascontiguousarray(array.astype(_RAW_DTYPES[dtype]))
    path.write_bytes(arr.tobytes())
    sidecar = {
        "shape": list(arr.shape),
        "spacing": [float(s) for s in spacing],
        "dtype": dtype,
        "order": "C",
    }
    if kind:
        sidecar["kind"] = kind
    _sidecar_path(path).write_text(json.dumps(sidecar, indent=2))


def _read_raw(path: Path):
    sidecar_file = _sidecar_path(path)
    if not sidecar_file.exists():
        raise MalformedHeaderError(f"missing sidecar {sidecar_file}")
    try:
        sidecar = json.loads(sidecar_file.read_text())
        shape = tuple(int(n) for n in sidecar["shape"])
        dtype = sidecar["dtype"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise MalformedHeaderError(f"bad sidecar {sidecar_file}: {exc}") from exc
    if dtype not in _RAW_DTYPES:
        raise UnsupportedDtypeError(f"raw dtype {dtype!r} not supported")
    if any(n <= 0 for n in shape) or int(np.prod(shape)) > 2**31:
        raise ShapeOverflowError(f"bad raw shape {shape}")
    expect = int(np.prod(shape)) * 4
    blob = path.read_bytes()
    if len(blob) != expect:
        raise MalformedHeaderError(
            f"{path}: file has {len(blob)} bytes, sidecar shape {shape} needs {expect}"
        )
    arr = np.frombuffer(blob, dtype=_RAW_DTYPES[dtype]).reshape(shape)
    spacing = tuple(float(s) for s in sidecar.get("spacing", (1.0, 1.0, 1.0)))
    return arr.copy(), spacing, sidecar


# ---------------------------------------------------------------------------
# NIfTI-1 minimal subset
# ---------------------------------------------------------------------------

_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32, 64: np.float64}
_NIFTI_CODES = {np.dtype(np.float32): (16, 32), np.dtype(np.int32): (8, 32)}


def _read_nifti(path: Path):
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 352:
        raise MalformedHeaderError(f"{path}: shorter than a NIfTI-1 header")
    endian = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != 348:
        endian = ">"
        (sizeof_hdr,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr != 348:
            raise MalformedHeaderError(f"{path}: sizeof_hdr is not 348")
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise MalformedHeaderError(f"{path}: bad magic {magic!r}")
    dim = struct.unpack_from(f"{endian}8h", raw, 40)
    if dim[0] != 3:
        raise UnsupportedRankError(f"{path}: dim[0]={dim[0]}, only rank 3 supported")
    nx, ny, nz = dim[1], dim[2], dim[3]
    if min(nx, ny, nz) <= 0 or nx * ny * nz > 2**31:
        raise ShapeOverflowError(f"{path}: bad dims {(nx, ny, nz)}")
    (datatype,) = struct.unpack_from(f"{endian}h", raw, 70)
    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedDtypeError(f"{path}: datatype code {datatype} not supported")
    pixdim = struct.unpack_from(f"{endian}8f", raw, 76)
    (vox_offset,) = struct.unpack_from(f"{endian}f", raw, 108)
    scl_slope, scl_inter = struct.unpack_from(f"{endian}2f", raw, 112)
    (sform_code,) = struct.unpack_from(f"{endian}h", raw, 254)
    srow = struct.unpack_from(f"{endian}12f", raw, 280)

    offset = int(vox_offset) if vox_offset >= 352 else 352
    count = nx * ny * nz
    dt = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(endian)
    data = np.frombuffer(raw, dtype=dt, count=count, offset=offset)
    if data.size != count:
        raise MalformedHeaderError(f"{path}: data truncated")
    # NIfTI stores x fastest; reshape to (z, y, x) C-order
    arr = data.reshape((nz, ny, nx)).astype(np.float32)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        arr = arr * slope + scl_inter
    spacing = tuple(abs(p) if p != 0 else 1.0 for p in (pixdim[3], pixdim[2], pixdim[1]))
    affine = None
    if sform_code > 0:
        affine = np.array(
            [srow[0:4], srow[4:8], srow[8:12], [0.0, 0.0, 0.0, 1.0]], dtype=np.float64
        )
    return arr, spacing, affine


def _write_nifti(path: Path, array: np.ndarray, spacing, affine: np.ndarray | None):
    arr = np.ascontiguousarray(array)
    if arr.dtype not in _NIFTI_CODES:
        arr = arr.astype(np.float32)
    code, bitpix = _NIFTI_CODES[arr.dtype]
    nz, ny, nx = arr.shape
    header = bytearray(348)
    struct.pack_into("<i", header, 0, 348)
    struct.pack_into("<8h", header, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, code)
    struct.pack_into("<h", header, 72, bitpix)
    struct.pack_into(
        "<8f", header, 76, 1.0, float(spacing[2]), float(spacing[1]), float(spacing[0]),
        0.0, 0.0, 0.0, 0.0,
    )
    struct.pack_into("<f", header, 108, 352.0)
    struct.pack_into("<2f", header, 112, 1.0, 0.0)
    if affine is None:
        affine = np.diag([spacing[2], spacing[1], spacing[0], 1.0])
    struct.pack_into("<2h", header, 252, 0, 1)  # qform 0, sform 1
    struct.pack_into("<12f", header, 280, *np.asarray(affine, dtype=np.float64)[:3].ravel())
    header[344:348] = b"n+1\x00"
    blob = bytes(header) + b"\x00" * 4 + arr.astype(arr.dtype.newbyteorder("<")).tobytes()
    if str(path).endswith(".gz"):
        path.write_bytes(gzip.compress(blob))
    else:
        path.write_bytes(blob)


def _is_nifti(path: Path) -> bool:
    name = str(path)
    return name.endswith(".nii") or name.endswith(".nii.gz")


def write_volume(volume: Volume, path) -> None:
    """Write a volume as NIfTI (.nii/.nii.gz) or raw (anything else)."""
    path = Path(path)
    if _is_nifti(path):
        _write_nifti(path, volume.data.astype(np.float32), volume.spacing, volume.affine)
    else:
        _write_raw(path, volume.data, volume.spacing, "float32", kind=None)


def read_volume(path) -> Volume:
    """Read a volume from NIfTI or raw format."""
    path = Path(path)
    if not path.exists():
        raise VolumeIOError(f"no such file: {path}")
    if _is_nifti(path):
        arr, spacing, affine = _read_nifti(path)
        return Volume(arr, spacing=spacing, affine=affine)
    arr, spacing, _ = _read_raw(path)
    return Volume(arr.astype(np.float32), spacing=spacing)


def write_labels(labels: LabelMap, path, spacing=(1.0, 1.0, 1.0)) -> None:
    path = Path(path)
    if _is_nifti(path):
        _write_nifti(path, labels.labels.astype(np.int32), spacing, None)
    else:
        _write_raw(path, labels.labels, spacing, "int32", kind="labels")


def read_labels(path) -> LabelMap:
    path = Path(path)
    if not path.exists():
        raise VolumeIOError(f"no such file: {path}")
    if _is_nifti(path):
        arr, _, _ = _read_nifti(path)
        return LabelMap(np.rint(arr).astype(np.int32))
    arr, _, _ = _read_raw(path)
    return LabelMap(arr.astype(np.int32))


def write_field(field: DisplacementField, path) -> None:
    """Store a displacement field in the raw format with a 'displacement' tag."""
    path = Path(path)
    arr = np.ascontiguousarray(field.vectors.astype("<f4"))
    path.write_bytes(arr.tobytes())
    sidecar = {
        "shape": list(arr.shape),
        "spacing": [1.0, 1.0, 1.0],
        "dtype": "float32",
        "order": "C",
        "kind": "displacement",
    }
    _sidecar_path(path).write_text(json.dumps(sidecar, indent=2))


def read_field(path) -> DisplacementField:
    path = Path(path)
    if not path.exists():
        raise VolumeIOError(f"no such file: {path}")
    sidecar_file = _sidecar_path(path)
    if not sidecar_file.exists():
        raise MalformedHeaderError(f"missing sidecar {sidecar_file}")
    sidecar = json.loads(sidecar_file.read_text())
    shape = tuple(int(n) for n in sidecar["shape"])
    if len(shape) != 4 or shape[0] != 3:
        raise MalformedHeaderError(f"displacement shape must be (3,D,H,W), got {shape}")
    blob = path.read_bytes()
    if len(blob) != int(np.prod(shape)) * 4:
        raise MalformedHeaderError(f"{path}: size does not match sidecar shape")
    arr = np.frombuffer(blob, dtype="<f4").reshape(shape)
    return DisplacementField(arr.copy())


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PairRecord:
    """One registration pair; ids resolve through the dataset stores."""

    fixed_id: str
    moving_id: str
    gt_field_id: str | None = None


@dataclass
class RegistrationDataset:
    """A split's worth of pairs plus id-indexed stores.

    Store values are either in-memory objects or filesystem paths resolved
    lazily on access.
    """

    pairs: list[PairRecord]
    mode: str = "intra"  # "inter" | "intra"
    split: str = "train"
    volumes: dict = dataclass_field(default_factory=dict)
    labels: dict = dataclass_field(default_factory=dict)
    fields: dict = dataclass_field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.pairs)

    def volume(self, vid: str) -> Volume:
        entry = self.volumes[vid]
        if not isinstance(entry, Volume):
            entry = read_volume(entry)
            self.volumes[vid] = entry
        return entry

    def labels_for(self, vid: str) -> LabelMap | None:
        entry = self.labels.get(vid)
        if entry is None:
            return None
        if not isinstance(entry, LabelMap):
            entry = read_labels(entry)
            self.labels[vid] = entry
        return entry

    def gt_field(self, pair: PairRecord) -> DisplacementField | None:
        if pair.gt_field_id is None:
            return None
        entry = self.fields[pair.gt_field_id]
        if not isinstance(entry, DisplacementField):
            entry = read_field(entry)
            self.fields[pair.gt_field_id] = entry
        return entry

    def has_labels(self) -> bool:
        return any(
            self.labels.get(p.fixed_id) is not None
            and self.labels.get(p.moving_id) is not None
            for p in self.pairs
        )


def _inter_subject_pairs(ids: list[str], ordered: bool) -> list[PairRecord]:
    pairs = [PairRecord(a, b) for a, b in itertools.combinations(ids, 2)]
    if ordered:
        pairs += [PairRecord(b, a) for a, b in itertools.combinations(ids, 2)]
    return pairs


def build_dataset(manifest_path, split: str = "train") -> RegistrationDataset:
    """Load a dataset manifest and assemble one split's pair list.

    Inter-subject mode pairs all unordered id combinations within the split
    (n ids -> n(n-1)/2 pairs, or double that with ``ordered_pairs``);
    intra-subject mode uses the manifest's explicit pair list.
    """
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {manifest_path}: {exc}") from exc
    root = manifest_path.parent

    volumes: dict = {}
    labels: dict = {}
    for entry in manifest.get("volumes", []):
        vid = entry["id"]
        if vid in volumes:
            raise ManifestError(f"duplicate volume id {vid!r}")
        vpath = root / entry["path"]
        if not vpath.exists():
            raise ManifestError(f"volume file missing: {vpath}")
        volumes[vid] = vpath
        if entry.get("labels_path"):
            lpath = root / entry["labels_path"]
            if not lpath.exists():
                raise ManifestError(f"label file missing: {lpath}")
            labels[vid] = lpath

    split_ids = manifest.get("split", {}).get(split)
    mode = manifest.get("pairs_mode", "intra")
    fields: dict = {}
    if mode == "inter":
        ids = list(split_ids) if split_ids is not None else list(volumes)
        for vid in ids:
            if vid not in volumes:
                raise ManifestError(f"split references unknown id {vid!r}")
        pairs = _inter_subject_pairs(ids, bool(manifest.get("ordered_pairs", False)))
    elif mode == "intra":
        pairs = []
        for raw in manifest.get("pairs", []):
            if isinstance(raw, dict):
                fixed_id, moving_id = raw["fixed"], raw["moving"]
                gt = raw.get("gt_field_path")
            else:
                fixed_id, moving_id = raw[0], raw[1]
                gt = raw[2] if len(raw) > 2 else None
            for vid in (fixed_id, moving_id):
                if vid not in volumes:
                    raise ManifestError(f"pair references unknown id {vid!r}")
            if split_ids is not None and not (
                fixed_id in split_ids and moving_id in split_ids
            ):
                continue
            gt_id = None
            if gt:
                gpath = root / gt
                if not gpath.exists():
                    raise ManifestError(f"ground-truth field missing: {gpath}")
                gt_id = f"{fixed_id}->{moving_id}"
                fields[gt_id] = gpath
            pairs.append(PairRecord(fixed_id, moving_id, gt_id))
    else:
        raise ManifestError(f"unknown pairs_mode {mode!r}")

    return RegistrationDataset(
        pairs=pairs, mode=mode, split=split, volumes=volumes, labels=labels, fields=fields
    )


def make_phantom_dataset(
    n_pairs: int, spec: PhantomSpec | None = None, seed: int = 0, split: str = "train"
) -> RegistrationDataset:
    """Generate an in-memory phantom dataset of ``n_pairs`` independent pairs."""
    spec = spec or PhantomSpec()
    pairs = []
    volumes: dict = {}
    labels: dict = {}
    fields: dict = {}
    for i in range(n_pairs):
        pair_spec = PhantomSpec(**{**spec.__dict__, "seed": seed * 100003 + i})
        pair = generate_phantom_pair(pair_spec)
        fid, mid = f"{split}{i:03d}_f", f"{split}{i:03d}_m"
        gt_id = f"{fid}->{mid}"
        volumes[fid] = pair.fixed
        volumes[mid] = pair.moving
        labels[fid] = pair.labels_fixed
        labels[mid] = pair.labels_moving
        fields[gt_id] = pair.target_field
        pairs.append(PairRecord(fid, mid, gt_id))
    return RegistrationDataset(
        pairs=pairs, mode="intra", split=split,
        volumes=volumes, labels=labels, fields=fields,
    )


def save_phantom_dataset(dataset: RegistrationDataset, out_dir, fmt: str = "raw") -> Path:
    """Write an in-memory phantom dataset plus manifest to a directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ext = ".nii.gz" if fmt == "nifti" else ".raw"
    manifest = {
        "pairs_mode": "intra",
        "volumes": [],
        "pairs": [],
        "split": {dataset.split: sorted(dataset.volumes)},
    }
    for vid in dataset.volumes:
        vol = dataset.volume(vid)
        vpath = f"{vid}{ext}"
        write_volume(vol, out / vpath)
        entry = {"id": vid, "path": vpath}
        lab = dataset.labels_for(vid)
        if lab is not None:
            lpath = f"{vid}_labels{ext}"
            write_labels(lab, out / lpath, spacing=vol.spacing)
            entry["labels_path"] = lpath
        manifest["volumes"].append(entry)
    for pair in dataset.pairs:
        rec = {"fixed": pair.fixed_id, "moving": pair.moving_id}
        gt = dataset.gt_field(pair)
        if gt is not None:
            fpath = f"{pair.fixed_id}__{pair.moving_id}_gt.raw"
            write_field(gt, out / fpath)
            rec["gt_field_path"] = fpath
        manifest["pairs"].append(rec)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out / "manifest.json"
