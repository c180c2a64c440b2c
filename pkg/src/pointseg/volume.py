"""Dense 3D grid containers, region masks, and the point-annotation data model.

Conventions shared by every module:

* A volume of dims (dx, dy, dz) is stored as a flat array in x-fastest order,
  i.e. flat index = x + dx*(y + dy*z).  ``Volume3.arr()`` exposes the same
  buffer as a 3D view indexed ``a[x, y, z]``.
* Masks are 3D boolean numpy arrays with the same indexing.
* Voxel coordinates are (x, y, z) integer triples.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

VOLUME_KINDS = ("intensity", "probability", "logit", "distance", "label", "partial_label")

# Sentinel used in partial label maps for voxels with unknown label.
UNLABELED = 255

# Directional tags for the six background points.  Each maps to (axis, side)
# where side 0 is the low end of the axis and side 1 the high end.
BG_TAGS = ("left", "right", "anterior", "posterior", "inferior", "superior")
TAG_AXIS_SIDE = {
    "left": (0, 0),
    "right": (0, 1),
    "anterior": (1, 0),
    "posterior": (1, 1),
    "inferior": (2, 0),
    "superior": (2, 1),
}

_MAGIC = b"PAVOL1"
_HEADER = struct.Struct("<3I3fB")  # dx dy dz sx sy sz dtype


def linear_index(dims, x, y, z):
    """Flat x-fastest index of voxel (x, y, z)."""
    return int(x) + dims[0] * (int(y) + dims[1] * int(z))


def check_coord(dims, pt, what="point"):
    if len(pt) != 3:
        raise ValidationError(f"{what} must have 3 coordinates, got {pt!r}")
    for c, d in zip(pt, dims):
        if not (0 <= int(c) < d):
            raise ValidationError(f"{what} {tuple(pt)} outside grid dims {tuple(dims)}")
    return tuple(int(c) for c in pt)


@dataclass(frozen=True)
class Volume3:
    """A dense scalar grid with explicit dims, spacing and a kind tag.

    ``data`` is the flat x-fastest buffer; it is marked read-only after
    construction so instances can be shared across workers.
    """

    dims: tuple
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    kind: str = "intensity"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise ValidationError(f"bad dims {dims}")
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValidationError(f"spacing components must be > 0, got {spacing}")
        if self.kind not in VOLUME_KINDS:
            raise ValidationError(f"unknown volume kind {self.kind!r}")
        data = np.ascontiguousarray(self.data).ravel()
        if data.size != dims[0] * dims[1] * dims[2]:
            raise ValidationError(
                f"data length {data.size} != dx*dy*dz = {dims[0] * dims[1] * dims[2]}"
            )
        if self.kind == "label":
            if not np.isin(data, (0, 1)).all():
                raise ValidationError("label volume must contain only {0, 1}")
        elif self.kind == "partial_label":
            if not np.isin(data, (0, 1, UNLABELED)).all():
                raise ValidationError(
                    f"partial label volume must contain only {{0, 1, {UNLABELED}}}"
                )
        elif self.kind == "probability":
            if data.size and (np.nanmin(data) < 0.0 or np.nanmax(data) > 1.0 or np.isnan(data).any()):
                raise ValidationError("probability volume must lie in [0, 1]")
        data = data.copy() if not data.flags.owndata else data
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def size(self):
        return self.data.size

    def arr(self):
        """Read-only 3D view, indexed [x, y, z]."""
        return self.data.reshape(self.dims, order="F")

    @classmethod
    def from_array(cls, a, spacing=(1.0, 1.0, 1.0), kind="intensity"):
        """Build from a 3D array indexed [x, y, z]."""
        a = np.asarray(a)
        if a.ndim != 3:
            raise ValidationError(f"expected 3D array, got shape {a.shape}")
        return cls(dims=a.shape, data=a.ravel(order="F").copy(), spacing=spacing, kind=kind)


# ---------------------------------------------------------------------------
# mask algebra


def _check_same_dims(a, b):
    if a.shape != b.shape:
        raise ValidationError(f"mask dims differ: {a.shape} vs {b.shape}")


def masks_union(a, b):
    _check_same_dims(a, b)
    return a | b


def masks_intersection(a, b):
    _check_same_dims(a, b)
    return a & b


def mask_complement(a):
    return ~a


@dataclass(frozen=True)
class RegionPartition:
    """Label-region decomposition of a grid.

    omega_m: valid image region; omega_b: certain background; omega_f:
    labeled foreground.  The unlabeled set omega_u and the labeled set
    omega_l are derived.
    """

    omega_m: np.ndarray
    omega_b: np.ndarray
    omega_f: np.ndarray

    def __post_init__(self):
        m, b, f = self.omega_m, self.omega_b, self.omega_f
        if not (m.shape == b.shape == f.shape):
            raise ValidationError("partition masks must share dims")
        if (b & f).any():
            raise ValidationError("omega_b and omega_f must be disjoint")
        if (f & ~m).any():
            raise ValidationError("omega_f must lie inside omega_m")
        if (~m & ~b).any():
            raise ValidationError("every voxel outside omega_m must be in omega_b")

    @property
    def dims(self):
        return self.omega_m.shape

    @property
    def omega_l(self):
        return self.omega_b | self.omega_f

    @property
    def omega_u(self):
        return ~self.omega_l

    def to_q(self, spacing=(1.0, 1.0, 1.0)):
        """Partial label map: 1 on omega_f, 0 on omega_b, sentinel elsewhere."""
        q = np.full(self.dims, UNLABELED, dtype=np.uint8)
        q[self.omega_b] = 0
        q[self.omega_f] = 1
        return Volume3.from_array(q, spacing=spacing, kind="partial_label")


@dataclass(frozen=True)
class VoxelBox:
    """Inclusive axis-aligned voxel box [lo[k] .. hi[k]] per axis."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(int(c) for c in self.lo))
        object.__setattr__(self, "hi", tuple(int(c) for c in self.hi))

    @property
    def volume(self):
        return int(np.prod([h - l + 1 for l, h in zip(self.lo, self.hi)]))

    def mask(self, dims):
        m = np.zeros(dims, dtype=bool)
        m[self.lo[0]:self.hi[0] + 1, self.lo[1]:self.hi[1] + 1, self.lo[2]:self.hi[2] + 1] = True
        return m

    def contains_strictly(self, pt):
        return all(l < c < h for l, c, h in zip(self.lo, pt, self.hi))


@dataclass(frozen=True)
class PointAnnotation:
    """Seven annotation seeds: one foreground click and six directional
    background points that span an axis-aligned box strictly containing fg."""

    fg: tuple
    bg: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "fg", tuple(int(c) for c in self.fg))
        bg = {t: tuple(int(c) for c in p) for t, p in self.bg.items()}
        object.__setattr__(self, "bg", bg)
        missing = [t for t in BG_TAGS if t not in bg]
        extra = [t for t in bg if t not in BG_TAGS]
        if missing or extra:
            raise ValidationError(f"bg tags wrong: missing={missing} extra={extra}")

    def validate(self, dims):
        check_coord(dims, self.fg, "fg point")
        for tag, pt in self.bg.items():
            check_coord(dims, pt, f"bg point {tag}")
        box = bounding_box_from_bg(self, dims)
        if not box.contains_strictly(self.fg):
            raise ValidationError(
                f"fg point {self.fg} not strictly inside bg box {box.lo}..{box.hi}"
            )
        return box


def bounding_box_from_bg(ann, dims):
    """Inclusive box spanned by the six background points.

    Each tag contributes one face coordinate along its axis; the box must be
    non-degenerate (low face strictly below high face on every axis).
    """
    lo = [None, None, None]
    hi = [None, None, None]
    for tag, pt in ann.bg.items():
        axis, side = TAG_AXIS_SIDE[tag]
        check_coord(dims, pt, f"bg point {tag}")
        (hi if side else lo)[axis] = int(pt[axis])
    for ax in range(3):
        if lo[ax] >= hi[ax]:
            raise ValidationError(
                f"degenerate bg box on axis {ax}: low face {lo[ax]} >= high face {hi[ax]}"
            )
    return VoxelBox(lo=tuple(lo), hi=tuple(hi))


def omega_out_mask(ann, dims):
    """Certain-background region outside the bg box (complement of the box)."""
    return ~bounding_box_from_bg(ann, dims).mask(dims)


# ---------------------------------------------------------------------------
# file formats


def save_volume(path, vol):
    """Write PAVOL1: magic, LE u32 dims, f32 spacing, u8 dtype code, raw data.

    dtype code 0 stores f32, code 1 stores u8; label-like kinds go to u8.
    """
    as_u8 = vol.kind in ("label", "partial_label")
    code = 1 if as_u8 else 0
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(_HEADER.pack(*vol.dims, *vol.spacing, code))
        if as_u8:
            fh.write(np.ascontiguousarray(vol.data, dtype=np.uint8).tobytes())
        else:
            fh.write(vol.data.astype("<f4").tobytes())


def load_volume(path, kind=None):
    """Read PAVOL1.  kind defaults by dtype: f32 -> intensity, u8 -> label,
    or partial_label when the unlabeled sentinel is present."""
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise ValidationError(f"cannot read volume {path}: {exc}")
    with fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValidationError(f"{path}: bad magic {magic!r}")
        header = fh.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise ValidationError(f"{path}: truncated header")
        dx, dy, dz, sx, sy, sz, code = _HEADER.unpack(header)
        n = dx * dy * dz
        if code == 0:
            raw = fh.read(4 * n)
            if len(raw) != 4 * n:
                raise ValidationError(f"{path}: truncated data")
            data = np.frombuffer(raw, dtype="<f4").astype(np.float32)
            default_kind = "intensity"
        elif code == 1:
            raw = fh.read(n)
            if len(raw) != n:
                raise ValidationError(f"{path}: truncated data")
            data = np.frombuffer(raw, dtype=np.uint8).copy()
            default_kind = "partial_label" if (data == UNLABELED).any() else "label"
        else:
            raise ValidationError(f"{path}: unknown dtype code {code}")
    return Volume3(dims=(dx, dy, dz), data=data, spacing=(sx, sy, sz), kind=kind or default_kind)


def save_annotation(path, ann):
    """Seven text lines: 'fg x y z' then 'bg <tag> x y z' per directional tag."""
    lines = ["fg %d %d %d" % ann.fg]
    for tag in BG_TAGS:
        lines.append("bg %s %d %d %d" % (tag, *ann.bg[tag]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_annotation(path):
    fg = None
    bg = {}
    try:
        fh = open(path)
    except OSError as exc:
        raise ValidationError(f"cannot read annotation {path}: {exc}")
    with fh:
        for ln, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                if parts[0] == "fg":
                    if fg is not None:
                        raise ValidationError(f"{path}:{ln}: duplicate fg line")
                    if len(parts) != 4:
                        raise ValueError
                    fg = tuple(int(p) for p in parts[1:])
                elif parts[0] == "bg":
                    if len(parts) != 5:
                        raise ValueError
                    tag = parts[1]
                    if tag not in BG_TAGS:
                        raise ValidationError(f"{path}:{ln}: unknown bg tag {tag!r}")
                    if tag in bg:
                        raise ValidationError(f"{path}:{ln}: duplicate bg tag {tag!r}")
                    bg[tag] = tuple(int(p) for p in parts[2:])
                else:
                    raise ValidationError(f"{path}:{ln}: unknown line kind {parts[0]!r}")
            except ValueError:
                raise ValidationError(f"{path}:{ln}: malformed line {line.rstrip()!r}")
    if fg is None:
        raise ValidationError(f"{path}: missing fg line")
    return PointAnnotation(fg=fg, bg=bg)


@dataclass(frozen=True)
class ManifestEntry:
    case_id: str
    image: str
    gt: str
    mask: str


def save_manifest(path, entries):
    """Line-oriented manifest: case_id <tab> image <tab> gt <tab> mask."""
    with open(path, "w") as fh:
        for e in entries:
            fh.write(f"{e.case_id}\t{e.image}\t{e.gt}\t{e.mask}\n")


def load_manifest(path):
    entries = []
    seen = set()
    try:
        fh = open(path)
    except OSError as exc:
        raise ValidationError(f"cannot read manifest {path}: {exc}")
    with fh:
        for ln, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValidationError(f"{path}:{ln}: expected 4 tab-separated fields")
            if parts[0] in seen:
                raise ValidationError(f"{path}:{ln}: duplicate case id {parts[0]!r}")
            seen.add(parts[0])
            entries.append(ManifestEntry(*parts))
    if not entries:
        raise ValidationError(f"{path}: empty manifest")
    return entries
