"""On-disk formats: coefficient and spectrum text files, polar image stacks,
MRC2014 volumes, radial profiles, rotation lists, and run manifests.

Every format carries an explicit version marker and readers reject unknown
versions with FormatError. Text floats are written with 17 significant
digits so float64 values round-trip exactly; writers force "\\n" newlines so
repeated runs are byte-identical across platforms. Timestamps appear only in
the manifest's generated_at field.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from datetime import datetime, timezone

import numpy as np

from . import basis as _basis
from .autocorr import AutocorrSpectrum
from .basis import BasisSpec
from .projector import FourierSliceImage, PolarGridSpec, polar_grid_from_params
from .so3 import Rotation
from .validation import FormatError
from .volume import VolumeCoefficients, VolumeGrid

FORMAT_VERSIONS = {
    "coefficients": "kamcoef v1",
    "spectrum": "kamcl v1",
    "polar_stack": "KAMPOL1",
    "profile": "kamprofile v1",
    "rotations": "kamrot v1",
    "volume": "MRC2014 mode 2",
    "image_stack": "MRC2014 mode 2 stack",
    "shell_correlation": "freq_per_A,fsc,shell_count",
}

_POLAR_MAGIC = b"KAMPOL1"


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


def sha256_of(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _tokens(lines):
    for line in lines:
        yield from line.split()


# -- coefficients: text, header `kamcoef v1 L=<L> c=<c> R=<R>` ---------------

def write_coefficients(path, coeffs: VolumeCoefficients) -> None:
    spec = coeffs.spec
    with open(path, "w", newline="\n") as fh:
        fh.write(f"kamcoef v1 L={spec.max_degree} c={_fmt(spec.bandlimit)} "
                 f"R={_fmt(spec.support_radius)}\n")
        for ell in range(spec.max_degree + 1):
            fh.write(f"{spec.s_counts[ell]}\n")
            for row in coeffs.blocks[ell]:
                fh.write(" ".join(_fmt(v) for v in row) + "\n")


def read_coefficients(path) -> VolumeCoefficients:
    with open(path) as fh:
        header = fh.readline().split()
        if header[:2] != ["kamcoef", "v1"] or len(header) != 5:
            raise FormatError(f"not a v1 coefficient file: {' '.join(header[:2])}")
        fields = dict(part.split("=", 1) for part in header[2:])
        try:
            max_degree = int(fields["L"])
            bandlimit = float(fields["c"])
            support = float(fields["R"])
        except (KeyError, ValueError) as exc:
            raise FormatError("malformed coefficient header") from exc
        toks = _tokens(fh)
        try:
            s_counts = []
            blocks = []
            for ell in range(max_degree + 1):
                s = int(next(toks))
                s_counts.append(s)
                vals = [float(next(toks)) for _ in range(s * (2 * ell + 1))]
                blocks.append(np.array(vals).reshape(s, 2 * ell + 1))
        except StopIteration:
            raise FormatError("coefficient file truncated") from None
    spec = BasisSpec(bandlimit=bandlimit, max_degree=max_degree,
                     support_radius=support, s_counts=tuple(s_counts))
    return VolumeCoefficients(spec, blocks)


# -- autocorrelation spectrum: text, header `kamcl v1 L=<L>` -----------------

def write_cl_spectrum(path, spectrum: AutocorrSpectrum) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(f"kamcl v1 L={spectrum.spec.max_degree}\n")
        for ell, mat in enumerate(spectrum.matrices):
            fh.write(f"{ell} {mat.shape[0]}\n")
            for row in mat:
                fh.write(" ".join(_fmt(v) for v in row) + "\n")


def read_cl_spectrum(path, bandlimit: float,
                     support_radius: float | None = None) -> AutocorrSpectrum:
    """Read matrices; the chart's bandlimit is supplied by the caller.

    The file stores only degrees and sizes. If ``support_radius`` is omitted,
    the smallest radius whose truncation admits the stored sizes is used:
    R = max_l u_{l, S(l)} / (2 pi c).
    """
    with open(path) as fh:
        header = fh.readline().split()
        if header[:2] != ["kamcl", "v1"] or len(header) != 3:
            raise FormatError(f"not a v1 spectrum file: {' '.join(header[:2])}")
        try:
            max_degree = int(header[2].split("=", 1)[1])
        except (IndexError, ValueError) as exc:
            raise FormatError("malformed spectrum header") from exc
        toks = _tokens(fh)
        try:
            s_counts = []
            matrices = []
            for ell in range(max_degree + 1):
                tag = int(next(toks))
                if tag != ell:
                    raise FormatError(f"expected degree {ell}, found {tag}")
                s = int(next(toks))
                s_counts.append(s)
                vals = [float(next(toks)) for _ in range(s * s)]
                matrices.append(np.array(vals).reshape(s, s))
        except StopIteration:
            raise FormatError("spectrum file truncated") from None
    if support_radius is None:
        support_radius = max(
            _basis.spherical_bessel_zero(ell, s_counts[ell]) / (2.0 * math.pi * bandlimit)
            for ell in range(max_degree + 1))
    spec = BasisSpec(bandlimit=bandlimit, max_degree=max_degree,
                     support_radius=float(support_radius), s_counts=tuple(s_counts))
    return AutocorrSpectrum(spec, matrices)


# -- polar image stacks: binary, magic KAMPOL1 --------------------------------

def write_polar_stack(path, images) -> None:
    """Little-endian container: magic, u32 nRings, u32 nPhi, f8 bandlimit,
    f8 radii[nRings], then complex128 values per image, row-major."""
    if not images:
        raise ValueError("no images to write")
    grid = images[0].grid
    with open(path, "wb") as fh:
        fh.write(_POLAR_MAGIC)
        fh.write(struct.pack("<IId", grid.n_rings, grid.n_phi, grid.bandlimit))
        fh.write(grid.radii_array().astype("<f8").tobytes())
        for image in images:
            if image.grid.n_rings != grid.n_rings or image.grid.n_phi != grid.n_phi:
                raise ValueError("images in one stack must share a grid")
            fh.write(np.ascontiguousarray(image.values, dtype="<c16").tobytes())


def sniff_image_stack(path) -> str:
    """Container kind of an image stack file: "polar" or "mrc"."""
    with open(path, "rb") as fh:
        head = fh.read(212)
    if head.startswith(_POLAR_MAGIC):
        return "polar"
    if len(head) >= 212 and head[208:212] == b"MAP ":
        return "mrc"
    raise FormatError(f"unrecognized image stack container: {path}")


def read_polar_stack(path):
    """Read a KAMPOL1 container back into FourierSliceImage objects.

    The grid is rebuilt from (nRings, nPhi, bandlimit) with the standard
    Gauss-Legendre radii; stored radii must match the rebuilt ones, since
    ring weights are derived, not stored.
    """
    with open(path, "rb") as fh:
        magic = fh.read(len(_POLAR_MAGIC))
        if magic != _POLAR_MAGIC:
            raise FormatError(f"not a polar stack (magic {magic!r})")
        head = fh.read(16)
        if len(head) != 16:
            raise FormatError("polar stack header truncated")
        n_rings, n_phi, bandlimit = struct.unpack("<IId", head)
        radii = np.frombuffer(fh.read(8 * n_rings), dtype="<f8")
        if radii.size != n_rings:
            raise FormatError("polar stack radii truncated")
        payload = fh.read()
    grid = polar_grid_from_params(bandlimit, n_rings, n_phi)
    if not np.allclose(grid.radii_array(), radii, rtol=1e-9, atol=1e-12):
        raise FormatError("polar stack radii do not match Gauss-Legendre sampling")
    frame = 16 * n_rings * n_phi
    if frame == 0 or len(payload) % frame:
        raise FormatError("polar stack payload size is not a whole image count")
    count = len(payload) // frame
    values = np.frombuffer(payload, dtype="<c16").reshape(count, n_rings, n_phi)
    return [FourierSliceImage(grid, values[i].copy()) for i in range(count)]


# -- radial profiles and rotation lists: text ---------------------------------

def write_profile(path, radii, values) -> None:
    radii = np.asarray(radii, dtype=float)
    values = np.asarray(values, dtype=float)
    if radii.shape != values.shape or radii.ndim != 1:
        raise ValueError("radii and values must be matching 1D arrays")
    with open(path, "w", newline="\n") as fh:
        fh.write(f"kamprofile v1 n={radii.size}\n")
        for r, v in zip(radii, values):
            fh.write(f"{_fmt(r)} {_fmt(v)}\n")


def read_profile(path):
    with open(path) as fh:
        header = fh.readline().split()
        if header[:2] != ["kamprofile", "v1"] or len(header) != 3:
            raise FormatError("not a v1 profile file")
        try:
            count = int(header[2].split("=", 1)[1])
        except (IndexError, ValueError) as exc:
            raise FormatError("malformed profile header") from exc
        rows = [line.split() for line in fh if line.strip()]
    if len(rows) != count or any(len(r) != 2 for r in rows):
        raise FormatError("profile row count does not match header")
    radii = np.array([float(r[0]) for r in rows])
    values = np.array([float(r[1]) for r in rows])
    return radii, values


def write_rotations(path, rotations) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(f"kamrot v1 n={len(rotations)}\n")
        for rot in rotations:
            fh.write(" ".join(_fmt(q) for q in rot.quaternion) + "\n")


def read_rotations(path):
    with open(path) as fh:
        header = fh.readline().split()
        if header[:2] != ["kamrot", "v1"] or len(header) != 3:
            raise FormatError("not a v1 rotation file")
        try:
            count = int(header[2].split("=", 1)[1])
        except (IndexError, ValueError) as exc:
            raise FormatError("malformed rotation header") from exc
        rows = [line.split() for line in fh if line.strip()]
    if len(rows) != count or any(len(r) != 4 for r in rows):
        raise FormatError("rotation row count does not match header")
    return [Rotation.from_quaternion([float(v) for v in row]) for row in rows]


# -- MRC2014 volumes: binary, mode 2 ------------------------------------------

def _write_mrc_file(path, data, voxel: float, ispg: int, label: bytes) -> None:
    nx, ny, nz = data.shape
    header = bytearray(1024)
    struct.pack_into("<3i", header, 0, nx, ny, nz)
    struct.pack_into("<i", header, 12, 2)                       # MODE 2
    struct.pack_into("<3i", header, 16, 0, 0, 0)                # NxSTART
    struct.pack_into("<3i", header, 28, nx, ny, nz)             # Mx,My,Mz
    struct.pack_into("<3f", header, 40, nx * voxel, ny * voxel, nz * voxel)
    struct.pack_into("<3f", header, 52, 90.0, 90.0, 90.0)
    struct.pack_into("<3i", header, 64, 1, 2, 3)                # MAPC/R/S
    struct.pack_into("<3f", header, 76, float(data.min()), float(data.max()),
                     float(data.mean()))
    struct.pack_into("<i", header, 88, ispg)                    # 1 volume, 0 stack
    struct.pack_into("<i", header, 92, 0)                       # NSYMBT
    header[104:108] = b"MRCO"                                   # EXTTYP
    struct.pack_into("<i", header, 108, 20140)                  # NVERSION
    origin = -(np.array([nx, ny, nz]) // 2) * voxel
    struct.pack_into("<3f", header, 196, *origin)
    header[208:212] = b"MAP "
    header[212:216] = bytes([0x44, 0x44, 0x00, 0x00])           # little-endian
    struct.pack_into("<f", header, 216, float(data.std()))
    struct.pack_into("<i", header, 220, 1)                      # NLABL
    header[224:304] = label.ljust(80)
    with open(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(np.ascontiguousarray(data.transpose(2, 1, 0)).tobytes())


def write_mrc(path, grid: VolumeGrid) -> None:
    """Write a cube as MRC2014 mode 2 (float32, little-endian).

    Axis convention: our arrays index [x, y, z]; the file stores x fastest
    (MAPC,MAPR,MAPS = 1,2,3), so the transpose is written. The label block
    is static, keeping outputs byte-identical across runs.
    """
    data = np.asarray(grid.data, dtype="<f4")
    _write_mrc_file(path, data, float(grid.voxel_size), 1, b"kamrec volume")


def write_mrc_stack(path, images, pixel_size: float = 1.0) -> None:
    """Write square real-space images as an MRC2014 mode 2 image stack.

    ``images`` is an array or list of (n, n) sections, each indexed [x, y];
    sections are stored along the slowest axis and ISPG 0 marks the file as
    a stack rather than a volume. read_mrc returns the same data indexed
    [x, y, section].
    """
    stack = np.asarray(images, dtype="<f4")
    if stack.ndim != 3 or stack.shape[1] != stack.shape[2]:
        raise ValueError("expected a stack of square images")
    _write_mrc_file(path, stack.transpose(1, 2, 0), float(pixel_size), 0,
                    b"kamrec image stack")


def read_mrc(path):
    """Read an MRC2014 mode 2 file; returns (array indexed [x, y, z], voxel).

    Extended headers are skipped via NSYMBT. The machine stamp selects byte
    order; 0x11 0x11 marks big-endian, anything else is treated as little.
    """
    with open(path, "rb") as fh:
        header = fh.read(1024)
        if len(header) != 1024:
            raise FormatError("MRC header truncated")
        if header[208:212] != b"MAP ":
            raise FormatError("missing MAP identifier; not an MRC2014 file")
        big = header[212] == 0x11
        endian = ">" if big else "<"
        nx, ny, nz = struct.unpack_from(f"{endian}3i", header, 0)
        mode, = struct.unpack_from(f"{endian}i", header, 12)
        if mode != 2:
            raise FormatError(f"unsupported MRC mode {mode} (only mode 2)")
        mx, = struct.unpack_from(f"{endian}i", header, 28)
        cell_x, = struct.unpack_from(f"{endian}f", header, 40)
        nsymbt, = struct.unpack_from(f"{endian}i", header, 92)
        if min(nx, ny, nz) <= 0:
            raise FormatError("non-positive MRC dimensions")
        fh.seek(1024 + nsymbt)
        raw = fh.read(4 * nx * ny * nz)
        if len(raw) != 4 * nx * ny * nz:
            raise FormatError("MRC data truncated")
    data = np.frombuffer(raw, dtype=f"{endian}f4").reshape(nz, ny, nx)
    voxel = cell_x / mx if mx > 0 and cell_x > 0 else 1.0
    return np.ascontiguousarray(data.transpose(2, 1, 0), dtype=float), float(voxel)


# -- run manifests -------------------------------------------------------------

def write_manifest(path, command: str, parameters: dict, outputs: dict,
                   inputs: dict | None = None) -> None:
    """JSON manifest: parameters, format versions, output checksums.

    ``outputs``/``inputs`` map role names to paths; checksums are computed
    here. The generated_at field is the single place a timestamp appears in
    any artifact.
    """
    def describe(files):
        return {name: {"path": str(p), "sha256": sha256_of(p)}
                for name, p in files.items()}

    manifest = {
        "command": command,
        "parameters": parameters,
        "format_versions": FORMAT_VERSIONS,
        "inputs": describe(inputs or {}),
        "outputs": describe(outputs),
        "generated_at": datetime.now(timezone.utc).isoformat(),
    }
    with open(path, "w", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
