"""File codecs shared by the CLI and tests.

Text formats use '.' decimals and newline-delimited records regardless of
locale; binary formats are little-endian (except PGM's big-endian 16-bit
samples, fixed by that format). Images decode to (H, W, 3) float64 in
[0, 1]. Readers reject malformed input with a diagnostic naming the file
and location; they never return partial data.

Byte-level grammars (documented in the README):
  basis file:  magic "MFB1" | u32 V | u32 n_id | u32 n_exp | u32 n_tex |
               f64 mean_shape[3V] | f64 mean_texture[3V] |
               f64 basis_id[3V*n_id] | f64 basis_exp[3V*n_exp] |
               f64 basis_tex[3V*n_tex] | u32 T | i32 tri[3T] |
               i32 landmarks[68] | u8 skin[V]
  checkpoint:  magic "MSMA" | u8 version(=1) | u32 count | count * (
               u16 name_len | name utf-8 | u8 ndim | u32 dims[ndim] |
               f64 data[prod(dims)] )
"""

import json
import struct

import numpy as np

from .errors import FaceFitError, ParseError
from .evaluation import Mesh
from .fitting import FitConfig
from .losses import LossWeights, SkinMask
from .morphable import NUM_LANDMARKS, FaceBasis, FaceCoefficients

try:
    from PIL import Image as _PILImage
except ImportError:          # PNG support is optional; PPM never needs it
    _PILImage = None


# ---------------------------------------------------------------------------
# images

def _read_pnm_tokens(data, path, count):
    """Yield `count` whitespace-separated header tokens, skipping comments."""
    tokens = []
    pos = 0
    while len(tokens) < count:
        if pos >= len(data):
            raise ParseError(path, f"byte {pos}", "truncated header")
        ch = data[pos:pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
        else:
            start = pos
            while pos < len(data) and not data[pos:pos + 1].isspace():
                pos += 1
            tokens.append((data[start:pos].decode("ascii", "replace"), start))
    return tokens, pos + 1   # header ends after single whitespace byte


def read_image(path):
    """Decode a PPM (P6, 8-bit) or PNG image to (H, W, 3) float64 in [0, 1]."""
    path = str(path)
    if path.lower().endswith(".png"):
        return _read_png(path)
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] != b"P6":
        raise ParseError(path, "byte 0", f"expected PPM magic 'P6', found {data[:2]!r}")
    tokens, offset = _read_pnm_tokens(data, path, 4)
    try:
        width, height, maxval = (int(tokens[i][0]) for i in (1, 2, 3))
    except ValueError:
        raise ParseError(path, f"byte {tokens[1][1]}", "non-numeric header field") from None
    if width <= 0 or height <= 0:
        raise ParseError(path, f"byte {tokens[1][1]}", f"bad dimensions {width}x{height}")
    if maxval != 255:
        raise ParseError(path, f"byte {tokens[3][1]}", f"only 8-bit PPM supported, maxval={maxval}")
    need = width * height * 3
    pixels = data[offset:offset + need]
    if len(pixels) != need:
        raise ParseError(path, f"byte {offset + len(pixels)}",
                         f"truncated pixel data: expected {need} bytes, found {len(pixels)}")
    arr = np.frombuffer(pixels, dtype=np.uint8).reshape(height, width, 3)
    return arr.astype(np.float64) / 255.0


def write_image(image, path):
    """Encode to PPM P6 (or PNG for .png paths). Values are clamped to [0, 1]."""
    path = str(path)
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ParseError(path, "-", f"image must be (H, W, 3), got {img.shape}")
    quant = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    if path.lower().endswith(".png"):
        _require_png(path)
        _PILImage.fromarray(quant, mode="RGB").save(path, format="PNG")
        return
    h, w = quant.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(quant.tobytes())


def _require_png(path):
    if _PILImage is None:
        raise ParseError(path, "-", "PNG support needs the optional Pillow dependency "
                                    "(install with the [png] extra); PPM is always available")


def _read_png(path):
    _require_png(path)
    with _PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return np.clip(arr / 255.0, 0.0, 1.0)


def write_pgm16(values, path):
    """Dump a (H, W) array in [0, 1] as 16-bit big-endian PGM (P5)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ParseError(path, "-", f"PGM dump needs a 2D array, got shape {arr.shape}")
    quant = np.round(np.clip(arr, 0.0, 1.0) * 65535.0).astype(">u2")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(quant.tobytes())


def read_pgm(path):
    """Decode an 8- or 16-bit PGM (P5) to (H, W) float64 in [0, 1]."""
    path = str(path)
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] != b"P5":
        raise ParseError(path, "byte 0", f"expected PGM magic 'P5', found {data[:2]!r}")
    tokens, offset = _read_pnm_tokens(data, path, 4)
    try:
        width, height, maxval = (int(tokens[i][0]) for i in (1, 2, 3))
    except ValueError:
        raise ParseError(path, f"byte {tokens[1][1]}", "non-numeric header field") from None
    if maxval == 255:
        dtype, step = np.uint8, 1
    elif maxval == 65535:
        dtype, step = np.dtype(">u2"), 2
    else:
        raise ParseError(path, f"byte {tokens[3][1]}", f"unsupported PGM maxval {maxval}")
    need = width * height * step
    raw = data[offset:offset + need]
    if len(raw) != need:
        raise ParseError(path, f"byte {offset + len(raw)}",
                         f"truncated pixel data: expected {need} bytes, found {len(raw)}")
    arr = np.frombuffer(raw, dtype=dtype).reshape(height, width)
    return arr.astype(np.float64) / maxval


def read_mask(path):
    """Load a skin mask from a PGM or PNG grayscale image."""
    path = str(path)
    if path.lower().endswith(".png"):
        _require_png(path)
        with _PILImage.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
        return SkinMask(np.clip(arr, 0.0, 1.0))
    return SkinMask(read_pgm(path))



def _read_text(path):
    """Decode a text file, turning encoding failures into parse errors."""
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(str(path), f"byte {exc.start}", "file is not valid UTF-8 text") from None


# ---------------------------------------------------------------------------
# meshes

def read_obj(path):
    """Parse v/f records (1-based indices); normals and UVs are ignored."""
    path = str(path)
    vertices = []
    faces = []
    for lineno, line in enumerate(_read_text(path).splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        fields = stripped.split()
        if fields[0] == "v":
            if len(fields) < 4:
                raise ParseError(path, f"line {lineno}", "vertex record needs 3 coordinates")
            try:
                vertices.append([float(x) for x in fields[1:4]])
            except ValueError:
                raise ParseError(path, f"line {lineno}", f"bad vertex coordinate in {stripped!r}") from None
        elif fields[0] == "f":
            if len(fields) != 4:
                raise ParseError(path, f"line {lineno}",
                                 f"face record needs exactly 3 vertices, found {len(fields) - 1}")
            idx = []
            for token in fields[1:]:
                head = token.split("/")[0]
                try:
                    value = int(head)
                except ValueError:
                    raise ParseError(path, f"line {lineno}", f"bad face index {token!r}") from None
                if value < 1:
                    raise ParseError(path, f"line {lineno}",
                                     f"face index {value} invalid (OBJ is 1-based)")
                idx.append(value - 1)
            faces.append(idx)
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if f.size and f.max() >= len(v):
        bad = int(np.argmax(f.max(axis=1)))
        raise ParseError(path, f"face {bad + 1}",
                         f"face index {int(f.max()) + 1} exceeds vertex count {len(v)}")
    return Mesh(v, f)


def write_obj(mesh, path):
    """Write v/f records; coordinates keep 9 significant digits."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for x, y, z in mesh.vertices:
            fh.write(f"v {x:.9g} {y:.9g} {z:.9g}\n")
        for a, b, c in mesh.triangles:
            fh.write(f"f {a + 1} {b + 1} {c + 1}\n")


# ---------------------------------------------------------------------------
# landmarks

def read_landmarks(path):
    """68 lines of 'x y' pixel coordinates."""
    path = str(path)
    rows = []
    for lineno, line in enumerate(_read_text(path).splitlines(), start=1):
        stripped = line.strip()
        if not stripped:
            continue
        fields = stripped.split()
        if len(fields) != 2:
            raise ParseError(path, f"line {lineno}", f"expected 'x y', found {stripped!r}")
        try:
            rows.append((float(fields[0]), float(fields[1])))
        except ValueError:
            raise ParseError(path, f"line {lineno}", f"non-numeric coordinate in {stripped!r}") from None
    if len(rows) != NUM_LANDMARKS:
        raise ParseError(path, f"line {len(rows)}",
                         f"expected {NUM_LANDMARKS} landmarks, found {len(rows)}")
    return np.asarray(rows, dtype=np.float64)


def write_landmarks(points, path):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] != NUM_LANDMARKS:
        raise ParseError(str(path), "-", f"expected {NUM_LANDMARKS} landmarks, got {pts.shape[0]}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for x, y in pts:
            fh.write(f"{x:.9g} {y:.9g}\n")


# ---------------------------------------------------------------------------
# coefficients

_COEFF_KEYS = {"alpha": 80, "beta": 64, "gamma": 80,
               "rotation": 3, "translation": 3, "delta": 9}


def read_coefficients(path):
    path = str(path)
    try:
        payload = json.loads(_read_text(path))
    except json.JSONDecodeError as exc:
        raise ParseError(path, f"line {exc.lineno}", f"invalid JSON: {exc.msg}") from None
    if not isinstance(payload, dict):
        raise ParseError(path, "-", "coefficient file must be a JSON object")
    unknown = set(payload) - set(_COEFF_KEYS)
    if unknown:
        raise ParseError(path, "-", f"unknown coefficient key {sorted(unknown)[0]!r}")
    missing = set(_COEFF_KEYS) - set(payload)
    if missing:
        raise ParseError(path, "-", f"missing coefficient key {sorted(missing)[0]!r}")
    blocks = {}
    for key, expect in _COEFF_KEYS.items():
        arr = np.asarray(payload[key], dtype=np.float64).reshape(-1)
        if arr.size != expect:
            raise ParseError(path, f"key {key!r}", f"expected {expect} values, found {arr.size}")
        blocks[key] = arr
    return FaceCoefficients(**blocks)


def write_coefficients(coefficients, path):
    payload = {key: getattr(coefficients, key).tolist() for key in _COEFF_KEYS}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# fit configuration

def read_config(path):
    """FitConfig JSON with LossWeights nested under 'loss_weights'.

    Unknown keys are rejected so typos never silently fall back to defaults.
    """
    path = str(path)
    try:
        payload = json.loads(_read_text(path))
    except json.JSONDecodeError as exc:
        raise ParseError(path, f"line {exc.lineno}", f"invalid JSON: {exc.msg}") from None
    if not isinstance(payload, dict):
        raise ParseError(path, "-", "config must be a JSON object")
    cfg_fields = {f for f in FitConfig.__dataclass_fields__}
    unknown = set(payload) - cfg_fields
    if unknown:
        raise ParseError(path, "-", f"unknown config key {sorted(unknown)[0]!r}")
    kwargs = dict(payload)
    if "loss_weights" in kwargs:
        lw = kwargs["loss_weights"]
        if not isinstance(lw, dict):
            raise ParseError(path, "key 'loss_weights'", "must be a JSON object")
        lw_fields = {f for f in LossWeights.__dataclass_fields__}
        unknown = set(lw) - lw_fields
        if unknown:
            raise ParseError(path, "key 'loss_weights'", f"unknown key {sorted(unknown)[0]!r}")
        try:
            kwargs["loss_weights"] = LossWeights(**lw)
        except (TypeError, ValueError, FaceFitError) as exc:
            raise ParseError(path, "key 'loss_weights'", f"invalid value: {exc}") from None
    if "moment_decays" in kwargs:
        kwargs["moment_decays"] = tuple(kwargs["moment_decays"])
    try:
        return FitConfig(**kwargs)
    except (TypeError, ValueError, FaceFitError) as exc:
        raise ParseError(path, "-", f"invalid config: {exc}") from None


def write_config(config, path):
    payload = {}
    for name in FitConfig.__dataclass_fields__:
        value = getattr(config, name)
        if isinstance(value, LossWeights):
            payload[name] = {k: (getattr(value, k).tolist() if k == "landmark_weights"
                                 else getattr(value, k))
                             for k in LossWeights.__dataclass_fields__}
        elif isinstance(value, tuple):
            payload[name] = list(value)
        else:
            payload[name] = value
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# basis file (magic MFB1)

_BASIS_MAGIC = b"MFB1"


class _Cursor:
    def __init__(self, data, path):
        self.data = data
        self.path = path
        self.pos = 0

    def take(self, count, what):
        if self.pos + count > len(self.data):
            raise ParseError(self.path, f"byte {self.pos}",
                             f"truncated while reading {what} ({count} bytes needed)")
        chunk = self.data[self.pos:self.pos + count]
        self.pos += count
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def f64s(self, count, what):
        return np.frombuffer(self.take(8 * count, what), dtype="<f8").copy()

    def i32s(self, count, what):
        return np.frombuffer(self.take(4 * count, what), dtype="<i4").copy()


def read_basis(path):
    path = str(path)
    with open(path, "rb") as fh:
        cur = _Cursor(fh.read(), path)
    if cur.take(4, "magic") != _BASIS_MAGIC:
        raise ParseError(path, "byte 0", f"bad magic, expected {_BASIS_MAGIC!r}")
    v = cur.u32("vertex count")
    n_id = cur.u32("identity dim")
    n_exp = cur.u32("expression dim")
    n_tex = cur.u32("texture dim")
    if v == 0:
        raise ParseError(path, "byte 4", "vertex count is zero")
    rows = 3 * v
    mean_shape = cur.f64s(rows, "mean shape")
    mean_texture = cur.f64s(rows, "mean texture")
    basis_id = cur.f64s(rows * n_id, "identity basis").reshape(rows, n_id)
    basis_exp = cur.f64s(rows * n_exp, "expression basis").reshape(rows, n_exp)
    basis_tex = cur.f64s(rows * n_tex, "texture basis").reshape(rows, n_tex)
    t = cur.u32("triangle count")
    triangles = cur.i32s(3 * t, "triangles").reshape(t, 3)
    landmarks = cur.i32s(NUM_LANDMARKS, "landmark indices")
    skin = np.frombuffer(cur.take(v, "skin flags"), dtype=np.uint8).astype(bool)
    if cur.pos != len(cur.data):
        raise ParseError(path, f"byte {cur.pos}", f"{len(cur.data) - cur.pos} trailing bytes")
    return FaceBasis(mean_shape, mean_texture, basis_id, basis_exp, basis_tex,
                     triangles, landmarks, skin)


def write_basis(basis, path):
    with open(path, "wb") as fh:
        fh.write(_BASIS_MAGIC)
        n_id, n_exp, n_tex = basis.dims
        fh.write(struct.pack("<IIII", basis.num_vertices, n_id, n_exp, n_tex))
        for arr in (basis.mean_shape, basis.mean_texture):
            fh.write(arr.astype("<f8").tobytes())
        for mat in (basis.basis_id, basis.basis_exp, basis.basis_tex):
            fh.write(np.ascontiguousarray(mat, dtype="<f8").tobytes())
        fh.write(struct.pack("<I", len(basis.triangles)))
        fh.write(np.ascontiguousarray(basis.triangles, dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(basis.landmark_indices, dtype="<i4").tobytes())
        fh.write(basis.skin_vertex_flags.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# network checkpoint (magic MSMA)

_CHECKPOINT_MAGIC = b"MSMA"
_CHECKPOINT_VERSION = 1


def write_checkpoint(params, path):
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<B", _CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            arr = np.asarray(params[name], dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.astype("<f8").tobytes())


def read_checkpoint(path):
    path = str(path)
    with open(path, "rb") as fh:
        cur = _Cursor(fh.read(), path)
    if cur.take(4, "magic") != _CHECKPOINT_MAGIC:
        raise ParseError(path, "byte 0", f"bad magic, expected {_CHECKPOINT_MAGIC!r}")
    version = cur.take(1, "version")[0]
    if version != _CHECKPOINT_VERSION:
        raise ParseError(path, "byte 4", f"unsupported checkpoint version {version}")
    count = cur.u32("block count")
    params = {}
    for _ in range(count):
        name_len = struct.unpack("<H", cur.take(2, "name length"))[0]
        name = cur.take(name_len, "block name").decode("utf-8")
        ndim = cur.take(1, "ndim")[0]
        shape = tuple(cur.u32(f"dim of {name}") for _ in range(ndim))
        size = int(np.prod(shape)) if shape else 1
        data = cur.f64s(size, f"data of {name}")
        params[name] = data.reshape(shape) if shape else np.asarray(data[0])
    if cur.pos != len(cur.data):
        raise ParseError(path, f"byte {cur.pos}", f"{len(cur.data) - cur.pos} trailing bytes")
    return params
