"""Binary tensor/checkpoint containers, netpbm image I/O, and the seeded
synthetic bitemporal dataset.

TensorFile layout (little-endian)::

    b"GRDT" | version u8 (=1) | dtype u8 (0=f32, 1=f64) | ndim u8 | reserved u8 (=0)
    | ndim x u64 dims | row-major payload

Checkpoint layout::

    b"GRCK" | version u8 (=1) | count u32
    | count x (name_len u16 | utf-8 name | TensorFile)
    | config_len u32 | utf-8 "key = value" block
"""

import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError

TENSOR_MAGIC = b"GRDT"
CHECKPOINT_MAGIC = b"GRCK"
FORMAT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


# ---------------------------------------------------------------------------
# TensorFile
# ---------------------------------------------------------------------------

def tensor_to_bytes(arr):
    arr = np.asarray(getattr(arr, "data", arr))
    dtype = arr.dtype.newbyteorder("<")
    if dtype not in _DTYPE_CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    header = TENSOR_MAGIC + struct.pack("<BBBB", FORMAT_VERSION, _DTYPE_CODES[dtype], arr.ndim, 0)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + dims + np.ascontiguousarray(arr, dtype=dtype).tobytes()


def _read_tensor(buf, offset=0):
    """Decode one TensorFile starting at ``offset``; returns (array, end_offset)."""
    if buf[offset:offset + 4] != TENSOR_MAGIC:
        raise FormatError("bad tensor magic", offset)
    if len(buf) < offset + 8:
        raise FormatError("truncated tensor header", len(buf))
    version, code, ndim, _reserved = struct.unpack_from("<BBBB", buf, offset + 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unknown tensor version {version}", offset + 4)
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}", offset + 5)
    pos = offset + 8
    if len(buf) < pos + 8 * ndim:
        raise FormatError("truncated tensor dims", len(buf))
    dims = struct.unpack_from(f"<{ndim}Q", buf, pos)
    pos += 8 * ndim
    dtype = _CODE_DTYPES[code]
    nbytes = math.prod(dims) * dtype.itemsize
    if len(buf) < pos + nbytes:
        raise FormatError(f"truncated payload: need {nbytes} bytes, have {len(buf) - pos}", len(buf))
    arr = np.frombuffer(buf, dtype=dtype, count=math.prod(dims), offset=pos).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True), pos + nbytes


def tensor_from_bytes(buf):
    arr, end = _read_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after payload", end)
    return arr


def write_tensor(path, arr):
    Path(path).write_bytes(tensor_to_bytes(arr))


def read_tensor(path):
    return tensor_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model, train_cfg=None):
    from .config import format_config

    out = io.BytesIO()
    named = list(model.named_parameters())
    out.write(CHECKPOINT_MAGIC + struct.pack("<BI", FORMAT_VERSION, len(named)))
    for name, p in named:
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)) + raw)
        out.write(tensor_to_bytes(p.data))
    cfg_text = format_config(model.cfg, train_cfg).encode("utf-8")
    out.write(struct.pack("<I", len(cfg_text)) + cfg_text)
    Path(path).write_bytes(out.getvalue())


def read_checkpoint(path):
    """Raw decode: returns (ordered dict name -> array, config text)."""
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    if len(buf) < 9:
        raise FormatError("truncated checkpoint header", len(buf))
    version, count = struct.unpack_from("<BI", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unknown checkpoint version {version}", 4)
    pos = 9
    entries = {}
    for _ in range(count):
        if len(buf) < pos + 2:
            raise FormatError("truncated entry name", pos)
        (n,) = struct.unpack_from("<H", buf, pos)
        name = buf[pos + 2:pos + 2 + n].decode("utf-8")
        if name in entries:
            raise FormatError(f"duplicate entry {name!r}", pos)
        arr, pos = _read_tensor(buf, pos + 2 + n)
        entries[name] = arr
    if len(buf) < pos + 4:
        raise FormatError("missing config block", pos)
    (n,) = struct.unpack_from("<I", buf, pos)
    text = buf[pos + 4:pos + 4 + n]
    if len(text) != n:
        raise FormatError("truncated config block", len(buf))
    return entries, text.decode("utf-8")


def load_checkpoint(path, cfg=None):
    """Rebuild the saved model. Returns ``(model, model_cfg, train_cfg)``.

    With ``cfg`` given, the model is built from it instead of the stored
    snapshot and every entry must match that architecture.
    """
    from .config import parse_config
    from .model import build

    entries, text = read_checkpoint(path)
    stored_cfg, train_cfg = parse_config(text)
    model = build(cfg if cfg is not None else stored_cfg)
    own = dict(model.named_parameters())
    for name, p in own.items():
        if name not in entries:
            raise FormatError(f"checkpoint is missing entry {name!r}")
        if entries[name].shape != p.shape:
            raise FormatError(f"entry {name!r} has shape {entries[name].shape}, model expects {p.shape}")
    extra = [name for name in entries if name not in own]
    if extra:
        raise FormatError(f"checkpoint has unexpected entry {extra[0]!r}")
    for name, p in own.items():
        p.data = entries[name].copy()
    return model, model.cfg, train_cfg


# ---------------------------------------------------------------------------
# Netpbm (binary P5 / P6, maxval 255)
# ---------------------------------------------------------------------------

def _read_pnm(path):
    buf = Path(path).read_bytes()
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported netpbm magic {magic!r}", 0)
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated netpbm header", pos)
        try:
            tokens.append(int(buf[start:pos]))
        except ValueError:
            raise FormatError(f"bad header token {buf[start:pos]!r}", start) from None
    pos += 1  # single whitespace byte before the raster
    width, height, maxval = tokens
    if maxval != 255:
        raise FormatError(f"maxval must be 255, got {maxval}", pos)
    channels = 3 if magic == b"P6" else 1
    n = width * height * channels
    raster = buf[pos:pos + n]
    if len(raster) != n:
        raise FormatError(f"truncated raster: need {n} bytes, have {len(raster)}", len(buf))
    arr = np.frombuffer(raster, dtype=np.uint8)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return magic, arr.reshape(shape).copy()


def _write_pnm(path, magic, raster):
    h, w = raster.shape[:2]
    Path(path).write_bytes(b"%s\n%d %d\n255\n" % (magic, w, h) + np.ascontiguousarray(raster).tobytes())


def to_uint8(values):
    """[0, 1] floats to 8-bit with round-half-up."""
    return np.clip(np.floor(np.asarray(values, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def read_image(path):
    """P6 color image -> float32 [3, H, W] in [0, 1]."""
    magic, raster = _read_pnm(path)
    if magic != b"P6":
        raise FormatError("expected a P6 color image", 0)
    return (raster.astype(np.float32) / 255.0).transpose(2, 0, 1).copy()


def write_image(path, image):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DimensionError(f"expected [3,H,W] image, got {image.shape}")
    _write_pnm(path, b"P6", to_uint8(image.transpose(1, 2, 0)))


def read_mask(path):
    """P5 gray image -> uint8 {0,1} [H, W]; pixels >= 128 are change."""
    magic, raster = _read_pnm(path)
    if magic != b"P5":
        raise FormatError("expected a P5 gray image", 0)
    return (raster >= 128).astype(np.uint8)


def write_mask(path, mask):
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DimensionError(f"expected [H,W] mask, got {mask.shape}")
    _write_pnm(path, b"P5", np.where(mask > 0, 255, 0).astype(np.uint8))


# ---------------------------------------------------------------------------
# Seeded synthetic data
# ---------------------------------------------------------------------------

_U64 = (1 << 64) - 1


class XorShift64Star:
    """xorshift64* generator (shifts 12/25/27, multiplier 0x2545F4914F6CDD1D).

    The state is ``seed ^ 0x9E3779B97F4A7C15`` (that constant if the xor is
    zero). Uniform doubles use the top 53 bits of each output.
    """

    GOLDEN = 0x9E3779B97F4A7C15
    MULT = 0x2545F4914F6CDD1D

    def __init__(self, seed):
        self.state = (int(seed) ^ self.GOLDEN) & _U64 or self.GOLDEN

    def next_u64(self):
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & _U64
        x ^= x >> 27
        self.state = x
        return (x * self.MULT) & _U64

    def uniform(self, lo=0.0, hi=1.0):
        return lo + (hi - lo) * ((self.next_u64() >> 11) * 2.0 ** -53)

    def randint(self, lo, hi):
        """Integer in ``[lo, hi)``."""
        return lo + int(self.uniform() * (hi - lo))

    def uniforms(self, n):
        x, mult, out = self.state, self.MULT, [0] * n
        for i in range(n):
            x ^= x >> 12
            x ^= (x << 25) & _U64
            x ^= x >> 27
            out[i] = ((x * mult) & _U64) >> 11
        self.state = x
        return np.array(out, dtype=np.float64) * 2.0 ** -53

    def normals(self, n):
        """Box-Muller; each pair of uniforms yields a cosine and a sine draw."""
        pairs = (n + 1) // 2
        u = self.uniforms(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log(1.0 - u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)[:n]


@dataclass
class SynthSample:
    pre: np.ndarray   # float64 [3, H, W] before quantization
    post: np.ndarray
    mask: np.ndarray  # uint8 [H, W]


def _smooth_background(rng, size, grid=8):
    """Bilinearly upsampled grid x grid noise, one field per channel."""
    coords = np.linspace(0.0, grid - 1.0, size)
    i0 = np.minimum(np.floor(coords).astype(int), grid - 2)
    t = coords - i0
    out = np.empty((3, size, size))
    for c in range(3):
        g = rng.uniforms(grid * grid).reshape(grid, grid) * 0.7 + 0.15
        rows = g[i0] * (1 - t)[:, None] + g[i0 + 1] * t[:, None]            # size x grid
        out[c] = rows[:, i0] * (1 - t)[None, :] + rows[:, i0 + 1] * t[None, :]
    return out


def _shape_mask(rng, size):
    """Random axis-aligned rectangle or ellipse with sides in [size/8, size/4]."""
    lo, hi = max(1, size // 8), max(2, size // 4)
    kind = rng.randint(0, 2)
    h, w = rng.randint(lo, hi + 1), rng.randint(lo, hi + 1)
    top, left = rng.randint(0, size - h + 1), rng.randint(0, size - w + 1)
    mask = np.zeros((size, size), dtype=bool)
    if kind == 0:
        mask[top:top + h, left:left + w] = True
    else:
        yy, xx = np.mgrid[0:size, 0:size] + 0.5
        cy, cx = top + h / 2.0, left + w / 2.0
        mask = ((yy - cy) / (h / 2.0)) ** 2 + ((xx - cx) / (w / 2.0)) ** 2 <= 1.0
    return mask


def _paint(image, mask, color):
    for c in range(3):
        image[c][mask] = color[c]


def make_sample(rng, size, with_changes=True):
    """One bitemporal pair. Shared scene (background plus 0-2 static objects),
    1-4 objects present in exactly one image (recorded in the mask), then
    post-only brightness/gain distractors and pixel noise on both images."""
    background = _smooth_background(rng, size)
    pre, post = background.copy(), background.copy()
    for _ in range(rng.randint(0, 3)):
        shape = _shape_mask(rng, size)
        color = [rng.uniform() for _ in range(3)]
        _paint(pre, shape, color)
        _paint(post, shape, color)
    mask = np.zeros((size, size), dtype=bool)
    if with_changes:
        for _ in range(rng.randint(1, 5)):
            shape = _shape_mask(rng, size)
            color = [rng.uniform() for _ in range(3)]
            _paint(pre if rng.randint(0, 2) == 0 else post, shape, color)
            mask |= shape
    brightness = rng.uniform(-0.15, 0.15)
    gains = [rng.uniform(0.9, 1.1) for _ in range(3)]
    post = post * np.array(gains)[:, None, None] + brightness
    noise = rng.normals(2 * 3 * size * size).reshape(2, 3, size, size) * 0.02
    pre = np.clip(pre + noise[0], 0.0, 1.0)
    post = np.clip(post + noise[1], 0.0, 1.0)
    return SynthSample(pre, post, mask.astype(np.uint8))


def split_counts(n):
    """80/10/10 by index: (train, val, test)."""
    n_train = n * 8 // 10
    n_val = n // 10
    return n_train, n_val, n - n_train - n_val


def synth_generate(n, size, seed, out_dir, with_changes=True):
    """Write ``n`` samples to ``out_dir/{A,B,label}`` plus split list files."""
    if size <= 0 or size % 32:
        raise ValueError("size must be divisible by 32")
    out = Path(out_dir)
    for sub in ("A", "B", "label"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = XorShift64Star(seed)
    names = []
    for i in range(n):
        sample = make_sample(rng, size, with_changes)
        name = f"{i:05d}"
        write_image(out / "A" / f"{name}.ppm", sample.pre)
        write_image(out / "B" / f"{name}.ppm", sample.post)
        write_mask(out / "label" / f"{name}.pgm", sample.mask)
        names.append(name)
    n_train, n_val, _ = split_counts(n)
    splits = {"train": names[:n_train], "val": names[n_train:n_train + n_val],
              "test": names[n_train + n_val:]}
    for split, items in splits.items():
        (out / f"{split}.txt").write_bytes("".join(f"{s}\n" for s in items).encode("utf-8"))
    return splits


# ---------------------------------------------------------------------------
# In-memory datasets
# ---------------------------------------------------------------------------

class BitemporalDataset:
    """Stacked arrays: pre/post float32 [N,3,H,W] in [0,1], mask uint8 [N,H,W]."""

    def __init__(self, pre, post, mask, names=None):
        pre, post, mask = np.asarray(pre, np.float32), np.asarray(post, np.float32), np.asarray(mask, np.uint8)
        if pre.shape != post.shape or pre.ndim != 4:
            raise DimensionError(f"pre {pre.shape} and post {post.shape} must be equal [N,3,H,W]")
        if mask.shape != (pre.shape[0],) + pre.shape[2:]:
            raise DimensionError(f"mask {mask.shape} does not match images {pre.shape}")
        self.pre, self.post, self.mask = pre, post, mask
        self.names = list(names) if names is not None else [f"{i:05d}" for i in range(len(pre))]

    def __len__(self):
        return len(self.pre)

    @property
    def image_shape(self):
        return self.pre.shape[1:]

    def batch(self, idx):
        idx = np.asarray(list(idx), dtype=int)
        return self.pre[idx], self.post[idx], self.mask[idx]


def read_split(root, split):
    path = Path(root) / f"{split}.txt"
    if not path.exists():
        raise FileNotFoundError(f"split file {path} not found")
    return [line for line in path.read_text(encoding="utf-8").split("\n") if line]


def load_split(root, split):
    root = Path(root)
    names = read_split(root, split)
    if not names:
        return BitemporalDataset(np.zeros((0, 3, 32, 32)), np.zeros((0, 3, 32, 32)),
                                 np.zeros((0, 32, 32)), [])
    pre = [read_image(root / "A" / f"{n}.ppm") for n in names]
    post = [read_image(root / "B" / f"{n}.ppm") for n in names]
    mask = [read_mask(root / "label" / f"{n}.pgm") for n in names]
    shapes = {p.shape for p in pre} | {p.shape for p in post}
    if len(shapes) != 1:
        raise DimensionError(f"images in split {split!r} have differing shapes {sorted(shapes)}")
    return BitemporalDataset(np.stack(pre), np.stack(post), np.stack(mask), names)


def make_dataset(n, size, seed, with_changes=True):
    """In-memory equivalent of :func:`synth_generate` (values quantized to 8 bits)."""
    rng = XorShift64Star(seed)
    samples = [make_sample(rng, size, with_changes) for _ in range(n)]
    pre = np.stack([to_uint8(s.pre) for s in samples]).astype(np.float32) / 255.0
    post = np.stack([to_uint8(s.post) for s in samples]).astype(np.float32) / 255.0
    return BitemporalDataset(pre, post, np.stack([s.mask for s in samples]))
