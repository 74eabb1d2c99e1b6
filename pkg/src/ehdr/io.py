"""File formats: PFM, 8-bit PNG with sidecar metadata, EHEV events (binary
and CSV), EHDT tensors, model checkpoints and INI configuration.

Binary layouts (all little-endian):

EHEV: ``b"EHEV"``, u8 version (1), u16 width, u16 height, u64 count, then
``count`` records of (u64 t_us, u16 x, u16 y, i8 p).

EHDT: ``b"EHDT"``, u8 version (1), u8 dtype code (0 = f32), u8 ndim,
``ndim`` x u64 dims, f32 payload in row-major order.
"""

from __future__ import annotations

import configparser
from pathlib import Path
import re
import struct
import zipfile

import numpy as np
from PIL import Image

from .events import EVENT_DTYPE, EventStream, make_events, sort_events
from .hdr import HdrImage, LdrImage


class FormatError(ValueError):
    """Malformed file content; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None, path=None):
        self.offset = offset
        self.path = path
        where = f" at byte {offset}" if offset is not None else ""
        src = f"{path}: " if path is not None else ""
        super().__init__(f"{src}{message}{where}")


def _read_bytes(path) -> bytes:
    return Path(path).read_bytes()


# ---------------------------------------------------------------------------
# PFM
# ---------------------------------------------------------------------------

def write_pfm(path, img) -> None:
    """Write ``(H, W, 3)`` (``PF``) or ``(H, W)`` (``Pf``) float32 data, little-endian."""
    arr = img.pixels if isinstance(img, HdrImage) else np.asarray(img)
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 3 and arr.shape[2] == 3:
        tag = b"PF"
    elif arr.ndim == 2:
        tag = b"Pf"
    else:
        raise ValueError(f"PFM stores (H, W, 3) or (H, W) arrays, got {arr.shape}")
    h, w = arr.shape[:2]
    header = tag + b"\n" + f"{w} {h}\n-1.0\n".encode("ascii")
    Path(path).write_bytes(header + np.flipud(arr).astype("<f4").tobytes())


def _pfm_token(buf: bytes, pos: int):
    """Next whitespace-delimited header token and the position after its
    single terminating whitespace byte."""
    m = re.compile(rb"\s*(\S+)\s").match(buf, pos)
    if not m:
        raise FormatError("truncated PFM header", pos)
    return m.group(1), m.start(1), m.end()


def parse_pfm(buf: bytes, path=None) -> np.ndarray:
    tag, off, pos = _pfm_token(buf, 0)
    if tag not in (b"PF", b"Pf"):
        raise FormatError(f"bad PFM magic {tag!r}", off, path)
    channels = 3 if tag == b"PF" else 1
    dims = []
    for _ in range(2):
        tok, off, pos = _pfm_token(buf, pos)
        if not tok.isdigit() or int(tok) == 0:
            raise FormatError(f"bad PFM dimension {tok!r}", off, path)
        dims.append(int(tok))
    tok, off, pos = _pfm_token(buf, pos)
    try:
        scale = float(tok)
    except ValueError:
        raise FormatError(f"bad PFM scale {tok!r}", off, path) from None
    if scale == 0:
        raise FormatError("PFM scale must be non-zero", off, path)
    w, h = dims
    n = w * h * channels
    if len(buf) - pos < 4 * n:
        raise FormatError(f"PFM payload truncated: need {4 * n} bytes, have {len(buf) - pos}", pos, path)
    dt = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(buf, dtype=dt, count=n, offset=pos).astype(np.float32)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.flipud(data.reshape(shape)).copy()


def read_pfm(path) -> np.ndarray:
    return parse_pfm(_read_bytes(path), path)


# ---------------------------------------------------------------------------
# PNG + sidecar
# ---------------------------------------------------------------------------

def write_png(path, img) -> None:
    """Store values in [0, 1] as 8-bit RGB (or grayscale for 2-D input)."""
    arr = img.pixels if isinstance(img, (LdrImage, HdrImage)) else np.asarray(img)
    q = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)
    except (OSError, SyntaxError) as exc:
        raise FormatError(f"unreadable PNG ({exc})", 0, path) from None
    return arr.astype(np.float32) / 255.0


def _sidecar(path) -> Path:
    return Path(path).with_suffix(".txt")


def write_ldr(path, ldr: LdrImage) -> None:
    """PNG plus ``<name>.txt`` holding ``fstop``, ``exposure_time`` and ``timestamp_us``."""
    write_png(path, ldr)
    lines = [f"fstop {ldr.fstop}", f"exposure_time {ldr.exposure_time!r}"]
    if ldr.timestamp is not None:
        lines.append(f"timestamp_us {int(ldr.timestamp)}")
    _sidecar(path).write_text("\n".join(lines) + "\n")


def read_ldr(path) -> LdrImage:
    meta = {}
    side = _sidecar(path)
    if not side.exists():
        raise FormatError("missing sidecar metadata", None, side)
    for lineno, line in enumerate(side.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace("=", " ").split()
        if len(parts) != 2:
            raise FormatError(f"bad metadata line {lineno}: {line!r}", None, side)
        meta[parts[0]] = parts[1]
    try:
        t = float(meta["exposure_time"])
        fstop = int(meta.get("fstop", 0))
        ts = int(meta["timestamp_us"]) if "timestamp_us" in meta else None
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad metadata ({exc})", None, side) from None
    return LdrImage(read_png(path), t, fstop, ts)


# ---------------------------------------------------------------------------
# events
# ---------------------------------------------------------------------------

_EHEV_HEAD = struct.Struct("<4sBHHQ")
_EHEV_REC = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])


def ehev_bytes(stream: EventStream) -> bytes:
    head = _EHEV_HEAD.pack(b"EHEV", 1, stream.width, stream.height, len(stream))
    return head + stream.events.astype(_EHEV_REC).tobytes()


def parse_ehev(buf: bytes, path=None) -> EventStream:
    if len(buf) < _EHEV_HEAD.size:
        raise FormatError(f"EHEV header truncated ({len(buf)} of {_EHEV_HEAD.size} bytes)", len(buf), path)
    magic, version, w, h, count = _EHEV_HEAD.unpack_from(buf, 0)
    if magic != b"EHEV":
        raise FormatError(f"bad EHEV magic {magic!r}", 0, path)
    if version != 1:
        raise FormatError(f"unsupported EHEV version {version}", 4, path)
    need = _EHEV_HEAD.size + count * _EHEV_REC.itemsize
    if len(buf) < need:
        done = (len(buf) - _EHEV_HEAD.size) // _EHEV_REC.itemsize
        raise FormatError(
            f"EHEV payload truncated: header promises {count} events, record {done} incomplete",
            _EHEV_HEAD.size + done * _EHEV_REC.itemsize, path,
        )
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes after EHEV payload", need, path)
    ev = np.frombuffer(buf, dtype=_EHEV_REC, count=count, offset=_EHEV_HEAD.size).astype(EVENT_DTYPE)
    bad = np.flatnonzero(np.abs(ev["p"].astype(np.int16)) != 1)
    if bad.size:
        raise FormatError(f"event {bad[0]} has polarity {ev['p'][bad[0]]}",
                          _EHEV_HEAD.size + bad[0] * _EHEV_REC.itemsize + 12, path)
    bad = np.flatnonzero((ev["x"] >= w) | (ev["y"] >= h))
    if bad.size:
        raise FormatError(f"event {bad[0]} outside the {w}x{h} sensor",
                          _EHEV_HEAD.size + bad[0] * _EHEV_REC.itemsize + 8, path)
    if count > 1:
        bad = np.flatnonzero(np.diff(ev["t"].astype(np.int64)) < 0)
        if bad.size:
            raise FormatError(f"timestamps decrease at event {bad[0] + 1}",
                              _EHEV_HEAD.size + (bad[0] + 1) * _EHEV_REC.itemsize, path)
    return EventStream(ev, w, h)


def write_ehev(path, stream: EventStream) -> None:
    Path(path).write_bytes(ehev_bytes(stream))


def read_ehev(path) -> EventStream:
    return parse_ehev(_read_bytes(path), path)


def write_events_csv(path, stream: EventStream) -> None:
    """``t_us,x,y,p`` rows; the sensor size goes in a leading comment."""
    ev = stream.events
    with open(path, "w") as fh:
        fh.write(f"# width={stream.width} height={stream.height}\n")
        fh.write("t_us,x,y,p\n")
        for t, x, y, p in zip(ev["t"].tolist(), ev["x"].tolist(), ev["y"].tolist(), ev["p"].tolist()):
            fh.write(f"{t},{x},{y},{p}\n")


def read_events_csv(path, width: int | None = None, height: int | None = None) -> EventStream:
    """Read ``t_us,x,y,p`` rows. Polarity may be encoded as {0, 1} or {-1, +1}."""
    text = Path(path).read_text()
    m = re.search(r"#\s*width=(\d+)\s+height=(\d+)", text)
    if m:
        width = width or int(m.group(1))
        height = height or int(m.group(2))
    rows = []
    offset = 0
    seen_header = False
    for line in text.splitlines(keepends=True):
        s = line.strip()
        if s and not s.startswith("#"):
            if not seen_header and s.replace(" ", "") == "t_us,x,y,p":
                seen_header = True
            else:
                parts = s.split(",")
                try:
                    if len(parts) != 4:
                        raise ValueError
                    rows.append([int(v) for v in parts])
                except ValueError:
                    raise FormatError(f"bad event row {s!r}", offset, path) from None
        offset += len(line.encode())
    arr = np.array(rows, dtype=np.int64).reshape(-1, 4)
    p = arr[:, 3]
    if p.size and set(np.unique(p).tolist()) <= {0, 1}:
        p = 2 * p - 1
    if width is None or height is None:
        width = int(arr[:, 1].max()) + 1 if arr.size else 1
        height = int(arr[:, 2].max()) + 1 if arr.size else 1
    ev = make_events(arr[:, 0], arr[:, 1], arr[:, 2], p)
    return EventStream(sort_events(ev), width, height)


def read_events(path) -> EventStream:
    return read_events_csv(path) if str(path).endswith(".csv") else read_ehev(path)


def write_events(path, stream: EventStream) -> None:
    if str(path).endswith(".csv"):
        write_events_csv(path, stream)
    else:
        write_ehev(path, stream)


# ---------------------------------------------------------------------------
# tensors and checkpoints
# ---------------------------------------------------------------------------

_EHDT_DTYPES = {0: np.dtype("<f4")}


def ehdt_bytes(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype != np.float32:
        raise ValueError(f"EHDT stores float32 only, got {arr.dtype}")
    head = b"EHDT" + struct.pack("<BBB", 1, 0, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr).astype("<f4").tobytes()


def parse_ehdt(buf: bytes, path=None) -> np.ndarray:
    if len(buf) < 7:
        raise FormatError("EHDT header truncated", len(buf), path)
    if buf[:4] != b"EHDT":
        raise FormatError(f"bad EHDT magic {bytes(buf[:4])!r}", 0, path)
    version, code, ndim = struct.unpack_from("<BBB", buf, 4)
    if version != 1:
        raise FormatError(f"unsupported EHDT version {version}", 4, path)
    if code not in _EHDT_DTYPES:
        raise FormatError(f"unknown EHDT dtype code {code}", 5, path)
    if len(buf) < 7 + 8 * ndim:
        raise FormatError("EHDT dims truncated", len(buf), path)
    dims = struct.unpack_from(f"<{ndim}Q", buf, 7)
    pos = 7 + 8 * ndim
    dt = _EHDT_DTYPES[code]
    n = int(np.prod(dims, dtype=np.int64))
    if len(buf) - pos != n * dt.itemsize:
        raise FormatError(f"EHDT payload is {len(buf) - pos} bytes, expected {n * dt.itemsize}", pos, path)
    return np.frombuffer(buf, dtype=dt, count=n, offset=pos).astype(np.float32).reshape(dims)


def write_ehdt(path, arr) -> None:
    Path(path).write_bytes(ehdt_bytes(arr))


def read_ehdt(path) -> np.ndarray:
    return parse_ehdt(_read_bytes(path), path)


def save_checkpoint(path, model, extra: dict | None = None) -> None:
    """Zip archive: one ``<name>.ehdt`` blob per parameter plus ``manifest.txt``.

    The manifest lists ``config <key> <value>`` lines for the model config,
    ``meta <key> <value>`` for ``extra`` and ``tensor <name> <d0>x<d1>...``
    per parameter.
    """
    lines = [f"config {k} {v}" for k, v in model.cfg.to_dict().items()]
    lines += [f"meta {k} {v}" for k, v in (extra or {}).items()]
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name, p in model.named_parameters():
            lines.append(f"tensor {name} {'x'.join(map(str, p.shape))}")
            zf.writestr(f"{name}.ehdt", ehdt_bytes(p.data.astype(np.float32)))
        zf.writestr("manifest.txt", "\n".join(lines) + "\n")


def load_checkpoint(path):
    """Return ``(model, meta)`` rebuilt from :func:`save_checkpoint` output."""
    from .model import EhdrConfig, EhdrModel

    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        raise FormatError(f"not a checkpoint archive ({exc})", 0, path) from None
    with zf:
        try:
            manifest = zf.read("manifest.txt").decode()
        except KeyError:
            raise FormatError("checkpoint has no manifest.txt", None, path) from None
        cfg, meta, names = {}, {}, []
        for line in manifest.splitlines():
            kind, _, rest = line.partition(" ")
            key, _, val = rest.partition(" ")
            if kind == "config":
                cfg[key] = val
            elif kind == "meta":
                meta[key] = val
            elif kind == "tensor":
                names.append(key)
        model = EhdrModel(EhdrConfig.from_dict(cfg))
        state = {n: parse_ehdt(zf.read(f"{n}.ehdt"), f"{path}:{n}") for n in names}
    model.load_state_dict(state)
    return model, meta


# ---------------------------------------------------------------------------
# configuration and frame manifests
# ---------------------------------------------------------------------------

def load_config(path) -> dict[str, dict[str, str]]:
    """INI file, one section per module, e.g. ``[train]``, ``[model]``."""
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise FormatError(f"bad config ({exc})", None, path) from None
    return {s: dict(parser[s]) for s in parser.sections()}


def read_frame_manifest(path) -> list[tuple[int, int, str]]:
    """Lines of ``frame_idx timestamp_us filename``."""
    out = []
    offset = 0
    for line in Path(path).read_text().splitlines(keepends=True):
        s = line.split("#", 1)[0].strip()
        if s:
            parts = s.split()
            try:
                if len(parts) != 3:
                    raise ValueError
                out.append((int(parts[0]), int(parts[1]), parts[2]))
            except ValueError:
                raise FormatError(f"bad manifest line {s!r}", offset, path) from None
        offset += len(line.encode())
    return sorted(out)


def write_frame_manifest(path, entries) -> None:
    Path(path).write_text("".join(f"{i} {t} {name}\n" for i, t, name in entries))

