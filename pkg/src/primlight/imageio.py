"""Image I/O: tonemapped PNG, lossless PFM, and Radiance HDR (RGBE).

All in-memory images are float arrays shaped (H, W, C) in linear RGB;
row 0 is the top of the image.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

GAMMA = 2.2


def tonemap(img: np.ndarray, ev: float = 0.0, gamma: float = GAMMA) -> np.ndarray:
    """Linear -> 8-bit display encoding: exposure scale then 1/gamma curve."""
    rgb = np.clip(img * (2.0 ** ev), 0.0, None)
    enc = np.power(rgb, 1.0 / gamma)
    return (np.clip(enc, 0, 1) * 255.0 + 0.5).astype(np.uint8)


def write_png(path, img: np.ndarray, ev: float = 0.0) -> None:
    """8-bit PNG with gamma 2.2 applied to linear RGB; alpha passed through."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[..., None]
    if img.shape[2] == 4:
        rgb = tonemap(img[..., :3], ev)
        a = (np.clip(img[..., 3], 0, 1) * 255.0 + 0.5).astype(np.uint8)
        out = np.concatenate([rgb, a[..., None]], axis=-1)
        Image.fromarray(out, "RGBA").save(path)
    elif img.shape[2] == 3:
        Image.fromarray(tonemap(img, ev), "RGB").save(path)
    else:
        Image.fromarray(tonemap(img, ev)[..., 0], "L").save(path)


def write_pfm(path, img: np.ndarray) -> None:
    """PFM, little-endian float32; 1 or 3 channels; rows stored bottom-up."""
    img = np.asarray(img, dtype="<f4")
    if img.ndim == 2:
        img = img[..., None]
    h, w, c = img.shape
    if c not in (1, 3):
        raise ValueError("PFM supports 1 or 3 channels")
    header = (b"Pf\n" if c == 1 else b"PF\n") + f"{w} {h}\n-1.0\n".encode()
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"PF", b"Pf"):
            raise ValueError("not a PFM file")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        c = 3 if kind == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(4 * w * h * c), dtype=dtype)
        img = data.reshape(h, w, c).astype(np.float64)
        return img[::-1].copy()  # stored bottom-up


# ---------------------------------------------------------------------------
# Radiance HDR (RGBE)


def read_hdr(path) -> np.ndarray:
    """Radiance .hdr reader: RLE and flat RGBE scanlines."""
    with open(path, "rb") as f:
        magic = f.readline()
        if not magic.startswith(b"#?"):
            raise ValueError("not a Radiance HDR file")
        fmt_ok = False
        while True:
            line = f.readline()
            if line in (b"\n", b"\r\n", b""):
                break
            if line.strip() == b"FORMAT=32-bit_rle_rgbe":
                fmt_ok = True
        if not fmt_ok:
            raise ValueError("unsupported HDR format (expected 32-bit_rle_rgbe)")
        dims = f.readline().split()
        if len(dims) != 4 or dims[0] != b"-Y" or dims[2] != b"+X":
            raise ValueError(f"unsupported HDR orientation {dims!r}")
        h, w = int(dims[1]), int(dims[3])
        data = f.read()
    rgbe = np.zeros((h, w, 4), np.uint8)
    pos = 0
    for y in range(h):
        if w < 8 or w > 0x7FFF or data[pos] != 2 or data[pos + 1] != 2:
            # flat scanline
            row = np.frombuffer(data[pos:pos + 4 * w], np.uint8).reshape(w, 4)
            rgbe[y] = row
            pos += 4 * w
            continue
        if (data[pos + 2] << 8 | data[pos + 3]) != w:
            raise ValueError("HDR scanline width mismatch")
        pos += 4
        for c in range(4):
            x = 0
            while x < w:
                count = data[pos]
                pos += 1
                if count > 128:  # run
                    rgbe[y, x:x + count - 128, c] = data[pos]
                    pos += 1
                    x += count - 128
                else:  # dump
                    rgbe[y, x:x + count, c] = np.frombuffer(data[pos:pos + count], np.uint8)
                    pos += count
                    x += count
    return rgbe_to_float(rgbe)


def write_hdr(path, img: np.ndarray) -> None:
    """Radiance .hdr writer (flat scanlines)."""
    rgbe = float_to_rgbe(np.asarray(img, np.float64))
    h, w = rgbe.shape[:2]
    with open(path, "wb") as f:
        f.write(b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n")
        f.write(f"-Y {h} +X {w}\n".encode())
        f.write(rgbe.tobytes())


def rgbe_to_float(rgbe: np.ndarray) -> np.ndarray:
    e = rgbe[..., 3].astype(np.int32)
    scale = np.where(e == 0, 0.0, np.ldexp(1.0, e - 136))
    return rgbe[..., :3].astype(np.float64) * scale[..., None]


def float_to_rgbe(rgb: np.ndarray) -> np.ndarray:
    out = np.zeros(rgb.shape[:2] + (4,), np.uint8)
    v = rgb.max(axis=-1)
    ok = v >= 1e-32
    m, e = np.frexp(np.where(ok, v, 1.0))
    scale = m * 256.0 / np.where(ok, v, 1.0)
    mant = np.clip(rgb * scale[..., None] + 0.5, 0, 255).astype(np.uint8)
    out[..., :3] = np.where(ok[..., None], mant, 0)
    out[..., 3] = np.where(ok, e + 128, 0)
    return out


def downsample_box(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Area-averaging downsample in linear radiance (PIL BOX filter)."""
    img = np.asarray(img, np.float32)
    chans = [np.array(Image.fromarray(img[..., c], "F").resize((out_w, out_h), Image.BOX))
             for c in range(img.shape[2])]
    return np.stack(chans, axis=-1).astype(np.float64)
