"""Binary P6 PPM input/output and simple image grids.

PPM is codec-free, so byte-identical outputs across runs reduce to
deterministic pixel math. Writers expect (3, H, W) float arrays in
[0, 1]; values are scaled to 8-bit with round-half-even.
"""

from __future__ import annotations

import numpy as np

_RANGE_SLACK = 1e-9


def to_uint8(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected (3, H, W), got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains NaN or Inf")
    lo, hi = float(img.min()), float(img.max())
    if lo < -_RANGE_SLACK or hi > 1.0 + _RANGE_SLACK:
        raise ValueError(f"image values outside [0, 1]: min {lo}, max {hi}")
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path: str, image: np.ndarray) -> None:
    data = to_uint8(image)
    h, w = data.shape[1], data.shape[2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data.transpose(1, 2, 0)).tobytes())


def read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:2] != b"P6":
        raise ValueError(f"not a binary PPM file (magic {blob[:2]!r})")
    # header: magic, width, height, maxval; '#' comments allowed between tokens
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ValueError(f"only 8-bit PPM supported, maxval is {maxval}")
    need = w * h * 3
    raw = np.frombuffer(blob, dtype=np.uint8, count=need, offset=pos)
    if raw.size != need:
        raise ValueError("truncated PPM payload")
    return raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def hstack_images(images, pad: int = 2, fill: float = 1.0) -> np.ndarray:
    """Concatenate (3, H, W) images left to right with a separator."""
    images = [np.asarray(im, dtype=np.float64) for im in images]
    h = images[0].shape[1]
    for im in images:
        if im.shape[0] != 3 or im.shape[1] != h:
            raise ValueError("hstack needs equal-height (3, H, W) images")
    sep = np.full((3, h, pad), fill)
    parts = []
    for i, im in enumerate(images):
        if i:
            parts.append(sep)
        parts.append(im)
    return np.concatenate(parts, axis=2)


def vstack_images(images, pad: int = 2, fill: float = 1.0) -> np.ndarray:
    images = [np.asarray(im, dtype=np.float64) for im in images]
    w = images[0].shape[2]
    for im in images:
        if im.shape[0] != 3 or im.shape[2] != w:
            raise ValueError("vstack needs equal-width (3, H, W) images")
    sep = np.full((3, pad, w), fill)
    parts = []
    for i, im in enumerate(images):
        if i:
            parts.append(sep)
        parts.append(im)
    return np.concatenate(parts, axis=1)


def image_grid(rows, pad: int = 2, fill: float = 1.0) -> np.ndarray:
    """rows: list of lists of (3, H, W) images -> one composite image."""
    return vstack_images([hstack_images(r, pad, fill) for r in rows], pad, fill)
