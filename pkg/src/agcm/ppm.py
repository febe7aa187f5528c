"""Binary PPM (P6) image input and output.

The raster format used for every image artifact.  Chosen because it is
bit-exact and dependency-free: a fixed-format header plus raw RGB bytes,
so identical arrays always produce identical files.
"""

import numpy as np


def to_uint8(image):
    """Map a float image in [0, 1] (or a uint8 image) to uint8 pixels."""
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        return arr
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image):
    """Write an image as binary PPM.

    Accepts (H, W) grayscale or (H, W, 3) RGB, uint8 or float in [0, 1].
    Grayscale is replicated across channels.
    """
    arr = to_uint8(image)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W) or (H, W, 3) image, got {arr.shape}")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_ppm(path):
    """Read a binary PPM into an (H, W, 3) uint8 array."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    # header: magic, width, height, maxval as whitespace-separated tokens,
    # with '#' comments allowed between them
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PPM header")
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace byte after maxval, then raw pixels
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    need = w * h * 3
    payload = data[pos:pos + need]
    if len(payload) != need:
        raise ValueError(f"{path}: expected {need} pixel bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()


def image_to_float(arr):
    """uint8 (H, W, 3) -> float64 (C, H, W) in [0, 1]."""
    return np.ascontiguousarray(arr.astype(np.float64).transpose(2, 0, 1) / 255.0)


def float_to_image(x):
    """float (C, H, W) -> (H, W, C), still float."""
    return np.ascontiguousarray(np.asarray(x).transpose(1, 2, 0))
