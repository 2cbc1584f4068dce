"""Low-level conversions between float HWC arrays in [0, 1] and PIL images."""

import io
from pathlib import Path

import numpy as np
from PIL import Image

RESIZE_FILTERS = {
    "nearest": Image.NEAREST,
    "bilinear": Image.BILINEAR,
    "bicubic": Image.BICUBIC,
    "lanczos": Image.LANCZOS,
}


def to_uint8(image):
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def from_uint8(array):
    array = np.asarray(array, dtype=np.float32) / 255.0
    if array.ndim == 2:
        array = array[:, :, None]
    return array


def to_pil(image):
    arr = to_uint8(image)
    if arr.shape[2] == 1:
        return Image.fromarray(arr[:, :, 0], mode="L")
    return Image.fromarray(arr, mode="RGB")


def from_pil(img):
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB") if img.mode in ("P", "RGBA", "CMYK", "YCbCr") else img.convert("L")
    return from_uint8(np.asarray(img))


def load_png(path):
    with Image.open(path) as img:
        img.load()
        return from_pil(img)


def save_png(image, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    to_pil(image).save(path, format="PNG")


def resize(image, height, width, filter="bilinear"):
    """Resize a float HWC image channel-by-channel without quantizing."""
    image = np.asarray(image, dtype=np.float32)
    if image.shape[:2] == (height, width):
        return image.copy()
    resample = RESIZE_FILTERS[filter]
    out = np.empty((height, width, image.shape[2]), dtype=np.float32)
    for c in range(image.shape[2]):
        chan = Image.fromarray(image[:, :, c], mode="F")
        out[:, :, c] = np.asarray(chan.resize((width, height), resample=resample))
    return np.clip(out, 0.0, 1.0)


def jpeg_roundtrip(image, quality, subsampling=-1):
    """Encode to JPEG at ``quality`` and decode again."""
    buf = io.BytesIO()
    to_pil(image).save(buf, format="JPEG", quality=int(quality), subsampling=subsampling)
    buf.seek(0)
    with Image.open(buf) as img:
        img.load()
        return from_pil(img)
