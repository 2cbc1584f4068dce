"""Local emulation of photo-platform upload pipelines.

Images are tiled onto canvases, optionally padded to a square with black,
resized to the platform's size, JPEG-recompressed, decoded, resized back and
split again. Profile parameters are rough estimates, not measured platform
behaviour.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import imageops


@dataclass(frozen=True)
class PlatformProfile:
    name: str
    target_size: int | None = 612       # longest canvas side after upload; None keeps the size
    enforce_square: bool = True
    jpeg_quality: int | None = 75       # None = lossless
    resize_filter: str = "bilinear"
    stack: bool = True                  # tile several images per upload
    subsampling: int = -1               # PIL default chroma subsampling

    def __post_init__(self):
        if self.target_size is not None and self.target_size <= 0:
            raise ValueError("target_size must be > 0")
        if self.jpeg_quality is not None and not 1 <= self.jpeg_quality <= 100:
            raise ValueError(f"jpeg_quality must lie in [1, 100], got {self.jpeg_quality}")
        if self.resize_filter not in imageops.RESIZE_FILTERS:
            raise ValueError(f"unknown resize filter {self.resize_filter!r}")


PROFILES = {
    "instagram": PlatformProfile("instagram", 612, True, 75),
    "facebook": PlatformProfile("facebook", None, False, 85, stack=False),
    "pinterest": PlatformProfile("pinterest", 612, False, 80),
    "identity": PlatformProfile("identity", None, False, None, stack=False),
}


def get_profile(name_or_profile) -> PlatformProfile:
    if isinstance(name_or_profile, PlatformProfile):
        return name_or_profile
    try:
        return PROFILES[name_or_profile]
    except KeyError:
        raise ValueError(f"unknown platform profile {name_or_profile!r}; choose from {sorted(PROFILES)}") from None


@dataclass
class Layout:
    """Exact cell geometry of one canvas."""

    rows: int
    cols: int
    cell_h: int
    cell_w: int
    channels: int
    count: int
    pad_top: int = 0
    pad_left: int = 0
    canvas_h: int = 0
    canvas_w: int = 0
    ids: list = field(default_factory=list)

    def cell(self, i):
        r, c = divmod(i, self.cols)
        top = self.pad_top + r * self.cell_h
        left = self.pad_left + c * self.cell_w
        return top, left

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def stack_images(images, grid_rows: int, grid_cols: int, pad_value: float = 0.0, square: bool = False):
    """Tile images row-major on a canvas. Returns ``(canvas, layout)``."""
    images = [np.asarray(im, dtype=np.float32) for im in images]
    if grid_rows < 1 or grid_cols < 1:
        raise ValueError("grid must have at least one row and one column")
    if len(images) > grid_rows * grid_cols:
        raise ValueError(f"{len(images)} images do not fit a {grid_rows}x{grid_cols} grid")
    if not images:
        raise ValueError("nothing to stack")
    shape = images[0].shape
    for im in images:
        if im.shape != shape:
            raise ValueError(f"mixed image shapes {shape} and {im.shape}")
    h, w, c = shape
    gh, gw = grid_rows * h, grid_cols * w
    H, W = (max(gh, gw),) * 2 if square else (gh, gw)
    layout = Layout(grid_rows, grid_cols, h, w, c, len(images), (H - gh) // 2, (W - gw) // 2, H, W)
    canvas = np.full((H, W, c), pad_value, dtype=np.float32)
    for i, im in enumerate(images):
        top, left = layout.cell(i)
        canvas[top:top + h, left:left + w] = im
    return canvas, layout


def unstack(canvas, layout: Layout):
    """Cut the tiles back out of a canvas; returns an (count, h, w, c) array."""
    canvas = np.asarray(canvas)
    if layout.count == 0:
        return np.zeros((0, layout.cell_h, layout.cell_w, layout.channels), dtype=np.float32)
    if canvas.shape != (layout.canvas_h, layout.canvas_w, layout.channels):
        raise ValueError(f"canvas shape {canvas.shape} does not match layout "
                         f"{(layout.canvas_h, layout.canvas_w, layout.channels)}")
    out = []
    for i in range(layout.count):
        top, left = layout.cell(i)
        out.append(canvas[top:top + layout.cell_h, left:left + layout.cell_w])
    return np.stack(out)


def grid_for(profile: PlatformProfile, image_shape, n):
    """Square-ish grid that fills the profile's target size."""
    if not profile.stack:
        return 1, 1
    side = max(image_shape[:2])
    per_side = max(1, (profile.target_size or side) // side)
    per_side = min(per_side, max(1, math.ceil(math.sqrt(n))))
    return per_side, per_side


def upload(canvas, profile: PlatformProfile):
    """What the platform stores: resized and recompressed canvas (float)."""
    h, w = canvas.shape[:2]
    out = canvas
    if profile.target_size is not None:
        scale = profile.target_size / max(h, w)
        out = imageops.resize(out, max(1, round(h * scale)), max(1, round(w * scale)), profile.resize_filter)
    if profile.jpeg_quality is not None:
        out = imageops.jpeg_roundtrip(out, profile.jpeg_quality, profile.subsampling)
    return out


def download(stored, layout: Layout, profile: PlatformProfile):
    """Undo the resize so the stored canvas lines up with ``layout`` again."""
    if stored.shape[:2] != (layout.canvas_h, layout.canvas_w):
        stored = imageops.resize(stored, layout.canvas_h, layout.canvas_w, profile.resize_filter)
    return stored


def canvases(images, profile: PlatformProfile, ids=None):
    """Group images into canvases; yields ``(canvas, layout)``."""
    images = np.asarray(images, dtype=np.float32)
    rows, cols = grid_for(profile, images.shape[1:], len(images))
    per = rows * cols
    for start in range(0, len(images), per):
        canvas, layout = stack_images(images[start:start + per], rows, cols, 0.0, profile.enforce_square)
        if ids is not None:
            layout.ids = [str(i) for i in ids[start:start + per]]
        yield canvas, layout


def platform_roundtrip(images, profile) -> np.ndarray:
    """Pass a batch through the profile's upload/download pipeline."""
    profile = get_profile(profile)
    images = np.asarray(images, dtype=np.float32)
    if len(images) == 0:
        return images.copy()
    out = []
    for canvas, layout in canvases(images, profile):
        out.append(unstack(download(upload(canvas, profile), layout, profile), layout))
    return np.concatenate(out).astype(np.float32)


# ------------------------------------------------- file round-trip (two steps)

def export_canvases(images, profile, out_dir, ids=None):
    """Write canvases as PNG plus a ``layout.json`` sidecar. Returns the sidecar path."""
    profile = get_profile(profile)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (canvas, layout) in enumerate(canvases(images, profile, ids)):
        name = f"canvas-{i:05d}.png"
        imageops.save_png(canvas, out_dir / name)
        entries.append({"file": name, "layout": layout.to_dict()})
    sidecar = out_dir / "layout.json"
    sidecar.write_text(json.dumps({"profile": asdict(profile), "canvases": entries}, indent=1))
    return sidecar


def simulate_upload_dir(canvas_dir, profile, out_dir):
    """Apply the platform's storage transform to exported canvases (JPEG files out)."""
    profile = get_profile(profile)
    canvas_dir, out_dir = Path(canvas_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = json.loads((canvas_dir / "layout.json").read_text())
    for e in meta["canvases"]:
        stored = upload(imageops.load_png(canvas_dir / e["file"]), profile)
        e["file"] = e["file"].rsplit(".", 1)[0] + ".png"
        imageops.save_png(stored, out_dir / e["file"])
    meta["profile"] = asdict(profile)
    (out_dir / "layout.json").write_text(json.dumps(meta, indent=1))
    return out_dir / "layout.json"


def import_canvases(sidecar):
    """Read downloaded canvases back into (images, ids) using the sidecar."""
    sidecar = Path(sidecar)
    meta = json.loads(sidecar.read_text())
    profile = PlatformProfile(**meta["profile"])
    images, ids = [], []
    for e in meta["canvases"]:
        layout = Layout.from_dict(e["layout"])
        stored = imageops.load_png(sidecar.parent / e["file"])
        images.append(unstack(download(stored, layout, profile), layout))
        ids += layout.ids
    return (np.concatenate(images) if images else np.zeros((0,))), ids
