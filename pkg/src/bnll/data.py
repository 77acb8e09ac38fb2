"""Samples, Gaussian heatmap targets, augmentation, and the toy dataset.

The toy dataset renders K colored Gaussian blobs at random positions; each
landmark has a fixed color signature so heatmap k can learn to find blob k.
Real datasets load from a directory holding image files plus an
annotations.jsonl file (one JSON object per sample: image path, keypoints as
[x, y, visible], head_size, bbox, optional mask path).
"""

from __future__ import annotations

import json
import colorsys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    keypoints: np.ndarray  # (K, 3): x, y, visible
    head_size: float = 0.0
    bbox: tuple[float, float, float, float] | None = None
    mask: np.ndarray | None = None  # (H', W') integer class ids
    path: str = ""

    def validate(self):
        k = self.keypoints
        h, w = self.image.shape[1:]
        vis = k[:, 2] > 0
        inside = (k[:, 0] >= 0) & (k[:, 0] < w) & (k[:, 1] >= 0) & (k[:, 1] < h)
        if np.any(vis & ~inside):
            raise ValueError("visible keypoint outside image bounds")


@dataclass(frozen=True)
class AugmentConfig:
    rotation_deg: float = 40.0
    scale: tuple[float, float] = (0.7, 1.3)
    hflip: bool = True
    swap: tuple[int, ...] = ()  # left/right landmark permutation, an involution

    def validate(self):
        if self.scale[0] <= 0 or self.scale[1] <= 0:
            raise ValueError("scale range must be positive")
        if self.swap:
            perm = np.asarray(self.swap)
            if not np.array_equal(perm[perm], np.arange(len(perm))):
                raise ValueError("swap permutation must be an involution")

    @staticmethod
    def identity() -> "AugmentConfig":
        return AugmentConfig(rotation_deg=0.0, scale=(1.0, 1.0), hflip=False)


# ---------------------------------------------------------------------------
# heatmap targets

def gaussian_heatmap(keypoint, out_res: tuple[int, int], sigma: float = 1.0
                     ) -> tuple[np.ndarray, bool]:
    """Unit-peak Gaussian centered on the nearest grid point.

    keypoint is (x, y, visible) in output-grid coordinates. Returns
    (heatmap, inside): invisible or out-of-grid keypoints give an all-zero
    map with inside=False.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    h, w = out_res
    hm = np.zeros((h, w), np.float32)
    x, y, vis = float(keypoint[0]), float(keypoint[1]), float(keypoint[2])
    if vis <= 0:
        return hm, False
    cx, cy = int(round(x)), int(round(y))
    if not (0 <= cx < w and 0 <= cy < h):
        return hm, False
    ys, xs = np.mgrid[0:h, 0:w]
    hm = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma * sigma))
    return hm.astype(np.float32), True


def target_heatmaps(keypoints: np.ndarray, in_res: tuple[int, int],
                    out_res: tuple[int, int], sigma: float = 1.0) -> np.ndarray:
    """(K, oh, ow) Gaussian targets from input-space keypoints."""
    scale_y = out_res[0] / in_res[0]
    scale_x = out_res[1] / in_res[1]
    maps = []
    for kp in keypoints:
        scaled = (kp[0] * scale_x, kp[1] * scale_y, kp[2])
        hm, _ = gaussian_heatmap(scaled, out_res, sigma)
        maps.append(hm)
    return np.stack(maps)


# ---------------------------------------------------------------------------
# toy dataset

BLOB_SIGMA = 2.5


def landmark_colors(k: int) -> np.ndarray:
    """K distinct RGB signatures, hue-spaced."""
    return np.array(
        [colorsys.hsv_to_rgb(i / k, 1.0, 1.0) for i in range(k)], np.float32
    )


def render_blobs(keypoints: np.ndarray, size: int, colors: np.ndarray) -> np.ndarray:
    """Render colored blobs at visible keypoints onto a (3, size, size) image."""
    img = np.zeros((3, size, size), np.float32)
    ys, xs = np.mgrid[0:size, 0:size]
    for kp, color in zip(keypoints, colors):
        if kp[2] <= 0:
            continue
        blob = np.exp(-((xs - kp[0]) ** 2 + (ys - kp[1]) ** 2) / (2 * BLOB_SIGMA**2))
        img += color[:, None, None] * blob[None]
    return np.clip(img, 0.0, 1.0)


def make_toy_dataset(n: int, k: int, seed: int, size: int = 64) -> list[Sample]:
    """n synthetic samples with k color-coded blobs; keypoints at blob centers."""
    rng = np.random.default_rng(seed)
    colors = landmark_colors(k)
    margin = int(3 * BLOB_SIGMA)
    samples = []
    for _ in range(n):
        pts = rng.uniform(margin, size - 1 - margin, size=(k, 2))
        kps = np.concatenate([pts, np.ones((k, 1))], axis=1).astype(np.float32)
        samples.append(
            Sample(image=render_blobs(kps, size, colors), keypoints=kps,
                   head_size=float(size))
        )
    return samples


# ---------------------------------------------------------------------------
# augmentation

def augment(sample: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    """Rotate/scale about the image center, optionally horizontal-flip.

    The image and the keypoints move under the same affine map; keypoints
    pushed out of bounds are marked invisible.
    """
    cfg.validate()
    _, h, w = sample.image.shape
    theta = np.deg2rad(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
    s = rng.uniform(cfg.scale[0], cfg.scale[1])
    flip = bool(cfg.hflip and rng.random() < 0.5)

    c, sn = np.cos(theta), np.sin(theta)
    fwd = s * np.array([[c, -sn], [sn, c]])  # maps (x, y) offsets from center
    center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])

    kps = sample.keypoints.copy()
    xy = (kps[:, :2] - center) @ fwd.T + center
    if flip:
        xy[:, 0] = (w - 1) - xy[:, 0]
    kps[:, :2] = xy
    inside = (xy[:, 0] >= 0) & (xy[:, 0] < w) & (xy[:, 1] >= 0) & (xy[:, 1] < h)
    kps[:, 2] = kps[:, 2] * inside
    if flip and cfg.swap:
        kps = kps[np.asarray(cfg.swap)]

    # ndimage pulls input coords from output coords: invert the forward map
    inv = np.linalg.inv(fwd)
    mat = np.array([[inv[1, 1], inv[1, 0]], [inv[0, 1], inv[0, 0]]])  # (row, col)
    offset = np.array([center[1], center[0]]) - mat @ np.array([center[1], center[0]])
    channels = [
        ndimage.affine_transform(ch, mat, offset=offset, order=1, cval=0.0)
        for ch in sample.image
    ]
    img = np.stack(channels).astype(np.float32)
    if flip:
        img = img[:, :, ::-1].copy()
    return Sample(image=img, keypoints=kps, head_size=sample.head_size,
                  bbox=sample.bbox, mask=sample.mask, path=sample.path)


# ---------------------------------------------------------------------------
# on-disk datasets

def save_dataset(samples: list[Sample], outdir: str | Path):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        name = f"img_{i:05d}.png"
        arr = (np.clip(s.image, 0, 1).transpose(1, 2, 0) * 255).round().astype(np.uint8)
        Image.fromarray(arr).save(outdir / name)
        rec = {
            "image": name,
            "keypoints": s.keypoints.tolist(),
            "head_size": s.head_size,
        }
        if s.bbox is not None:
            rec["bbox"] = list(s.bbox)
        if s.mask is not None:
            mask_name = f"mask_{i:05d}.png"
            Image.fromarray(s.mask.astype(np.uint8)).save(outdir / mask_name)
            rec["mask"] = mask_name
        lines.append(json.dumps(rec))
    (outdir / "annotations.jsonl").write_text("\n".join(lines) + "\n")


def load_image(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def load_dataset(directory: str | Path) -> list[Sample]:
    directory = Path(directory)
    ann = directory / "annotations.jsonl"
    if not ann.exists():
        raise FileNotFoundError(f"no annotations.jsonl in {directory}")
    samples = []
    for line in ann.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        img = load_image(directory / rec["image"])
        mask = None
        if rec.get("mask"):
            mask = np.asarray(Image.open(directory / rec["mask"]), np.int64)
        samples.append(
            Sample(
                image=img,
                keypoints=np.asarray(rec["keypoints"], np.float32),
                head_size=float(rec.get("head_size", 0.0)),
                bbox=tuple(rec["bbox"]) if rec.get("bbox") else None,
                mask=mask,
                path=str(directory / rec["image"]),
            )
        )
    return samples
