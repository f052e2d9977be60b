"""Synthetic face-like scenes: rendering, augmentation, occluders and occlusion ROC."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, stats

from .heatmaps import EdgeMapping, generate

N_LANDMARKS = 27
# left/right mirror of the synthetic layout (see data/synthetic.txt)
FLIP_PERM = np.array(
    [6, 5, 4, 3, 2, 1, 0,
     12, 11, 10, 9, 8, 7,
     19, 18, 17, 20, 15, 14, 13, 16,
     21, 22,
     25, 24, 23, 26]
)


@dataclass
class SynthConfig:
    h: int = 64
    w: int = 64
    face_jitter: float = 2.0  # px, feature-level shape jitter
    center_jitter: float = 5.0  # px, face placement
    scale_range: tuple = (0.75, 1.0)
    proportion_jitter: float = 0.08
    occlude_p: float = 0.0
    occ_area: tuple = (0.10, 0.40)


@dataclass
class AugmentConfig:
    flip_p: float = 0.5
    grayscale_p: float = 0.5
    rot_deg: float = 30.0
    trans_frac: float = 0.04
    scale_frac: float = 0.05
    occlude_p: float = 1.0
    occ_area: tuple = (0.10, 0.40)

    def __post_init__(self) -> None:
        for name in ("flip_p", "grayscale_p", "occlude_p"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name in ("rot_deg", "trans_frac", "scale_frac"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        lo, hi = self.occ_area
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"occ_area must be an ordered range in [0, 1], got {self.occ_area}")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass
class SynthSample:
    image: np.ndarray  # (h, w, 3) float32 in [0, 1]
    landmarks: np.ndarray  # (27, 2) as (x, y)
    occ_mask: np.ndarray  # (h, w) bool, True = occluded
    clean_image: np.ndarray

    def copy(self) -> "SynthSample":
        return SynthSample(self.image.copy(), self.landmarks.copy(),
                           self.occ_mask.copy(), self.clean_image.copy())


def synthetic_mapping() -> EdgeMapping:
    return EdgeMapping.bundled("synthetic")


# --------------------------------------------------------------------------
# geometry and rendering


def face_landmarks(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    j, c, pj = cfg.face_jitter, cfg.center_jitter, cfg.proportion_jitter
    scale = rng.uniform(*cfg.scale_range)
    cx = cfg.w / 2 + rng.uniform(-c, c)
    cy = cfg.h / 2 - 1 + rng.uniform(-c, c)
    a = 0.33 * cfg.w * scale * (1 + rng.uniform(-pj, pj))
    b = 0.37 * cfg.h * scale * (1 + rng.uniform(-pj, pj))

    def prop(v):
        return v * (1 + rng.uniform(-pj, pj) * 1.5)

    pts = []
    for deg in np.linspace(170.0, 10.0, 7):
        phi = math.radians(deg + rng.uniform(-3, 3))
        pts.append((cx + a * math.cos(phi), cy + b * math.sin(phi)))
    brow_y = cy - prop(0.45) * b + rng.uniform(-1, 1)
    arch = 1.5 + rng.uniform(0, 1.5)
    for side in (-1, 1):
        xs = [cx + side * 0.75 * a, cx + side * 0.47 * a, cx + side * 0.2 * a]
        ys = [brow_y, brow_y - arch, brow_y + 0.3]
        trip = list(zip(xs, ys))
        pts.extend(trip if side < 0 else trip[::-1])
    eye_y = cy - prop(0.2) * b + rng.uniform(-0.5, 0.5)
    ew = 0.2 * a + rng.uniform(-0.5, 0.5)
    eh = 2.0 + rng.uniform(0, 1.0)
    eye_dx = prop(0.42)
    for side in (-1, 1):
        ex = cx + side * eye_dx * a
        pts.extend([(ex - ew, eye_y), (ex, eye_y - eh), (ex + ew, eye_y), (ex, eye_y + eh)])
    pts.extend([(cx, cy - 0.1 * b), (cx + rng.uniform(-1, 1), cy + 0.22 * b)])
    my = cy + prop(0.5) * b + rng.uniform(-1, 1)
    mw = prop(0.35) * a + rng.uniform(-1, 1)
    pts.extend([(cx - mw, my), (cx, my - 1.5 - rng.uniform(0, 1)), (cx + mw, my),
                (cx, my + 2.0 + rng.uniform(0, 2))])
    return np.array(pts, dtype=np.float64)


def _fill_polygon(poly: np.ndarray, h: int, w: int) -> np.ndarray:
    """Even-odd fill of pixel centres inside ``poly`` (K, 2) in (x, y)."""
    ys, xs = np.mgrid[0:h, 0:w]
    px, py = xs.ravel().astype(np.float64), ys.ravel().astype(np.float64)
    inside = np.zeros(px.shape, dtype=bool)
    x0, y0 = poly[:, 0], poly[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for ax, ay, bx, by in zip(x0, y0, x1, y1):
        crosses = (ay > py) != (by > py)
        xint = ax + (py - ay) * (bx - ax) / np.where(by != ay, by - ay, 1.0)
        inside ^= crosses & (px < xint)
    return inside.reshape(h, w)


def _stroke(points: np.ndarray, h: int, w: int, width: float) -> np.ndarray:
    """Pixels within ``width / 2`` of the polyline."""
    out = np.zeros((h, w), dtype=bool)
    x0, y0 = np.maximum(np.floor(points.min(0) - width), 0).astype(int)
    x1, y1 = np.minimum(np.ceil(points.max(0) + width) + 1, [w, h]).astype(int)
    if x0 >= x1 or y0 >= y1:
        return out
    ys, xs = np.mgrid[y0:y1, x0:x1]
    q = np.stack([xs, ys], -1).reshape(-1, 1, 2).astype(np.float64)
    a, b = points[:-1][None], points[1:][None]
    ab = b - a
    t = np.clip(((q - a) * ab).sum(-1) / np.maximum((ab * ab).sum(-1), 1e-12), 0, 1)
    diff = q - (a + t[..., None] * ab)
    d2 = (diff * diff).sum(-1).min(1)
    out[y0:y1, x0:x1] = (d2 <= (width / 2) ** 2).reshape(y1 - y0, x1 - x0)
    return out


def _quad_curve(p0, p1, p2, k: int = 12) -> np.ndarray:
    """Quadratic curve through p0, p1 (at t=0.5), p2."""
    p0, p1, p2 = (np.asarray(p, dtype=np.float64) for p in (p0, p1, p2))
    ctrl = 2 * p1 - 0.5 * (p0 + p2)
    t = np.linspace(0, 1, k)[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * ctrl + t ** 2 * p2


def render(landmarks: np.ndarray, rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    lm = landmarks
    bg = rng.uniform(0.1, 0.9, size=3)
    img = np.empty((h, w, 3))
    img[:] = bg
    img += rng.normal(0.0, 0.06, size=(h, w, 3))
    skin = rng.uniform(0.35, 0.95, size=3)
    dark = skin * rng.uniform(0.15, 0.4)

    cx = lm[[0, 6], 0].mean()
    cy = lm[[0, 6], 1].mean()
    a = (lm[6, 0] - lm[0, 0]) / 2
    b = lm[3, 1] - cy
    ys, xs = np.mgrid[0:h, 0:w]
    top = cy - 1.15 * b
    face = (((xs - cx) / (a + 0.5)) ** 2 + ((ys - cy) / (b + 0.5)) ** 2 <= 1.0) & (ys >= cy)
    face |= (((xs - cx) / (a + 0.5)) ** 2 + ((ys - cy) / (cy - top)) ** 2 <= 1.0) & (ys < cy)
    img[face] = skin

    for idx in ([7, 8, 9], [10, 11, 12]):
        img[_stroke(lm[idx], h, w, 2.2)] = dark
    for base in (13, 17):
        c = lm[[base, base + 2]].mean(0)
        rx = (lm[base + 2, 0] - lm[base, 0]) / 2 + 0.5
        ry = (lm[base + 3, 1] - lm[base + 1, 1]) / 2 + 0.5
        eye = ((xs - c[0]) / rx) ** 2 + ((ys - c[1]) / ry) ** 2 <= 1.0
        img[eye] = 0.95
        pupil = ((xs - c[0]) / (0.45 * rx)) ** 2 + ((ys - c[1]) / ry) ** 2 <= 1.0
        img[eye & pupil] = dark * 0.5
    img[_stroke(lm[[21, 22]], h, w, 1.6)] = skin * 0.7
    upper = _quad_curve(lm[23], lm[24], lm[25])
    lower = _quad_curve(lm[25], lm[26], lm[23])
    lips = _fill_polygon(np.concatenate([upper, lower]), h, w)
    img[lips] = np.array([0.75, 0.2, 0.25]) * rng.uniform(0.6, 1.0)
    img[_stroke(np.concatenate([upper, lower]), h, w, 1.0)] = dark
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def paint_occluder(sample: SynthSample, rng: np.random.Generator, area: tuple) -> SynthSample:
    """Axis-aligned rectangle with a uniform random colour; updates ``occ_mask``."""
    h, w = sample.occ_mask.shape
    frac = rng.uniform(*area)
    aspect = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
    rh = int(round(min(h, max(1.0, math.sqrt(frac * h * w * aspect)))))
    rw = int(round(min(w, max(1.0, frac * h * w / rh))))
    y0 = int(rng.integers(0, h - rh + 1))
    x0 = int(rng.integers(0, w - rw + 1))
    out = sample.copy()
    out.image[y0:y0 + rh, x0:x0 + rw] = rng.uniform(0.0, 1.0, size=3).astype(np.float32)
    out.occ_mask[y0:y0 + rh, x0:x0 + rw] = True
    return out


def sample(seed, cfg: SynthConfig | None = None) -> SynthSample:
    """Deterministic synthetic face for ``seed`` (int or sequence of ints)."""
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(seed)
    lm = face_landmarks(rng, cfg)
    img = render(lm, rng, cfg.h, cfg.w)
    s = SynthSample(img, lm, np.zeros((cfg.h, cfg.w), dtype=bool), img.copy())
    if cfg.occlude_p > 0 and rng.random() < cfg.occlude_p:
        s = paint_occluder(s, rng, cfg.occ_area)
    return s


# --------------------------------------------------------------------------
# augmentation


def flip(s: SynthSample) -> SynthSample:
    w = s.image.shape[1]
    lm = s.landmarks[FLIP_PERM].copy()
    lm[:, 0] = (w - 1) - lm[:, 0]
    return SynthSample(s.image[:, ::-1].copy(), lm, s.occ_mask[:, ::-1].copy(),
                       s.clean_image[:, ::-1].copy())


def grayscale(s: SynthSample) -> SynthSample:
    lum = np.array([0.299, 0.587, 0.114], dtype=np.float32)

    def g(img):
        return np.repeat((img @ lum)[..., None], 3, axis=-1).astype(np.float32)

    return SynthSample(g(s.image), s.landmarks.copy(), s.occ_mask.copy(), g(s.clean_image))


def affine_matrix(rot_deg: float, scale: float, shift) -> np.ndarray:
    """2x2 linear part acting on (x, y); the translation is ``shift``."""
    t = math.radians(rot_deg)
    return scale * np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])


def transform_points(points: np.ndarray, rot_deg: float, scale: float, shift, center) -> np.ndarray:
    a = affine_matrix(rot_deg, scale, shift)
    c = np.asarray(center, dtype=np.float64)
    return (np.asarray(points, dtype=np.float64) - c) @ a.T + c + np.asarray(shift, dtype=np.float64)


def warp_image(img: np.ndarray, rot_deg: float, scale: float, shift, center, order: int = 1) -> np.ndarray:
    """Resample ``img`` so content at p moves to center + A (p - center) + shift."""
    a = affine_matrix(rot_deg, scale, shift)
    inv = np.linalg.inv(a)
    c = np.asarray(center, dtype=np.float64)
    s = np.asarray(shift, dtype=np.float64)
    # ndimage works in (row, col) = (y, x)
    inv_rc = inv[::-1, ::-1]
    c_rc, s_rc = c[::-1], s[::-1]
    offset = c_rc - inv_rc @ (c_rc + s_rc)
    if img.ndim == 2:
        return ndimage.affine_transform(img, inv_rc, offset=offset, order=order, mode="nearest")
    return np.stack([ndimage.affine_transform(img[..., k], inv_rc, offset=offset, order=order,
                                              mode="nearest") for k in range(img.shape[-1])], -1)


def augment(s: SynthSample, seed, cfg: AugmentConfig | None = None) -> SynthSample:
    """Flip, grayscale, one rotation/scale/translation affine, then an optional occluder."""
    cfg = cfg or AugmentConfig()
    rng = np.random.default_rng(seed)
    h, w = s.occ_mask.shape
    out = s.copy()
    if rng.random() < cfg.flip_p:
        out = flip(out)
    if rng.random() < cfg.grayscale_p:
        out = grayscale(out)
    if cfg.rot_deg or cfg.trans_frac or cfg.scale_frac:
        center = (w / 2, h / 2)
        for _ in range(10):
            rot = rng.uniform(-cfg.rot_deg, cfg.rot_deg)
            scale = 1.0 + rng.uniform(-cfg.scale_frac, cfg.scale_frac)
            shift = rng.uniform(-cfg.trans_frac, cfg.trans_frac, size=2) * np.array([w, h])
            lm = transform_points(out.landmarks, rot, scale, shift, center)
            if np.all((lm >= 0) & (lm <= [w - 1, h - 1])):
                break
        else:
            raise ValueError("augment: landmarks left the frame after 10 transform draws")
        out = SynthSample(
            np.clip(warp_image(out.image, rot, scale, shift, center), 0, 1).astype(np.float32),
            lm,
            warp_image(out.occ_mask.astype(np.float64), rot, scale, shift, center, order=0) > 0.5,
            np.clip(warp_image(out.clean_image, rot, scale, shift, center), 0, 1).astype(np.float32),
        )
    if cfg.occlude_p > 0 and rng.random() < cfg.occlude_p:
        out = paint_occluder(out, rng, cfg.occ_area)
    return out


# --------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    """Stacked clean samples with their ground-truth heatmaps."""

    images: np.ndarray  # (B, h, w, 3) clean
    landmarks: np.ndarray  # (B, 27, 2)
    heatmaps: np.ndarray  # (B, h, w, N_E)

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.landmarks[idx], self.heatmaps[idx])


def make_dataset(n: int, seed: int, synth_cfg: SynthConfig | None = None,
                 aug_cfg: AugmentConfig | None = None) -> Dataset:
    """``n`` augmented clean samples; occluders are painted later, per batch."""
    synth_cfg = synth_cfg or SynthConfig()
    aug_cfg = dataclasses.replace(aug_cfg or AugmentConfig(), occlude_p=0.0)
    mapping = synthetic_mapping()
    imgs, lms, heats = [], [], []
    for i in range(n):
        s = augment(sample((seed, i, 0), synth_cfg), (seed, i, 1), aug_cfg)
        imgs.append(s.clean_image)
        lms.append(s.landmarks)
        heats.append(generate(s.landmarks, mapping, synth_cfg.h, synth_cfg.w))
    return Dataset(np.stack(imgs), np.stack(lms), np.stack(heats))


def occlude_batch(images: np.ndarray, rng: np.random.Generator, area=(0.10, 0.40), p: float = 1.0):
    """Paint one occluder per image with probability ``p``; returns (images, masks)."""
    out = images.copy()
    masks = np.zeros(images.shape[:3], dtype=bool)
    for k in range(len(images)):
        if rng.random() >= p:
            continue
        s = SynthSample(out[k], np.zeros((0, 2)), masks[k], out[k])
        s = paint_occluder(s, rng, area)
        out[k], masks[k] = s.image, s.occ_mask
    return out, masks


# --------------------------------------------------------------------------
# occlusion ROC


def roc_auc(scores, labels) -> tuple:
    """Rank-statistic AUC; returns (auc, degenerate). Ties in score share average rank."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"roc_auc: {scores.shape} scores vs {labels.shape} labels")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return 0.5, True
    ranks = stats.rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg)), False


def patch_labels(occ_mask: np.ndarray, patch_size: int) -> np.ndarray:
    """(…, h, w) mask -> (…, m, n) labels: occluded when more than half the patch is covered."""
    *lead, h, w = occ_mask.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"patch_labels: {h}x{w} mask not divisible by patch {p}")
    pooled = occ_mask.reshape(*lead, h // p, p, w // p, p).mean(axis=(-3, -1))
    return pooled > 0.5


def occlusion_roc(alpha, occ_mask, patch_size: int) -> float:
    """AUC of alpha scores (…, m, n) against pooled patch labels of ``occ_mask``."""
    labels = patch_labels(np.asarray(occ_mask, dtype=bool), patch_size)
    alpha = np.asarray(alpha)
    if alpha.shape != labels.shape:
        raise ValueError(f"occlusion_roc: alpha {alpha.shape} vs patch grid {labels.shape}")
    return roc_auc(alpha, labels)[0]
