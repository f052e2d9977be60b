"""Ground-truth edge heatmaps: landmark contours -> binary edge map -> EDT -> truncated Gaussian."""
from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numba
import numpy as np

# landmark counts of the bundled mappings
MAPPING_LANDMARKS = {"wflw": 98, "300w": 68, "cofw": 29, "synthetic": 27}

_BIG = 1e20


class DegenerateEdgeError(ValueError):
    pass


@dataclass
class EdgeMapping:
    """Ordered landmark-index lists, one per facial edge."""

    edges: list
    n_landmarks: int
    name: str = ""

    def __post_init__(self) -> None:
        for j, edge in enumerate(self.edges):
            if len(edge) < 2:
                raise ValueError(f"edge {j} has fewer than 2 indices")
            bad = [i for i in edge if not 0 <= i < self.n_landmarks]
            if bad:
                raise ValueError(f"edge {j} index {bad[0]} outside [0, {self.n_landmarks})")

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @classmethod
    def parse(cls, text: str, n_landmarks: int, name: str = "") -> "EdgeMapping":
        edges = []
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            # tolerate the "Edge k: [..]" listing style
            line = re.sub(r"^Edge\s+\d+\s*:\s*", "", line).strip("[] ")
            edges.append(parse_index_list(line))
        return cls(edges, n_landmarks, name)

    @classmethod
    def load(cls, path: str | Path, n_landmarks: int) -> "EdgeMapping":
        path = Path(path)
        return cls.parse(path.read_text(), n_landmarks, path.stem)

    @classmethod
    def bundled(cls, name: str) -> "EdgeMapping":
        key = name.lower()
        if key not in MAPPING_LANDMARKS:
            raise KeyError(f"unknown mapping {name!r}; choose from {sorted(MAPPING_LANDMARKS)}")
        text = resources.files("orformer.data").joinpath(f"{key}.txt").read_text()
        return cls.parse(text, MAPPING_LANDMARKS[key], key)

    def format(self) -> str:
        return "".join(",".join(str(i) for i in e) + "\n" for e in self.edges)


def parse_index_list(spec: str) -> list:
    """``"38-41,33"`` -> ``[38, 39, 40, 41, 33]``; ranges are inclusive and ascending."""
    out = []
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            a, b = (int(v) for v in part.split("-"))
            if b < a:
                raise ValueError(f"descending range {part!r}")
            out.extend(range(a, b + 1))
        else:
            out.append(int(part))
    return out


def rasterize_edge(landmarks: np.ndarray, edge, h: int, w: int) -> np.ndarray:
    """Binary (h, w) map of the polyline through ``landmarks[edge]``.

    Landmarks are (x, y) pixel coordinates. Each segment is sampled at <= 0.5 px
    arc-length spacing; samples are rounded half-up and clamped into the frame.
    """
    if len(edge) < 2:
        raise ValueError("rasterize_edge: an edge needs at least 2 points")
    if h < 2 or w < 2:
        raise ValueError("rasterize_edge: frame must be at least 2x2")
    pts = np.asarray(landmarks, dtype=np.float64)[list(edge)]
    samples = [pts[:1]]
    for a, b in zip(pts[:-1], pts[1:]):
        steps = max(1, int(np.ceil(np.hypot(*(b - a)) / 0.5)))
        t = np.arange(1, steps + 1)[:, None] / steps
        samples.append(a + t * (b - a))
    xy = np.floor(np.concatenate(samples) + 0.5).astype(np.int64)
    xs = np.clip(xy[:, 0], 0, w - 1)
    ys = np.clip(xy[:, 1], 0, h - 1)
    out = np.zeros((h, w), dtype=bool)
    out[ys, xs] = True
    return out


@numba.njit(cache=True)
def _dt1d(f, out, v, z):
    # lower envelope of parabolas (q - v)^2 + f[v]
    n = f.shape[0]
    k = 0
    v[0] = 0
    z[0] = -np.inf
    z[1] = np.inf
    for q in range(1, n):
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        out[q] = (q - v[k]) * (q - v[k]) + f[v[k]]


@numba.njit(cache=True)
def _edt_sq(grid):
    h, w = grid.shape
    n = max(h, w)
    v = np.zeros(n, dtype=np.int64)
    z = np.zeros(n + 1, dtype=np.float64)
    buf = np.zeros(n, dtype=np.float64)
    tmp = np.empty((h, w), dtype=np.float64)
    for x in range(w):
        _dt1d(grid[:, x].copy(), buf[:h], v, z)
        tmp[:, x] = buf[:h]
    out = np.empty((h, w), dtype=np.float64)
    for y in range(h):
        _dt1d(tmp[y, :].copy(), buf[:w], v, z)
        out[y, :] = buf[:w]
    return out


def distance_transform(b: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance from every pixel to the nearest set pixel (two-pass squared EDT)."""
    b = np.asarray(b, dtype=bool)
    if not b.any():
        raise ValueError("distance_transform: edge map has no set pixels")
    f = np.where(b, 0.0, _BIG)
    return np.sqrt(_edt_sq(f))


def gaussianize(dist: np.ndarray) -> np.ndarray:
    """exp(-d^2 / 2 sigma^2) inside d < 3 sigma, 0 outside; sigma = population std of ``dist``."""
    dist = np.asarray(dist, dtype=np.float64)
    sigma = float(dist.std())
    if sigma == 0.0:
        raise DegenerateEdgeError("gaussianize: distance map has zero spread (degenerate edge)")
    out = np.exp(-(dist * dist) / (2.0 * sigma * sigma))
    out[dist >= 3.0 * sigma] = 0.0
    return out


def generate(landmarks: np.ndarray, mapping: EdgeMapping, h: int, w: int) -> np.ndarray:
    """(h, w, N_E) float32 edge heatmaps for one face."""
    landmarks = np.asarray(landmarks, dtype=np.float64)
    if landmarks.shape != (mapping.n_landmarks, 2):
        raise ValueError(
            f"generate: expected {mapping.n_landmarks} landmarks, got array {landmarks.shape}")
    if not np.all(np.isfinite(landmarks)):
        raise ValueError("generate: non-finite landmark coordinates")
    out = np.empty((h, w, mapping.n_edges), dtype=np.float32)
    for j, edge in enumerate(mapping.edges):
        out[..., j] = gaussianize(distance_transform(rasterize_edge(landmarks, edge, h, w)))
    return out


# --------------------------------------------------------------------------
# file formats


def read_annotations(path: str | Path, n_landmarks: int) -> list:
    """``<image-path> x0 y0 x1 y1 ...`` per line -> [(path, (N_L, 2) array)]."""
    out = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        coords = parts[1:]
        if len(coords) != 2 * n_landmarks:
            raise ValueError(
                f"{path}:{lineno}: expected {2 * n_landmarks} coordinates, got {len(coords)}")
        out.append((parts[0], np.array(coords, dtype=np.float64).reshape(n_landmarks, 2)))
    return out


def write_annotations(path: str | Path, rows) -> None:
    with open(path, "w") as fh:
        for name, pts in rows:
            coords = " ".join(f"{v:.4f}" for v in np.asarray(pts).reshape(-1))
            fh.write(f"{name} {coords}\n")


def write_pgm(path: str | Path, values: np.ndarray) -> None:
    """8-bit binary PGM of values in [0, 1], scaled by 255."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("write_pgm: expected a 2-D array")
    h, w = values.shape
    pix = np.clip(np.floor(values * 255.0 + 0.5), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    pos += 1
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    data = np.frombuffer(raw[pos:pos + w * h], dtype=np.uint8)
    if data.size != w * h:
        raise ValueError(f"{path}: truncated PGM payload")
    return data.reshape(h, w).astype(np.float64) / maxval


def write_raw_f32(path: str | Path, arr: np.ndarray) -> None:
    """One ASCII line ``f32 d0 d1 ...`` then little-endian float32 payload."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = "f32 " + " ".join(str(d) for d in arr.shape) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(arr.tobytes())


def read_raw_f32(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    tag, *dims = raw[:nl].decode("ascii").split()
    if tag != "f32":
        raise ValueError(f"{path}: unknown raw tensor tag {tag!r}")
    shape = tuple(int(d) for d in dims)
    payload = raw[nl + 1:]
    if len(payload) != 4 * int(np.prod(shape)):
        raise ValueError(f"{path}: payload has {len(payload)} bytes, header implies {4 * int(np.prod(shape))}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def dump_heatmap(directory: str | Path, stem: str, heatmap: np.ndarray) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for j in range(heatmap.shape[-1]):
        write_pgm(directory / f"{stem}_edge{j:02d}.pgm", heatmap[..., j])
    write_raw_f32(directory / f"{stem}.f32", heatmap)
