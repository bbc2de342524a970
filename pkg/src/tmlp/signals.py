"""Signal sources: PNG images, analytic signed distance fields, and batch samplers."""

from dataclasses import dataclass, field

import cv2
import numpy as np

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"

SDF_UNIFORM_FRACTION = 0.2
SDF_NEAR_SIGMA = 0.01
FULL_BATCH_LIMIT = 256 * 256
IMAGE_MINIBATCH = 2**16


@dataclass
class ImageSignal:
    """Pixels as an ``(height, width, channels)`` float array in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"image must be (h, w, 1|3), got {px.shape}")
        if px.size and (px.min() < 0 or px.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        self.pixels = px

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def channels(self):
        return self.pixels.shape[2]

    def flat(self):
        """Pixel values in the row-major order used by :func:`image_coords`."""
        return self.pixels.reshape(-1, self.channels)


def load_image(path):
    """Read an 8- or 16-bit PNG; alpha is dropped and values scaled to [0, 1]."""
    path = str(path)
    try:
        with open(path, "rb") as fh:
            magic = fh.read(8)
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    if magic != PNG_MAGIC:
        raise OSError(f"{path} is not a PNG file")
    raw = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise OSError(f"cannot decode PNG {path}")
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise OSError(f"{path}: unsupported sample type {raw.dtype}")
    if raw.ndim == 3:
        if raw.shape[2] == 4:
            raw = raw[:, :, :3]
        if raw.shape[2] == 3:
            raw = raw[:, :, ::-1]
        elif raw.shape[2] == 2:
            raw = raw[:, :, :1]
    return ImageSignal(raw.astype(np.float64) / scale)


def to_uint(pixels, bits=8):
    """Clamp to [0, 1] and quantise to an unsigned integer image."""
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    peak = 255 if bits == 8 else 65535
    dtype = np.uint8 if bits == 8 else np.uint16
    return np.round(np.clip(pixels, 0.0, 1.0) * peak).astype(dtype)


def save_image(path, image, bits=8):
    px = image.pixels if isinstance(image, ImageSignal) else np.asarray(image)
    if px.ndim == 2:
        px = px[:, :, None]
    out = to_uint(px, bits)
    if out.shape[2] == 3:
        out = out[:, :, ::-1]
    else:
        out = out[:, :, 0]
    if not cv2.imwrite(str(path), np.ascontiguousarray(out)):
        raise OSError(f"cannot write image {path}")


def grid_centers(n):
    """Centres of ``n`` equal cells tiling [-1, 1]."""
    return -1.0 + (2.0 * np.arange(n) + 1.0) / n


def image_coords(image_or_shape):
    """Pixel centres mapped to [-1, 1]^2 as ``(x, y)`` rows, row-major over pixels."""
    if isinstance(image_or_shape, ImageSignal):
        height, width = image_or_shape.height, image_or_shape.width
    else:
        height, width = image_or_shape[:2]
    ys = grid_centers(height)
    xs = grid_centers(width)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def pixel_of(coords, height, width):
    """Nearest pixel ``(row, col)`` for coordinates produced by :func:`image_coords`."""
    coords = np.asarray(coords)
    col = np.floor((coords[:, 0] + 1.0) * width / 2.0).astype(int)
    row = np.floor((coords[:, 1] + 1.0) * height / 2.0).astype(int)
    return np.clip(row, 0, height - 1), np.clip(col, 0, width - 1)


def add_gaussian_noise(image, sigma_8bit, rng):
    """Additive Gaussian noise with std ``sigma_8bit / 255``, clamped to [0, 1]."""
    if sigma_8bit < 0:
        raise ValueError("sigma must be >= 0")
    if sigma_8bit == 0:
        return ImageSignal(image.pixels.copy())
    noise = rng.normal(0.0, sigma_8bit / 255.0, size=image.pixels.shape)
    return ImageSignal(np.clip(image.pixels + noise, 0.0, 1.0))


# --------------------------------------------------------------------------
# analytic shapes

SHAPE_KINDS = ("circle2d", "box2d", "polygon2d", "sphere3d", "torus3d", "box3d")


@dataclass(frozen=True)
class SdfShape:
    kind: str
    center: tuple = (0.0, 0.0)
    radius: float = 0.5
    half_extents: tuple = ()
    vertices: tuple = ()
    major_radius: float = 0.0
    minor_radius: float = 0.0

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        center = tuple(float(c) for c in self.center)
        if len(center) != self.dim:
            center = (0.0,) * self.dim if not any(center) else center
        if len(center) != self.dim:
            raise ValueError(f"{self.kind} needs a {self.dim}-d center, got {self.center}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "half_extents", tuple(float(v) for v in self.half_extents))
        object.__setattr__(self, "vertices", tuple(tuple(float(c) for c in v) for v in self.vertices))
        if self.kind in ("box2d", "box3d") and len(self.half_extents) != self.dim:
            raise ValueError(f"{self.kind} needs {self.dim} half extents")
        if self.kind == "polygon2d" and len(self.vertices) < 3:
            raise ValueError("polygon2d needs at least three vertices")
        if self.kind == "torus3d" and not 0 < self.minor_radius < self.major_radius:
            raise ValueError("torus3d needs 0 < minor_radius < major_radius")

    @property
    def dim(self):
        return 2 if self.kind.endswith("2d") else 3

    @classmethod
    def circle(cls, radius=0.5, center=(0.0, 0.0)):
        return cls("circle2d", center=center, radius=radius)

    @classmethod
    def box2d(cls, half_extents, center=(0.0, 0.0)):
        return cls("box2d", center=center, half_extents=half_extents)

    @classmethod
    def polygon(cls, vertices):
        return cls("polygon2d", vertices=vertices)

    @classmethod
    def sphere(cls, radius=0.5, center=(0.0, 0.0, 0.0)):
        return cls("sphere3d", center=center, radius=radius)

    @classmethod
    def torus(cls, major_radius, minor_radius, center=(0.0, 0.0, 0.0)):
        return cls("torus3d", center=center, major_radius=major_radius, minor_radius=minor_radius)

    @classmethod
    def box3d(cls, half_extents, center=(0.0, 0.0, 0.0)):
        return cls("box3d", center=center, half_extents=half_extents)


def _box_sdf(q_abs, half):
    q = q_abs - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return outside + inside


def _segment_distances(p, a, b):
    ab = b - a
    t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(p - closest, axis=1)


def _winding_number(p, verts):
    wn = np.zeros(len(p), dtype=int)
    x, y = p[:, 0], p[:, 1]
    for a, b in zip(verts, np.roll(verts, -1, axis=0)):
        side = (b[0] - a[0]) * (y - a[1]) - (x - a[0]) * (b[1] - a[1])
        up = (a[1] <= y) & (b[1] > y) & (side > 0)
        down = (a[1] > y) & (b[1] <= y) & (side < 0)
        wn += up.astype(int) - down.astype(int)
    return wn


def analytic_sdf(shape, p):
    """Exact signed distance (negative inside) at one point or an ``(n, dim)`` batch."""
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    pts = np.atleast_2d(p)
    if pts.shape[1] != shape.dim:
        raise ValueError(f"{shape.kind} expects {shape.dim}-d points, got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("query points must be finite")
    q = pts - np.asarray(shape.center)
    kind = shape.kind
    if kind in ("circle2d", "sphere3d"):
        d = np.linalg.norm(q, axis=1) - shape.radius
    elif kind in ("box2d", "box3d"):
        d = _box_sdf(np.abs(q), np.asarray(shape.half_extents))
    elif kind == "torus3d":
        ring = np.hypot(q[:, 0], q[:, 1]) - shape.major_radius
        d = np.hypot(ring, q[:, 2]) - shape.minor_radius
    else:
        verts = np.asarray(shape.vertices)
        dist = np.full(len(pts), np.inf)
        for a, b in zip(verts, np.roll(verts, -1, axis=0)):
            dist = np.minimum(dist, _segment_distances(pts, a, b))
        inside = _winding_number(pts, verts) != 0
        d = np.where(inside, -dist, dist)
    return float(d[0]) if single else d


def _perimeter_samples(verts, u):
    """Points at arc-length fractions ``u`` in [0, 1) along a closed polyline."""
    edges = np.roll(verts, -1, axis=0) - verts
    lengths = np.linalg.norm(edges, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    s = u * cum[-1]
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(verts) - 1)
    frac = (s - cum[idx]) / lengths[idx]
    pts = verts[idx] + frac[:, None] * edges[idx]
    tangent = edges[idx] / lengths[idx, None]
    normals = np.stack([tangent[:, 1], -tangent[:, 0]], axis=1)
    return pts, normals


def _polygon_signed_area(verts):
    x, y = verts[:, 0], verts[:, 1]
    return 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)


def surface_points(shape, n, rng):
    """``n`` random points on the zero level set with outward unit normals."""
    c = np.asarray(shape.center)
    kind = shape.kind
    if kind == "circle2d":
        theta = rng.uniform(0.0, 2 * np.pi, n)
        normals = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        return c + shape.radius * normals, normals
    if kind == "sphere3d":
        v = rng.normal(size=(n, 3))
        normals = v / np.linalg.norm(v, axis=1, keepdims=True)
        return c + shape.radius * normals, normals
    if kind == "box2d":
        a, b = shape.half_extents
        verts = np.array([[-a, -b], [a, -b], [a, b], [-a, b]])
        pts, normals = _perimeter_samples(verts, rng.uniform(0.0, 1.0, n))
        return c + pts, normals
    if kind == "polygon2d":
        verts = np.asarray(shape.vertices)
        pts, normals = _perimeter_samples(verts, rng.uniform(0.0, 1.0, n))
        if _polygon_signed_area(verts) < 0:
            normals = -normals
        return pts, normals
    if kind == "torus3d":
        R, r = shape.major_radius, shape.minor_radius
        us, vs = [], []
        have = 0
        while have < n:
            m = 2 * (n - have) + 16
            u = rng.uniform(0.0, 2 * np.pi, m)
            v = rng.uniform(0.0, 2 * np.pi, m)
            keep = rng.uniform(0.0, 1.0, m) < (R + r * np.cos(v)) / (R + r)
            us.append(u[keep])
            vs.append(v[keep])
            have += int(keep.sum())
        u = np.concatenate(us)[:n]
        v = np.concatenate(vs)[:n]
        return torus_point(shape, u, v)
    # box3d: pick a face proportionally to its area
    half = np.asarray(shape.half_extents)
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    axis = rng.choice(3, size=n, p=areas / areas.sum())
    sign = rng.choice([-1.0, 1.0], size=n)
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
    pts[np.arange(n), axis] = sign * half[axis]
    normals = np.zeros((n, 3))
    normals[np.arange(n), axis] = sign
    return c + pts, normals


def torus_point(shape, u, v):
    """Torus surface point and normal at angles ``u`` (around z) and ``v`` (tube)."""
    R, r = shape.major_radius, shape.minor_radius
    normals = np.stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)], axis=1)
    centre_line = np.stack([R * np.cos(u), R * np.sin(u), np.zeros_like(u)], axis=1)
    return np.asarray(shape.center) + centre_line + r * normals, normals


def sdf_gradient(shape, p, h=1e-6):
    """Central-difference gradient of :func:`analytic_sdf`."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    grads = np.empty_like(p)
    for axis in range(p.shape[1]):
        e = np.zeros(p.shape[1])
        e[axis] = h
        grads[:, axis] = (analytic_sdf(shape, p + e) - analytic_sdf(shape, p - e)) / (2 * h)
    return grads


@dataclass
class SampleBatch:
    coords: np.ndarray
    targets: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.coords) != len(self.targets):
            raise ValueError(f"{len(self.coords)} coordinates but {len(self.targets)} targets")

    @property
    def count(self):
        return len(self.coords)


def sdf_split(n):
    """Counts of (uniform, surface, near-surface) points in a batch of ``n``."""
    n_uniform = int(round(n * SDF_UNIFORM_FRACTION))
    n_surface = (n - n_uniform) // 2
    return n_uniform, n_surface, n - n_uniform - n_surface


def sample_sdf_batch(shape, n, rng):
    """Uniform box samples, exact surface samples, and jittered surface samples."""
    if n < 5:
        raise ValueError("an SDF batch needs at least 5 points")
    dim = shape.dim
    n_uniform, n_surface, n_near = sdf_split(n)
    uniform = rng.uniform(-1.0, 1.0, size=(n_uniform, dim))
    surface, _ = surface_points(shape, n_surface, rng)
    near, _ = surface_points(shape, n_near, rng)
    near = np.clip(near + rng.normal(0.0, SDF_NEAR_SIGMA, size=near.shape), -1.0, 1.0)
    coords = np.concatenate([uniform, surface, near])
    targets = analytic_sdf(shape, coords)[:, None]
    return SampleBatch(coords, targets, meta={"split": (n_uniform, n_surface, n_near)})


class ImageSampler:
    """Full-image batches for small images, uniform pixel minibatches otherwise."""

    def __init__(self, image, batch_size=None):
        self.image = image
        self.coords = image_coords(image)
        self.values = image.flat()
        n = len(self.coords)
        if batch_size is None:
            batch_size = n if n <= FULL_BATCH_LIMIT else IMAGE_MINIBATCH
        self.batch_size = min(int(batch_size), n)
        self.fixed = self.batch_size == n
        self.population = SampleBatch(self.coords, self.values)

    def batch(self, rng):
        if self.fixed:
            return self.population
        idx = rng.integers(0, len(self.coords), size=self.batch_size)
        return SampleBatch(self.coords[idx], self.values[idx])


class SdfSampler:
    fixed = False

    def __init__(self, shape, batch_size=100_000):
        self.shape = shape
        self.batch_size = batch_size

    def batch(self, rng):
        return sample_sdf_batch(self.shape, self.batch_size, rng)


def grid_points(resolution, dim):
    """Cell-centre grid over [-1, 1]^dim; row-major with the last axis fastest (x)."""
    c = grid_centers(resolution)
    axes = np.meshgrid(*([c] * dim), indexing="ij")
    # reverse so column 0 is x (fastest-varying axis)
    return np.stack([a.ravel() for a in reversed(axes)], axis=1)

