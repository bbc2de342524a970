"""Level-of-detail evaluation, grid rendering, contour extraction and quality metrics."""

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .model import forward
from .signals import grid_centers, grid_points, image_coords

PSNR_CAP = 99.0
SSIM_WINDOW = 8
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
MAX_MC_RESOLUTION = 64
RENDER_CHUNK = 1 << 16


@dataclass(frozen=True)
class LodLevel:
    """A possibly fractional level ``l``, split as ``l = floor + alpha``."""

    l: float

    def __post_init__(self):
        if not (math.isfinite(self.l) and self.l >= 1):
            raise ValueError(f"level must be >= 1, got {self.l}")

    @property
    def floor(self):
        return int(math.floor(self.l))

    @property
    def alpha(self):
        return self.l - math.floor(self.l)

    def check(self, num_levels):
        if self.l > num_levels:
            raise ValueError(f"level {self.l} exceeds the model's {num_levels} levels")


def _as_level(level):
    return level if isinstance(level, LodLevel) else LodLevel(float(level))


def blend_levels(ys, level):
    """Interpolate between cumulative outputs ``ys`` (index 0 is level 1)."""
    level = _as_level(level)
    level.check(len(ys))
    lo, alpha = level.floor, level.alpha
    if alpha == 0:
        return ys[lo - 1]
    return (1.0 - alpha) * ys[lo - 1] + alpha * ys[lo]


def eval_lod(params, x, level):
    """Model output at a continuous level; integer levels return ``y_l`` exactly."""
    level = _as_level(level)
    level.check(params.config.num_outputs)
    outs, _ = forward(params, x)
    return blend_levels(outs.y, level)


def eval_levels(params, x, levels):
    """Evaluate several levels with a single forward pass."""
    outs, _ = forward(params, x)
    return [blend_levels(outs.y, lv) for lv in levels]


def supervised_levels(weights):
    """1-based levels that carry a positive loss weight (coarse to fine)."""
    return [i for i, w in enumerate(weights, start=1) if w > 0]


def render_grid(params, resolution, level):
    """Evaluate on cell-centre grid points; raw values, no clamping.

    2-D inputs give an ``(res, res, output_dim)`` array indexed ``[row(y), col(x)]``.
    3-D inputs give an ``(res, res, res)`` field indexed ``[z, y, x]`` (scalar output).
    """
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    cfg = params.config
    level = _as_level(level)
    level.check(cfg.num_outputs)
    if cfg.input_dim == 2:
        pts = image_coords((resolution, resolution))
    elif cfg.input_dim == 3:
        pts = grid_points(resolution, 3)
    else:
        raise ValueError(f"cannot render a {cfg.input_dim}-d input domain")
    pts = pts.astype(params.dtype)
    out = np.concatenate(
        [eval_lod(params, pts[s : s + RENDER_CHUNK], level) for s in range(0, len(pts), RENDER_CHUNK)]
    )
    if cfg.input_dim == 2:
        return out.reshape(resolution, resolution, cfg.output_dim)
    if cfg.output_dim != 1:
        raise ValueError("3-d rendering needs a scalar output")
    return out.reshape(resolution, resolution, resolution)


# --------------------------------------------------------------------------
# contours


def _lerp_crossing(pa, pb, va, vb, iso):
    t = (iso - va) / (vb - va)
    return pa + t * (pb - pa)


def marching_squares(field, iso=0.0, xs=None, ys=None):
    """Linear-interpolated iso-contour segments of a 2-D grid ``field[y, x]``.

    Returns an ``(m, 2, 2)`` array of segments with ``(x, y)`` endpoints.
    Saddle cells are resolved with the sign of the cell-centre average.
    """
    f = np.asarray(field, dtype=np.float64)
    if f.ndim != 2 or min(f.shape) < 2:
        raise ValueError(f"marching_squares needs a grid of at least 2x2, got {f.shape}")
    ny, nx = f.shape
    xs = grid_centers(nx) if xs is None else np.asarray(xs, dtype=np.float64)
    ys = grid_centers(ny) if ys is None else np.asarray(ys, dtype=np.float64)

    below = f < iso
    case = (
        below[:-1, :-1].astype(np.uint8)
        | (below[:-1, 1:].astype(np.uint8) << 1)
        | (below[1:, 1:].astype(np.uint8) << 2)
        | (below[1:, :-1].astype(np.uint8) << 3)
    )
    segments = []
    rows, cols = np.nonzero((case != 0) & (case != 15))
    for r, c in zip(rows.tolist(), cols.tolist()):
        v00, v01, v11, v10 = f[r, c], f[r, c + 1], f[r + 1, c + 1], f[r + 1, c]
        p00 = np.array([xs[c], ys[r]])
        p01 = np.array([xs[c + 1], ys[r]])
        p11 = np.array([xs[c + 1], ys[r + 1]])
        p10 = np.array([xs[c], ys[r + 1]])
        b00, b01, b11, b10 = below[r, c], below[r, c + 1], below[r + 1, c + 1], below[r + 1, c]
        # edges are always interpolated from the lower-index corner for watertightness
        pts = {}
        if b00 != b01:
            pts["bottom"] = _lerp_crossing(p00, p01, v00, v01, iso)
        if b01 != b11:
            pts["right"] = _lerp_crossing(p01, p11, v01, v11, iso)
        if b10 != b11:
            pts["top"] = _lerp_crossing(p10, p11, v10, v11, iso)
        if b00 != b10:
            pts["left"] = _lerp_crossing(p00, p10, v00, v10, iso)
        if len(pts) == 2:
            a, b = pts.values()
            segments.append((a, b))
            continue
        # saddle: decide whether the 00-11 diagonal is joined through the centre
        centre_below = (v00 + v01 + v11 + v10) / 4.0 < iso
        if centre_below == b00:
            segments.append((pts["bottom"], pts["right"]))
            segments.append((pts["left"], pts["top"]))
        else:
            segments.append((pts["left"], pts["bottom"]))
            segments.append((pts["right"], pts["top"]))
    if not segments:
        return np.zeros((0, 2, 2))
    return np.array(segments)


def contour_length(segments):
    if len(segments) == 0:
        return 0.0
    return float(np.linalg.norm(segments[:, 1] - segments[:, 0], axis=1).sum())


def sample_segments(segments, n):
    """``n`` points evenly spaced by arc length over a segment set, with unit normals."""
    seg = np.asarray(segments, dtype=np.float64)
    if len(seg) == 0:
        raise ValueError("cannot sample an empty contour")
    d = seg[:, 1] - seg[:, 0]
    lengths = np.linalg.norm(d, axis=1)
    keep = lengths > 0
    seg, d, lengths = seg[keep], d[keep], lengths[keep]
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    s = (np.arange(n) + 0.5) / n * cum[-1]
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    t = (s - cum[idx]) / lengths[idx]
    pts = seg[idx, 0] + t[:, None] * d[idx]
    tangent = d[idx] / lengths[idx, None]
    normals = np.stack([tangent[:, 1], -tangent[:, 0]], axis=1)
    return pts, normals


def marching_cubes(field, iso=0.0, axes=None):
    """Triangulated iso-surface of a 3-D grid ``field[z, y, x]``.

    Returns ``(vertices, faces)`` with ``(x, y, z)`` vertex coordinates.
    Uses scikit-image's Lewiner marching cubes on the uniform grid.
    """
    from skimage.measure import marching_cubes as _skimage_mc

    f = np.asarray(field, dtype=np.float64)
    if f.ndim != 3 or min(f.shape) < 2:
        raise ValueError(f"marching_cubes needs a grid of at least 2x2x2, got {f.shape}")
    if max(f.shape) > MAX_MC_RESOLUTION:
        raise ValueError(f"grid {f.shape} exceeds the {MAX_MC_RESOLUTION}^3 limit")
    nz, ny, nx = f.shape
    if axes is None:
        axes = (grid_centers(nx), grid_centers(ny), grid_centers(nz))
    ax, ay, az = (np.asarray(a, dtype=np.float64) for a in axes)
    if not (f.min() < iso < f.max()):
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)
    spacing = (az[1] - az[0], ay[1] - ay[0], ax[1] - ax[0])
    verts, faces, _, _ = _skimage_mc(f, level=iso, spacing=spacing)
    verts = verts[:, ::-1] + np.array([ax[0], ay[0], az[0]])
    # the axis reversal mirrors the mesh; restore winding
    return verts, faces[:, ::-1].astype(np.int64)


def triangle_areas(verts, faces):
    tri = verts[faces]
    return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)


def surface_area(verts, faces):
    return float(triangle_areas(verts, faces).sum()) if len(faces) else 0.0


def vertex_normals(verts, faces):
    """Area-weighted vertex normals (unnormalised face cross products summed)."""
    tri = verts[faces]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    normals = np.zeros_like(verts)
    for corner in range(3):
        np.add.at(normals, faces[:, corner], cross)
    norm = np.linalg.norm(normals, axis=1, keepdims=True)
    return normals / np.where(norm > 0, norm, 1.0)


def sample_mesh(verts, faces, n, rng):
    """Area-uniform random points on a triangle mesh with interpolated vertex normals."""
    if len(faces) == 0:
        raise ValueError("cannot sample an empty mesh")
    areas = triangle_areas(verts, faces)
    face = rng.choice(len(faces), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.uniform(size=n))
    r2 = rng.uniform(size=n)
    w = np.stack([1 - r1, r1 * (1 - r2), r1 * r2], axis=1)
    tri = faces[face]
    pts = np.einsum("ij,ijk->ik", w, verts[tri])
    vn = vertex_normals(verts, faces)
    normals = np.einsum("ij,ijk->ik", w, vn[tri])
    norm = np.linalg.norm(normals, axis=1, keepdims=True)
    return pts, normals / np.where(norm > 0, norm, 1.0)


# --------------------------------------------------------------------------
# metrics


def _pixels(img):
    return np.asarray(getattr(img, "pixels", img), dtype=np.float64)


def psnr(a, b):
    """Peak-1 PSNR in dB, capped at 99 (also the value for identical inputs)."""
    a, b = _pixels(a), _pixels(b)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes {a.shape} and {b.shape} differ")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP)


def to_luma(px):
    px = _pixels(px)
    if px.ndim == 2:
        return px
    if px.shape[2] == 1:
        return px[:, :, 0]
    return px[:, :, 0] * 0.299 + px[:, :, 1] * 0.587 + px[:, :, 2] * 0.114


def ssim(a, b, window=SSIM_WINDOW):
    """Mean SSIM over all ``window x window`` patches at stride 1 (uniform weights)."""
    a, b = _pixels(a), _pixels(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shapes {a.shape} and {b.shape} differ")
    x, y = to_luma(a), to_luma(b)
    if min(x.shape) < window:
        raise ValueError(f"image {x.shape} smaller than the {window}x{window} window")
    view = np.lib.stride_tricks.sliding_window_view
    wx = view(x, (window, window))
    wy = view(y, (window, window))
    mx = wx.mean(axis=(-2, -1))
    my = wy.mean(axis=(-2, -1))
    vx = ((wx - mx[..., None, None]) ** 2).mean(axis=(-2, -1))
    vy = ((wy - my[..., None, None]) ** 2).mean(axis=(-2, -1))
    cov = ((wx - mx[..., None, None]) * (wy - my[..., None, None])).mean(axis=(-2, -1))
    num = (2 * mx * my + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mx**2 + my**2 + SSIM_C1) * (vx + vy + SSIM_C2)
    return float(np.mean(num / den))


def _nearest(src, dst, chunk_elems=1 << 22):
    """Index and distance of the nearest ``dst`` point for every ``src`` point."""
    idx = np.empty(len(src), dtype=np.int64)
    dist = np.empty(len(src))
    step = max(1, chunk_elems // max(1, len(dst)))
    for s in range(0, len(src), step):
        diff = src[s : s + step, None, :] - dst[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        j = np.argmin(d2, axis=1)
        idx[s : s + step] = j
        dist[s : s + step] = np.sqrt(d2[np.arange(len(j)), j])
    return idx, dist


def chamfer_and_normals(points_a, normals_a, points_b, normals_b):
    """Symmetric mean nearest-neighbour distance and mean |cos| of matched normals."""
    pa, pb = np.asarray(points_a, float), np.asarray(points_b, float)
    na, nb = np.asarray(normals_a, float), np.asarray(normals_b, float)
    if len(pa) == 0 or len(pb) == 0:
        raise ValueError("chamfer distance needs two non-empty point sets")
    ia, da = _nearest(pa, pb)
    ib, db = _nearest(pb, pa)
    chamfer = 0.5 * (da.mean() + db.mean())
    cos_a = np.abs(np.sum(na * nb[ia], axis=1))
    cos_b = np.abs(np.sum(nb * na[ib], axis=1))
    return float(chamfer), float(0.5 * (cos_a.mean() + cos_b.mean()))


@dataclass
class MetricReport:
    """One row per evaluated level; missing metrics are NaN."""

    rows: list = field(default_factory=list)

    COLUMNS = ("level", "psnr", "ssim", "mae", "chamfer", "normal_consistency")

    def add(self, level, **metrics):
        row = {c: float("nan") for c in self.COLUMNS}
        row["level"] = float(getattr(level, "l", level))
        row.update({k: float(v) for k, v in metrics.items()})
        self.rows.append(row)
        return row

    def column(self, name):
        return [r[name] for r in self.rows]

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.COLUMNS)
        for r in self.rows:
            writer.writerow([repr(r[c]) for c in self.COLUMNS])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        report = cls()
        for row in csv.DictReader(io.StringIO(text)):
            report.rows.append({k: float(v) for k, v in row.items()})
        return report


# --------------------------------------------------------------------------
# geometry export


def write_obj_mesh(path, verts, faces):
    with open(path, "w") as fh:
        for v in verts:
            fh.write(f"v {v[0]!r} {v[1]!r} {v[2]!r}\n")
        for f in faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def write_obj_segments(path, segments):
    """Contour segments as OBJ line elements in the z = 0 plane."""
    with open(path, "w") as fh:
        for a, b in segments:
            fh.write(f"v {a[0]!r} {a[1]!r} 0.0\n")
            fh.write(f"v {b[0]!r} {b[1]!r} 0.0\n")
        for i in range(len(segments)):
            fh.write(f"l {2 * i + 1} {2 * i + 2}\n")
