"""Pinhole camera geometry and ground-truth track generation.

Pixel coordinates are continuous: pixel ``(row i, col j)`` covers
``[j, j+1) x [i, i+1)`` in ``(u, v)`` so its center sits at ``(j + 0.5, i + 0.5)``.
Depth lookups use the pixel containing the coordinate (nearest-pixel, no
interpolation). Everything is double precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BehindCamera,
    EmptyTrackSet,
    InvalidDepth,
    InvalidPolicy,
    SingularIntrinsics,
    WindowTooSmall,
)

BEHIND_EPS = 1e-12


@dataclass(frozen=True)
class CameraModel:
    """Intrinsics ``K`` plus world-to-camera extrinsics ``p_cam = R p_w + t``."""

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0:
            raise ValueError("K must be upper-triangular")
        if K[2, 2] != 1.0:
            raise ValueError("K[2, 2] must be 1")
        if K[0, 0] < 0 or K[1, 1] < 0:
            raise ValueError("focal lengths must be non-negative")
        if np.abs(R.T @ R - np.eye(3)).max() >= 1e-9 or abs(np.linalg.det(R) - 1.0) >= 1e-9:
            raise ValueError("R must be a proper rotation")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    def as_extrinsic_vector(self) -> np.ndarray:
        """``[R row-major (9), t (3)]``, the 12-double camera block on disk."""
        return np.concatenate([self.R.ravel(), self.t])


@dataclass
class CameraFrame:
    camera: CameraModel
    depth_map: np.ndarray  # (H, W); 0 marks invalid pixels
    image_size: tuple[int, int] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.depth_map = np.asarray(self.depth_map, dtype=np.float64)
        if self.image_size is None:
            self.image_size = tuple(self.depth_map.shape)
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))
        if self.depth_map.shape != self.image_size:
            raise ValueError(
                f"depth_map shape {self.depth_map.shape} != image_size {self.image_size}"
            )
        finite = np.isfinite(self.depth_map)
        if np.any(self.depth_map[finite] < 0):
            raise ValueError("depth values must be positive (0 = invalid)")

    def depth_at(self, pixel) -> float:
        """Nearest-pixel depth, or 0.0 outside the image."""
        H, W = self.image_size
        u, v = float(pixel[0]), float(pixel[1])
        col, row = math.floor(u), math.floor(v)
        if not (0 <= row < H and 0 <= col < W):
            return 0.0
        return float(self.depth_map[row, col])


@dataclass(frozen=True)
class SamplingPolicy:
    window_radius: int = 24
    seq_len_range: tuple[int, int] = (8, 8)
    margin: float = 4.0
    depth_rel_tol: float = 0.05
    visibility_keep_frac: float = 0.5
    neg_perturb_frac: float = 0.5

    def __post_init__(self):
        f_min, f_max = self.seq_len_range
        if f_min < 2 or f_max < f_min:
            raise InvalidPolicy(f"bad seq_len_range {self.seq_len_range}")
        if self.window_radius < f_max:
            raise InvalidPolicy("window_radius must be >= the maximum sequence length")
        if not 0 < self.depth_rel_tol < 1:
            raise InvalidPolicy("depth_rel_tol must lie in (0, 1)")
        if not 0 < self.visibility_keep_frac <= 1:
            raise InvalidPolicy("visibility_keep_frac must lie in (0, 1]")
        if not 0 < self.neg_perturb_frac <= 1:
            # zero perturbation would make negatives coincide with positives
            raise InvalidPolicy("neg_perturb_frac must lie in (0, 1]")
        if self.margin < 0:
            raise InvalidPolicy("margin must be non-negative")


@dataclass
class TrackSet:
    """Tracks seeded on a query grid of frame 0.

    Arrays are indexed ``[track, frame]``. ``patch`` holds the index of the
    pixel's cell on the token patch grid (-1 when the projection leaves the
    image or lands behind the camera); ``grid_index`` is the seed cell on the
    query grid.
    """

    uv: np.ndarray  # (T, F, 2)
    depth: np.ndarray  # (T, F)
    visible: np.ndarray  # (T, F) bool
    patch: np.ndarray  # (T, F) int
    grid_index: np.ndarray  # (T,)
    num_frames: int
    query_grid: tuple[int, int]
    patch_grid: tuple[int, int]
    image_size: tuple[int, int]

    def __len__(self) -> int:
        return int(self.grid_index.shape[0])

    @property
    def visibility_count(self) -> np.ndarray:
        return self.visible.sum(axis=1)

    def patch_rc(self) -> np.ndarray:
        """Patch indices as integer ``(row, col)`` pairs, shape ``(T, F, 2)``."""
        cols = self.patch_grid[1]
        return np.stack([self.patch // cols, self.patch % cols], axis=-1)


def back_project(camera: CameraModel, pixel, depth: float) -> np.ndarray:
    """World point seen at ``pixel`` with camera-frame depth ``depth``."""
    if not depth > 0:
        raise InvalidDepth(f"depth must be positive, got {depth}")
    K = camera.K
    if abs(K[0, 0] * K[1, 1]) < 1e-300:
        raise SingularIntrinsics("intrinsics matrix is singular")
    u, v = float(pixel[0]), float(pixel[1])
    # K is upper-triangular; solve by back-substitution instead of inverting
    y = (v - K[1, 2]) / K[1, 1]
    x = (u - K[0, 2] - K[0, 1] * y) / K[0, 0]
    p_cam = depth * np.array([x, y, 1.0])
    return camera.R.T @ (p_cam - camera.t)


def project(camera: CameraModel, world_point) -> tuple[np.ndarray, float]:
    """Pixel ``(u, v)`` and camera-frame depth of a world point."""
    p_cam = camera.R @ np.asarray(world_point, dtype=np.float64) + camera.t
    depth = float(p_cam[2])
    if depth <= BEHIND_EPS:
        raise BehindCamera(f"point has camera depth {depth}")
    h = camera.K @ p_cam
    return h[:2] / h[2], depth


def project_points(camera: CameraModel, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ``project`` for ``(n, 3)`` points.

    Points behind the camera get NaN pixels; their depth is returned as is.
    """
    p_cam = points @ camera.R.T + camera.t
    depth = p_cam[:, 2]
    h = p_cam @ camera.K.T
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = h[:, :2] / h[:, 2:3]
    uv[depth <= BEHIND_EPS] = np.nan
    return uv, depth


def pixel_to_patch(pixel, image_size: tuple[int, int], patch_grid: tuple[int, int]) -> int:
    """Flat index of the patch-grid cell containing ``pixel``; -1 if outside."""
    H, W = image_size
    rows, cols = patch_grid
    u, v = float(pixel[0]), float(pixel[1])
    if not (0 <= u < W and 0 <= v < H):
        return -1
    r = min(int(v * rows / H), rows - 1)
    c = min(int(u * cols / W), cols - 1)
    return r * cols + c


def inside_margin(pixel, image_size: tuple[int, int], margin: float) -> bool:
    H, W = image_size
    u, v = float(pixel[0]), float(pixel[1])
    return margin <= u <= W - margin and margin <= v <= H - margin


def validate_correspondence(
    frame: CameraFrame, proj_pixel, proj_depth: float, policy: SamplingPolicy
) -> bool:
    """Visibility test: margin, valid map depth, relative depth agreement."""
    if not inside_margin(proj_pixel, frame.image_size, policy.margin):
        return False
    d_map = frame.depth_at(proj_pixel)
    if not (np.isfinite(d_map) and d_map > 0):
        return False
    return abs(proj_depth - d_map) < policy.depth_rel_tol * min(proj_depth, d_map)


def query_cell_centers(query_grid: tuple[int, int], image_size: tuple[int, int]) -> np.ndarray:
    """``(rows*cols, 2)`` pixel centers of the query cells, row-major."""
    rows, cols = query_grid
    H, W = image_size
    r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    u = (c.ravel() + 0.5) * W / cols
    v = (r.ravel() + 0.5) * H / rows
    return np.stack([u, v], axis=1)


def generate_tracks(
    frames: list[CameraFrame],
    query_grid: tuple[int, int],
    policy: SamplingPolicy,
    patch_grid: tuple[int, int] = (16, 16),
) -> TrackSet:
    """Seed tracks at query-cell centers of frame 0 and follow them through all frames."""
    if len(frames) < 2:
        raise ValueError("need at least two frames")
    image_size = frames[0].image_size
    if any(f.image_size != image_size for f in frames):
        raise ValueError("all frames must share image_size")
    F = len(frames)

    seeds = query_cell_centers(query_grid, image_size)
    uv_all, depth_all, vis_all, patch_all, grid_idx = [], [], [], [], []
    for g, pix in enumerate(seeds):
        d0 = frames[0].depth_at(pix)
        if not (np.isfinite(d0) and d0 > 0):
            continue
        p_w = back_project(frames[0].camera, pix, d0)
        uv = np.full((F, 2), np.nan)
        depth = np.full(F, np.nan)
        vis = np.zeros(F, dtype=bool)
        patch = np.full(F, -1, dtype=np.int64)
        for f, frame in enumerate(frames):
            try:
                uv_f, d_f = project(frame.camera, p_w)
            except Exception:
                continue
            uv[f], depth[f] = uv_f, d_f
            patch[f] = pixel_to_patch(uv_f, image_size, patch_grid)
            vis[f] = validate_correspondence(frame, uv_f, d_f, policy)
        uv_all.append(uv)
        depth_all.append(depth)
        vis_all.append(vis)
        patch_all.append(patch)
        grid_idx.append(g)

    if not grid_idx:
        raise EmptyTrackSet("no query cell has a valid seed depth")

    vis_arr = np.array(vis_all)
    counts = vis_arr.sum(axis=1)
    survivors = np.flatnonzero(counts >= 2)
    n_keep = math.ceil(policy.visibility_keep_frac * len(survivors))
    # stable sort on -count keeps lower grid index first among ties
    order = survivors[np.argsort(-counts[survivors], kind="stable")]
    keep = np.sort(order[:n_keep])

    def pick(arrs, shape_tail, dtype):
        if len(keep) == 0:
            return np.zeros((0, F) + shape_tail, dtype=dtype)
        return np.array(arrs, dtype=dtype)[keep]

    return TrackSet(
        uv=pick(uv_all, (2,), np.float64),
        depth=pick(depth_all, (), np.float64),
        visible=pick(vis_all, (), bool),
        patch=pick(patch_all, (), np.int64),
        grid_index=np.array(grid_idx, dtype=np.int64)[keep] if len(keep) else np.zeros(0, np.int64),
        num_frames=F,
        query_grid=tuple(query_grid),
        patch_grid=tuple(patch_grid),
        image_size=image_size,
    )


def sample_negatives(
    track_set: TrackSet, policy: SamplingPolicy, rng_seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """One perturbed pixel per visible record.

    Offsets are uniform in a disc of radius ``neg_perturb_frac * diagonal``,
    clamped to the margins, and redrawn until they leave the true patch.
    Returns ``(frame_indices, pixels)``.
    """
    if len(track_set) == 0:
        raise EmptyTrackSet("cannot sample negatives from an empty track set")
    rng = np.random.default_rng(rng_seed)
    H, W = track_set.image_size
    radius = policy.neg_perturb_frac * math.hypot(H, W)
    lo_u, hi_u = policy.margin, W - policy.margin
    lo_v, hi_v = policy.margin, H - policy.margin

    t_idx, f_idx = np.nonzero(track_set.visible)
    pixels = np.empty((len(t_idx), 2))
    for n, (t, f) in enumerate(zip(t_idx, f_idx)):
        true_uv = track_set.uv[t, f]
        true_patch = track_set.patch[t, f]
        for _ in range(1000):
            r = radius * math.sqrt(rng.random())
            theta = 2 * math.pi * rng.random()
            cand = true_uv + r * np.array([math.cos(theta), math.sin(theta)])
            cand = np.array([min(max(cand[0], lo_u), hi_u), min(max(cand[1], lo_v), hi_v)])
            if pixel_to_patch(cand, track_set.image_size, track_set.patch_grid) != true_patch:
                break
        else:
            raise RuntimeError("could not place a negative outside the true patch")
        pixels[n] = cand
    return f_idx.astype(np.int64), pixels


def sample_sequence_indices(total_frames: int, policy: SamplingPolicy, rng_seed: int) -> list[int]:
    """Anchor-and-window frame sampling; returns sorted distinct clip indices."""
    f_min, f_max = policy.seq_len_range
    if total_frames < f_min:
        raise WindowTooSmall(f"clip has {total_frames} frames, need at least {f_min}")
    rng = np.random.default_rng(rng_seed)
    anchor = int(rng.integers(0, total_frames))
    F = int(rng.integers(f_min, f_max + 1))
    lo = max(0, anchor - policy.window_radius)
    hi = min(total_frames - 1, anchor + policy.window_radius)
    pool = [i for i in range(lo, hi + 1) if i != anchor]
    if len(pool) < F - 1:
        raise WindowTooSmall(
            f"window [{lo}, {hi}] around anchor {anchor} holds {len(pool) + 1} frames, need {F}"
        )
    rest = rng.choice(pool, size=F - 1, replace=False)
    return sorted([anchor, *(int(i) for i in rest)])
