"""Procedural posed multi-view scenes with exact depth and correspondence.

A scene is a cloud of points sampled on planar or gently curved surfaces.
Each surface carries its own random smooth texture: a point's descriptor is a
unit-normalised vector of random Fourier features of its surface coordinates,
so nearby points look alike and distant points (or other surfaces) do not.
Frames are rendered by z-buffering the points; a visual token is the mean
descriptor of the visible points falling inside its patch plus Gaussian noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidTrajectory
from .geometry import CameraFrame, CameraModel, SamplingPolicy, TrackSet, generate_tracks, project_points

TRAJECTORIES = ("static", "orbit", "dolly", "random-walk")


@dataclass(frozen=True)
class SceneSpec:
    num_surfaces: int = 8
    points_per_surface: int = 10000
    world_extent: float = 4.0
    feature_dim: int = 32
    occluder_prob: float = 0.25
    trajectory: str = "orbit"
    noise_sigma: float = 0.05
    texture_scale: float = 0.35  # texture correlation length, world units
    rng_seed: int = 0

    def __post_init__(self):
        if self.feature_dim < 8:
            raise ValueError("feature_dim must be >= 8")
        if not self.world_extent > 0:
            raise ValueError("world_extent must be positive")
        if not 0 <= self.occluder_prob <= 1:
            raise ValueError("occluder_prob must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.trajectory not in TRAJECTORIES:
            raise ValueError(f"unknown trajectory {self.trajectory!r}")
        if self.num_surfaces < 1 or self.points_per_surface < 1:
            raise ValueError("need at least one surface with one point")


@dataclass(frozen=True)
class RenderSettings:
    """Camera rig and image layout shared by every frame of a sequence."""

    image_size: tuple[int, int] = (64, 64)
    patch_grid: tuple[int, int] = (16, 16)
    focal: float = 100.0
    orbit_radius: float = 9.0
    orbit_height: float = 1.5
    step_deg: float = 1.5  # orbit advance per clip frame
    dolly_step: float = 0.12  # dolly advance per clip frame, world units
    walk_step: float = 0.15  # random-walk step std, world units
    z_tol: float = 0.01  # relative depth slack for a point to count as visible

    def intrinsics(self) -> np.ndarray:
        H, W = self.image_size
        return np.array([[self.focal, 0.0, W / 2], [0.0, self.focal, H / 2], [0.0, 0.0, 1.0]])


@dataclass
class Surface:
    center: np.ndarray
    axes: np.ndarray  # (2, 3) in-plane unit axes
    normal: np.ndarray
    size: tuple[float, float]
    bend: float  # curvature along the first axis; 0 = planar
    occluder: bool = False


@dataclass
class Scene:
    points: np.ndarray  # (n, 3)
    descriptors: np.ndarray  # (n, feature_dim), unit rows
    surface_id: np.ndarray  # (n,)
    surfaces: list[Surface] = field(default_factory=list)

    @property
    def num_occluders(self) -> int:
        return sum(s.occluder for s in self.surfaces)


@dataclass
class RenderedSequence:
    frames: list[CameraFrame]
    token_grids: np.ndarray  # (F, P, P, feature_dim)
    patch_grid: tuple[int, int]
    tracks: TrackSet
    patch_depths: np.ndarray  # (F, P, P); 0 = no valid pixel
    frame_times: list[int]
    extra_tracks: dict[str, TrackSet] = field(default_factory=dict)

    @property
    def num_frames(self) -> int:
        return len(self.frames)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def texture_descriptors(
    local: np.ndarray, freqs: np.ndarray, phases: np.ndarray
) -> np.ndarray:
    """Unit-norm random Fourier features of 2-D surface coordinates."""
    feats = np.cos(local @ freqs.T + phases)
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    return feats / np.maximum(norms, 1e-12)


def _surface_points(surf: Surface, local: np.ndarray) -> np.ndarray:
    s, t = local[:, 0], local[:, 1]
    half = surf.size[0] / 2
    offset = surf.bend * (s**2 - half**2 / 3)  # zero-mean bend along the first axis
    return surf.center + s[:, None] * surf.axes[0] + t[:, None] * surf.axes[1] + offset[:, None] * surf.normal


def _sample_surface(
    surf: Surface, n: int, feature_dim: int, texture_scale: float, rng: np.random.Generator
):
    w, h = surf.size
    local = rng.uniform(-0.5, 0.5, size=(n, 2)) * np.array([w, h])
    freqs = rng.standard_normal((feature_dim, 2)) / texture_scale
    phases = rng.uniform(0, 2 * math.pi, size=feature_dim)
    return _surface_points(surf, local), texture_descriptors(local, freqs, phases)


def synthesize_scene(spec: SceneSpec) -> Scene:
    """Random textured surfaces inside a cube of side ``world_extent``."""
    rng = np.random.default_rng(spec.rng_seed)
    ext = spec.world_extent
    surfaces: list[Surface] = []
    for _ in range(spec.num_surfaces):
        rot = random_rotation(rng)
        size = tuple(ext * rng.uniform(0.6, 1.0, size=2))
        bend = float(rng.choice([0.0, rng.uniform(-0.15, 0.15)]))
        surfaces.append(
            Surface(
                center=rng.uniform(-ext / 2, ext / 2, size=3) * np.array([1.0, 0.5, 1.0]),
                axes=rot[:2],
                normal=rot[2],
                size=size,
                bend=bend,
            )
        )
        if rng.random() < spec.occluder_prob:
            # a smaller plane pushed outwards so it hides part of the scene
            direction = rng.standard_normal(3) * np.array([1.0, 0.3, 1.0])
            direction /= np.linalg.norm(direction)
            orot = random_rotation(rng)
            surfaces.append(
                Surface(
                    center=direction * ext * rng.uniform(0.7, 0.95),
                    axes=orot[:2],
                    normal=orot[2],
                    size=tuple(ext * rng.uniform(0.2, 0.35, size=2)),
                    bend=0.0,
                    occluder=True,
                )
            )

    pts, desc, sid = [], [], []
    for i, surf in enumerate(surfaces):
        p, d = _sample_surface(surf, spec.points_per_surface, spec.feature_dim, spec.texture_scale, rng)
        pts.append(p)
        desc.append(d)
        sid.append(np.full(len(p), i))
    return Scene(
        points=np.concatenate(pts),
        descriptors=np.concatenate(desc),
        surface_id=np.concatenate(sid),
        surfaces=surfaces,
    )


def look_at(center: np.ndarray, target: np.ndarray, up=(0.0, 1.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera ``(R, t)`` for a camera at ``center`` looking at ``target``.

    Camera axes: z forward, y pointing down the image, x completing a
    right-handed frame.
    """
    z = target - center
    z = z / np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, np.array([1.0, 0.0, 0.0]))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return R, -R @ center


def camera_centers(trajectory: str, times, settings: RenderSettings, rng_seed: int) -> np.ndarray:
    """Camera centers at the given clip times (look-at target is the origin)."""
    times = np.asarray(times, dtype=np.float64)
    rng = np.random.default_rng(rng_seed)
    theta0 = rng.uniform(0, 2 * math.pi)
    r, h = settings.orbit_radius, settings.orbit_height
    if trajectory == "static":
        return np.tile([r * math.cos(theta0), h, r * math.sin(theta0)], (len(times), 1))
    if trajectory == "orbit":
        theta = theta0 + np.deg2rad(settings.step_deg) * times
        return np.stack([r * np.cos(theta), np.full_like(theta, h), r * np.sin(theta)], axis=1)
    if trajectory == "dolly":
        start = np.array([r * math.cos(theta0), h, r * math.sin(theta0)])
        lateral = np.cross(start / np.linalg.norm(start), [0.0, 1.0, 0.0])
        direction = -0.6 * start / np.linalg.norm(start) + 0.8 * lateral / np.linalg.norm(lateral)
        return start + settings.dolly_step * times[:, None] * direction
    if trajectory == "random-walk":
        t_max = int(times.max()) + 1 if len(times) else 1
        steps = rng.standard_normal((t_max, 3)) * settings.walk_step * np.array([1.0, 0.3, 1.0])
        steps[0] = 0.0
        path = np.array([r * math.cos(theta0), h, r * math.sin(theta0)]) + np.cumsum(steps, axis=0)
        return path[times.astype(int)]
    raise InvalidTrajectory(f"unknown trajectory {trajectory!r}")


def trajectory_cameras(
    trajectory: str, times, settings: RenderSettings, rng_seed: int
) -> list[CameraModel]:
    centers = camera_centers(trajectory, times, settings, rng_seed)
    if trajectory != "static" and len(centers) > 1 and np.ptp(centers, axis=0).max() < 1e-12:
        raise InvalidTrajectory(f"{trajectory} trajectory produced identical poses")
    K = settings.intrinsics()
    cams = []
    for c in centers:
        R, t = look_at(c, np.zeros(3))
        cams.append(CameraModel(K, R, t))
    return cams


def zbuffer(camera: CameraModel, points: np.ndarray, image_size: tuple[int, int]):
    """Depth map by nearest-point-wins splatting of single pixels.

    Returns ``(depth_map, pixel_flat_index, point_depth)`` where the flat
    index is -1 for points off-image or behind the camera.
    """
    H, W = image_size
    uv, depth = project_points(camera, points)
    with np.errstate(invalid="ignore"):
        col = np.floor(uv[:, 0])
        row = np.floor(uv[:, 1])
        ok = (depth > 1e-12) & (col >= 0) & (col < W) & (row >= 0) & (row < H)
    flat = np.full(len(points), -1, dtype=np.int64)
    flat[ok] = row[ok].astype(np.int64) * W + col[ok].astype(np.int64)
    buf = np.full(H * W, np.inf)
    np.minimum.at(buf, flat[ok], depth[ok])
    buf[~np.isfinite(buf)] = 0.0
    return buf.reshape(H, W), flat, depth


def pool_patch_depths(depth_map: np.ndarray, patch_grid: tuple[int, int]) -> np.ndarray:
    """Mean of valid (positive) depths inside each patch; 0 where none."""
    H, W = depth_map.shape
    P, Q = patch_grid
    blocks = depth_map.reshape(P, H // P, Q, W // Q)
    valid = blocks > 0
    total = np.where(valid, blocks, 0.0).sum(axis=(1, 3))
    count = valid.sum(axis=(1, 3))
    out = np.zeros((P, Q))
    np.divide(total, count, out=out, where=count > 0)
    return out


def render_frame_tokens(
    scene: Scene,
    camera: CameraModel,
    settings: RenderSettings,
    noise_sigma: float,
    rng: np.random.Generator,
):
    H, W = settings.image_size
    P, Q = settings.patch_grid
    depth_map, flat, depth = zbuffer(camera, scene.points, settings.image_size)
    ok = flat >= 0
    visible = np.zeros(len(flat), dtype=bool)
    visible[ok] = depth[ok] <= depth_map.ravel()[flat[ok]] * (1 + settings.z_tol)
    rows, cols = flat[visible] // W, flat[visible] % W
    patch = (rows * P // H) * Q + (cols * Q // W)
    D = scene.descriptors.shape[1]
    sums = np.zeros((P * Q, D))
    np.add.at(sums, patch, scene.descriptors[visible])
    counts = np.bincount(patch, minlength=P * Q)
    tokens = np.zeros((P * Q, D))
    nonempty = counts > 0
    tokens[nonempty] = sums[nonempty] / counts[nonempty, None]
    if noise_sigma > 0:
        noise = rng.standard_normal((P * Q, D)) * noise_sigma
        tokens[nonempty] += noise[nonempty]
    return depth_map, tokens.reshape(P, Q, D)


def render_sequence(
    scene: Scene,
    settings: RenderSettings,
    num_frames: int,
    spec: SceneSpec,
    policy: SamplingPolicy | None = None,
    frame_times=None,
    query_grids: tuple[tuple[int, int], ...] = ((24, 24), (8, 8)),
) -> RenderedSequence:
    """Render frames at clip times ``frame_times`` (default ``0..num_frames-1``).

    ``tracks`` is built on the first query grid; every grid is also stored in
    ``extra_tracks`` keyed ``"RxC"``.
    """
    if num_frames < 2:
        raise ValueError("need at least two frames")
    times = list(range(num_frames)) if frame_times is None else [int(t) for t in frame_times]
    if len(times) != num_frames:
        raise ValueError("frame_times length must equal num_frames")
    policy = policy or SamplingPolicy()
    cams = trajectory_cameras(spec.trajectory, times, settings, spec.rng_seed + 1)
    noise_rng = np.random.default_rng([spec.rng_seed, 2])
    frames, grids, pdepths = [], [], []
    for cam in cams:
        depth_map, tokens = render_frame_tokens(scene, cam, settings, spec.noise_sigma, noise_rng)
        frames.append(CameraFrame(cam, depth_map, settings.image_size))
        grids.append(tokens)
        pdepths.append(pool_patch_depths(depth_map, settings.patch_grid))
    extra = {
        f"{g[0]}x{g[1]}": generate_tracks(frames, g, policy, settings.patch_grid) for g in query_grids
    }
    return RenderedSequence(
        frames=frames,
        token_grids=np.stack(grids),
        patch_grid=tuple(settings.patch_grid),
        tracks=extra[f"{query_grids[0][0]}x{query_grids[0][1]}"],
        patch_depths=np.stack(pdepths),
        frame_times=times,
        extra_tracks=extra,
    )


@dataclass
class TwinFixture:
    """Twin-object sequence plus bookkeeping for the disambiguation probe."""

    sequence: RenderedSequence
    scene: Scene
    foreground_id: int
    background_id: int
    twin_points: np.ndarray  # (n, 2, 3): matching point pairs (foreground, background)


def twin_object_scene(
    spec: SceneSpec,
    settings: RenderSettings | None = None,
    num_frames: int = 8,
    policy: SamplingPolicy | None = None,
    frame_times=None,
) -> TwinFixture:
    """Two identically textured clusters, one near and one far.

    The far cluster is the near one scaled about the frame-0 camera center by
    the depth ratio, so both occupy the same image footprint in frame 0 (up to
    a lateral shift) and every point pair shares its descriptor bit-for-bit.
    """
    settings = settings or RenderSettings()
    rng = np.random.default_rng(spec.rng_seed)
    ext = spec.world_extent
    times = list(range(num_frames)) if frame_times is None else list(frame_times)
    cam0 = trajectory_cameras(spec.trajectory, times, settings, spec.rng_seed + 1)[0]
    c0 = cam0.center
    fwd, right, down = cam0.R[2], cam0.R[0], cam0.R[1]

    d_fg = settings.orbit_radius - ext / 4
    d_bg = d_fg + ext  # depth gap = world_extent >= 2 * world_extent / 4
    size = ext * 0.3
    n = spec.points_per_surface
    local = rng.uniform(-0.5, 0.5, size=(n, 2)) * size
    freqs = rng.standard_normal((spec.feature_dim, 2)) / spec.texture_scale
    phases = rng.uniform(0, 2 * math.pi, size=spec.feature_dim)
    desc = texture_descriptors(local, freqs, phases)

    shift = 0.28 * settings.image_size[1] / settings.focal  # lateral offset in normalised image units
    fg_center = c0 + d_fg * (fwd - shift * right)
    fg = fg_center + local[:, :1] * right + local[:, 1:] * down
    # background twin: same rays scaled by depth ratio, then shifted to the other side
    scale = d_bg / d_fg
    bg = c0 + (fg - c0) * scale + 2 * shift * d_bg * right

    scene = Scene(
        points=np.concatenate([fg, bg]),
        descriptors=np.concatenate([desc, desc.copy()]),
        surface_id=np.concatenate([np.zeros(n, int), np.ones(n, int)]),
        surfaces=[
            Surface(fg_center, np.stack([right, down]), -fwd, (size, size), 0.0),
            Surface(c0 + (fg_center - c0) * scale + 2 * shift * d_bg * right,
                    np.stack([right, down]), -fwd, (size * scale, size * scale), 0.0),
        ],
    )
    seq = render_sequence(scene, settings, num_frames, spec, policy, frame_times=times)
    return TwinFixture(seq, scene, 0, 1, np.stack([fg, bg], axis=1))
