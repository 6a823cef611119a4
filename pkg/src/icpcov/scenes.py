"""Synthetic scene generation: surface archetypes and corridor sequences."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cloud import PointCloud
from .geometry import RigidTransform

ARCHETYPES = ("cube", "cylinder_pair", "hallway", "corner", "planes")


@dataclass(frozen=True)
class SceneSpec:
    archetype: str
    dimensions: tuple = ()
    n_points: int = 1000
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.archetype not in ARCHETYPES:
            raise ValueError(f"unknown archetype {self.archetype!r}")
        if any(d <= 0 for d in self.dimensions):
            raise ValueError("dimensions must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


def _sample_rects(rects, n, rng):
    """Sample n points from a list of rectangles (origin, edge1, edge2),
    weighted by area."""
    areas = np.array([np.linalg.norm(np.cross(e1, e2)) for _, e1, e2 in rects])
    probs = areas / areas.sum()
    counts = rng.multinomial(n, probs)
    pts = []
    for (origin, e1, e2), m in zip(rects, counts):
        uv = rng.uniform(size=(2, m))
        pts.append(origin[:, None] + np.outer(e1, uv[0]) + np.outer(e2, uv[1]))
    return np.hstack(pts)


def _cube_surface(side, n, rng):
    h = side / 2.0
    ex, ey, ez = np.eye(3) * side
    rects = []
    for axis, (e1, e2) in [(0, (ey, ez)), (1, (ex, ez)), (2, (ex, ey))]:
        for sign in (-1.0, 1.0):
            origin = -np.array([h, h, h])
            origin[axis] = sign * h
            rects.append((origin, e1, e2))
    return _sample_rects(rects, n, rng)


def _hallway_surface(dims, n, rng):
    length, width, height = dims or (10.0, 2.0, 2.5)
    ex = np.array([length, 0, 0])
    rects = [
        (np.array([-length / 2, -width / 2, 0.0]), ex, np.array([0, 0, height])),
        (np.array([-length / 2, width / 2, 0.0]), ex, np.array([0, 0, height])),
        (np.array([-length / 2, -width / 2, 0.0]), ex, np.array([0, width, 0])),
    ]
    return _sample_rects(rects, n, rng)


def _corner_surface(dims, n, rng):
    size = (dims or (2.0,))[0]
    e = np.eye(3) * size
    rects = [
        (np.zeros(3), e[1], e[2]),   # wall x=0
        (np.zeros(3), e[0], e[2]),   # wall y=0
        (np.zeros(3), e[0], e[1]),   # floor z=0
    ]
    return _sample_rects(rects, n, rng)


def _planes_surface(dims, n, rng):
    lx, ly = dims or (2.0, 2.0)
    origin = np.array([-lx / 2, -ly / 2, 0.0])
    return _sample_rects([(origin, np.array([lx, 0, 0]), np.array([0, ly, 0]))],
                         n, rng)


def _cylinder_surface(dims, n, rng):
    radius, height = dims or (0.5, 2.0)
    phi = rng.uniform(0, 2 * np.pi, size=n)
    z = rng.uniform(0, height, size=n)
    return np.vstack([radius * np.cos(phi), radius * np.sin(phi), z])


_SAMPLERS = {
    "cube": lambda dims, n, rng: _cube_surface((dims or (1.0,))[0], n, rng),
    "hallway": _hallway_surface,
    "corner": _corner_surface,
    "planes": _planes_surface,
    "cylinder_pair": _cylinder_surface,
}


def sample_surface(spec: SceneSpec, rng) -> np.ndarray:
    """Noise-free 3xN sample of the archetype surface."""
    return _SAMPLERS[spec.archetype](spec.dimensions, spec.n_points, rng)


def generate_scene(spec: SceneSpec, true_transform: RigidTransform | None = None):
    """Independent surface resamplings (P, Q) plus the aligning transform.

    Q is sampled in the scene frame; P is a second, independent sampling
    expressed in its own frame so that T_true maps P onto Q. Per-axis
    Gaussian noise of scale sigma is added to both clouds independently.
    """
    T_true = true_transform or RigidTransform.identity()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5CE2E]))
    q_pts = sample_surface(spec, rng)
    p_pts = sample_surface(spec, rng)
    if spec.sigma > 0:
        q_pts = q_pts + rng.normal(scale=spec.sigma, size=q_pts.shape)
        p_pts = p_pts + rng.normal(scale=spec.sigma, size=p_pts.shape)
    P = PointCloud(T_true.inverse().apply(p_pts), frame="reading")
    Q = PointCloud(q_pts, frame="reference")
    return P, Q, T_true


def generate_corridor_sequence(n_clouds=6, step=0.5, length=12.0, width=2.0,
                               height=2.5, window=4.0, n_points=1000,
                               sigma=0.005, seed=0, rib_spacing=2.0,
                               rib_depth=0.25):
    """Sequence of sensor-frame hallway scans plus sensor-to-world poses.

    The sensor advances along the corridor axis; each cloud is a fresh
    noisy sampling of the corridor surface (two walls, floor, and ceiling)
    within +-window of the sensor. The ceiling keeps the scene symmetric in
    z about the sensor height, so step registrations carry no systematic
    vertical bias that would accumulate coherently along the trajectory.
    Transverse wall ribs (door-jamb-like panels every `rib_spacing` meters)
    keep the corridor axis observable so step registrations stay
    well-conditioned; set rib_spacing=None for a featureless corridor.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0221D02]))
    clouds, poses = [], []
    ex = np.array([length, 0, 0])
    ez = np.array([0, 0, height])
    ey = np.array([0, width, 0])
    rects = [
        (np.array([-length / 2, -width / 2, 0.0]), ex, ez),
        (np.array([-length / 2, width / 2, 0.0]), ex, ez),
        (np.array([-length / 2, -width / 2, 0.0]), ex, ey),       # floor
        (np.array([-length / 2, -width / 2, height]), ex, ey),    # ceiling
    ]
    if rib_spacing is not None:
        x = -length / 2 + rib_spacing / 2
        while x < length / 2:
            # jittered position, random side and depth: an aperiodic layout
            # avoids the false minima a regular grid of identical ribs creates
            x_j = x + rng.uniform(-0.15, 0.15) * rib_spacing
            depth = rib_depth * rng.uniform(0.8, 1.6)
            for side in (-1.0, 1.0):
                origin = np.array([x_j, side * width / 2, 0.0])
                rects.append((origin, np.array([0, -side * depth, 0]), ez))
            x += rib_spacing
    for k in range(n_clouds):
        x_k = -length / 2 + window / 2 + k * step
        pose = RigidTransform(np.eye(3), np.array([x_k, 0.0, height / 2]))
        pts = []
        need = n_points
        while need > 0:
            cand = _sample_rects(rects, n_points, rng)
            keep = np.abs(cand[0] - x_k) <= window / 2
            pts.append(cand[:, keep])
            need = n_points - sum(p.shape[1] for p in pts)
        pts = np.hstack(pts)[:, :n_points]
        if sigma > 0:
            pts = pts + rng.normal(scale=sigma, size=pts.shape)
        clouds.append(PointCloud(pose.inverse().apply(pts), frame=f"sensor_{k}"))
        poses.append(pose)
    return clouds, poses
