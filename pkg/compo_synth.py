"""compo_synth - synthetic compositional scenes, latent codec and metrics

A scene is N components (box, ball or ring point sets) placed with
non-overlapping bounding regions inside [-1, 1]^dim.  Each component is
oversampled and thinned to exactly L points by farthest point sampling.  A
coarse G x G occupancy grid of the bounding regions (top-down for dim 3)
serves as the scene's condition.

LatentCodec is a fixed seeded linear lift of (coordinates, per-point tag)
into latent_dim channels with an exact inverse on the coordinate part.  It
stands in for a pretrained shape autoencoder.

Dataset files are little-endian:

    header : 4s magic 'CMPD', u4 version, u4 scene count, u4 grid G
    record : i4 N, i4 L, i4 dim, u8 seed,
             u1 layout[G * G] (row-major),
             f4 coordinates[N * L * dim] (row-major)


Requirements
------------
struct : dataset header and record framing.
numpy : geometry, metrics and file payloads.
compo_globals : debugger.
compo_errors : DataError.

Classes
-------
SceneSpec : component kinds, centers, extents and the layout grid.
Scene : point sets of one scene plus its layout and seed.
LatentCodec : invertible toy point-to-latent map.

Functions
---------
gen_scene(rng, N, L, dim) : (point sets, SceneSpec).
fps(points, n, start_index) : farthest point sampling.
chamfer(A, B), fscore(A, B, tau), self_iou(components, resolution).
write_dataset(path, scenes) / read_dataset(path).
"""

import struct
import numpy as np
from compo_globals import debugger
from compo_errors import DataError

KINDS = ('box', 'ball', 'ring')
MAX_COMPONENTS = 50
MAX_REJECTIONS = 1000
# Must exceed one voxel at the coarsest checked resolution (2 / 32)
GAP = 0.07
SCALE = 0.4
OVERSAMPLE = 4

MAGIC = b'CMPD'
VERSION = 2
HEADER = struct.Struct('<4sIII')
RECORD = struct.Struct('<iiiQ')


class SceneSpec(object):
    def __init__(self, kinds, centers, extents, layout, dim, seed=None):
        self.kinds = list(kinds)
        self.centers = np.asarray(centers, dtype=np.float64)  # [N, dim]
        self.extents = np.asarray(extents, dtype=np.float64)  # half sizes
        self.layout = layout  # uint8 [G, G]
        self.dim = dim
        self.seed = seed

    @property
    def n_components(self):
        return len(self.kinds)


class Scene(object):
    def __init__(self, points, layout, seed=None, spec=None):
        self.points = np.asarray(points, dtype=np.float64)  # [N, L, dim]
        self.layout = np.asarray(layout, dtype=np.uint8)
        self.seed = seed
        self.spec = spec

    @property
    def n_components(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[-1]


##################
# Point sampling #
##################

def fps_indices(points, n, start_index=0):
    points = np.asarray(points, dtype=np.float64)
    if n > points.shape[0]:
        raise DataError("cannot sample {} of {} points".format(
            n, points.shape[0]))
    if not 0 <= start_index < points.shape[0]:
        raise DataError("start index {} out of range".format(start_index))
    selected = [start_index]
    dist = np.full(points.shape[0], np.inf)
    while len(selected) < n:
        new_dist = np.linalg.norm(points - points[selected[-1]], axis=1)
        dist = np.minimum(dist, new_dist)
        selected.append(int(np.argmax(dist)))
    return np.array(selected, dtype=np.int64)


def fps(points, n, start_index=0):
    """Greedy max-min selection starting from points[start_index]."""
    return np.asarray(points)[fps_indices(points, n, start_index)]


def _unit_vectors(rng, count, dim):
    v = rng.standard_normal((count, dim))
    return v / np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)


def _box_surface(rng, count, center, extent):
    dim = center.size
    # face pairs weighted by their area
    areas = np.array([np.prod(np.delete(2 * extent, a)) for a in range(dim)])
    axes = rng.choice(dim, size=count, p=areas / areas.sum())
    sides = rng.choice((-1.0, 1.0), size=count)
    points = rng.uniform(-1.0, 1.0, size=(count, dim))
    points[np.arange(count), axes] = sides
    return center + points * extent


def _ball_surface(rng, count, center, extent):
    return center + _unit_vectors(rng, count, center.size) * extent


def _ring(rng, count, center, extent):
    dim = center.size
    angle = rng.uniform(0.0, 2.0 * np.pi, size=count)
    radius = rng.uniform(0.6, 1.0, size=count)
    points = np.zeros((count, dim))
    points[:, 0] = radius * np.cos(angle)
    points[:, 1] = radius * np.sin(angle)
    if dim == 3:
        points[:, 2] = rng.uniform(-0.2, 0.2, size=count)
    return center + points * extent


SAMPLERS = {'box': _box_surface, 'ball': _ball_surface, 'ring': _ring}


def component_points(rng, kind, center, extent, L):
    raw = SAMPLERS[kind](rng, OVERSAMPLE * L, center, extent)
    return fps(raw, L, 0)


##########
# Scenes #
##########

def layout_grid(centers, extents, grid=8):
    """G x G occupancy of the bounding regions over the first two axes."""
    layout = np.zeros((grid, grid), dtype=np.uint8)
    edges = np.linspace(-1.0, 1.0, grid + 1)
    for center, extent in zip(centers, extents):
        lo, hi = center[:2] - extent[:2], center[:2] + extent[:2]
        rows = (edges[1:] > lo[1]) & (edges[:-1] < hi[1])
        cols = (edges[1:] > lo[0]) & (edges[:-1] < hi[0])
        layout[np.ix_(rows, cols)] = 1
    return layout


def _overlaps(center, extent, centers, extents, gap):
    for other_center, other_extent in zip(centers, extents):
        if np.all(np.abs(center - other_center) <
                  extent + other_extent + gap):
            return True
    return False


def gen_scene(rng, N, L, dim, grid=8, scale=SCALE, gap=GAP):
    """Returns (list of N point sets [L, dim], SceneSpec)."""
    if not 2 <= N <= MAX_COMPONENTS:
        raise DataError("scenes need 2..{} components, got {}".format(
            MAX_COMPONENTS, N))
    if dim not in (2, 3):
        raise DataError("dim must be 2 or 3, got {}".format(dim))
    if L < 1:
        raise DataError("empty component")
    kinds, centers, extents = [], [], []
    size = scale * N ** (-1.0 / dim)
    for _ in range(N):
        kind = KINDS[rng.integers(len(KINDS))]
        extent = size * rng.uniform(0.6, 1.0, size=dim)
        for _ in range(MAX_REJECTIONS):
            center = rng.uniform(-1.0 + extent, 1.0 - extent)
            if not _overlaps(center, extent, centers, extents, gap):
                break
        else:
            raise DataError("scene too crowded")
        kinds.append(kind)
        centers.append(center)
        extents.append(extent)
    points = [component_points(rng, kind, center, extent, L)
              for kind, center, extent in zip(kinds, centers, extents)]
    spec = SceneSpec(kinds, centers, extents,
                     layout_grid(centers, extents, grid), dim)
    return points, spec


def make_scene(seed, N, L, dim, grid=8):
    points, spec = gen_scene(np.random.default_rng(seed), N, L, dim, grid)
    spec.seed = seed
    return Scene(np.stack(points), spec.layout, seed, spec)


def scene_sizes(seeds, n_min, n_max):
    return [int(np.random.default_rng([seed, 1]).integers(n_min, n_max + 1))
            for seed in seeds]


def build_dataset(seeds, n_min, n_max, L, dim, grid=8):
    if n_min > n_max:
        raise DataError("data.n_min {} exceeds data.n_max {}".format(
            n_min, n_max))
    scenes = [make_scene(seed, N, L, dim, grid)
              for seed, N in zip(seeds, scene_sizes(seeds, n_min, n_max))]
    debugger.message("DATA", "Generated {} scenes".format(len(scenes)))
    return scenes


#########
# Codec #
#########

class LatentCodec(object):
    def __init__(self, dim, latent_dim, seed=0):
        if latent_dim < dim + 1:
            raise DataError("latent_dim {} too small for dim {}".format(
                latent_dim, dim))
        self.dim = dim
        self.latent_dim = latent_dim
        self.seed = seed
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((latent_dim, dim + 1)))
        self.scales = rng.uniform(0.5, 2.0, size=dim + 1)
        self.lift = q * self.scales  # [latent_dim, dim + 1]
        self.inverse = q.T / self.scales[:, None]  # [dim + 1, latent_dim]

    def encode(self, points, rng=None):
        """points [..., L, dim] -> latents [..., L, latent_dim]"""
        points = np.asarray(points, dtype=np.float64)
        rng = rng if rng is not None else np.random.default_rng(
            self.seed + 1)
        tags = rng.uniform(-0.5, 0.5, size=points.shape[:-1] + (1,))
        features = np.concatenate([points, tags], axis=-1)
        return features @ self.lift.T

    def decode(self, latents):
        features = np.asarray(latents, dtype=np.float64) @ self.inverse.T
        return features[..., :self.dim]

    def inverse_norm(self, iterations=100):
        """Operator norm of the decoder by power iteration."""
        v = np.random.default_rng(self.seed).standard_normal(self.latent_dim)
        gram = self.inverse.T @ self.inverse
        for _ in range(iterations):
            v = gram @ v
            v /= np.linalg.norm(v)
        return float(np.sqrt(v @ gram @ v))


###########
# Metrics #
###########

def _check_sets(*sets):
    checked = []
    for points in sets:
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[0] == 0:
            raise DataError("empty point set")
        checked.append(points)
    return checked


def _distances(A, B):
    return np.linalg.norm(A[:, None, :] - B[None, :, :], axis=-1)


def chamfer(A, B):
    """0.5 * (mean nearest distance A->B + mean nearest distance B->A)"""
    A, B = _check_sets(A, B)
    d = _distances(A, B)
    return 0.5 * (float(d.min(axis=1).mean()) + float(d.min(axis=0).mean()))


def fscore(A, B, tau):
    if tau <= 0:
        raise DataError("threshold must be > 0")
    A, B = _check_sets(A, B)
    d = _distances(A, B)
    precision = float(np.mean(d.min(axis=1) < tau))
    recall = float(np.mean(d.min(axis=0) < tau))
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def default_resolution(dim):
    return 256 if dim == 2 else 64


def voxelize(points, resolution):
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise DataError("component voxelizes to the empty set")
    cells = np.floor((points + 1.0) * 0.5 * resolution).astype(np.int64)
    cells = np.clip(cells, 0, resolution - 1)
    flat = np.ravel_multi_index(tuple(cells.T), (resolution,) *
                                points.shape[1])
    return np.unique(flat)


def self_iou(components, resolution=None):
    """Mean voxel IoU over unordered component pairs."""
    if len(components) < 2:
        raise DataError("self-IoU needs at least two components")
    if resolution is None:
        resolution = default_resolution(np.asarray(components[0]).shape[-1])
    voxels = [voxelize(points, resolution) for points in components]
    scores = []
    for i in range(len(voxels)):
        for j in range(i + 1, len(voxels)):
            inter = np.intersect1d(voxels[i], voxels[j]).size
            union = np.union1d(voxels[i], voxels[j]).size
            scores.append(inter / union)
    return float(np.mean(scores))


###########
# Dataset #
###########

def write_dataset(path, scenes):
    grid = scenes[0].layout.shape[0] if scenes else 8
    with open(path, "wb") as data_file:
        data_file.write(HEADER.pack(MAGIC, VERSION, len(scenes), grid))
        for scene in scenes:
            if scene.layout.shape != (grid, grid):
                raise DataError("scenes disagree on the layout grid size")
            N, L, dim = scene.points.shape
            data_file.write(RECORD.pack(N, L, dim, int(scene.seed or 0)))
            data_file.write(scene.layout.astype(np.uint8).tobytes())
            data_file.write(scene.points.astype('<f4').tobytes())
    debugger.message("DATA", "Wrote {} scenes to {}".format(len(scenes),
                                                           path))


def read_dataset(path):
    with open(path, "rb") as data_file:
        payload = data_file.read()
    if len(payload) < HEADER.size:
        raise DataError("truncated dataset file: {}".format(path))
    magic, version, count, grid = HEADER.unpack_from(payload, 0)
    if magic != MAGIC or version != VERSION:
        raise DataError("not a compo dataset file: {}".format(path))
    offset = HEADER.size
    scenes = []
    for _ in range(count):
        if offset + RECORD.size + grid * grid > len(payload):
            raise DataError("truncated dataset file: {}".format(path))
        N, L, dim, seed = RECORD.unpack_from(payload, offset)
        offset += RECORD.size
        layout = np.frombuffer(payload, dtype=np.uint8, count=grid * grid,
                               offset=offset).reshape(grid, grid)
        offset += grid * grid
        count_f = N * L * dim
        if offset + 4 * count_f > len(payload):
            raise DataError("truncated dataset file: {}".format(path))
        points = np.frombuffer(payload, dtype='<f4', count=count_f,
                               offset=offset).reshape(N, L, dim)
        offset += 4 * count_f
        scenes.append(Scene(points.astype(np.float64), layout.copy(), seed))
    debugger.message("DATA", "Read {} scenes from {}".format(len(scenes),
                                                            path))
    return scenes
