"""Point-cloud data model, PLY I/O, voxel downsampling, synthetic orchard
generation, and training-time augmentation.

A labeled cloud stores positions (meters), RGB colors in [0, 1], a semantic
class per point, and two instance-id columns: ``tree_id`` groups a trunk
with all apples of that tree, ``instance_id`` identifies individual trunks
and apples. Absent ids are encoded as -1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CLASS_NAMES = ("ground", "trunk", "canopy", "apple", "pole")
GROUND, TRUNK, CANOPY, APPLE, POLE = range(5)
THING_CLASSES = (TRUNK, APPLE)
STUFF_CLASSES = (GROUND, CANOPY, POLE)
NUM_CLASSES = len(CLASS_NAMES)

_PLY_PROPERTIES = (
    "x", "y", "z", "red", "green", "blue", "semantic", "tree_id", "instance_id",
)

_BASE_COLORS = np.array(
    [
        [0.42, 0.36, 0.28],  # ground
        [0.35, 0.22, 0.12],  # trunk
        [0.13, 0.45, 0.16],  # canopy
        [0.78, 0.12, 0.10],  # apple
        [0.55, 0.55, 0.58],  # pole
    ]
)


class PlyFormatError(ValueError):
    pass


class CloudValidationError(ValueError):
    pass


@dataclass
class ClassTable:
    names: tuple = CLASS_NAMES
    things: tuple = THING_CLASSES
    stuff: tuple = STUFF_CLASSES

    @property
    def k(self) -> int:
        return len(self.names)


@dataclass
class PointRecord:
    position: np.ndarray
    color: np.ndarray
    semantic: int
    tree_id: int | None = None
    instance_id: int | None = None


@dataclass
class LabeledCloud:
    positions: np.ndarray  # N x 3 float64, meters
    colors: np.ndarray  # N x 3 float64 in [0, 1]
    semantic: np.ndarray  # N int64 in {0..K-1}
    tree_id: np.ndarray  # N int64, -1 = absent
    instance_id: np.ndarray  # N int64, -1 = absent

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        self.semantic = np.asarray(self.semantic, dtype=np.int64).reshape(-1)
        self.tree_id = np.asarray(self.tree_id, dtype=np.int64).reshape(-1)
        self.instance_id = np.asarray(self.instance_id, dtype=np.int64).reshape(-1)

    def __len__(self) -> int:
        return len(self.positions)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, LabeledCloud)
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.colors, other.colors)
            and np.array_equal(self.semantic, other.semantic)
            and np.array_equal(self.tree_id, other.tree_id)
            and np.array_equal(self.instance_id, other.instance_id)
        )

    def point(self, i: int) -> PointRecord:
        return PointRecord(
            position=self.positions[i],
            color=self.colors[i],
            semantic=int(self.semantic[i]),
            tree_id=None if self.tree_id[i] < 0 else int(self.tree_id[i]),
            instance_id=None if self.instance_id[i] < 0 else int(self.instance_id[i]),
        )

    def copy(self) -> "LabeledCloud":
        return LabeledCloud(
            self.positions.copy(), self.colors.copy(), self.semantic.copy(),
            self.tree_id.copy(), self.instance_id.copy(),
        )

    def validate(self, strict: bool = True) -> "LabeledCloud":
        """Check label invariants; ``strict=False`` relaxes the id-presence
        rules so prediction clouds (which may contain noise points) load."""
        n = len(self)
        lengths = {len(self.colors), len(self.semantic), len(self.tree_id), len(self.instance_id)}
        if lengths != {n}:
            raise CloudValidationError(f"field length mismatch: {lengths} vs {n} points")
        bad = np.flatnonzero((self.semantic < 0) | (self.semantic >= NUM_CLASSES))
        if len(bad):
            raise CloudValidationError(
                f"semantic label {self.semantic[bad[0]]} out of range at point {bad[0]}"
            )
        is_thing = np.isin(self.semantic, THING_CLASSES)
        has_tree = self.tree_id >= 0
        has_inst = self.instance_id >= 0
        bad = np.flatnonzero(~is_thing & (has_tree | has_inst))
        if len(bad):
            raise CloudValidationError(f"stuff-class point {bad[0]} carries an instance id")
        if strict:
            bad = np.flatnonzero(is_thing & ~(has_tree & has_inst))
            if len(bad):
                raise CloudValidationError(f"thing-class point {bad[0]} is missing an id")
        # all points of one instance share a semantic class
        for inst in np.unique(self.instance_id[has_inst]):
            sems = np.unique(self.semantic[self.instance_id == inst])
            if len(sems) > 1:
                raise CloudValidationError(f"instance {inst} mixes semantic classes {sems}")
        if strict:
            # a tree group is one trunk instance plus its apples
            for tid in np.unique(self.tree_id[has_tree]):
                mask = self.tree_id == tid
                trunks = np.unique(self.instance_id[mask & (self.semantic == TRUNK)])
                if len(trunks) != 1:
                    raise CloudValidationError(
                        f"tree {tid} contains {len(trunks)} trunk instances, expected 1"
                    )
        return self

    def select(self, idx) -> "LabeledCloud":
        return LabeledCloud(
            self.positions[idx], self.colors[idx], self.semantic[idx],
            self.tree_id[idx], self.instance_id[idx],
        )


def empty_cloud() -> LabeledCloud:
    z = np.zeros(0, dtype=np.int64)
    return LabeledCloud(np.zeros((0, 3)), np.zeros((0, 3)), z, z.copy(), z.copy())


# -- PLY I/O ------------------------------------------------------------------


def save_ply(cloud: LabeledCloud, path, strict: bool = True) -> None:
    """ASCII PLY with xyz, rgb, and the three label columns; -1 = absent id.
    Positions and colors are written with 17 significant digits so the
    round-trip through text is bit-exact."""
    cloud.validate(strict=strict)
    header = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}"]
    header += [f"property double {p}" for p in _PLY_PROPERTIES[:6]]
    header += [f"property int {p}" for p in _PLY_PROPERTIES[6:]]
    header.append("end_header")
    with open(path, "w") as fh:
        fh.write("\n".join(header) + "\n")
        for i in range(len(cloud)):
            p, c = cloud.positions[i], cloud.colors[i]
            fh.write(
                "%.17g %.17g %.17g %.17g %.17g %.17g %d %d %d\n"
                % (p[0], p[1], p[2], c[0], c[1], c[2],
                   cloud.semantic[i], cloud.tree_id[i], cloud.instance_id[i])
            )


def load_ply(path, strict: bool = True) -> LabeledCloud:
    """Parse the ASCII PLY dialect written by ``save_ply``; property order in
    the header is respected, missing properties are format errors."""
    with open(path) as fh:
        line = fh.readline().strip()
        if line != "ply":
            raise PlyFormatError(f"{path}: not a PLY file")
        n_vertex = None
        columns = []
        while True:
            line = fh.readline()
            if not line:
                raise PlyFormatError(f"{path}: unexpected end of header")
            line = line.strip()
            if line == "end_header":
                break
            parts = line.split()
            if parts[0] == "format" and parts[1] != "ascii":
                raise PlyFormatError(f"{path}: only ASCII PLY is supported")
            if parts[0] == "element":
                if parts[1] != "vertex":
                    raise PlyFormatError(f"{path}: unsupported element '{parts[1]}'")
                n_vertex = int(parts[2])
            if parts[0] == "property":
                columns.append(parts[-1])
        for prop in _PLY_PROPERTIES:
            if prop not in columns:
                raise PlyFormatError(f"{path}: missing property '{prop}'")
        if n_vertex is None:
            raise PlyFormatError(f"{path}: missing 'element vertex'")
        if n_vertex == 0:
            data = np.zeros((0, len(columns)))
        else:
            data = np.loadtxt(fh, dtype=np.float64, max_rows=n_vertex, ndmin=2)
        if data.shape != (n_vertex, len(columns)):
            raise PlyFormatError(
                f"{path}: expected {n_vertex} x {len(columns)} values, got {data.shape}"
            )
    col = {name: i for i, name in enumerate(columns)}
    cloud = LabeledCloud(
        positions=data[:, [col["x"], col["y"], col["z"]]],
        colors=data[:, [col["red"], col["green"], col["blue"]]],
        semantic=data[:, col["semantic"]].astype(np.int64),
        tree_id=data[:, col["tree_id"]].astype(np.int64),
        instance_id=data[:, col["instance_id"]].astype(np.int64),
    )
    return cloud.validate(strict=strict)


# -- voxel downsampling --------------------------------------------------------


def _majority(group_idx, labels, n_groups):
    """Per-group majority label, ties broken by the smallest label value."""
    order = np.lexsort((labels, group_idx))
    g, l = group_idx[order], labels[order]
    new = np.r_[True, (g[1:] != g[:-1]) | (l[1:] != l[:-1])]
    starts = np.flatnonzero(new)
    counts = np.diff(np.r_[starts, len(g)])
    pg, pl = g[starts], l[starts]
    pick = np.lexsort((pl, -counts, pg))
    first = np.r_[True, pg[pick][1:] != pg[pick][:-1]]
    winners = np.full(n_groups, -1, dtype=np.int64)
    winners[pg[pick][first]] = pl[pick][first]
    return winners


def voxelize(cloud: LabeledCloud, voxel_size: float) -> LabeledCloud:
    """Downsample to at most one point per cubic cell: positions and colors
    are averaged, labels are majority-voted (smallest label wins ties, and
    the id vote is restricted to points of the winning class so the output
    stays label-consistent). Output sorted by voxel index."""
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    n = len(cloud)
    if n == 0:
        return empty_cloud()

    coords = np.floor(cloud.positions / voxel_size).astype(np.int64)
    mins = coords.min(axis=0)
    dims = coords.max(axis=0) - mins + 1
    shifted = coords - mins
    keys = (shifted[:, 0] * dims[1] + shifted[:, 1]) * dims[2] + shifted[:, 2]

    sort_keys = [cloud.instance_id, cloud.tree_id, cloud.semantic]
    sort_keys += [cloud.colors[:, j] for j in (2, 1, 0)]
    sort_keys += [cloud.positions[:, j] for j in (2, 1, 0)]
    sort_keys.append(keys)
    order = np.lexsort(sort_keys)

    skeys = keys[order]
    starts = np.flatnonzero(np.r_[True, skeys[1:] != skeys[:-1]])
    counts = np.diff(np.r_[starts, n])
    n_vox = len(starts)
    voxel_of = np.searchsorted(skeys[starts], keys)

    positions = np.add.reduceat(cloud.positions[order], starts, axis=0) / counts[:, None]
    colors = np.add.reduceat(cloud.colors[order], starts, axis=0) / counts[:, None]

    semantic = _majority(voxel_of, cloud.semantic, n_vox)
    # vote tree and fine ids jointly among members of the winning class
    tree_id = np.full(n_vox, -1, dtype=np.int64)
    instance_id = np.full(n_vox, -1, dtype=np.int64)
    in_class = cloud.semantic == semantic[voxel_of]
    idable = in_class & (cloud.instance_id >= 0)
    if np.any(idable):
        span = int(cloud.instance_id.max()) + 2
        combo = (cloud.tree_id[idable] + 1) * span + (cloud.instance_id[idable] + 1)
        win = _majority(voxel_of[idable], combo, n_vox)
        got = win >= 0
        tree_id[got] = win[got] // span - 1
        instance_id[got] = win[got] % span - 1

    return LabeledCloud(positions, colors, semantic, tree_id, instance_id)


# -- synthetic orchard ---------------------------------------------------------


@dataclass
class OrchardConfig:
    trees_per_tile: float = 3.0
    fruits_per_tree: float = 19.2
    tile_extent: float = 8.0
    ground_roughness: float = 0.05
    trunk_radius_range: tuple = (0.05, 0.09)
    trunk_height_range: tuple = (1.4, 2.0)
    canopy_radius_xy_range: tuple = (0.8, 1.2)
    canopy_radius_z_range: tuple = (0.7, 1.1)
    apple_radius_range: tuple = (0.035, 0.05)
    poles_per_tile: int = 2
    ground_points: int = 6000
    trunk_points: int = 800
    canopy_points: int = 2400
    apple_points: int = 60
    pole_points: int = 300
    color_noise_sigma: float = 0.03
    sensor_noise_sigma: float = 0.002
    rng_seed: int = 0

    def validate(self) -> "OrchardConfig":
        for name in (
            "trunk_radius_range", "trunk_height_range", "canopy_radius_xy_range",
            "canopy_radius_z_range", "apple_radius_range",
        ):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < min <= max, got ({lo}, {hi})")
        for name in (
            "trees_per_tile", "fruits_per_tree", "poles_per_tile", "ground_points",
            "trunk_points", "canopy_points", "apple_points", "pole_points",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        return self


def _ground_field(rng, extent, roughness):
    """A smooth random height field z(x, y) made of a few sinusoids."""
    n_waves = 4
    amps = rng.uniform(0.3, 1.0, n_waves)
    amps *= roughness / max(amps.sum(), 1e-12)
    freqs = rng.uniform(0.3, 1.5, (n_waves, 2)) * (2 * np.pi / extent)
    phases = rng.uniform(0, 2 * np.pi, n_waves)

    def z(xy):
        acc = np.zeros(len(xy))
        for a, f, ph in zip(amps, freqs, phases):
            acc += a * np.sin(xy @ f + ph)
        return acc

    return z


def _color(rng, class_id, n, sigma):
    c = _BASE_COLORS[class_id] + rng.normal(0.0, sigma, (n, 3))
    return np.clip(c, 0.0, 1.0)


def _cylinder(rng, center_xy, base_z, radius, height, n):
    theta = rng.uniform(0, 2 * np.pi, n)
    z = rng.uniform(0, height, n)
    r = radius * (1.0 + rng.normal(0, 0.03, n))
    return np.column_stack(
        [center_xy[0] + r * np.cos(theta), center_xy[1] + r * np.sin(theta), base_z + z]
    )


def _ellipsoid_shell(rng, center, radii, n):
    u = rng.normal(size=(n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    shrink = rng.uniform(0.88, 1.0, (n, 1))
    return center + u * shrink * radii


def _sphere(rng, center, radius, n):
    u = rng.normal(size=(n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return center + u * radius


def generate_orchard(config: OrchardConfig) -> LabeledCloud:
    """Procedural orchard tile: rough ground plane, one row of trees (trunk
    cylinder + ellipsoidal canopy shell + apples inside the canopy), and
    support poles. Deterministic for a fixed seed."""
    config.validate()
    rng = np.random.default_rng(config.rng_seed)
    ext = config.tile_extent
    ground_z = _ground_field(rng, ext, config.ground_roughness)

    parts = []  # (positions, colors, semantic, tree_id, instance_id)
    next_instance = 0

    def add(pos, class_id, tree=-1, instance=-1):
        n = len(pos)
        if n == 0:
            return
        parts.append(
            (
                pos,
                _color(rng, class_id, n, config.color_noise_sigma),
                np.full(n, class_id, dtype=np.int64),
                np.full(n, tree, dtype=np.int64),
                np.full(n, instance, dtype=np.int64),
            )
        )

    # ground
    xy = rng.uniform(0, ext, (config.ground_points, 2))
    gpos = np.column_stack([xy, ground_z(xy) + rng.normal(0, 0.004, len(xy))])
    add(gpos, GROUND)

    # trees along one row
    n_trees = int(rng.poisson(config.trees_per_tile))
    row_y = ext / 2.0
    for t in range(n_trees):
        cx = (t + 0.5 + rng.uniform(-0.15, 0.15)) * ext / max(n_trees, 1)
        cy = row_y + rng.uniform(-0.3, 0.3)
        base = float(ground_z(np.array([[cx, cy]]))[0])
        trunk_r = rng.uniform(*config.trunk_radius_range)
        trunk_h = rng.uniform(*config.trunk_height_range)
        add(
            _cylinder(rng, (cx, cy), base, trunk_r, trunk_h, config.trunk_points),
            TRUNK, tree=t, instance=next_instance,
        )
        next_instance += 1

        rxy = rng.uniform(*config.canopy_radius_xy_range)
        rz = rng.uniform(*config.canopy_radius_z_range)
        c_center = np.array([cx, cy, base + trunk_h + 0.5 * rz])
        add(_ellipsoid_shell(rng, c_center, np.array([rxy, rxy, rz]), config.canopy_points), CANOPY)

        n_apples = int(rng.poisson(config.fruits_per_tree))
        for _ in range(n_apples):
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            d *= rng.uniform(0, 1) ** (1 / 3)
            a_center = c_center + d * np.array([rxy, rxy, rz]) * 0.8
            a_radius = rng.uniform(*config.apple_radius_range)
            add(_sphere(rng, a_center, a_radius, config.apple_points),
                APPLE, tree=t, instance=next_instance)
            next_instance += 1

    # support poles offset from the tree row
    for p in range(config.poles_per_tile):
        px = (p + 1.0) * ext / (config.poles_per_tile + 1) + rng.uniform(-0.2, 0.2)
        py = row_y + rng.uniform(0.5, 0.8) * rng.choice([-1.0, 1.0])
        base = float(ground_z(np.array([[px, py]]))[0])
        add(_cylinder(rng, (px, py), base, rng.uniform(0.02, 0.03), rng.uniform(2.2, 2.8),
                      config.pole_points), POLE)

    if not parts:
        return empty_cloud()
    cloud = LabeledCloud(
        np.concatenate([p[0] for p in parts]),
        np.concatenate([p[1] for p in parts]),
        np.concatenate([p[2] for p in parts]),
        np.concatenate([p[3] for p in parts]),
        np.concatenate([p[4] for p in parts]),
    )
    if config.sensor_noise_sigma > 0:
        cloud.positions += rng.normal(0, config.sensor_noise_sigma, cloud.positions.shape)
    perm = rng.permutation(len(cloud))
    return cloud.select(perm).validate()


# -- augmentation ---------------------------------------------------------------


@dataclass
class AugmentConfig:
    scale: bool = True
    scale_range: tuple = (0.9, 1.1)
    rotation: bool = True
    max_tilt: float = 0.08  # radians; yaw is always uniform in [0, 2pi)
    shear: bool = True
    shear_range: tuple = (-0.08, 0.08)
    elastic: bool = True
    elastic_spacing: float = 0.25  # meters between displacement-grid nodes
    elastic_sigma: float = 0.01  # meters, per-node Gaussian displacement
    color_jitter: bool = True
    color_sigma: float = 0.02

    def validate(self) -> "AugmentConfig":
        if self.scale_range[0] <= 0 or self.scale_range[0] > self.scale_range[1]:
            raise ValueError(f"scale_range must be positive with min <= max: {self.scale_range}")
        return self


def _rotation_matrix(yaw, pitch, roll):
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    return rz @ ry @ rx


def _elastic_displacement(rng, positions, spacing, sigma):
    """Trilinear interpolation of a coarse grid of Gaussian displacements."""
    origin = positions.min(axis=0) - spacing
    shape = np.floor((positions.max(axis=0) - origin) / spacing).astype(int) + 3
    grid = rng.normal(0.0, sigma, (*shape, 3))
    rel = (positions - origin) / spacing
    i0 = np.floor(rel).astype(int)
    frac = rel - i0
    disp = np.zeros_like(positions)
    for corner in range(8):
        d = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        w = np.prod(np.where(d, frac, 1.0 - frac), axis=1)
        idx = i0 + d
        disp += w[:, None] * grid[idx[:, 0], idx[:, 1], idx[:, 2]]
    return disp


def augment(cloud: LabeledCloud, config: AugmentConfig, rng) -> LabeledCloud:
    """Apply scale -> rotation -> shear -> elastic deformation -> color
    jitter. Labels and point count are unchanged."""
    config.validate()
    out = cloud.copy()
    if len(out) == 0:
        return out
    if config.scale or config.rotation or config.shear:
        center = out.positions.mean(axis=0)
        pos = out.positions - center
        if config.scale:
            pos = pos * rng.uniform(*config.scale_range)
        if config.rotation:
            yaw = rng.uniform(0, 2 * np.pi)
            pitch = rng.uniform(-config.max_tilt, config.max_tilt)
            roll = rng.uniform(-config.max_tilt, config.max_tilt)
            pos = pos @ _rotation_matrix(yaw, pitch, roll).T
        if config.shear:
            m = np.eye(3)
            m[np.triu_indices(3, 1)] = rng.uniform(*config.shear_range, 3)
            m[np.tril_indices(3, -1)] = rng.uniform(*config.shear_range, 3)
            pos = pos @ m.T
        out.positions = pos + center
    if config.elastic:
        out.positions = out.positions + _elastic_displacement(
            rng, out.positions, config.elastic_spacing, config.elastic_sigma
        )
    if config.color_jitter:
        out.colors = np.clip(out.colors + rng.normal(0, config.color_sigma, out.colors.shape), 0, 1)
    return out


def class_frequencies(clouds) -> np.ndarray:
    """Inverse-frequency class weights: w_k = N / (K * n_k), 0 for classes
    that never occur (they are excluded from the loss)."""
    clouds = list(clouds)
    if not clouds or sum(len(c) for c in clouds) == 0:
        raise ValueError("class_frequencies needs at least one labeled point")
    counts = np.zeros(NUM_CLASSES, dtype=np.int64)
    for c in clouds:
        counts += np.bincount(c.semantic, minlength=NUM_CLASSES)
    total = counts.sum()
    weights = np.zeros(NUM_CLASSES)
    nz = counts > 0
    weights[nz] = total / (NUM_CLASSES * counts[nz])
    return weights


def cloud_stats(cloud: LabeledCloud) -> dict:
    """Per-tile statistics used by the generation manifest."""
    trunk_ids = np.unique(cloud.instance_id[cloud.semantic == TRUNK])
    apple_ids = np.unique(cloud.instance_id[cloud.semantic == APPLE])
    trees = np.unique(cloud.tree_id[cloud.tree_id >= 0])
    n_trees = len(trees)
    return {
        "points": len(cloud),
        "trunks": int(len(trunk_ids[trunk_ids >= 0])),
        "fruits": int(len(apple_ids[apple_ids >= 0])),
        "fruits_per_tree": float(len(apple_ids[apple_ids >= 0]) / n_trees) if n_trees else 0.0,
    }
