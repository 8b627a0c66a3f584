"""Synthetic city scenes and a simplified 2.5D path-loss simulator.

The simulator stands in for a ray tracer.  It models only the direct path:
free-space loss over the 3D distance, the transmit antenna gain towards the
receiver, a single dominant knife-edge obstruction by buildings and linear
attenuation through vegetation.

Geometry conventions: pixel ``(row, col)`` with 1 m spacing; ``x`` grows with
the column (east) and ``y`` grows with *decreasing* row (north is up), ``z``
is height above ground.  Azimuth is measured counterclockwise from ``+x``,
elevation from the ``+z`` axis (``pi/2`` is horizontal, ``pi`` straight down).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .scaling import ScalingConfig, db_to_gray

SPEED_OF_LIGHT = 299_792_458.0
RX_HEIGHT = 1.5


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    return math.pi - np.mod(math.pi - np.asarray(a, dtype=np.float64), 2 * math.pi)


# ------------------------------------------------------------------ antenna
@dataclass(frozen=True)
class AntennaPattern:
    """Idealised rotationally symmetric main beam (no side lobes).

    Gain in dB relative to boresight falls from 0 to ``back_floor`` between the
    boresight and half the first-null beam width and stays at the floor beyond.
    """

    hpbw: float = math.radians(90.0)
    fnbw: float = math.radians(120.0)
    back_floor: float = -30.0

    def __post_init__(self):
        if not (0 < self.hpbw < self.fnbw <= 2 * math.pi):
            raise ValueError(f"need 0 < hpbw < fnbw <= 2*pi, got hpbw={self.hpbw}, fnbw={self.fnbw}")
        if not self.back_floor < -3.0:
            raise ValueError("back_floor must lie below -3 dB")

    @property
    def exponent(self) -> float:
        # raised cosine in (angle / null angle) ** p hits -3 dB at the half-power angle
        r = 3.0 / -self.back_floor
        return math.log(math.acos(1.0 - 2.0 * r) / math.pi) / math.log(self.hpbw / self.fnbw)

    @classmethod
    def from_degrees(cls, hpbw_deg: float, fnbw_deg: float, back_floor: float = -30.0) -> "AntennaPattern":
        return cls(math.radians(hpbw_deg), math.radians(fnbw_deg), back_floor)

    def to_dict(self) -> dict:
        return {"hpbw_deg": math.degrees(self.hpbw), "fnbw_deg": math.degrees(self.fnbw), "back_floor": self.back_floor}

    @classmethod
    def from_dict(cls, d: dict) -> "AntennaPattern":
        return cls.from_degrees(float(d["hpbw_deg"]), float(d["fnbw_deg"]), float(d.get("back_floor", -30.0)))


# Half-power / first-null beam widths used for the simulated transmitters.
PATTERN_TABLE_DEG = ((15, 30), (15, 60), (30, 60), (45, 60), (15, 90), (30, 90), (45, 90), (90, 120))
SECTOR_120 = AntennaPattern.from_degrees(90, 120)


def antenna_gain_and_slope(pattern: AntennaPattern, angle):
    """Gain (dB) and its derivative with respect to the off-boresight angle."""
    psi = np.asarray(angle, dtype=np.float64)
    null = pattern.fnbw / 2.0
    p = pattern.exponent
    x = np.clip(psi / null, 0.0, 1.0)
    xp = x ** p
    gain = pattern.back_floor * 0.5 * (1.0 - np.cos(np.pi * xp))
    with np.errstate(divide="ignore", invalid="ignore"):
        slope = pattern.back_floor * 0.5 * np.pi * np.sin(np.pi * xp) * p * x ** (p - 1.0) / null
    slope = np.where((x > 0) & (x < 1), slope, 0.0)
    return gain, slope


def antenna_gain(pattern: AntennaPattern, angle):
    """Gain in dB (0 on boresight) at ``angle`` radians off boresight."""
    g, _ = antenna_gain_and_slope(pattern, angle)
    return g if g.ndim else float(g)


def boresight(azimuth: float, elevation: float) -> np.ndarray:
    st = math.sin(elevation)
    return np.array([st * math.cos(azimuth), st * math.sin(azimuth), math.cos(elevation)])


# ------------------------------------------------------------- transmitter
@dataclass(frozen=True)
class TxConfig:
    row: int
    col: int
    height: float
    azimuth: float = 0.0
    elevation: float = 0.75 * math.pi
    pattern: AntennaPattern = field(default_factory=lambda: SECTOR_120)
    power_dbm: float = 23.0

    def __post_init__(self):
        if not 6.0 <= self.height <= 30.0:
            raise ValueError(f"Tx height must lie in [6, 30] m, got {self.height}")
        if not 0.0 <= self.elevation <= math.pi:
            raise ValueError(f"elevation must lie in [0, pi], got {self.elevation}")
        object.__setattr__(self, "row", int(self.row))
        object.__setattr__(self, "col", int(self.col))
        object.__setattr__(self, "azimuth", float(wrap_angle(self.azimuth)))

    def with_angles(self, azimuth: float, elevation: float) -> "TxConfig":
        return TxConfig(self.row, self.col, self.height, azimuth, elevation, self.pattern, self.power_dbm)

    def rot90(self, shape, k: int = 1) -> "TxConfig":
        """Transmitter moved with a map of ``shape`` rotated counterclockwise by ``k`` quarter turns."""
        r, c = self.row, self.col
        h, w = shape
        for _ in range(k % 4):
            r, c, h, w = w - 1 - c, r, w, h
        return TxConfig(r, c, self.height, self.azimuth + (k % 4) * math.pi / 2, self.elevation,
                        self.pattern, self.power_dbm)

    def to_dict(self) -> dict:
        return {"row": self.row, "col": self.col, "height": self.height, "azimuth": self.azimuth,
                "elevation": self.elevation, "pattern": self.pattern.to_dict(), "power_dbm": self.power_dbm}

    @classmethod
    def from_dict(cls, d: dict) -> "TxConfig":
        return cls(int(d["row"]), int(d["col"]), float(d["height"]), float(d["azimuth"]), float(d["elevation"]),
                   AntennaPattern.from_dict(d["pattern"]), float(d.get("power_dbm", 23.0)))


def off_boresight(tx: TxConfig, rows, cols, rx_height: float = RX_HEIGHT, with_grad: bool = False):
    """Angle between the Tx boresight and the Tx->Rx rays.

    With ``with_grad`` also returns d(angle)/d(azimuth) and d(angle)/d(elevation).
    """
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    ux = cols - tx.col
    uy = tx.row - rows
    uz = np.full(np.broadcast(ux, uy).shape, rx_height - tx.height)
    norm = np.sqrt(ux * ux + uy * uy + uz * uz)
    b = boresight(tx.azimuth, tx.elevation)
    cos_psi = np.clip((b[0] * ux + b[1] * uy + b[2] * uz) / norm, -1.0, 1.0)
    psi = np.arccos(cos_psi)
    if not with_grad:
        return psi
    st, ct = math.sin(tx.elevation), math.cos(tx.elevation)
    sp_, cp = math.sin(tx.azimuth), math.cos(tx.azimuth)
    dcos_dphi = (-st * sp_ * ux + st * cp * uy) / norm
    dcos_dtheta = (ct * cp * ux + ct * sp_ * uy - st * uz) / norm
    sin_psi = np.sqrt(np.maximum(1.0 - cos_psi * cos_psi, 0.0))
    safe = sin_psi > 1e-12
    inv = np.where(safe, -1.0 / np.where(safe, sin_psi, 1.0), 0.0)
    return psi, inv * dcos_dphi, inv * dcos_dtheta


# ----------------------------------------------------------------- scenes
@dataclass(frozen=True)
class SceneParams:
    size: int = 256
    building_density: float = 0.3
    building_height: tuple = (4.0, 28.0)
    block_size: tuple = (0.06, 0.2)  # side length as a fraction of the map size
    vegetation_density: float = 0.1
    vegetation_height: tuple = (3.0, 15.0)
    tree_radius: tuple = (0.01, 0.03)

    def __post_init__(self):
        for name in ("building_density", "vegetation_density"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.size < 8:
            raise ValueError("map size must be at least 8")


@dataclass
class Scene:
    building: np.ndarray  # (H, W) metres above ground
    vegetation: np.ndarray  # (H, W) metres above ground
    image: np.ndarray  # (4, H, W) R, G, B, IR in [0, 1]
    seed: int | None = None
    resolution: float = 1.0
    params: SceneParams | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.building.shape

    @property
    def ndsm(self) -> np.ndarray:
        """Unclassified surface model: buildings and vegetation together."""
        return np.maximum(self.building, self.vegetation)

    def rot90(self, k: int = 1) -> "Scene":
        """Scene rotated counterclockwise by ``k`` quarter turns."""
        return Scene(np.rot90(self.building, k).copy(), np.rot90(self.vegetation, k).copy(),
                     np.rot90(self.image, k, axes=(1, 2)).copy(), self.seed, self.resolution, self.params)


_ROOF_COLORS = np.array([[0.62, 0.30, 0.24, 0.30], [0.55, 0.55, 0.58, 0.25],
                         [0.36, 0.33, 0.32, 0.20], [0.70, 0.66, 0.60, 0.32]])
_GROUND = np.array([0.50, 0.48, 0.45, 0.30])
_TREE = np.array([0.20, 0.40, 0.15, 0.75])


def generate_scene(seed: int, params: SceneParams | None = None) -> Scene:
    """Procedural scene: rectangular building blocks, round tree canopies, aerial image."""
    params = params or SceneParams()
    rng = np.random.default_rng(seed)
    n = params.size
    building = np.zeros((n, n))
    block_id = np.full((n, n), -1)
    target = params.building_density * n * n
    lo, hi = (max(2, int(round(f * n))) for f in params.block_size)
    blocks = 0
    while np.count_nonzero(building) < target and blocks < 10_000:
        h, w = rng.integers(lo, hi + 1, size=2)
        r, c = rng.integers(0, n - h + 1), rng.integers(0, n - w + 1)
        building[r:r + h, c:c + w] = rng.uniform(*params.building_height)
        block_id[r:r + h, c:c + w] = blocks
        blocks += 1

    vegetation = np.zeros((n, n))
    target = params.vegetation_density * n * n
    rr, cc = np.mgrid[0:n, 0:n]
    free = building == 0
    attempts = 0
    while np.count_nonzero(vegetation) < target and attempts < 10_000:
        attempts += 1
        rad = max(1.5, rng.uniform(*params.tree_radius) * n)
        r, c = rng.uniform(0, n, size=2)
        disk = ((rr - r) ** 2 + (cc - c) ** 2 <= rad * rad) & free
        canopy = rng.uniform(*params.vegetation_height)
        vegetation[disk] = np.maximum(vegetation[disk], canopy)

    image = _render(building, vegetation, block_id, rng)
    return Scene(building, vegetation, image, seed, 1.0, params)


def _render(building, vegetation, block_id, rng) -> np.ndarray:
    n = building.shape[0]
    img = np.empty((4, n, n))
    img[:] = _GROUND[:, None, None]
    img += 0.03 * rng.standard_normal((4, n, n))
    palette = rng.integers(0, len(_ROOF_COLORS), size=block_id.max() + 2)
    roof = building > 0
    img[:, roof] = _ROOF_COLORS[palette[block_id[roof]]].T + 0.02 * rng.standard_normal((4, int(roof.sum())))
    tree = vegetation > 0
    img[:, tree] = _TREE[:, None] + 0.05 * rng.standard_normal((4, int(tree.sum())))

    # sun in the south-west at 45 degrees elevation: shadows fall to the north-east
    surface = np.maximum(building, vegetation)
    shadow = np.zeros((n, n), dtype=bool)
    for k in range(1, min(int(surface.max()), n - 1) + 1):
        caster = np.zeros_like(surface)
        caster[:n - k, k:] = surface[k:, :n - k]  # height k steps towards the sun
        shadow |= caster - k > surface
    img[:3, shadow] *= 0.55
    img[3, shadow] *= 0.6
    return np.clip(img, 0.0, 1.0)


def tx_candidates(scene: Scene) -> list[TxConfig]:
    """Building-edge pixels as transmitter sites, roof height + 2 m, pointing away from the building.

    Heights are clamped to [6, 30] m and the elevation is the default downtilt.
    """
    b = scene.building > 0
    h, w = b.shape
    pad = np.pad(b, 1, constant_values=False)
    # outward normal from the non-building 4-neighbours, in (x, y) = (col, -row)
    north = ~pad[:-2, 1:-1]
    south = ~pad[2:, 1:-1]
    west = ~pad[1:-1, :-2]
    east = ~pad[1:-1, 2:]
    # neighbours outside the map do not count as open space
    north[0, :] = south[-1, :] = False
    west[:, 0] = east[:, -1] = False
    edge = b & (north | south | west | east)
    vx = east.astype(float) - west.astype(float)
    vy = north.astype(float) - south.astype(float)
    out = []
    for r, c in zip(*np.nonzero(edge)):
        ax, ay = vx[r, c], vy[r, c]
        if ax == 0 and ay == 0:
            ax, ay = (1.0, 0.0) if east[r, c] else (-1.0, 0.0) if west[r, c] else (0.0, 1.0) if north[r, c] else (0.0, -1.0)
        height = float(np.clip(scene.building[r, c] + 2.0, 6.0, 30.0))
        out.append(TxConfig(int(r), int(c), height, math.atan2(ay, ax), 0.75 * math.pi))
    return out


def sample_transmitters(scene: Scene, n: int, rng: np.random.Generator, min_reach: float = 0.25) -> list[TxConfig]:
    """Draw ``n`` distinct candidates whose boresight stays inside the map for ``min_reach * size`` pixels.

    Falls back to all candidates when too few face into the map.
    """
    cands = tx_candidates(scene)
    if not cands:
        raise ValueError("scene has no building edge to host a transmitter")
    h, w = scene.shape
    reach = min_reach * max(h, w)
    inward = [t for t in cands
              if 0 <= t.row - reach * math.sin(t.azimuth) <= h - 1 and 0 <= t.col + reach * math.cos(t.azimuth) <= w - 1]
    pool = inward if len(inward) >= n else cands
    idx = rng.choice(len(pool), size=min(n, len(pool)), replace=False)
    return [pool[i] for i in np.sort(idx)]


# ------------------------------------------------------------- simulation
@dataclass(frozen=True)
class PropagationParams:
    frequency_hz: float = 3.7e9
    rx_height: float = RX_HEIGHT
    veg_rate_db_m: float = 0.5
    samples_per_m: float = 2.0
    knife_offset_db: float = 6.0
    knife_slope_db_m: float = 20.0
    knife_max_db: float = 40.0


def free_space_loss_db(distance_m, frequency_hz: float = 3.7e9):
    """Friis free-space loss (positive dB)."""
    d = np.asarray(distance_m, dtype=np.float64)
    return 20.0 * np.log10(d) + 20.0 * math.log10(4.0 * math.pi * frequency_hz / SPEED_OF_LIGHT)


def _path_loss(scene: Scene, tx: TxConfig, rows, cols, prop: PropagationParams, scaling: ScalingConfig,
               chunk: int = 2_000_000):
    rows = np.asarray(rows, dtype=np.int64).ravel()
    cols = np.asarray(cols, dtype=np.int64).ravel()
    hgt, wid = scene.shape
    building, veg = scene.building, scene.vegetation
    dr = (rows - tx.row).astype(np.float64)
    dc = (cols - tx.col).astype(np.float64)
    horiz = np.hypot(dr, dc)
    dz = tx.height - prop.rx_height
    dist3 = np.sqrt(horiz * horiz + dz * dz)
    gain = antenna_gain(tx.pattern, off_boresight(tx, rows, cols, prop.rx_height))
    gain = np.asarray(gain)
    nsamp = np.maximum(np.ceil(horiz * prop.samples_per_m).astype(np.int64), 1)

    depth = np.empty(rows.size)
    veg_len = np.empty(rows.size)
    start = 0
    while start < rows.size:
        kmax = int(nsamp[start:].max())
        stop = min(rows.size, start + max(1, chunk // kmax))
        k = np.arange(kmax)[None, :]
        ns = nsamp[start:stop, None]
        mask = k < ns
        t = (k + 0.5) / ns
        ri = np.clip(np.rint(tx.row + t * dr[start:stop, None]).astype(np.int64), 0, hgt - 1)
        ci = np.clip(np.rint(tx.col + t * dc[start:stop, None]).astype(np.int64), 0, wid - 1)
        z = tx.height + t * (prop.rx_height - tx.height)
        obstruction = np.where(mask, building[ri, ci] - z, -np.inf)
        depth[start:stop] = obstruction.max(axis=1)
        inside = mask & (veg[ri, ci] > z)
        veg_len[start:stop] = inside.sum(axis=1) * (horiz[start:stop] / nsamp[start:stop])
        start = stop

    knife = np.clip(prop.knife_offset_db + prop.knife_slope_db_m * depth, 0.0, prop.knife_max_db)
    pl = -free_space_loss_db(dist3, prop.frequency_hz) + gain - knife - prop.veg_rate_db_m * veg_len
    pl = np.clip(pl, scaling.pl_trnc_db, scaling.pl_max_db)
    pl[building[rows, cols] > 0] = scaling.pl_trnc_db
    return pl


def trace_path_loss(scene: Scene, tx: TxConfig, rx: tuple[int, int], prop: PropagationParams | None = None,
                    scaling: ScalingConfig | None = None) -> float:
    """Path loss in dB (negative) from ``tx`` to a receiver at pixel ``rx``, 1.5 m above ground."""
    r, c = rx
    h, w = scene.shape
    if not (0 <= r < h and 0 <= c < w):
        raise ValueError(f"receiver {rx} outside the {h}x{w} map")
    return float(_path_loss(scene, tx, [r], [c], prop or PropagationParams(), scaling or ScalingConfig())[0])


def path_loss_map(scene: Scene, tx: TxConfig, prop: PropagationParams | None = None,
                  scaling: ScalingConfig | None = None) -> np.ndarray:
    h, w = scene.shape
    if not (0 <= tx.row < h and 0 <= tx.col < w):
        raise ValueError(f"Tx ({tx.row}, {tx.col}) outside the {h}x{w} map")
    rr, cc = np.mgrid[0:h, 0:w]
    pl = _path_loss(scene, tx, rr, cc, prop or PropagationParams(), scaling or ScalingConfig())
    return pl.reshape(h, w)


def simulate_radio_map(scene: Scene, tx: TxConfig, scaling: ScalingConfig | None = None,
                       prop: PropagationParams | None = None) -> np.ndarray:
    """Grayscale radio map in [0, 1]."""
    scaling = scaling or ScalingConfig()
    return db_to_gray(path_loss_map(scene, tx, prop, scaling), scaling)
