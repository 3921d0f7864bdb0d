"""Box-world scenes: buildings, foliage, BS and the UE service grid.

Scenes are frozen dataclasses so they can be shared freely between
workers. The on-disk form is a JSON document tagged with
``scene_format_version``.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SCENE_FORMAT_VERSION = 1


class SceneError(ValueError):
    pass


def _vec3(v) -> tuple[float, float, float]:
    t = tuple(float(c) for c in v)
    if len(t) != 3:
        raise SceneError(f"expected a 3-vector, got {v!r}")
    return t


@dataclass(frozen=True)
class Box:
    min_corner: tuple[float, float, float]
    max_corner: tuple[float, float, float]
    reflection_loss_db: float = 6.0

    def __post_init__(self):
        object.__setattr__(self, "min_corner", _vec3(self.min_corner))
        object.__setattr__(self, "max_corner", _vec3(self.max_corner))
        if not all(a < b for a, b in zip(self.min_corner, self.max_corner)):
            raise SceneError(f"box corners not ordered: {self.min_corner} {self.max_corner}")
        if self.reflection_loss_db < 0:
            raise SceneError("reflection_loss_db must be >= 0")

    def contains(self, p, strict: bool = True) -> bool:
        lo, hi = self.min_corner, self.max_corner
        if strict:
            return all(a < x < b for a, x, b in zip(lo, p, hi))
        return all(a <= x <= b for a, x, b in zip(lo, p, hi))


@dataclass(frozen=True)
class FoliageBox:
    min_corner: tuple[float, float, float]
    max_corner: tuple[float, float, float]
    attenuation_db_per_m: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "min_corner", _vec3(self.min_corner))
        object.__setattr__(self, "max_corner", _vec3(self.max_corner))
        if not all(a < b for a, b in zip(self.min_corner, self.max_corner)):
            raise SceneError(f"foliage corners not ordered: {self.min_corner} {self.max_corner}")
        if self.attenuation_db_per_m < 0:
            raise SceneError("attenuation_db_per_m must be >= 0")


@dataclass(frozen=True)
class BsConfig:
    position: tuple[float, float, float]
    num_antennas: int = 32
    array_axis: tuple[float, float, float] = (1.0, 0.0, 0.0)
    boresight: tuple[float, float, float] = (0.0, -1.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "position", _vec3(self.position))
        object.__setattr__(self, "array_axis", _vec3(self.array_axis))
        object.__setattr__(self, "boresight", _vec3(self.boresight))
        if self.num_antennas < 1:
            raise SceneError("num_antennas must be >= 1")
        for name in ("array_axis", "boresight"):
            if abs(np.linalg.norm(getattr(self, name)) - 1.0) > 1e-9:
                raise SceneError(f"{name} must be a unit vector")
        if abs(float(np.dot(self.array_axis, self.boresight))) > 1e-9:
            raise SceneError("array_axis must be perpendicular to boresight")

    @property
    def height(self) -> float:
        return self.position[2]


@dataclass(frozen=True)
class ServiceGrid:
    origin: tuple[float, float, float]
    extent_x: float
    extent_y: float
    spacing: float = 0.37
    ue_height: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "origin", _vec3(self.origin))
        if self.spacing <= 0:
            raise SceneError("grid spacing must be > 0")
        if self.extent_x < 0 or self.extent_y < 0:
            raise SceneError("grid extents must be >= 0")

    @property
    def shape(self) -> tuple[int, int]:
        """(points along x, points along y)."""
        # small slack so 200/0.37 style ratios are not lost to rounding
        nx = math.floor(self.extent_x / self.spacing + 1 + 1e-9)
        ny = math.floor(self.extent_y / self.spacing + 1 + 1e-9)
        return nx, ny

    @property
    def size(self) -> int:
        nx, ny = self.shape
        return nx * ny

    def positions(self, indices) -> np.ndarray:
        """UE positions (n, 3) for flat grid indices (x-major order)."""
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.size):
            raise SceneError("grid index out of range")
        nx, ny = self.shape
        ix, iy = np.divmod(idx, ny)
        ox, oy, _ = self.origin
        out = np.empty((idx.size, 3))
        out[:, 0] = ox + ix * self.spacing
        out[:, 1] = oy + iy * self.spacing
        out[:, 2] = self.ue_height
        return out

    def contains(self, p, tol: float = 1e-9) -> bool:
        ox, oy, _ = self.origin
        x, y = p[0], p[1]
        return (ox - tol <= x <= ox + self.extent_x + tol
                and oy - tol <= y <= oy + self.extent_y + tol)


@dataclass(frozen=True)
class Scene:
    name: str
    bs: BsConfig
    service_grid: ServiceGrid
    buildings: tuple[Box, ...] = ()
    foliage: tuple[FoliageBox, ...] = ()
    max_reflection_order: int = 2

    def __post_init__(self):
        object.__setattr__(self, "buildings", tuple(self.buildings))
        object.__setattr__(self, "foliage", tuple(self.foliage))
        if self.max_reflection_order not in (0, 1, 2):
            raise SceneError("max_reflection_order must be 0, 1 or 2")

    def validate(self) -> None:
        """Raise SceneError if the geometric invariants do not hold."""
        for b in self.buildings:
            if b.contains(self.bs.position):
                raise SceneError(f"{self.name}: BS inside building {b.min_corner}-{b.max_corner}")
        g = self.service_grid
        ox, oy, _ = g.origin
        z = g.ue_height
        for b in self.buildings:
            (x0, y0, z0), (x1, y1, z1) = b.min_corner, b.max_corner
            overlap_x = x0 < ox + g.extent_x and ox < x1
            overlap_y = y0 < oy + g.extent_y and oy < y1
            if overlap_x and overlap_y and z0 < z < z1:
                raise SceneError(f"{self.name}: service grid intersects building "
                                 f"{b.min_corner}-{b.max_corner}")


def derive_twin_scene(target: Scene) -> Scene:
    """Same geometry as ``target`` with every foliage object dropped."""
    return dataclasses.replace(target, name=target.name + "-twin", foliage=())


# ---------------------------------------------------------------- builtins

def _target_scene() -> Scene:
    # Open plaza (the service area) south of a N-S street canyon holding the BS.
    # Trees line the canyon walls, so foliage hits some paths and not others.
    buildings = (
        # canyon around the BS street (x in [88, 112])
        Box((40.0, 232.0, 0.0), (88.0, 370.0, 30.0)),
        Box((112.0, 232.0, 0.0), (165.0, 360.0, 24.0)),
        # west block row
        Box((-45.0, 150.0, 0.0), (-6.0, 225.0, 36.0)),
        Box((-50.0, 70.0, 0.0), (-8.0, 138.0, 22.0)),
        Box((-40.0, -20.0, 0.0), (-5.0, 58.0, 28.0)),
        # east block row
        Box((206.0, 160.0, 0.0), (250.0, 235.0, 20.0)),
        Box((208.0, 60.0, 0.0), (240.0, 145.0, 40.0)),
        Box((205.0, -30.0, 0.0), (260.0, 45.0, 26.0)),
        # north side of the plaza, flanking the canyon mouth
        Box((0.0, 238.0, 0.0), (34.0, 262.0, 18.0)),
        Box((172.0, 240.0, 0.0), (204.0, 268.0, 26.0)),
    )
    foliage = (
        # street trees along both canyon walls
        FoliageBox((88.0, 236.0, 0.0), (96.0, 320.0, 12.0), 1.0),
        FoliageBox((106.0, 250.0, 0.0), (112.0, 350.0, 9.0), 1.0),
        # tree rows inside the plaza
        FoliageBox((20.0, 20.0, 0.0), (45.0, 200.0, 12.0), 1.0),
        FoliageBox((150.0, 40.0, 0.0), (175.0, 215.0, 11.0), 1.0),
        FoliageBox((60.0, 120.0, 0.0), (140.0, 140.0, 13.0), 1.0),
        FoliageBox((70.0, 30.0, 0.0), (120.0, 60.0, 10.0), 1.0),
        FoliageBox((80.0, 185.0, 0.0), (125.0, 205.0, 14.0), 1.0),
    )
    return Scene(
        name="target",
        bs=BsConfig(position=(100.0, 330.0, 15.0), num_antennas=32,
                    array_axis=(1.0, 0.0, 0.0), boresight=(0.0, -1.0, 0.0)),
        service_grid=ServiceGrid(origin=(0.0, 0.0, 0.0), extent_x=200.0,
                                 extent_y=230.0, spacing=0.37, ue_height=2.0),
        buildings=buildings,
        foliage=foliage,
        max_reflection_order=2,
    )


def _baseline_scene() -> Scene:
    # Street axis along x: BS sits in an E-W canyon west of the service area.
    buildings = (
        Box((-90.0, 130.0, 0.0), (-12.0, 170.0, 45.0)),
        Box((-95.0, 60.0, 0.0), (-12.0, 108.0, 35.0)),
        Box((-20.0, 182.0, 0.0), (70.0, 215.0, 16.0)),
        Box((85.0, 178.0, 0.0), (185.0, 230.0, 50.0)),
        Box((-20.0, 5.0, 0.0), (95.0, 48.0, 20.0)),
        Box((110.0, 2.0, 0.0), (190.0, 52.0, 38.0)),
        Box((20.0, 222.0, 0.0), (60.0, 260.0, 22.0)),
    )
    return Scene(
        name="baseline",
        bs=BsConfig(position=(-40.0, 119.0, 15.0), num_antennas=32,
                    array_axis=(0.0, 1.0, 0.0), boresight=(1.0, 0.0, 0.0)),
        service_grid=ServiceGrid(origin=(0.0, 56.0, 0.0), extent_x=190.0,
                                 extent_y=118.0, spacing=0.37, ue_height=2.0),
        buildings=buildings,
        foliage=(),
        max_reflection_order=2,
    )


def builtin_scenes() -> tuple[Scene, Scene, Scene]:
    """(target, twin, baseline)."""
    target = _target_scene()
    return target, derive_twin_scene(target), _baseline_scene()


def builtin_scene(name: str) -> Scene:
    target, twin, baseline = builtin_scenes()
    table = {"target": target, "twin": twin, "target-twin": twin, "baseline": baseline}
    try:
        return table[name]
    except KeyError:
        raise SceneError(f"unknown builtin scene {name!r}; choose from {sorted(table)}") from None


# ---------------------------------------------------------------- file I/O

def scene_to_dict(scene: Scene) -> dict:
    d = dataclasses.asdict(scene)
    d = {"scene_format_version": SCENE_FORMAT_VERSION, **d}
    return json.loads(json.dumps(d))  # tuples -> lists


def scene_from_dict(d: dict) -> Scene:
    version = d.get("scene_format_version")
    if version != SCENE_FORMAT_VERSION:
        raise SceneError(f"unsupported scene_format_version {version!r}")
    try:
        scene = Scene(
            name=str(d["name"]),
            bs=BsConfig(**d["bs"]),
            service_grid=ServiceGrid(**d["service_grid"]),
            buildings=tuple(Box(**b) for b in d.get("buildings", [])),
            foliage=tuple(FoliageBox(**f) for f in d.get("foliage", [])),
            max_reflection_order=int(d.get("max_reflection_order", 2)),
        )
    except (KeyError, TypeError) as exc:
        raise SceneError(f"malformed scene document: {exc}") from exc
    scene.validate()
    return scene


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene), indent=2) + "\n", encoding="utf-8")


def load_scene(path) -> Scene:
    with open(path, encoding="utf-8") as fh:
        return scene_from_dict(json.load(fh))
