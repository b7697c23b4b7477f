"""Analytic signed-distance primitives and the synthetic part-labeled shapes.

Four categories (airplane, car, chair, table) are assembled from exact
box/sphere/cylinder SDFs combined by min-union, one primitive group per
semantic part. Distances are negative inside; every composite is
1-Lipschitz, which the surface projection in :mod:`octgen.data` relies on.
A single-sphere ``sphere`` category exists for debugging and tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PART_COUNTS = {"airplane": 4, "car": 4, "chair": 4, "table": 3, "sphere": 1}

PART_NAMES = {
    "airplane": ("fuselage", "wings", "tail", "engines"),
    "car": ("roof", "hood", "body", "wheels"),
    "chair": ("backrest", "seat", "legs", "armrests"),
    "table": ("top", "legs", "drawer"),
    "sphere": ("ball",),
}


def sd_sphere(p, center, radius):
    return np.linalg.norm(p - center, axis=-1) - radius


def sd_box(p, center, half):
    q = np.abs(p - center) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return outside + inside


def sd_cylinder(p, center, axis, radius, half_height):
    """Capped cylinder along coordinate ``axis`` (0, 1 or 2), exact SDF."""
    rel = p - center
    h = np.abs(rel[..., axis]) - half_height
    perp = np.delete(rel, axis, axis=-1)
    r = np.linalg.norm(perp, axis=-1) - radius
    d = np.stack([r, h], axis=-1)
    outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
    inside = np.minimum(d.max(axis=-1), 0.0)
    return outside + inside


@dataclass
class Primitive:
    kind: str  # "box" | "sphere" | "cylinder"
    center: np.ndarray
    params: dict = field(default_factory=dict)

    def sdf(self, p):
        if self.kind == "box":
            return sd_box(p, self.center, self.params["half"])
        if self.kind == "sphere":
            return sd_sphere(p, self.center, self.params["radius"])
        if self.kind == "cylinder":
            return sd_cylinder(
                p, self.center, self.params["axis"], self.params["radius"], self.params["half_height"]
            )
        raise ValueError(f"unknown primitive kind {self.kind!r}")


@dataclass(frozen=True)
class ShapeSpec:
    """Deterministic recipe for one synthetic shape: category + seed."""

    category: str
    seed: int

    def __post_init__(self):
        if self.category not in PART_COUNTS:
            raise ValueError(f"unknown category {self.category!r}")

    @property
    def part_count(self) -> int:
        return PART_COUNTS[self.category]


class AnalyticSdf:
    """Composite SDF: min over per-part primitive unions (negative inside)."""

    def __init__(self, parts: list[list[Primitive]], category: str):
        if not parts or any(len(group) == 0 for group in parts):
            raise ValueError("every part needs at least one primitive")
        self.parts = parts
        self.category = category

    @property
    def part_count(self) -> int:
        return len(self.parts)

    def part_sdf(self, p, part: int) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        vals = [prim.sdf(p) for prim in self.parts[part]]
        return np.minimum.reduce(vals)

    def __call__(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        vals = [self.part_sdf(p, i) for i in range(self.part_count)]
        return np.minimum.reduce(vals)

    def part_labels(self, p) -> np.ndarray:
        """Nearest-part label: argmin over per-part SDFs."""
        p = np.asarray(p, dtype=np.float64)
        vals = np.stack([self.part_sdf(p, i) for i in range(self.part_count)], axis=-1)
        return vals.argmin(axis=-1)

    def gradient(self, p, h=1e-5) -> np.ndarray:
        """Central-difference gradient, unit steps per coordinate."""
        p = np.asarray(p, dtype=np.float64)
        g = np.empty_like(p)
        for a in range(3):
            e = np.zeros(3)
            e[a] = h
            g[..., a] = (self(p + e) - self(p - e)) / (2 * h)
        return g


def _box(center, half):
    return Primitive("box", np.asarray(center, dtype=float), {"half": np.asarray(half, dtype=float)})


def _cyl(center, axis, radius, half_height):
    return Primitive(
        "cylinder",
        np.asarray(center, dtype=float),
        {"axis": axis, "radius": float(radius), "half_height": float(half_height)},
    )


def _sphere(center, radius):
    return Primitive("sphere", np.asarray(center, dtype=float), {"radius": float(radius)})


def _table_parts(rng) -> list[list[Primitive]]:
    # parts: 0 top slab, 1 legs, 2 drawer box
    # dimensions are kept small so depth-8 surface-band octrees stay CPU-sized
    w = rng.uniform(0.20, 0.30)  # half-width (x)
    d = rng.uniform(0.20, 0.30)  # half-depth (z)
    th = rng.uniform(0.018, 0.032)  # top half-thickness
    leg_r = rng.uniform(0.022, 0.038)
    height = rng.uniform(0.34, 0.52)
    y0 = -0.30
    y_top = y0 + height
    top = [_box([0.0, y_top, 0.0], [w, th, d])]
    inset = leg_r + 0.02
    leg_h = (y_top - th - y0) / 2.0
    leg_y = y0 + leg_h
    legs = [
        _cyl([sx * (w - inset), leg_y, sz * (d - inset)], 1, leg_r, leg_h)
        for sx in (-1, 1)
        for sz in (-1, 1)
    ]
    dw = rng.uniform(0.35, 0.6) * w
    dh = rng.uniform(0.05, 0.09)
    dd = rng.uniform(0.5, 0.8) * d
    drawer = [_box([0.0, y_top - th - dh, 0.0], [dw, dh, dd])]
    return [top, legs, drawer]


def _chair_parts(rng) -> list[list[Primitive]]:
    # parts: 0 backrest, 1 seat, 2 legs, 3 armrests
    w = rng.uniform(0.18, 0.28)
    d = rng.uniform(0.18, 0.26)
    seat_y = rng.uniform(-0.05, 0.05)
    th = rng.uniform(0.02, 0.04)
    seat = [_box([0.0, seat_y, 0.0], [w, th, d])]
    back_h = rng.uniform(0.18, 0.32)
    back = [_box([0.0, seat_y + back_h, -d + 0.02], [w, back_h, 0.02])]
    leg_r = rng.uniform(0.02, 0.035)
    y0 = seat_y - rng.uniform(0.30, 0.42)
    leg_h = (seat_y - th - y0) / 2.0
    legs = [
        _cyl([sx * (w - 0.04), y0 + leg_h, sz * (d - 0.04)], 1, leg_r, leg_h)
        for sx in (-1, 1)
        for sz in (-1, 1)
    ]
    arm_y = seat_y + rng.uniform(0.08, 0.14)
    arms = [
        _box([sx * (w + 0.015), arm_y, 0.0], [0.015, 0.015, d * 0.8]) for sx in (-1, 1)
    ]
    return [back, seat, legs, arms]


def _airplane_parts(rng) -> list[list[Primitive]]:
    # parts: 0 fuselage, 1 wings, 2 tail, 3 engines
    fus_l = rng.uniform(0.45, 0.65)
    fus_r = rng.uniform(0.05, 0.08)
    fuselage = [_cyl([0.0, 0.0, 0.0], 0, fus_r, fus_l)]
    span = rng.uniform(0.40, 0.60)
    chord = rng.uniform(0.08, 0.14)
    wing_x = rng.uniform(-0.1, 0.05)
    wings = [_box([wing_x, 0.0, 0.0], [chord, 0.012, span])]
    tail_x = -fus_l + 0.05
    tail = [
        _box([tail_x, 0.0, 0.0], [0.05, 0.008, span * 0.35]),
        _box([tail_x, rng.uniform(0.08, 0.14), 0.0], [0.05, rng.uniform(0.08, 0.14), 0.008]),
    ]
    eng_r = rng.uniform(0.025, 0.04)
    eng_z = span * rng.uniform(0.35, 0.55)
    engines = [
        _cyl([wing_x, -fus_r * 0.9, sz * eng_z], 0, eng_r, 0.08) for sz in (-1, 1)
    ]
    return [fuselage, wings, tail, engines]


def _car_parts(rng) -> list[list[Primitive]]:
    # parts: 0 roof, 1 hood, 2 body, 3 wheels
    half_l = rng.uniform(0.40, 0.55)
    half_w = rng.uniform(0.16, 0.22)
    body_h = rng.uniform(0.08, 0.12)
    body_y = -0.10
    body = [_box([0.0, body_y, 0.0], [half_l, body_h, half_w])]
    roof_l = half_l * rng.uniform(0.40, 0.55)
    roof_h = rng.uniform(0.06, 0.10)
    roof = [_box([-half_l * 0.1, body_y + body_h + roof_h, 0.0], [roof_l, roof_h, half_w * 0.9])]
    hood = [
        _box([half_l * 0.7, body_y + body_h + 0.015, 0.0], [half_l * 0.3, 0.015, half_w * 0.95])
    ]
    wheel_r = rng.uniform(0.06, 0.09)
    wheel_y = body_y - body_h
    wheels = [
        _cyl([sx * half_l * 0.6, wheel_y, sz * half_w], 2, wheel_r, 0.025)
        for sx in (-1, 1)
        for sz in (-1, 1)
    ]
    return [roof, hood, body, wheels]


def _sphere_parts(rng) -> list[list[Primitive]]:
    r = rng.uniform(0.35, 0.55)
    return [[_sphere([0.0, 0.0, 0.0], r)]]


_BUILDERS = {
    "table": _table_parts,
    "chair": _chair_parts,
    "airplane": _airplane_parts,
    "car": _car_parts,
    "sphere": _sphere_parts,
}

_CATEGORY_IDS = {"airplane": 1, "car": 2, "chair": 3, "table": 4, "sphere": 5}


def generate_shape(spec: ShapeSpec) -> AnalyticSdf:
    """Deterministic shape from a spec; identical spec gives identical SDF."""
    entropy = (_CATEGORY_IDS[spec.category], int(spec.seed))
    rng = np.random.default_rng(np.random.SeedSequence(entropy=entropy))
    parts = _BUILDERS[spec.category](rng)
    sdf = AnalyticSdf(parts, spec.category)
    if sdf.part_count != spec.part_count:
        raise RuntimeError("builder produced wrong part count")
    return sdf
