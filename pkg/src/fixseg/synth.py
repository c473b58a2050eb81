"""Toy multi-body shapes: hinged objects and free-floating multi-object scenes.

A template is a list of parts, each a union of box / cylinder surfaces with an
optional hinge (axis through a pivot, angle range) or a free-floating flag.
Instances are surface samples of a template; articulated instances are the
group-action images of a rest sample.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import jsonschema
import numpy as np

from .geometry import PartTransform, Pointcloud, RigidTransform, act, hinge_transform, random_rotation, write_pointcloud
from .segmentation import SoftSegmentation

_FACES = {"-x": (0, -1), "+x": (0, 1), "-y": (1, -1), "+y": (1, 1), "-z": (2, -1), "+z": (2, 1)}


class TemplateError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    center: tuple
    size: tuple
    open_faces: tuple = ()

    def faces(self) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        c, s = np.asarray(self.center, float), np.asarray(self.size, float)
        out = []
        for name, (ax, sign) in _FACES.items():
            if name in self.open_faces:
                continue
            u_ax, v_ax = [a for a in range(3) if a != ax]
            origin = c - s / 2
            origin[ax] = c[ax] + sign * s[ax] / 2
            u = np.zeros(3)
            u[u_ax] = s[u_ax]
            v = np.zeros(3)
            v[v_ax] = s[v_ax]
            out.append((origin, u, v))
        return out

    def area(self) -> float:
        return float(sum(np.linalg.norm(np.cross(u, v)) for _, u, v in self.faces()))

    def sample(self, n: int, rng) -> np.ndarray:
        faces = self.faces()
        areas = np.array([np.linalg.norm(np.cross(u, v)) for _, u, v in faces])
        which = rng.choice(len(faces), size=n, p=areas / areas.sum())
        st = rng.random((n, 2))
        o = np.stack([faces[i][0] for i in which])
        u = np.stack([faces[i][1] for i in which])
        v = np.stack([faces[i][2] for i in which])
        return o + st[:, :1] * u + st[:, 1:] * v

    def distance(self, pts: np.ndarray) -> np.ndarray:
        best = np.full(len(pts), np.inf)
        for o, u, v in self.faces():
            rel = pts - o
            s = np.clip(rel @ u / (u @ u), 0, 1)
            t = np.clip(rel @ v / (v @ v), 0, 1)
            best = np.minimum(best, np.linalg.norm(rel - s[:, None] * u - t[:, None] * v, axis=1))
        return best

    def corners(self) -> np.ndarray:
        c, s = np.asarray(self.center, float), np.asarray(self.size, float)
        signs = np.array([[i, j, k] for i in (-1, 1) for j in (-1, 1) for k in (-1, 1)], float)
        return c + signs * s / 2

    def scaled(self, f: float) -> "Box":
        return Box(tuple(np.asarray(self.center) * f), tuple(np.asarray(self.size) * f), self.open_faces)


@dataclass(frozen=True)
class Cylinder:
    center: tuple
    axis: int
    radius: float
    height: float
    caps: bool = True

    def _frame(self):
        a = self.axis
        u_ax, v_ax = [i for i in range(3) if i != a]
        return a, u_ax, v_ax

    def area(self) -> float:
        lateral = 2 * np.pi * self.radius * self.height
        return float(lateral + (2 * np.pi * self.radius ** 2 if self.caps else 0.0))

    def sample(self, n: int, rng) -> np.ndarray:
        a, ua, va = self._frame()
        lateral = 2 * np.pi * self.radius * self.height
        cap = np.pi * self.radius ** 2 if self.caps else 0.0
        probs = np.array([lateral, cap, cap]) / (lateral + 2 * cap)
        which = rng.choice(3, size=n, p=probs)
        theta = rng.uniform(0, 2 * np.pi, n)
        rho = np.where(which == 0, self.radius, self.radius * np.sqrt(rng.random(n)))
        h = np.where(which == 0, rng.uniform(-0.5, 0.5, n), np.where(which == 1, -0.5, 0.5)) * self.height
        pts = np.zeros((n, 3))
        pts[:, a] = h
        pts[:, ua] = rho * np.cos(theta)
        pts[:, va] = rho * np.sin(theta)
        return pts + np.asarray(self.center, float)

    def distance(self, pts: np.ndarray) -> np.ndarray:
        a, ua, va = self._frame()
        rel = pts - np.asarray(self.center, float)
        h = rel[:, a]
        rho = np.hypot(rel[:, ua], rel[:, va])
        half = self.height / 2
        d_lat = np.hypot(rho - self.radius, np.maximum(np.abs(h) - half, 0.0))
        if not self.caps:
            return d_lat
        d_cap = np.hypot(np.abs(h) - half, np.maximum(rho - self.radius, 0.0))
        return np.minimum(d_lat, d_cap)

    def corners(self) -> np.ndarray:
        a, ua, va = self._frame()
        out = []
        for sh in (-0.5, 0.5):
            for su, sv in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                p = np.zeros(3)
                p[a], p[ua], p[va] = sh * self.height, su * self.radius, sv * self.radius
                out.append(p + np.asarray(self.center, float))
        return np.array(out)

    def scaled(self, f: float) -> "Cylinder":
        return Cylinder(tuple(np.asarray(self.center) * f), self.axis, self.radius * f, self.height * f, self.caps)


@dataclass(frozen=True)
class Hinge:
    axis: tuple
    pivot: tuple
    lo: float
    hi: float

    def __post_init__(self):
        ax = np.asarray(self.axis, float)
        if abs(np.linalg.norm(ax) - 1.0) > 1e-9:
            raise TemplateError(f"hinge axis {self.axis} is not unit length")
        if not (-np.pi < self.lo <= self.hi <= np.pi):
            raise TemplateError(f"hinge range [{self.lo}, {self.hi}] outside (-pi, pi]")


@dataclass(frozen=True)
class PartSpec:
    name: str
    primitives: tuple
    joint: Optional[Hinge] = None
    free: bool = False
    budget: Optional[int] = None

    def area(self) -> float:
        return float(sum(p.area() for p in self.primitives))


@dataclass(frozen=True)
class ShapeTemplate:
    name: str
    parts: tuple
    semantic_groups: Optional[tuple] = None
    params: tuple = ()

    @property
    def P(self) -> int:
        return len(self.parts)

    @property
    def n_joints(self) -> int:
        return sum(part.joint is not None for part in self.parts)

    def groups(self) -> Optional[list]:
        return [list(g) for g in self.semantic_groups] if self.semantic_groups is not None else None


def normalize_template(tpl: ShapeTemplate, radius: float = 0.95) -> ShapeTemplate:
    """Uniformly rescale so every primitive corner lies within ``radius`` of the origin."""
    pts = np.concatenate([p.corners() for part in tpl.parts for p in part.primitives])
    extent = float(np.linalg.norm(pts, axis=1).max())
    if extent <= radius:
        return tpl
    f = radius / extent
    parts = []
    for part in tpl.parts:
        joint = part.joint
        if joint is not None:
            joint = replace(joint, pivot=tuple(np.asarray(joint.pivot) * f))
        parts.append(replace(part, primitives=tuple(p.scaled(f) for p in part.primitives), joint=joint))
    return replace(tpl, parts=tuple(parts))


# -- template builders ---------------------------------------------------------
def oven(width=0.9, height=0.7, depth=0.6, door=0.05) -> ShapeTemplate:
    """Open-front box body with a slab door hinged along its bottom front edge."""
    body = PartSpec("body", (Box((0, 0, 0), (width, height, depth), ("+z",)),))
    door_part = PartSpec(
        "door",
        (Box((0, 0, depth / 2 + door / 2), (width, height, door)),),
        joint=Hinge((1.0, 0.0, 0.0), (0.0, -height / 2, depth / 2), 0.0, np.pi / 2),
    )
    params = (("width", width), ("height", height), ("depth", depth), ("door", door))
    return normalize_template(ShapeTemplate("oven", (body, door_part), None, params))


def cabinet(width=0.8, height=0.8, depth=0.55, door=0.04, lid=0.14) -> ShapeTemplate:
    """Box open at front and top, a thin side-hinged door and a thick back-hinged lid."""
    body = PartSpec("body", (Box((0, 0, 0), (width, height, depth), ("+z", "+y")),))
    door_part = PartSpec(
        "door",
        (Box((0, 0, depth / 2 + door / 2), (width, height, door)),),
        joint=Hinge((0.0, -1.0, 0.0), (-width / 2, 0.0, depth / 2), 0.0, np.pi / 2),
    )
    lid_part = PartSpec(
        "lid",
        (Box((0, height / 2 + lid / 2, 0), (width, lid, depth)),),
        joint=Hinge((-1.0, 0.0, 0.0), (0.0, height / 2, -depth / 2), 0.0, np.pi / 2),
    )
    params = (("width", width), ("height", height), ("depth", depth), ("door", door), ("lid", lid))
    return normalize_template(ShapeTemplate("cabinet", (body, door_part, lid_part), None, params))


def eyeglasses(width=1.0, height=0.3, thick=0.05, temple=0.75, bar=0.05) -> ShapeTemplate:
    """Flat frame with two congruent temples folding inwards; temples share a semantic label."""
    frame = PartSpec("frame", (Box((0, 0, 0), (width, height, thick)),))
    y0 = height / 2 - bar
    x0 = width / 2 - bar / 2
    left = PartSpec(
        "temple_left",
        (Box((-x0, y0, -thick / 2 - temple / 2), (bar, bar, temple)),),
        joint=Hinge((0.0, -1.0, 0.0), (-x0, y0, -thick / 2), 0.0, np.pi / 2),
    )
    right = PartSpec(
        "temple_right",
        (Box((x0, y0, -thick / 2 - temple / 2), (bar, bar, temple)),),
        joint=Hinge((0.0, 1.0, 0.0), (x0, y0, -thick / 2), 0.0, np.pi / 2),
    )
    params = (("width", width), ("height", height), ("thick", thick), ("temple", temple), ("bar", bar))
    return normalize_template(ShapeTemplate("eyeglasses", (frame, left, right), ((0,), (1, 2)), params))


def lamp(base=0.9, plate=0.12, arm=0.85, radius=0.09) -> ShapeTemplate:
    """Flat base plate with a cylindrical arm hinged at its foot; the parts meet only at the hinge."""
    top = -0.45 + plate / 2
    plate_part = PartSpec("base", (Box((0, -0.45, 0), (base, plate, base)),))
    arm_part = PartSpec(
        "arm",
        (Cylinder((0, top + arm / 2, 0), 1, radius, arm),),
        joint=Hinge((1.0, 0.0, 0.0), (0.0, top, 0.0), -np.pi / 3, np.pi / 3),
    )
    params = (("base", base), ("plate", plate), ("arm", arm), ("radius", radius))
    return normalize_template(ShapeTemplate("lamp", (plate_part, arm_part), None, params))


def bracket(body=0.5, flap=0.45, thick=0.05, rod=0.45, radius=0.12) -> ShapeTemplate:
    """Box with a slab flap on its right top edge and a rod on its left top edge, both folding upwards."""
    h = body / 2
    core = PartSpec("body", (Box((0, 0, 0), (body, body, body)),))
    flap_part = PartSpec(
        "flap",
        (Box((h + flap / 2, h - thick / 2, 0), (flap, thick, body * 0.9)),),
        joint=Hinge((0.0, 0.0, 1.0), (h, h, 0.0), 0.0, np.pi / 2),
    )
    rod_part = PartSpec(
        "rod",
        (Cylinder((-h - rod / 2, h - radius, 0), 0, radius, rod),),
        joint=Hinge((0.0, 0.0, -1.0), (-h, h, 0.0), 0.0, np.pi / 2),
    )
    params = (("body", body), ("flap", flap), ("thick", thick), ("rod", rod), ("radius", radius))
    return normalize_template(ShapeTemplate("bracket", (core, flap_part, rod_part), None, params))


def cube_pair(size=0.5, gap=0.3) -> ShapeTemplate:
    """Two disjoint equal cubes; a static sanity template."""
    off = size / 2 + gap / 2
    a = PartSpec("left", (Box((-off, 0, 0), (size,) * 3),))
    b = PartSpec("right", (Box((off, 0, 0), (size,) * 3),))
    return normalize_template(ShapeTemplate("cube_pair", (a, b), None, (("size", size), ("gap", gap))))


def single_cube(size=0.8) -> ShapeTemplate:
    return ShapeTemplate("single_cube", (PartSpec("cube", (Box((0, 0, 0), (size,) * 3),)),), None, (("size", size),))


def scene(k: int = 3, seed: int = 0) -> ShapeTemplate:
    """``k`` free-floating primitives at random non-overlapping positions."""
    if k not in (2, 3):
        raise TemplateError("scenes have 2 or 3 objects")
    rng = np.random.default_rng(seed)
    kinds = ["box", "cylinder", "box"]
    parts, centers, radii = [], [], []
    for i in range(k):
        kind = kinds[i]
        if kind == "box":
            size = tuple(rng.uniform(0.2, 0.4, 3))
            extent = float(np.linalg.norm(size) / 2)
        else:
            rad, hgt = rng.uniform(0.1, 0.18), rng.uniform(0.25, 0.4)
            extent = float(np.hypot(rad, hgt / 2))
        for _ in range(1000):
            c = rng.uniform(-0.9 + extent, 0.9 - extent, 3)
            if np.linalg.norm(c) + extent <= 0.95 and all(
                np.linalg.norm(c - c2) > extent + r2 + 0.05 for c2, r2 in zip(centers, radii)
            ):
                break
        else:
            raise TemplateError("could not place scene objects without overlap")
        prim = Box(tuple(c), size) if kind == "box" else Cylinder(tuple(c), int(rng.integers(3)), rad, hgt)
        parts.append(PartSpec(f"object{i}", (prim,), free=True))
        centers.append(c)
        radii.append(extent)
    return ShapeTemplate(f"scene{k}", tuple(parts), None, (("k", k), ("seed", seed)))


TEMPLATES: dict[str, Callable[..., ShapeTemplate]] = {
    "oven": oven,
    "cabinet": cabinet,
    "eyeglasses": eyeglasses,
    "lamp": lamp,
    "bracket": bracket,
    "cube_pair": cube_pair,
    "single_cube": single_cube,
}


def build_template(name: str, scale: Optional[dict] = None) -> ShapeTemplate:
    if name.startswith("scene"):
        k = int(name[5:] or 3)
        return scene(k, int((scale or {}).get("seed", 0)))
    if name not in TEMPLATES:
        raise TemplateError(f"unknown template {name!r}; choose from {sorted(TEMPLATES)} or scene2/scene3")
    base = TEMPLATES[name]()
    if not scale:
        return base
    params = {k: v * scale.get(k, 1.0) for k, v in base.params}
    return TEMPLATES[name](**params)


def jitter_scales(tpl: ShapeTemplate, rng, amount: float = 0.2) -> dict:
    """Per-dimension scale factors in ``[1 - amount, 1 + amount]``."""
    return {k: float(rng.uniform(1 - amount, 1 + amount)) for k, _ in tpl.params if k != "seed" and k != "k"}


# -- sampling --------------------------------------------------------------------
@dataclass
class SampledInstance:
    X: Pointcloud
    y_gt: SoftSegmentation
    A: PartTransform
    template: str
    seed: Optional[int] = None
    angles: list = field(default_factory=list)


def sample_surface(tpl: ShapeTemplate, n_points: int, rng) -> tuple[Pointcloud, SoftSegmentation]:
    """Area-weighted uniform samples on every part surface, labelled by part."""
    P = tpl.P
    if n_points < P:
        raise TemplateError(f"need at least {P} points for {P} parts")
    areas = np.array([part.area() for part in tpl.parts])
    if np.any(areas <= 0):
        raise TemplateError(f"part(s) {np.flatnonzero(areas <= 0).tolist()} have zero area")
    budgets = [part.budget for part in tpl.parts]
    if all(b is not None for b in budgets):
        counts = np.array(budgets)
        if counts.sum() != n_points:
            raise TemplateError(f"part budgets sum to {counts.sum()}, expected {n_points}")
    else:
        counts = rng.multinomial(n_points, areas / areas.sum())
        while counts.min() == 0:
            counts = rng.multinomial(n_points, areas / areas.sum())
    pts, labels = [], []
    for p, (part, n) in enumerate(zip(tpl.parts, counts)):
        prim_areas = np.array([prim.area() for prim in part.primitives])
        per_prim = rng.multinomial(n, prim_areas / prim_areas.sum())
        for prim, m in zip(part.primitives, per_prim):
            if m:
                pts.append(prim.sample(int(m), rng))
                labels.append(np.full(int(m), p))
    pts, labels = np.concatenate(pts), np.concatenate(labels)
    order = rng.permutation(n_points)
    return Pointcloud(pts[order]), SoftSegmentation.from_labels(labels[order], P)


def surface_distance(tpl: ShapeTemplate, X, labels) -> np.ndarray:
    """Distance from each point to the surface of the part it is labelled with (rest pose)."""
    pts = X.points if hasattr(X, "points") else np.asarray(X)
    out = np.empty(len(pts))
    for p, part in enumerate(tpl.parts):
        sel = np.asarray(labels) == p
        if sel.any():
            out[sel] = np.min([prim.distance(pts[sel]) for prim in part.primitives], axis=0)
    return out


def random_angles(tpl: ShapeTemplate, rng) -> list[float]:
    return [float(rng.uniform(part.joint.lo, part.joint.hi)) for part in tpl.parts if part.joint is not None]


def part_transform(tpl: ShapeTemplate, angles: Sequence[float], rng=None, free: Optional[Sequence] = None,
                   free_t_max: float = 0.3, global_transform: Optional[RigidTransform] = None) -> PartTransform:
    """Per-part motions from hinge angles (in part order) and free-body motions."""
    angles = list(angles)
    if len(angles) != tpl.n_joints:
        raise TemplateError(f"{tpl.name} has {tpl.n_joints} joint(s), got {len(angles)} angle(s)")
    it = iter(angles)
    free_it = iter(free) if free is not None else None
    motions = []
    for part in tpl.parts:
        if part.joint is not None:
            theta = next(it)
            j = part.joint
            if not (j.lo - 1e-12 <= theta <= j.hi + 1e-12):
                raise TemplateError(f"angle {theta:.4f} for {part.name!r} outside [{j.lo:.4f}, {j.hi:.4f}]")
            T = hinge_transform(j.axis, j.pivot, theta)
        elif part.free:
            if free_it is not None:
                T = next(free_it)
            elif rng is not None:
                T = RigidTransform(random_rotation(rng), rng.uniform(-free_t_max, free_t_max, 3))
            else:
                T = RigidTransform.identity()
        else:
            T = RigidTransform.identity()
        if global_transform is not None:
            T = T.then(global_transform)
        motions.append(T)
    return PartTransform(tuple(motions))


def articulate(rest: SampledInstance, tpl: ShapeTemplate, angles: Sequence[float], rng=None,
               free: Optional[Sequence] = None, global_transform: Optional[RigidTransform] = None) -> SampledInstance:
    A = part_transform(tpl, angles, rng, free, global_transform=global_transform)
    X = act(A, rest.X, rest.y_gt)
    return SampledInstance(X, rest.y_gt, A, tpl.name, rest.seed, [float(a) for a in angles])


def rest_instance(tpl: ShapeTemplate, n_points: int, seed: int) -> SampledInstance:
    rng = np.random.default_rng(seed)
    X, y = sample_surface(tpl, n_points, rng)
    return SampledInstance(X, y, PartTransform.identity(tpl.P), tpl.name, seed, [0.0] * tpl.n_joints)


def random_global(rng, t_max: float = 0.2) -> RigidTransform:
    return RigidTransform(random_rotation(rng), rng.uniform(-t_max, t_max, 3))


# -- datasets --------------------------------------------------------------------
MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["version", "seed", "n_points", "templates", "entries"],
    "properties": {
        "version": {"const": 1},
        "seed": {"type": "integer"},
        "n_points": {"type": "integer", "minimum": 1},
        "templates": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["P"],
                "properties": {"P": {"type": "integer", "minimum": 1},
                               "semantic_groups": {"type": ["array", "null"]}},
            },
        },
        "entries": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["file", "template", "split", "seed", "angles"],
                "properties": {
                    "file": {"type": "string"},
                    "template": {"type": "string"},
                    "split": {"enum": ["train", "test_states", "test_instances"]},
                    "seed": {"type": "integer"},
                    "angles": {"type": "array", "items": {"type": "number"}},
                    "instance": {"type": "integer"},
                    "scales": {"type": "object"},
                },
            },
        },
    },
}


@dataclass
class SplitSpec:
    n_test_states: int = 32
    n_test_instances: int = 0
    jitter: float = 0.2
    global_pose: bool = True
    jitter_train: bool = True


@dataclass
class DatasetEntry:
    template: str
    split: str
    index: int
    instance: int
    scales: dict
    sample: SampledInstance

    @property
    def file(self) -> str:
        return f"{self.split}/{self.template}_{self.index:04d}.txt"


def sample_dataset(templates: Sequence[str], n_instances: int, seed: int = 0, n_points: int = 128,
                   split: Optional[SplitSpec] = None) -> list[DatasetEntry]:
    """In-memory dataset: ``train`` rest states, then ``test_states`` and ``test_instances``.

    ``test_states`` articulates the training instances round-robin;
    ``test_instances`` articulates held-out jittered instances.
    """
    split = split or SplitSpec()
    entries = []
    for t_index, name in enumerate(templates):
        base = build_template(name)
        train_seq, states_seq, inst_seq = np.random.SeedSequence([seed, t_index]).spawn(3)
        train = []
        for i, s in enumerate(train_seq.spawn(n_instances)):
            rng = np.random.default_rng(s)
            scales = jitter_scales(base, rng, split.jitter) if split.jitter_train and i > 0 else {}
            tpl = build_template(name, scales)
            inst = rest_instance(tpl, n_points, int(rng.integers(2**31)))
            train.append((tpl, inst, scales))
            entries.append(DatasetEntry(name, "train", i, i, scales, inst))
        for j, s in enumerate(states_seq.spawn(split.n_test_states)):
            rng = np.random.default_rng(s)
            i = j % max(len(train), 1)
            tpl, rest, scales = train[i]
            g = random_global(rng) if split.global_pose else None
            inst = articulate(rest, tpl, random_angles(tpl, rng), rng, global_transform=g)
            entries.append(DatasetEntry(name, "test_states", j, i, scales, inst))
        for j, s in enumerate(inst_seq.spawn(split.n_test_instances)):
            rng = np.random.default_rng(s)
            scales = jitter_scales(base, rng, split.jitter)
            tpl = build_template(name, scales)
            rest = rest_instance(tpl, n_points, int(rng.integers(2**31)))
            g = random_global(rng) if split.global_pose else None
            inst = articulate(rest, tpl, random_angles(tpl, rng), rng, global_transform=g)
            entries.append(DatasetEntry(name, "test_instances", j, n_instances + j, scales, inst))
    return entries


def make_dataset(templates: Sequence[str], n_instances: int, out_dir, seed: int = 0, n_points: int = 128,
                 split: Optional[SplitSpec] = None) -> dict:
    """Write :func:`sample_dataset` as labelled pointcloud files plus ``manifest.json``; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = [_write_entry(out, e) for e in sample_dataset(templates, n_instances, seed, n_points, split)]
    meta = {}
    for name in templates:
        base = build_template(name)
        meta[name] = {"P": base.P, "semantic_groups": base.groups()}
    manifest = {"version": 1, "seed": int(seed), "n_points": int(n_points), "templates": meta, "entries": entries}
    jsonschema.validate(manifest, MANIFEST_SCHEMA)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _write_entry(out: Path, e: DatasetEntry) -> dict:
    (out / e.split).mkdir(parents=True, exist_ok=True)
    inst = e.sample
    write_pointcloud(out / e.file, inst.X, inst.y_gt.hard_labels(),
                     comment=f"template={e.template} split={e.split} instance={e.instance}")
    return {"file": e.file, "template": e.template, "split": e.split, "seed": int(inst.seed),
            "angles": [float(a) for a in inst.angles], "instance": int(e.instance),
            "scales": {k: float(v) for k, v in sorted(e.scales.items())}}


def read_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text())
    jsonschema.validate(manifest, MANIFEST_SCHEMA)
    return manifest
