"""Deterministic procedural scene domains.

Each domain renders layered layouts (sky band, ground, road band,
building/object rectangles) into a semantic mask plus an RGB image whose
per-class style is a base color, a hashed noise texture and an optional
horizontal stripe pattern.  Everything is a pure function of
(domain spec, seed), byte-for-byte reproducible across runs.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .labels import SemanticMap, ValidationError

MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x):
    """SplitMix64 finalizer over uint64 numpy arrays (wrapping arithmetic)."""
    x = np.atleast_1d(np.asarray(x, dtype=np.uint64))
    x = (x + np.uint64(0x9E3779B97F4A7C15)) & MASK64
    x = ((x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & MASK64
    x = ((x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & MASK64
    return x ^ (x >> np.uint64(31))


class SeedStream:
    """Tiny counter-based random stream for layout decisions."""

    def __init__(self, seed):
        self._seed = np.asarray(seed & 0xFFFFFFFFFFFFFFFF, dtype=np.uint64)
        self._counter = 0

    def _next(self):
        self._counter += 1
        return int(_splitmix64(self._seed ^ _splitmix64(self._counter))[0])

    def uniform(self, lo=0.0, hi=1.0):
        u = float(self._next() >> 11) / float(1 << 53)
        return lo + (hi - lo) * u

    def randint(self, lo, hi):
        """Integer in [lo, hi] inclusive."""
        if hi < lo:
            raise ValidationError(f"empty integer range [{lo}, {hi}]")
        return lo + self._next() % (hi - lo + 1)


def pixel_noise(seed, height, width, channels=3):
    """Deterministic per-pixel noise field in [-1, 1], shape [C, H, W]."""
    i = np.arange(height, dtype=np.uint64)[None, :, None]
    j = np.arange(width, dtype=np.uint64)[None, None, :]
    c = np.arange(channels, dtype=np.uint64)[:, None, None]
    h = _splitmix64(seed & 0xFFFFFFFFFFFFFFFF)
    key = _splitmix64((i * np.uint64(0x10001)) ^ (j * np.uint64(0x2B)) ^
                      (c * np.uint64(0x1F123BB5)) ^ h)
    return (key >> np.uint64(11)).astype(np.float64) / float(1 << 53) * 2.0 - 1.0


@dataclass(frozen=True)
class ClassStyle:
    cont_id: int
    name: str
    rgb: tuple
    noise_amp: float = 0.08
    stripe_period: int | None = None


@dataclass(frozen=True)
class ObjectRule:
    cont_id: int
    prob: float
    count: tuple
    width: tuple
    height: tuple
    band: str  # "road", "ground" or "sky"


@dataclass(frozen=True)
class DomainSpec:
    domain: str
    height: int
    width: int
    styles: dict          # cont_id -> ClassStyle
    sky_class: int
    road_class: int
    ground_class: int
    sky_frac: tuple
    road_frac: tuple
    building_class: int | None = None
    building_count: tuple = (0, 0)
    building_width: tuple = (3, 8)
    building_height: tuple = (4, 12)
    vegetation_class: int | None = None
    vegetation_count: tuple = (0, 0)
    objects: tuple = ()
    stripe_strength: float = 0.15

    @property
    def class_ids(self):
        return frozenset(self.styles)

    def to_json(self):
        return json.dumps(spec_to_dict(self), indent=2, sort_keys=True)


@dataclass(frozen=True)
class Scene:
    mask: SemanticMap
    image: np.ndarray  # [1, 3, H, W] in [-1, 1]
    seed: int


def spec_to_dict(spec):
    return {
        "domain": spec.domain,
        "height": spec.height,
        "width": spec.width,
        "classes": [
            {"id": s.cont_id, "name": s.name, "rgb": list(s.rgb),
             "noise_amp": s.noise_amp, "stripe_period": s.stripe_period}
            for s in sorted(spec.styles.values(), key=lambda s: s.cont_id)
        ],
        "layout": {
            "sky": {"class": spec.sky_class, "frac": list(spec.sky_frac)},
            "road": {"class": spec.road_class, "frac": list(spec.road_frac)},
            "ground": {"class": spec.ground_class},
            "buildings": None if spec.building_class is None else {
                "class": spec.building_class, "count": list(spec.building_count),
                "width": list(spec.building_width), "height": list(spec.building_height)},
            "vegetation": None if spec.vegetation_class is None else {
                "class": spec.vegetation_class, "count": list(spec.vegetation_count)},
            "objects": [
                {"class": o.cont_id, "prob": o.prob, "count": list(o.count),
                 "width": list(o.width), "height": list(o.height), "band": o.band}
                for o in spec.objects
            ],
        },
        "stripe_strength": spec.stripe_strength,
    }


def spec_from_dict(doc):
    try:
        styles = {}
        for c in doc["classes"]:
            styles[int(c["id"])] = ClassStyle(
                cont_id=int(c["id"]), name=str(c["name"]), rgb=tuple(c["rgb"]),
                noise_amp=float(c.get("noise_amp", 0.08)),
                stripe_period=(None if c.get("stripe_period") is None
                               else int(c["stripe_period"])))
        layout = doc["layout"]
        buildings = layout.get("buildings")
        vegetation = layout.get("vegetation")
        objects = tuple(
            ObjectRule(cont_id=int(o["class"]), prob=float(o["prob"]),
                       count=tuple(o["count"]), width=tuple(o["width"]),
                       height=tuple(o["height"]), band=str(o["band"]))
            for o in layout.get("objects", ()))
        return DomainSpec(
            domain=str(doc["domain"]), height=int(doc["height"]), width=int(doc["width"]),
            styles=styles,
            sky_class=int(layout["sky"]["class"]),
            road_class=int(layout["road"]["class"]),
            ground_class=int(layout["ground"]["class"]),
            sky_frac=tuple(layout["sky"]["frac"]),
            road_frac=tuple(layout["road"]["frac"]),
            building_class=None if buildings is None else int(buildings["class"]),
            building_count=(0, 0) if buildings is None else tuple(buildings["count"]),
            building_width=(3, 8) if buildings is None else tuple(buildings["width"]),
            building_height=(4, 12) if buildings is None else tuple(buildings["height"]),
            vegetation_class=None if vegetation is None else int(vegetation["class"]),
            vegetation_count=(0, 0) if vegetation is None else tuple(vegetation["count"]),
            objects=objects,
            stripe_strength=float(doc.get("stripe_strength", 0.15)))
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"bad domain spec document: {exc}") from exc


def load_spec(path):
    with open(path, "r", encoding="utf-8") as fh:
        return spec_from_dict(json.load(fh))


def generate_scene(spec, seed):
    """Layout plus render; deterministic in (spec, seed)."""
    rng = SeedStream(seed)
    h, w = spec.height, spec.width
    labels = np.full((h, w), spec.ground_class, dtype=np.int64)

    sky_h = max(1, int(round(h * rng.uniform(*spec.sky_frac))))
    road_h = max(1, int(round(h * rng.uniform(*spec.road_frac))))
    road_top = h - road_h
    labels[:sky_h] = spec.sky_class
    labels[road_top:] = spec.road_class

    if spec.building_class is not None:
        for _ in range(rng.randint(*spec.building_count)):
            bw = rng.randint(*spec.building_width)
            bh = rng.randint(*spec.building_height)
            x0 = rng.randint(0, max(0, w - bw))
            top = max(0, sky_h - bh)
            labels[top:min(road_top, sky_h + max(1, bh // 3)), x0:x0 + bw] = spec.building_class

    if spec.vegetation_class is not None:
        for _ in range(rng.randint(*spec.vegetation_count)):
            vw = rng.randint(3, 6)
            vh = rng.randint(2, 4)
            x0 = rng.randint(0, max(0, w - vw))
            y0 = rng.randint(sky_h, max(sky_h, road_top - vh))
            labels[y0:y0 + vh, x0:x0 + vw] = spec.vegetation_class

    for rule in spec.objects:
        if rng.uniform() >= rule.prob:
            continue
        for _ in range(rng.randint(*rule.count)):
            ow = rng.randint(*rule.width)
            oh = rng.randint(*rule.height)
            x0 = rng.randint(0, max(0, w - ow))
            if rule.band == "road":
                lo, hi = road_top, h - oh
            elif rule.band == "ground":
                lo, hi = sky_h, road_top - oh
            elif rule.band == "sky":
                lo, hi = 0, sky_h - oh
            else:
                raise ValidationError(f"unknown object band {rule.band!r}")
            y0 = rng.randint(lo, max(lo, hi))
            labels[y0:y0 + oh, x0:x0 + ow] = rule.cont_id

    mask = SemanticMap(labels=labels)
    return Scene(mask=mask, image=render(mask, spec, seed), seed=seed)


def render(mask, spec, seed):
    """Per-pixel color = class base RGB + noise + stripes, clamped to [-1,1]."""
    labels = mask.labels
    present = np.unique(labels)
    unknown = [int(c) for c in present if int(c) not in spec.styles]
    if unknown:
        raise ValidationError(f"mask contains ids {unknown} unknown to domain {spec.domain!r}")
    h, w = labels.shape
    palette = np.zeros((max(spec.styles) + 1, 3))
    amp = np.zeros(max(spec.styles) + 1)
    for cid, style in spec.styles.items():
        palette[cid] = style.rgb
        amp[cid] = style.noise_amp
    image = palette[labels].transpose(2, 0, 1)
    image = image + amp[labels][None] * pixel_noise(seed, h, w)
    rows = np.arange(h)[:, None]
    for cid, style in spec.styles.items():
        if style.stripe_period:
            stripe = np.where((rows // style.stripe_period) % 2 == 0,
                              spec.stripe_strength, -spec.stripe_strength)
            image = np.where(labels[None] == cid, image + stripe[None], image)
    return np.clip(image, -1.0, 1.0)[None]


def make_dataset(spec, n, seed):
    """Scenes with seeds seed..seed+n-1; a size-k subset is the first k."""
    if n < 1:
        raise ValidationError(f"dataset size must be >= 1, got {n}")
    return [generate_scene(spec, seed + i) for i in range(n)]


# ---------------------------------------------------------------------------
# built-in domains: a cool base palette, a warm extension, a cold striped one
# ---------------------------------------------------------------------------

def _styles(entries):
    return {cid: ClassStyle(cont_id=cid, name=name, rgb=rgb, noise_amp=amp,
                            stripe_period=stripe)
            for cid, name, rgb, amp, stripe in entries}


def domain_a():
    return DomainSpec(
        domain="A", height=32, width=48,
        styles=_styles([
            (0, "sky", (-0.10, 0.30, 0.90), 0.06, None),
            (1, "road", (-0.55, -0.55, -0.50), 0.08, 4),
            (2, "ground", (-0.15, 0.05, -0.35), 0.08, None),
            (3, "building", (0.10, 0.05, 0.10), 0.08, 3),
            (4, "vegetation", (-0.60, 0.25, -0.60), 0.10, None),
            (5, "car", (0.70, -0.55, -0.55), 0.06, None),
        ]),
        sky_class=0, road_class=1, ground_class=2,
        sky_frac=(0.28, 0.42), road_frac=(0.22, 0.34),
        building_class=3, building_count=(1, 4),
        vegetation_class=4, vegetation_count=(1, 3),
        objects=(
            ObjectRule(cont_id=5, prob=0.9, count=(1, 2), width=(4, 7),
                       height=(2, 4), band="road"),
        ))


def domain_b():
    return DomainSpec(
        domain="B", height=32, width=48,
        styles=_styles([
            (0, "sky", (0.70, 0.35, -0.20), 0.06, None),
            (1, "road", (-0.30, -0.45, -0.60), 0.08, 4),
            (2, "ground", (0.25, -0.05, -0.45), 0.08, None),
            (3, "building", (0.30, -0.25, 0.15), 0.08, 3),
            (4, "vegetation", (-0.35, 0.35, -0.50), 0.08, None),
            (5, "car", (0.85, 0.05, -0.55), 0.06, None),
            (6, "rickshaw", (0.90, 0.80, -0.75), 0.06, None),
            (7, "animal", (0.50, 0.30, 0.35), 0.06, None),
            (8, "billboard", (0.90, 0.90, 0.90), 0.05, None),
        ]),
        sky_class=0, road_class=1, ground_class=2,
        sky_frac=(0.26, 0.40), road_frac=(0.24, 0.36),
        building_class=3, building_count=(1, 4),
        vegetation_class=4, vegetation_count=(0, 2),
        objects=(
            ObjectRule(cont_id=5, prob=0.8, count=(1, 2), width=(4, 7),
                       height=(3, 4), band="road"),
            ObjectRule(cont_id=6, prob=0.9, count=(1, 2), width=(4, 6),
                       height=(3, 4), band="road"),
            ObjectRule(cont_id=7, prob=0.6, count=(1, 2), width=(3, 5),
                       height=(3, 4), band="ground"),
            ObjectRule(cont_id=8, prob=0.7, count=(1, 1), width=(5, 9),
                       height=(3, 4), band="sky"),
        ))


def domain_c():
    return DomainSpec(
        domain="C", height=32, width=48,
        styles=_styles([
            (0, "sky", (-0.25, -0.20, 0.35), 0.06, None),
            (1, "road", (-0.70, -0.65, -0.50), 0.08, 6),
            (2, "ground", (-0.40, -0.15, -0.10), 0.08, None),
            (3, "building", (-0.05, -0.30, 0.05), 0.08, None),
            (4, "vegetation", (-0.70, 0.10, -0.50), 0.08, None),
            (5, "car", (0.40, -0.65, -0.20), 0.06, None),
            (9, "snow", (0.92, 0.92, 0.95), 0.04, None),
            (10, "water", (-0.70, -0.05, 0.70), 0.08, 4),
            (11, "boat", (0.60, 0.40, 0.10), 0.06, None),
        ]),
        sky_class=0, road_class=1, ground_class=2,
        sky_frac=(0.30, 0.44), road_frac=(0.20, 0.32),
        building_class=3, building_count=(0, 3),
        vegetation_class=4, vegetation_count=(0, 2),
        objects=(
            ObjectRule(cont_id=5, prob=0.7, count=(1, 2), width=(4, 7),
                       height=(3, 4), band="road"),
            ObjectRule(cont_id=10, prob=0.9, count=(1, 2), width=(6, 12),
                       height=(3, 4), band="ground"),
            ObjectRule(cont_id=9, prob=0.8, count=(1, 3), width=(4, 9),
                       height=(3, 3), band="ground"),
            ObjectRule(cont_id=11, prob=0.5, count=(1, 1), width=(3, 5),
                       height=(3, 3), band="ground"),
        ))


BUILTIN_DOMAINS = {"A": domain_a, "B": domain_b, "C": domain_c}


def builtin_spec(name):
    if name not in BUILTIN_DOMAINS:
        raise ValidationError(
            f"unknown built-in domain {name!r}; available: {sorted(BUILTIN_DOMAINS)}")
    return BUILTIN_DOMAINS[name]()
