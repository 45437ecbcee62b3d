"""Procedural carpark scenes, overlay pairs and corpus I/O.

Scenes are rendered top-down: a world raster (floor, bay lines, walls, pillars,
signs and optionally parked vehicles) is built once per world, and a view is a
rotated square crop ahead of a camera pose. The vehicle class plays the role
of the distractor. Overlay pairs follow the usual recipe: a vehicle cut out of
an image that contains one is composited onto an image that does not, giving
``(x_clean, x_overlaid, mask)`` that differ only inside the mask.

Images are uint8 HWC arrays; masks are bool HW arrays.
"""
from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

# label ids; the distractor id is kept well clear of structure ids
EXTERIOR, FLOOR, BAY_LINE, AISLE_MARK, WALL, WALL_STRIPE, PILLAR, SIGN = range(8)
STRUCTURE_IDS = frozenset(range(8))
CAR = 10
CLASS_NAMES = {CAR: "car"}
CLASS_IDS = {v: k for k, v in CLASS_NAMES.items()}

WORLD_W, WORLD_H = 40.0, 28.0  # meters
MAP_PPM = 8  # world raster pixels per meter
VIEW_M = 12.0  # side of the square view, meters
VIEW_AHEAD = 4.0  # view centre lies this far ahead of the camera
BAY_W, BAY_D = 2.5, 5.0

# (x0, x1, y0, y1) of each bay row, bays facing the aisle on side "front"
_ROWS = [
    (2.0, 37.0, 1.0, 6.0, "down"),
    (6.0, 33.5, 11.5, 16.5, "up"),
    (6.0, 33.5, 16.5, 21.5, "down"),
]
# drivable rectangles (x0, x1, y0, y1)
DRIVABLE = [
    (2.0, 38.0, 6.8, 10.7),
    (2.0, 38.0, 22.3, 26.2),
    (1.8, 5.2, 6.8, 26.2),
    (34.3, 38.2, 6.8, 26.2),
]


def _bays():
    out = []
    for x0, x1, y0, y1, front in _ROWS:
        n = int((x1 - x0) // BAY_W)
        for i in range(n):
            out.append((x0 + i * BAY_W, y0, y1, front))
    return out


BAYS = _bays()


# ----------------------------------------------------------------------------
# Worlds


@dataclass(frozen=True)
class SceneSpec:
    """Structure of a world: everything but the parked vehicles."""

    seed: int = 0
    brightness: float = 1.0

    def palette(self):
        rng = np.random.default_rng([self.seed, 1])
        hues = rng.permutation(12) / 12.0
        return {
            "floor": np.array([0.36, 0.36, 0.39]) + rng.uniform(-0.04, 0.04, 3),
            "stripes": [_hsv(h, 0.75, 0.85) for h in hues],
            "signs": [_hsv(h, 0.6, 0.95) for h in rng.permutation(12) / 12.0],
        }


@dataclass(frozen=True)
class Population:
    """Parked vehicles: one day's draw over the bays."""

    seed: int = 0
    occupancy: float = 0.6


def _hsv(h, s, v):
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def _fill(img, lab, x0, x1, y0, y1, color, label):
    r0, r1 = int(round(y0 * MAP_PPM)), int(round(y1 * MAP_PPM))
    c0, c1 = int(round(x0 * MAP_PPM)), int(round(x1 * MAP_PPM))
    r0, c0 = max(r0, 0), max(c0, 0)
    img[r0:r1, c0:c1] = color
    lab[r0:r1, c0:c1] = label


def _pillar_positions():
    pts = []
    for x0, x1, y0, y1, front in _ROWS:
        ya = y1 if front == "down" else y0
        xs = np.arange(x0, x1 + 1e-6, 3 * BAY_W)
        pts += [(x, ya) for x in xs]
    return pts


PILLARS = _pillar_positions()


@functools.lru_cache(maxsize=32)
def _structure_map(spec: SceneSpec):
    """World raster without vehicles: (rgb float HxWx3, label HxW)."""
    pal = spec.palette()
    h, w = int(WORLD_H * MAP_PPM), int(WORLD_W * MAP_PPM)
    yy, xx = np.mgrid[0:h, 0:w] / MAP_PPM
    shade = 1.0 + 0.10 * np.sin(xx / WORLD_W * np.pi * 1.3 + spec.seed) * np.cos(yy / WORLD_H * np.pi)
    img = pal["floor"][None, None, :] * shade[..., None]
    lab = np.full((h, w), FLOOR, np.uint8)
    white = np.array([0.88, 0.88, 0.85])
    for x, y0, y1, front in BAYS:
        _fill(img, lab, x - 0.15, x + 0.15, y0, y1, white, BAY_LINE)
        _fill(img, lab, x + BAY_W - 0.15, x + BAY_W + 0.15, y0, y1, white, BAY_LINE)
    # aisle dashes change colour every 6 m so long aisles are not self-similar
    for a, y in enumerate((8.75, 24.25)):
        for x in np.arange(3.0, 37.0, 2.0):
            c = pal["signs"][(int(x // 6) + 7 * a) % 12]
            _fill(img, lab, x, x + 1.2, y - 0.15, y + 0.15, c, AISLE_MARK)
    wall = np.array([0.55, 0.52, 0.47])
    _fill(img, lab, 0, WORLD_W, 0, 1.0, wall, WALL)
    _fill(img, lab, 0, WORLD_W, WORLD_H - 1.0, WORLD_H, wall, WALL)
    _fill(img, lab, 0, 1.0, 0, WORLD_H, wall, WALL)
    _fill(img, lab, WORLD_W - 1.0, WORLD_W, 0, WORLD_H, wall, WALL)
    # colour-coded wall stripes, one colour per 5 m segment
    k = 0
    for x in np.arange(0, WORLD_W, 5.0):
        c = pal["stripes"][k % 12]
        _fill(img, lab, x + 0.3, x + 4.7, 0.35, 0.75, c, WALL_STRIPE)
        _fill(img, lab, x + 0.3, x + 4.7, WORLD_H - 0.75, WORLD_H - 0.35, pal["stripes"][(k + 5) % 12], WALL_STRIPE)
        k += 1
    for y in np.arange(0, WORLD_H, 5.0):
        _fill(img, lab, 0.35, 0.75, y + 0.3, y + 4.7, pal["stripes"][k % 12], WALL_STRIPE)
        _fill(img, lab, WORLD_W - 0.75, WORLD_W - 0.35, y + 0.3, y + 4.7, pal["stripes"][(k + 3) % 12], WALL_STRIPE)
        k += 1
    return np.clip(img * spec.brightness, 0, 1), lab


def vehicle_patch(rng, length_px, width_px):
    """Top-down vehicle: (rgb float L x W x 3, alpha bool L x W), front at row 0."""
    hue = rng.uniform()
    body = _hsv(hue, rng.uniform(0.55, 0.95), rng.uniform(0.55, 0.95))
    if rng.uniform() < 0.2:
        body = np.full(3, rng.choice([0.08, 0.92]))
    patch = np.empty((length_px, width_px, 3))
    patch[:] = body
    glass = np.array([0.12, 0.14, 0.18])
    L, W = length_px, width_px
    patch[int(0.22 * L):int(0.36 * L), int(0.12 * W):W - int(0.12 * W)] = glass
    patch[int(0.72 * L):int(0.82 * L), int(0.15 * W):W - int(0.15 * W)] = glass
    patch[int(0.36 * L):int(0.72 * L), int(0.12 * W):W - int(0.12 * W)] = body * 0.8
    alpha = np.ones((L, W), bool)
    cut = max(1, W // 6)
    for r, c in [(0, 0), (0, W - 1), (L - 1, 0), (L - 1, W - 1)]:
        rr = slice(0, cut) if r == 0 else slice(L - cut, L)
        cc = slice(0, cut) if c == 0 else slice(W - cut, W)
        sub = np.add.outer(np.arange(cut)[::-1] if r == 0 else np.arange(cut),
                           np.arange(cut)[::-1] if c == 0 else np.arange(cut))
        alpha[rr, cc] &= sub < cut
    patch[~alpha] = 0.0
    return patch, alpha


@functools.lru_cache(maxsize=64)
def world_map(spec: SceneSpec, population: Population | None):
    """(rgb uint8, label uint8, instance int32) world rasters."""
    img, lab = _structure_map(spec)
    img, lab = img.copy(), lab.copy()
    inst = np.zeros(lab.shape, np.int32)
    if population is not None and population.occupancy > 0:
        rng = np.random.default_rng([population.seed, 7])
        occupied = rng.uniform(size=len(BAYS)) < population.occupancy
        for b, (x, y0, y1, front) in enumerate(BAYS):
            length = rng.uniform(4.0, 4.7)
            width = rng.uniform(1.75, 2.0)
            jx, jy = rng.uniform(-0.2, 0.2, 2)
            patch, alpha = vehicle_patch(rng, int(length * MAP_PPM), int(width * MAP_PPM))
            if not occupied[b]:
                continue
            if front == "up":
                patch, alpha = patch[::-1], alpha[::-1]
            cx, cy = x + BAY_W / 2 + jx, (y0 + y1) / 2 + jy * 0.5
            r0 = int(round((cy - length / 2) * MAP_PPM))
            c0 = int(round((cx - width / 2) * MAP_PPM))
            region = (slice(r0, r0 + alpha.shape[0]), slice(c0, c0 + alpha.shape[1]))
            img[region][alpha] = patch[alpha] * spec.brightness
            lab[region][alpha] = CAR
            inst[region][alpha] = b + 1
    # pillars and signs sit on top of vehicles (partial occlusion)
    pal = spec.palette()
    grey = np.array([0.72, 0.72, 0.72]) * spec.brightness
    for i, (px, py) in enumerate(PILLARS):
        _fill(img, lab, px - 0.6, px + 0.6, py - 0.6, py + 0.6, grey, PILLAR)
        c = pal["signs"][i % 12] * spec.brightness
        c2 = pal["stripes"][(i * 5 + 3) % 12] * spec.brightness
        _fill(img, lab, px - 0.5, px, py - 0.5, py + 0.5, c, SIGN)
        _fill(img, lab, px, px + 0.5, py - 0.5, py + 0.5, c2, SIGN)
    inst[lab != CAR] = 0
    rgb = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    for arr in (rgb, lab, inst):
        arr.setflags(write=False)
    return rgb, lab, inst


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    theta: float


def pose_is_valid(pose):
    return any(x0 <= pose.x <= x1 and y0 <= pose.y <= y1 for x0, x1, y0, y1 in DRIVABLE)


def sample_pose(rng):
    areas = np.array([(x1 - x0) * (y1 - y0) for x0, x1, y0, y1 in DRIVABLE])
    x0, x1, y0, y1 = DRIVABLE[rng.choice(len(DRIVABLE), p=areas / areas.sum())]
    theta = rng.uniform(-np.pi, np.pi)
    if theta == -np.pi:
        theta = np.pi
    return Pose(float(rng.uniform(x0, x1)), float(rng.uniform(y0, y1)), float(theta))


def drive_pose(rng, heading_sd=0.15):
    """Pose of a vehicle driving the aisles: heading along the aisle, either way, plus noise."""
    areas = np.array([(x1 - x0) * (y1 - y0) for x0, x1, y0, y1 in DRIVABLE])
    k = rng.choice(len(DRIVABLE), p=areas / areas.sum())
    x0, x1, y0, y1 = DRIVABLE[k]
    along = 0.0 if x1 - x0 > y1 - y0 else np.pi / 2
    theta = along + np.pi * rng.integers(2) + rng.normal(0.0, heading_sd)
    theta = np.pi - np.mod(np.pi - theta, 2 * np.pi)
    return Pose(float(rng.uniform(x0, x1)), float(rng.uniform(y0, y1)), float(theta))


def view_coords(pose, size):
    """Map (row, col) sampled by each view pixel; -1 where outside the world."""
    m_per_px = VIEW_M / size
    v, u = np.mgrid[0:size, 0:size]
    right = (u + 0.5 - size / 2) * m_per_px
    fwd = (size / 2 - (v + 0.5)) * m_per_px + VIEW_AHEAD
    c, s = np.cos(pose.theta), np.sin(pose.theta)
    wx = pose.x + fwd * c - right * s
    wy = pose.y + fwd * s + right * c
    rows = np.floor(wy * MAP_PPM).astype(np.int64)
    cols = np.floor(wx * MAP_PPM).astype(np.int64)
    h, w = int(WORLD_H * MAP_PPM), int(WORLD_W * MAP_PPM)
    inside = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    return np.where(inside, rows, -1), np.where(inside, cols, -1), inside


def render(spec, population, pose, size=48, check_pose=True):
    """Render one view: (rgb uint8 HxWx3, label uint8 HxW, instance int32 HxW)."""
    if check_pose and not pose_is_valid(pose):
        raise ValueError(f"pose outside the drivable region: {pose}")
    rgb_map, lab_map, inst_map = world_map(spec, population)
    rows, cols, inside = view_coords(pose, size)
    r, c = np.where(inside, rows, 0), np.where(inside, cols, 0)
    rgb = np.where(inside[..., None], rgb_map[r, c], np.uint8(20))
    lab = np.where(inside, lab_map[r, c], EXTERIOR).astype(np.uint8)
    inst = np.where(inside, inst_map[r, c], 0).astype(np.int32)
    return rgb.astype(np.uint8), lab, inst


# ----------------------------------------------------------------------------
# Corpus


@dataclass
class Corpus:
    """Images with per-class masks. ``masks[i]`` maps class id -> bool mask."""

    images: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    names: list = field(default_factory=list)
    splits: list = field(default_factory=list)

    def __len__(self):
        return len(self.images)

    def classes(self, i):
        return sorted(c for c, m in self.masks[i].items() if m.any())

    def subset(self, idx):
        idx = list(idx)
        return Corpus([self.images[i] for i in idx], [self.masks[i] for i in idx],
                      [self.names[i] for i in idx], [self.splits[i] for i in idx])

    def split(self, name):
        return self.subset(i for i, s in enumerate(self.splits) if s == name)


def generate_corpus(seed, count, size=48, structure_seeds=8, car_fraction=0.4, val_fraction=0.1):
    """Deterministic synthetic corpus of carpark views.

    ``car_fraction`` of the images come from populated worlds and contain at
    least one vehicle pixel; the rest come from empty worlds.
    """
    if size % 8:
        raise ValueError(f"image size {size} must be divisible by 8")
    if count < 0:
        raise ValueError("count must be >= 0")
    corpus = Corpus()
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        spec = SceneSpec(seed=int(rng.integers(structure_seeds)), brightness=float(rng.uniform(0.9, 1.05)))
        want_car = rng.uniform() < car_fraction
        for attempt in range(50):
            pose = sample_pose(rng)
            pop = Population(seed=int(rng.integers(1 << 30)), occupancy=float(rng.uniform(0.3, 0.9))) if want_car else None
            rgb, lab, _ = render(spec, pop, pose, size)
            has_car = bool((lab == CAR).any())
            if has_car == want_car:
                break
        corpus.images.append(rgb)
        corpus.masks.append({CAR: lab == CAR})
        corpus.names.append(f"{i:06d}")
        corpus.splits.append("val" if rng.uniform() < val_fraction else "train")
    return corpus


def partition(corpus, class_id):
    """Indices of images that contain ``class_id`` and of those that do not."""
    if class_id not in CLASS_NAMES and not any(class_id in m for m in corpus.masks):
        raise KeyError(f"unknown class id {class_id}")
    contains, lacks = [], []
    for i, m in enumerate(corpus.masks):
        (contains if class_id in m and m[class_id].any() else lacks).append(i)
    return contains, lacks


# ----------------------------------------------------------------------------
# Overlay


@dataclass
class DistractorSprite:
    class_id: int
    patch: np.ndarray  # uint8 h x w x 3
    alpha: np.ndarray  # bool h x w, tight to the opaque pixels

    def __post_init__(self):
        if not self.alpha.any():
            raise ValueError("sprite has no opaque pixel")
        if self.patch.shape[:2] != self.alpha.shape:
            raise ValueError("sprite patch and alpha differ in size")


@dataclass
class OverlaySample:
    x_clean: np.ndarray
    x_overlaid: np.ndarray
    mask: np.ndarray
    class_id: int
    seed: tuple = ()
    placements: tuple = ()  # (sprite, (rows, cols), (r0, c0)) per composited instance


@dataclass
class NaturalSample:
    image: np.ndarray
    mask: np.ndarray
    class_id: int


def extract_sprites(image, mask, class_id):
    """One sprite per connected component of ``mask``."""
    labels, n = ndimage.label(mask)
    sprites = []
    for k, sl in enumerate(ndimage.find_objects(labels), start=1):
        alpha = labels[sl] == k
        patch = np.where(alpha[..., None], image[sl], 0).astype(np.uint8)
        sprites.append(DistractorSprite(class_id, patch, alpha))
    return sprites


def procedural_sprite(rng, size=48):
    """A standalone vehicle sprite at random orientation (multiple of 90 deg)."""
    scale = size / VIEW_M
    patch, alpha = vehicle_patch(rng, max(3, int(rng.uniform(4.0, 4.7) * scale)),
                                 max(2, int(rng.uniform(1.75, 2.0) * scale)))
    k = int(rng.integers(4))
    patch, alpha = np.rot90(patch, k), np.rot90(alpha, k)
    return DistractorSprite(CAR, np.round(patch * 255).astype(np.uint8), alpha.copy())


def _resize_nearest(arr, shape):
    rows = (np.arange(shape[0]) * arr.shape[0] // shape[0])
    cols = (np.arange(shape[1]) * arr.shape[1] // shape[1])
    return arr[rows][:, cols]


def overlay(clean, sprite, rng, scale_range=(0.5, 1.5), scale=None, position=None):
    """Composite ``sprite`` onto ``clean`` at a uniform random position and scale.

    Returns ``(x_overlaid, mask)``; ``mask`` is exactly the opaque sprite pixels.
    """
    out, mask, _ = overlay_placed(clean, sprite, rng, scale_range, scale, position)
    return out, mask


def overlay_placed(clean, sprite, rng, scale_range=(0.5, 1.5), scale=None, position=None):
    """:func:`overlay` that also returns the placement ``((rows, cols), (r0, c0))``."""
    h, w = clean.shape[:2]
    sh, sw = sprite.alpha.shape
    if scale is None:
        lo, hi = scale_range
        fit = min(h / sh, w / sw)
        if lo * sh > h or lo * sw > w:
            raise ValueError(f"sprite {sh}x{sw} exceeds a {h}x{w} image at minimum scale {lo}")
        scale = rng.uniform(lo, min(hi, fit))
    th, tw = max(1, int(round(sh * scale))), max(1, int(round(sw * scale)))
    th, tw = min(th, h), min(tw, w)
    alpha = _resize_nearest(sprite.alpha, (th, tw))
    patch = _resize_nearest(sprite.patch, (th, tw))
    if position is None:
        position = (int(rng.integers(0, h - th + 1)), int(rng.integers(0, w - tw + 1)))
    r0, c0 = position
    mask = np.zeros((h, w), bool)
    mask[r0:r0 + th, c0:c0 + tw] = alpha
    out = clean.copy()
    out[mask] = patch[alpha]
    return out, mask, ((th, tw), (r0, c0))


def to_chw(images):
    """uint8 N x H x W x 3 (or list) -> float N x 3 x H x W in [0, 1]."""
    arr = np.asarray(images, dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2))


class OverlayStream:
    """Fresh overlay pairs for every (seed, step), plus natural samples.

    Donor sprites come from the images that contain the class; clean images
    from those that do not.
    """

    def __init__(self, corpus, class_id=CAR, natural_ratio=(1, 3), instances=1):
        self.corpus = corpus
        self.class_id = class_id
        self.contains, self.lacks = partition(corpus, class_id)
        if not self.lacks:
            raise ValueError("corpus has no image lacking the class; cannot build overlay pairs")
        self.natural_ratio = natural_ratio
        self.instances = instances
        self._sprites = {}

    def sprites(self, i):
        if i not in self._sprites:
            self._sprites[i] = extract_sprites(self.corpus.images[i], self.corpus.masks[i][self.class_id],
                                               self.class_id)
        return self._sprites[i]

    def split_counts(self, batch_size):
        a, b = self.natural_ratio
        n_nat = batch_size * a // (a + b) if self.contains and a else 0
        return n_nat, batch_size - n_nat

    def overlay_sample(self, rng, seed=()):
        clean = self.corpus.images[self.lacks[int(rng.integers(len(self.lacks)))]]
        out, mask = clean, np.zeros(clean.shape[:2], bool)
        placed = []
        for _ in range(self.instances):
            if self.contains:
                donor = self.contains[int(rng.integers(len(self.contains)))]
                sprs = self.sprites(donor)
                sprite = sprs[int(rng.integers(len(sprs)))]
            else:
                sprite = procedural_sprite(rng, clean.shape[0])
            out, m, where = overlay_placed(out, sprite, rng)
            mask |= m
            placed.append((sprite,) + where)
        # later instances may cover earlier ones; the pair still differs only under mask
        return OverlaySample(clean, out, mask, self.class_id, seed, tuple(placed))

    def batch(self, batch_size, seed, step):
        """``(overlay samples, natural samples)``; a pure function of (seed, step)."""
        rng = np.random.default_rng([seed, step, 0xB11D])
        n_nat, n_ov = self.split_counts(batch_size)
        ov = [self.overlay_sample(rng, (seed, step, j)) for j in range(n_ov)]
        nat = []
        for _ in range(n_nat):
            i = self.contains[int(rng.integers(len(self.contains)))]
            nat.append(NaturalSample(self.corpus.images[i], self.corpus.masks[i][self.class_id], self.class_id))
        return ov, nat


def next_training_batch(corpus, class_id, batch_size, seed, step, natural_ratio=(1, 3)):
    return OverlayStream(corpus, class_id, natural_ratio).batch(batch_size, seed, step)


def fixed_eval_pairs(corpus, count, seed, class_id=CAR):
    """A fixed set of overlay pairs (e.g. on the validation split)."""
    stream = OverlayStream(corpus, class_id)
    rng = np.random.default_rng([seed, 0xE7A1])
    return [stream.overlay_sample(rng, (seed, j)) for j in range(count)]


# ----------------------------------------------------------------------------
# PPM / PGM and directory corpora


def write_ppm(path, rgb):
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w = rgb.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(rgb.tobytes())


def write_pgm(path, gray):
    gray = np.ascontiguousarray(gray, dtype=np.uint8)
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(gray.tobytes())


def _read_netpbm(path, magic, channels):
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated header")
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} file, found {tokens[0][:2]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit files are supported")
    n = w * h * channels
    if len(data) - pos < n:
        raise ValueError(f"{path}: truncated pixel data")
    arr = np.frombuffer(data, np.uint8, n, pos)
    return arr.reshape((h, w, channels) if channels > 1 else (h, w)).copy()


def read_ppm(path):
    return _read_netpbm(path, b"P6", 3)


def read_pgm(path):
    return _read_netpbm(path, b"P5", 1)


class CorpusError(ValueError):
    pass


class MissingMaskError(CorpusError):
    pass


class MaskSizeError(CorpusError):
    pass


class UnreadableFileError(CorpusError):
    pass


class NonBinaryMaskError(CorpusError):
    pass


def export_corpus(corpus, out):
    """Write ``images/<name>.ppm``, ``masks/<name>.<class>.pgm`` and ``manifest.txt``."""
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, name in enumerate(corpus.names):
        write_ppm(out / "images" / f"{name}.ppm", corpus.images[i])
        for cid, m in sorted(corpus.masks[i].items()):
            write_pgm(out / "masks" / f"{name}.{CLASS_NAMES.get(cid, cid)}.pgm", m.astype(np.uint8) * 255)
        classes = ",".join(CLASS_NAMES.get(c, str(c)) for c in corpus.classes(i)) or "-"
        lines.append(f"{name}.ppm {classes} {corpus.splits[i]}\n")
    (out / "manifest.txt").write_text("".join(lines))


def import_external(path):
    """Load a corpus directory.

    Layout: ``images/<name>.ppm`` plus ``masks/<name>.<class>.pgm`` (0/255)
    for each annotated class. If ``manifest.txt`` exists it lists
    ``<name>.ppm <classes> <split>`` per line and fixes the order; otherwise
    every image is used, sorted by name, with split ``train``.
    """
    path = Path(path)
    img_dir, mask_dir = path / "images", path / "masks"
    corpus = Corpus()
    manifest = path / "manifest.txt"
    if manifest.exists():
        entries = []
        for line in manifest.read_text().splitlines():
            if line.strip():
                fname, classes, split = line.split()
                entries.append((fname, [] if classes == "-" else classes.split(","), split))
    else:
        files = sorted(p.name for p in img_dir.glob("*.ppm")) if img_dir.is_dir() else []
        entries = [(f, None, "train") for f in files]
    if not entries:
        log.warning("no images found under %s; corpus is empty", path)
        return corpus
    for fname, classes, split in entries:
        name = fname.rsplit(".", 1)[0]
        try:
            img = read_ppm(img_dir / fname)
        except (OSError, ValueError) as exc:
            raise UnreadableFileError(f"cannot read image {img_dir / fname}: {exc}") from exc
        masks = {}
        mask_files = sorted(mask_dir.glob(f"{name}.*.pgm")) if mask_dir.is_dir() else []
        for mf in mask_files:
            cname = mf.name[len(name) + 1:-4]
            cid = CLASS_IDS.get(cname, int(cname) if cname.isdigit() else None)
            if cid is None:
                raise CorpusError(f"{mf}: unknown class name {cname!r}")
            try:
                m = read_pgm(mf)
            except (OSError, ValueError) as exc:
                raise UnreadableFileError(f"cannot read mask {mf}: {exc}") from exc
            if m.shape != img.shape[:2]:
                raise MaskSizeError(f"{mf}: mask is {m.shape[1]}x{m.shape[0]}, image is {img.shape[1]}x{img.shape[0]}")
            if not np.isin(m, (0, 255)).all():
                raise NonBinaryMaskError(f"{mf}: mask values must be 0 or 255")
            masks[cid] = m == 255
        for cname in classes or []:
            if CLASS_IDS.get(cname, None) not in masks:
                raise MissingMaskError(f"{name}: manifest lists class {cname!r} but masks/{name}.{cname}.pgm is missing")
        corpus.images.append(img)
        corpus.masks.append(masks)
        corpus.names.append(name)
        corpus.splits.append(split)
    return corpus

