"""Procedural road videos with ground-truth lanes.

All randomness comes from numpy's PCG64 bit generator seeded with
``SceneConfig.seed`` (``np.random.Generator(np.random.PCG64(seed))``), so a
seed reproduces a sequence bit for bit.

Camera model: a pinhole over a flat road. Image row ``y`` below the horizon
``y_h`` sees depth ``d = D / (y - y_h)`` (``D`` chosen so the bottom row has
depth ~1) and a road point at lateral offset ``X`` (in lane widths) projects to
``x = cx + kappa * (y - y_h) * X``. Each marking follows the cubic
``X(d) = offset - ego + heading*d + curv*d^2 + curv3*d^3``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Lane, raster_thin

HORIZON = 0.30  # horizon row, fraction of image height
TOP_ROW = 0.40  # first annotated row, fraction of image height
BOTTOM_SPACING = 0.22  # lane width at the bottom row, fraction of image width
N_ROWS = 36
LINE_OFFSETS = np.arange(-3, 3) + 0.5  # world markings, lane widths from the road centre
LANE_CHANGE_FRAMES = 12
DASH_PERIOD = 1.2  # depth units
MARK_WIDTH = 0.10  # lane widths

# per-frame rate limits, each multiplied by ego_speed (curvature ones also by the amplitude)
RATE_LATERAL = 0.06
RATE_HEADING = 0.04
RATE_CURV = 0.10
RATE_CURV3 = 0.01


class DatasetError(Exception):
    pass


@dataclass
class SceneConfig:
    seed: int = 0
    frames: int = 20
    height: int = 192
    width: int = 320
    min_lanes: int = 2
    max_lanes: int = 4
    curvature: float = 0.03
    ego_speed: float = 0.25
    occlusion_prob: float = 0.15
    dash_duty: float = 0.5
    lane_change_prob: float = 0.02
    noise: float = 0.03
    glare_prob: float = 0.05

    def __post_init__(self):
        if self.frames < 1:
            raise ValueError("frames must be >= 1")
        if not (1 <= self.min_lanes <= self.max_lanes <= 4):
            raise ValueError(f"lane count range must sit inside [1, 4], got [{self.min_lanes}, {self.max_lanes}]")
        if self.height < 16 or self.width < 16:
            raise ValueError("image too small")
        for name in ("occlusion_prob", "lane_change_prob", "glare_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must be a probability")
        if not 0 < self.dash_duty <= 1:
            raise ValueError("dash_duty must lie in (0, 1]")
        if self.curvature < 0 or self.ego_speed < 0 or self.noise < 0:
            raise ValueError("curvature, ego_speed and noise must be nonnegative")


@dataclass
class SyntheticSequence:
    pixels: np.ndarray  # T x H x W x 3 uint8
    gt: list[list[Lane]]
    lane_change: list[bool]
    config: SceneConfig
    rows: np.ndarray = field(default=None)

    @property
    def frames(self) -> np.ndarray:
        return self.pixels.astype(np.float64) / 255.0

    def frame(self, t: int) -> np.ndarray:
        return self.pixels[t].astype(np.float64) / 255.0

    def __len__(self) -> int:
        return len(self.pixels)


@dataclass
class Camera:
    height: int
    width: int

    @property
    def y_h(self) -> float:
        return HORIZON * self.height

    @property
    def depth_scale(self) -> float:
        return self.height - 1 - self.y_h

    @property
    def kappa(self) -> float:
        return BOTTOM_SPACING * self.width / self.depth_scale

    def sample_rows(self) -> np.ndarray:
        return np.linspace(TOP_ROW * self.height, self.height - 1, N_ROWS)

    def depth(self, y):
        return self.depth_scale / (np.asarray(y, dtype=np.float64) - self.y_h)

    def project(self, y, lateral):
        return self.width / 2.0 + self.kappa * (np.asarray(y, dtype=np.float64) - self.y_h) * lateral


def displacement_bound(cfg: SceneConfig) -> float:
    """Largest per-frame image-x change of any annotated point outside lane changes."""
    cam = Camera(cfg.height, cfg.width)
    y = cam.sample_rows()
    d = cam.depth(y)
    s = cfg.ego_speed
    lateral = (RATE_LATERAL * s + RATE_HEADING * s * d + RATE_CURV * s * cfg.curvature * d ** 2
               + RATE_CURV3 * s * cfg.curvature * d ** 3)
    return float(np.max(cam.kappa * (y - cam.y_h) * lateral))


class _Road:
    """Slowly varying road geometry; every parameter moves toward a target at a bounded rate."""

    def __init__(self, cfg: SceneConfig, rng: np.random.Generator):
        self.cfg, self.rng = cfg, rng
        c = cfg.curvature
        self.ego = rng.uniform(-0.15, 0.15)
        self.heading = rng.uniform(-0.06, 0.06)
        self.curv = rng.uniform(-c, c)
        self.curv3 = rng.uniform(-0.1 * c, 0.1 * c)
        self._new_targets()
        self.change_left = 0
        self.change_dir = 0

    def _new_targets(self):
        c = self.cfg.curvature
        self.t_ego = self.rng.uniform(-0.2, 0.2)
        self.t_heading = self.rng.uniform(-0.06, 0.06)
        self.t_curv = self.rng.uniform(-c, c)
        self.t_curv3 = self.rng.uniform(-0.1 * c, 0.1 * c)

    def advance(self) -> bool:
        """Move one frame; returns True if a lane change moved the ego this frame."""
        cfg, rng, s = self.cfg, self.rng, self.cfg.ego_speed
        if rng.random() < 0.1:
            self._new_targets()

        def toward(v, target, rate):
            return v + float(np.clip(target - v, -rate, rate))

        self.heading = toward(self.heading, self.t_heading, RATE_HEADING * s)
        self.curv = toward(self.curv, self.t_curv, RATE_CURV * s * cfg.curvature)
        self.curv3 = toward(self.curv3, self.t_curv3, RATE_CURV3 * s * cfg.curvature)
        if self.change_left == 0 and rng.random() < cfg.lane_change_prob:
            self.change_dir = -1 if self.ego > 0.5 else 1 if self.ego < -0.5 else int(rng.choice([-1, 1]))
            self.change_left = LANE_CHANGE_FRAMES
        if self.change_left > 0:
            self.ego += self.change_dir / LANE_CHANGE_FRAMES
            self.t_ego += self.change_dir / LANE_CHANGE_FRAMES
            self.change_left -= 1
            return True
        self.ego = toward(self.ego, self.t_ego, RATE_LATERAL * s)
        return False

    def lateral(self, offset: float, d):
        return offset - self.ego + self.heading * d + self.curv * d ** 2 + self.curv3 * d ** 3


def _select_lines(road: _Road, cam: Camera, n: int):
    rows = cam.sample_rows()
    d = cam.depth(rows)
    chosen = []
    for k in sorted(range(len(LINE_OFFSETS)), key=lambda k: (abs(LINE_OFFSETS[k] - road.ego), k)):
        xs = cam.project(rows, road.lateral(LINE_OFFSETS[k], d))
        if xs.min() >= 0 and xs.max() <= cam.width - 1:
            chosen.append((k, xs))
        if len(chosen) == n:
            break
    chosen.sort(key=lambda item: item[1][-1])
    return [Lane(np.stack([xs, rows], axis=1), lane_id=k) for k, xs in chosen]


def _render(road: _Road, cam: Camera, lanes: list[Lane], style: dict, occluders: list, glare, dash_phase: float,
            cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    h, w = cam.height, cam.width
    img = np.empty((h, w, 3))
    yy = np.arange(h, dtype=np.float64)
    sky = np.clip(style["sky"][None, :] + 0.15 * (1 - yy[:, None] / max(cam.y_h, 1)), 0, 1)
    img[:] = sky[:, None, :]
    horizon_row = int(np.ceil(cam.y_h))
    img[horizon_row:] = style["road"]

    # markings: thin gt raster widened per row, gated by the dash pattern in depth
    top = int(np.ceil(TOP_ROW * h))
    depth_rows = np.full(h, 1e9)  # rows above the horizon are never painted
    depth_rows[horizon_row + 1:] = cam.depth(yy[horizon_row + 1:])
    for lane in lanes:
        dashed, colour = style["lines"][lane.lane_id]
        on = np.ones(h, dtype=bool)
        if dashed:
            on = np.mod(depth_rows + dash_phase, DASH_PERIOD) < cfg.dash_duty * DASH_PERIOD
        thin = raster_thin(lane, h, w)
        half = np.maximum(0, np.round(0.5 * MARK_WIDTH * cam.kappa * (yy - cam.y_h))).astype(int)
        for y in range(top, h):
            if not on[y]:
                continue
            cols = np.nonzero(thin[y])[0]
            if cols.size == 0:
                continue
            lo, hi = max(cols.min() - half[y], 0), min(cols.max() + half[y], w - 1)
            img[y, lo:hi + 1] = colour
        # the far stretch up to the horizon is drawn but never annotated
        far = np.arange(horizon_row + 2, top)
        if far.size:
            xs = cam.project(far, road.lateral(LINE_OFFSETS[lane.lane_id], cam.depth(far)))
            for y, x in zip(far, xs):
                xi = int(np.floor(x + 0.5))
                if on[y] and 0 <= xi < w:
                    img[y, xi] = colour

    for occ in occluders:
        yb = cam.y_h + cam.depth_scale / occ["depth"]
        scale = cam.kappa * (yb - cam.y_h)
        xc = cam.project(yb, occ["lateral"])
        half_w, tall = 0.45 * scale, 0.7 * scale
        x0, x1 = int(max(xc - half_w, 0)), int(min(xc + half_w, w - 1))
        y0, y1 = int(max(yb - tall, 0)), int(min(yb, h - 1))
        if x0 <= x1 and y0 <= y1:
            img[y0:y1 + 1, x0:x1 + 1] = occ["colour"]

    if glare is not None:
        gy, gx, sigma, amp = glare
        r2 = (yy[:, None] - gy) ** 2 + (np.arange(w)[None, :] - gx) ** 2
        img += amp * np.exp(-r2 / (2 * sigma ** 2))[:, :, None]
    if cfg.noise > 0:
        img += rng.normal(0.0, cfg.noise, img.shape)
    return np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def generate(cfg: SceneConfig) -> SyntheticSequence:
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    cam = Camera(cfg.height, cfg.width)
    road = _Road(cfg, rng)
    n_lanes = int(rng.integers(cfg.min_lanes, cfg.max_lanes + 1))
    style = {
        "sky": np.array([0.55, 0.65, 0.85]) + rng.uniform(-0.1, 0.1, 3),
        "road": np.full(3, rng.uniform(0.25, 0.45)) + rng.uniform(-0.03, 0.03, 3),
        "lines": {k: (bool(rng.random() < 0.6),
                      np.array([0.95, 0.85, 0.25]) if rng.random() < 0.2 else np.array([0.95, 0.95, 0.92]))
                  for k in range(len(LINE_OFFSETS))},
    }
    dash_phase = rng.uniform(0, DASH_PERIOD)
    occluders: list[dict] = []
    glare_left, glare = 0, None
    pixels, gts, changes = [], [], []
    for t in range(cfg.frames):
        changed = road.advance() if t > 0 else False
        dash_phase += cfg.ego_speed
        occluders = [dict(o, depth=o["depth"] + o["speed"], life=o["life"] - 1) for o in occluders if o["life"] > 1]
        occluders = [o for o in occluders if 0.9 < o["depth"] < 8.0]
        if rng.random() < cfg.occlusion_prob:
            occluders.append({"depth": rng.uniform(1.1, 4.0), "lateral": rng.uniform(-1.6, 1.6),
                              "speed": rng.uniform(-0.08, 0.08), "life": int(rng.integers(3, 10)),
                              "colour": rng.uniform(0.0, 0.6, 3)})
        if glare_left > 0:
            glare_left -= 1
        elif rng.random() < cfg.glare_prob:
            glare_left = int(rng.integers(2, 6))
            glare = (rng.uniform(cam.y_h, cfg.height * 0.7), rng.uniform(0, cfg.width),
                     rng.uniform(0.12, 0.25) * cfg.width, rng.uniform(0.5, 0.9))
        lanes = _select_lines(road, cam, n_lanes)
        pixels.append(_render(road, cam, lanes, style, occluders, glare if glare_left > 0 else None,
                              dash_phase, cfg, rng))
        gts.append(lanes)
        changes.append(changed)
    return SyntheticSequence(np.stack(pixels), gts, changes, cfg, cam.sample_rows())


def generate_dataset(n: int, base: SceneConfig, seed: int) -> list[SyntheticSequence]:
    """``n`` sequences whose seeds derive from ``seed`` (sequence i uses seed * 100003 + i)."""
    out = []
    for i in range(n):
        cfg = SceneConfig(**{**asdict(base), "seed": seed * 100003 + i})
        out.append(generate(cfg))
    return out


# ---------------------------------------------------------------- dataset directory format

def _annotations(seq: SyntheticSequence) -> dict:
    h, w = seq.config.height, seq.config.width
    frames = []
    for t, lanes in enumerate(seq.gt):
        frames.append({
            "index": t,
            "lane_change": bool(seq.lane_change[t]),
            "lanes": [{"id": int(l.lane_id), "points": [[float(x) / w, float(y) / h] for x, y in l.points]}
                      for l in lanes],
        })
    return {"format": 1, "height": h, "width": w, "frames": frames}


def annotations_checksum(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def export(seq: SyntheticSequence, directory) -> Path:
    root = Path(directory)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    for t, px in enumerate(seq.pixels):
        Image.fromarray(px, mode="RGB").save(root / "frames" / f"{t:05d}.ppm", format="PPM")
    ann = root / "annotations.json"
    ann.write_text(json.dumps(_annotations(seq), indent=1) + "\n", encoding="utf-8")
    meta = {"scene_config": asdict(seq.config), "frames": len(seq), "annotations_sha256": annotations_checksum(ann)}
    (root / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return root


def load(directory) -> SyntheticSequence:
    """Inverse of :func:`export`."""
    root = Path(directory)
    try:
        meta = json.loads((root / "meta.json").read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise DatasetError(f"{root}: missing meta.json") from e
    except json.JSONDecodeError as e:
        raise DatasetError(f"meta.json line {e.lineno}: {e.msg}") from e
    ann_path = root / "annotations.json"
    if not ann_path.exists():
        raise DatasetError(f"{root}: missing annotations.json")
    expected = meta.get("annotations_sha256")
    if expected is not None and annotations_checksum(ann_path) != expected:
        raise DatasetError(f"{ann_path}: checksum does not match meta.json")
    text = ann_path.read_text(encoding="utf-8")
    try:
        ann = json.loads(text)
    except json.JSONDecodeError as e:
        raise DatasetError(f"annotations.json line {e.lineno}: {e.msg}") from e
    cfg = SceneConfig(**meta["scene_config"])
    h, w = ann["height"], ann["width"]
    pixels, gts, changes = [], [], []
    for t in range(meta["frames"]):
        fp = root / "frames" / f"{t:05d}.ppm"
        if not fp.exists():
            raise DatasetError(f"missing frame file for frame {t}: {fp}")
        with Image.open(fp) as im:
            px = np.asarray(im.convert("RGB"), dtype=np.uint8)
        if px.shape != (h, w, 3):
            raise DatasetError(f"frame {t} has shape {px.shape}, expected {(h, w, 3)}")
        pixels.append(px)
    if len(ann["frames"]) != meta["frames"]:
        raise DatasetError(f"annotations list {len(ann['frames'])} frames, meta says {meta['frames']}")
    for fr in ann["frames"]:
        try:
            lanes = [Lane(np.array(l["points"], dtype=np.float64) * [w, h], lane_id=l["id"]) for l in fr["lanes"]]
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetError(f"annotations.json: malformed lane in frame {fr.get('index')}: {e}") from e
        gts.append(lanes)
        changes.append(bool(fr.get("lane_change", False)))
    rows = gts[0][0].ys.copy() if gts and gts[0] else Camera(h, w).sample_rows()
    return SyntheticSequence(np.stack(pixels), gts, changes, cfg, rows)
