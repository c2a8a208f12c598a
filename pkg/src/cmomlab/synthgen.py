"""Deterministic two-domain "moving shapes" video benchmark.

Every clip is a scrolling scene: two stuff layers (background and a road
band) painted in world coordinates, plus a z-ordered stack of thing objects.
Stationary posts ride with the camera scroll; movable shapes carry their own
integer image-space velocity. Labels and flow are exact, and the two domains
differ only in how the same geometry is rendered (palette, gamma, noise), plus
whatever class-frequency skew the target ``WorldSpec`` asks for.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .core import save_array

CLASS_NAMES = ("background", "road", "box", "disk", "diamond", "post_thin", "post_mid", "post_wide")
STUFF = (0, 1)
THINGS = (2, 3, 4, 5, 6, 7)
MOVABLE = (2, 3, 4)
STATIONARY = (0, 1, 5, 6, 7)
CATEGORIES = {
    "stuff": list(STUFF),
    "thing": list(THINGS),
    "movable": list(MOVABLE),
    "stationary": list(STATIONARY),
}


@dataclass(frozen=True)
class WorldSpec:
    num_classes: int = 8
    clip_length: int = 4
    height: int = 64
    width: int = 64
    scroll_velocity: tuple = (1, 0)
    object_velocity_range: tuple = (-2, 2)
    # spawn weights per class id; stuff entries are ignored
    rarity_weights: tuple = (0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    objects_per_clip: tuple = (4, 7)
    seed: int = 0

    def __post_init__(self):
        if self.clip_length < 2:
            raise ValueError("clip_length must be >= 2")
        if self.num_classes != len(CLASS_NAMES):
            raise ValueError(f"the shapes world has exactly {len(CLASS_NAMES)} classes")
        if len(self.rarity_weights) != self.num_classes:
            raise ValueError("rarity_weights needs one entry per class")
        vals = tuple(self.scroll_velocity) + tuple(self.object_velocity_range)
        if any(int(v) != v for v in vals):
            raise ValueError("velocities must be integers")


@dataclass(frozen=True)
class DomainStyle:
    # one RGB triple per class, values in [0, 1]
    palette: tuple
    noise_sigma: float = 0.0
    gamma: float = 1.0
    # amplitude of the per-object brightness jitter and background texture
    jitter: float = 0.06

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


@dataclass
class ClipSample:
    frames: np.ndarray  # (T, H, W, 3) float32
    labels: np.ndarray  # (T, H, W) uint8
    flows: np.ndarray  # (T-1, H, W, 2) float32, flows[i] = flow from frame i to i+1
    domain: str = "source"
    # index of the topmost object per pixel, -1 for the stuff layers
    layers: np.ndarray = field(default=None, repr=False)


# The three posts differ in width and only slightly in tint, so the thin one
# is hard to learn from appearance alone.
SOURCE_PALETTE = (
    (0.30, 0.55, 0.30),
    (0.45, 0.45, 0.50),
    (0.85, 0.20, 0.20),
    (0.20, 0.30, 0.85),
    (0.90, 0.80, 0.15),
    (0.80, 0.80, 0.80),
    (0.85, 0.70, 0.70),
    (0.70, 0.70, 0.85),
)

# Target palette: things keep their colors, the stuff layers they sit on do
# not. The shift lives in the context around objects.
TARGET_PALETTE = (
    (0.50, 0.50, 0.30),
    (0.35, 0.38, 0.48),
) + SOURCE_PALETTE[2:]


def default_styles():
    """Source and target rendering styles of the desk benchmark."""
    source = DomainStyle(palette=SOURCE_PALETTE, noise_sigma=0.03, gamma=1.0)
    target = DomainStyle(palette=TARGET_PALETTE, noise_sigma=0.08, gamma=1.1)
    return source, target


def target_world(spec):
    """Target ``WorldSpec``: same geometry, rarer mid and wide posts."""
    w = list(spec.rarity_weights)
    w[6] *= 0.15
    w[7] *= 0.5
    return replace(spec, rarity_weights=tuple(w))


def _template(cls, rng):
    """Boolean footprint for one object of class ``cls``."""
    if cls == 2:
        h, w = rng.integers(7, 12, size=2)
        return np.ones((h, w), bool)
    if cls == 3:
        r = int(rng.integers(3, 6))
        yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
        return xx * xx + yy * yy <= r * r + r
    if cls == 4:
        r = int(rng.integers(4, 7))
        yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
        return np.abs(xx) + np.abs(yy) <= r
    width = {5: 2, 6: 4, 7: 6}[cls]
    h = int(rng.integers(14, 26))
    return np.ones((h, width), bool)


def _max_template_extent():
    return 26


def _road_rows(height, rng):
    top = int(rng.integers(height // 2, height - height // 4))
    return top, top + int(rng.integers(height // 8, height // 5 + 1))


def generate_clip(spec, style, clip_index, domain="source"):
    """Render clip ``clip_index`` of the world described by ``spec``.

    Geometry (labels, flows, layers) depends only on ``(spec, clip_index)``;
    ``style`` only affects the frames.
    """
    H, W, T = spec.height, spec.width, spec.clip_length
    if min(H, W) < _max_template_extent() + 2:
        raise ValueError(f"canvas {H}x{W} too small for object templates")
    geo = np.random.default_rng([spec.seed, clip_index, 0])
    sx, sy = (int(v) for v in spec.scroll_velocity)
    vlo, vhi = (int(v) for v in spec.object_velocity_range)

    road = _road_rows(H, geo)
    weights = np.array(spec.rarity_weights, float)
    weights[list(STUFF)] = 0.0
    n_obj = int(geo.integers(spec.objects_per_clip[0], spec.objects_per_clip[1] + 1))
    objects = []
    for _ in range(n_obj):
        cls = int(geo.choice(spec.num_classes, p=weights / weights.sum()))
        tmpl = _template(cls, geo)
        th, tw = tmpl.shape
        if cls in MOVABLE:
            vel = (int(geo.integers(vlo, vhi + 1)), int(geo.integers(vlo, vhi + 1)))
            y0 = int(geo.integers(0, H - th + 1))
        else:
            vel = (sx, sy)
            # posts stand on the road band
            y0 = int(np.clip(road[1] - th, 0, H - th))
        x0 = int(geo.integers(-tw // 2, W - tw // 2))
        tint = geo.uniform(-1.0, 1.0, size=3)
        objects.append((cls, tmpl, x0, y0, vel, tint))
    bg_phase = geo.uniform(0, 2 * np.pi, size=2)

    labels = np.zeros((T, H, W), np.uint8)
    layers = np.full((T, H, W), -1, np.int16)
    flows = np.zeros((T - 1, H, W, 2), np.float32)
    tints = np.zeros((T, H, W, 3), np.float32)
    yy, xx = np.mgrid[0:H, 0:W]
    for t in range(T):
        wy = yy - t * sy
        lab = np.where((wy >= road[0]) & (wy < road[1]), 1, 0).astype(np.uint8)
        wx = xx - t * sx
        tex = np.sin(wx * 0.35 + bg_phase[0]) * np.cos(wy * 0.27 + bg_phase[1])
        tints[t] = tex[..., None]
        lay = layers[t]
        for k, (cls, tmpl, x0, y0, vel, tint) in enumerate(objects):
            th, tw = tmpl.shape
            ox, oy = x0 + t * vel[0], y0 + t * vel[1]
            ys, xs = np.nonzero(tmpl)
            ys, xs = ys + oy, xs + ox
            keep = (ys >= 0) & (ys < H) & (xs >= 0) & (xs < W)
            ys, xs = ys[keep], xs[keep]
            lab[ys, xs] = cls
            lay[ys, xs] = k
            tints[t, ys, xs] = tint
        labels[t] = lab
        if t > 0:
            f = flows[t - 1]
            f[..., 0] = sx
            f[..., 1] = sy
            top = lay >= 0
            for k in np.unique(lay[top]):
                vel = objects[k][4]
                sel = lay == k
                f[sel, 0] = vel[0]
                f[sel, 1] = vel[1]

    frames = render(labels, tints, style, np.random.default_rng([spec.seed, clip_index, 1]))
    return ClipSample(frames=frames, labels=labels, flows=flows, domain=domain, layers=layers)


def render(labels, tints, style, noise_rng):
    """Turn label maps plus per-pixel tint fields into frames for one style.

    The noise draws come from ``noise_rng`` before scaling, so two styles
    rendered from the same seed see the same noise pattern.
    """
    palette = np.asarray(style.palette, np.float32)
    base = palette[labels] + style.jitter * tints
    base = np.clip(base, 0.0, 1.0) ** style.gamma
    noise = noise_rng.standard_normal(base.shape).astype(np.float32)
    return np.clip(base + style.noise_sigma * noise, 0.0, 1.0).astype(np.float32)


def _write_clip(clip_dir, clip, with_flow=True):
    os.makedirs(clip_dir, exist_ok=True)
    for t in range(clip.frames.shape[0]):
        save_array(os.path.join(clip_dir, f"frame_{t:02d}.cmt"), clip.frames[t])
        save_array(os.path.join(clip_dir, f"label_{t:02d}.cmt"), clip.labels[t])
        if t > 0 and with_flow:
            save_array(os.path.join(clip_dir, f"flow_{t:02d}.cmt"), clip.flows[t - 1])


def generate_dataset(spec, source_style, target_style, n_source, n_target, root,
                     n_eval=0, target_spec=None):
    """Write a two-domain dataset under ``root``.

    Source clips use indices ``0..n_source-1``. Target training clips use the
    next ``n_target`` indices and evaluation clips the ``n_eval`` after that,
    rendered with ``target_spec`` (defaults to ``spec``). Target training
    labels are written to disk but listed as forbidden in
    ``target/manifest.json``.
    """
    target_spec = spec if target_spec is None else target_spec
    os.makedirs(os.path.join(root, "source"), exist_ok=True)
    os.makedirs(os.path.join(root, "target"), exist_ok=True)
    for i in range(n_source):
        clip = generate_clip(spec, source_style, i, "source")
        _write_clip(os.path.join(root, "source", f"clip_{i:04d}"), clip)
    train_ids, eval_ids = [], []
    for j in range(n_target + n_eval):
        clip = generate_clip(target_spec, target_style, n_source + j, "target")
        _write_clip(os.path.join(root, "target", f"clip_{j:04d}"), clip)
        (train_ids if j < n_target else eval_ids).append(j)
    manifest = {"train": train_ids, "eval": eval_ids, "forbidden_labels": train_ids}
    with open(os.path.join(root, "target", "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    meta = {
        "height": spec.height,
        "width": spec.width,
        "num_classes": spec.num_classes,
        "num_frames": spec.clip_length,
        "seed": spec.seed,
        "class_names": list(CLASS_NAMES),
        "categories": CATEGORIES,
        "n_source": n_source,
        "n_target": n_target,
        "n_eval": n_eval,
        "world": asdict(spec),
        "target_world": asdict(target_spec),
    }
    with open(os.path.join(root, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
