"""Synthetic glyph scenes: rendering, ground truth, and the scene text format.

A glyph is the stand-in face: a bright disc with two dark eye discs and a
dark mouth bar, drawn over noise. All geometry is parametric in the side
length, so glyphs at different sizes are scaled copies of each other.
Every face in a scene is rendered with the scene seed, so equal-sided faces
are pixel-identical duplicates.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

BACKGROUND_RANGE = (96, 160)   # uniform integer noise, exclusive high
FACE_RANGE = (196, 228)
FEATURE_RANGE = (28, 60)

MIN_GLYPH_SIDE = 8


@dataclass(frozen=True)
class Face:
    cx: int
    cy: int
    side: int

    @property
    def box(self):
        """(cx, cy, side) with the rasterized box center."""
        left = self.cx - self.side // 2
        top = self.cy - self.side // 2
        return (left + self.side / 2.0, top + self.side / 2.0, float(self.side))


@dataclass
class SceneSpec:
    """Ground truth for one synthetic image."""

    size: tuple  # (height, width)
    seed: int
    faces: list = field(default_factory=list)

    def validate(self):
        h, w = self.size
        if h % 4 or w % 4:
            raise ConfigurationError(f"scene size {w}x{h} must be a multiple of 4")
        for f in self.faces:
            left = f.cx - f.side // 2
            top = f.cy - f.side // 2
            if left < 0 or top < 0 or left + f.side > w or top + f.side > h:
                raise ConfigurationError(
                    f"face at ({f.cx},{f.cy}) side {f.side} escapes {w}x{h} image"
                )


def glyph_geometry(side):
    """Parametric feature geometry (pixel units) for a glyph of the given side."""
    return {
        "face_radius": 0.45 * side,
        "eye_offset_x": 0.16 * side,
        "eye_offset_y": 0.12 * side,
        "eye_radius": max(0.08 * side, 0.7),
        "mouth_offset_y": 0.20 * side,
        "mouth_half_w": 0.22 * side,
        "mouth_half_h": max(0.05 * side, 0.6),
    }


def render_glyph(side, seed):
    """Render one glyph patch. Identical (side, seed) gives identical pixels."""
    side = int(side)
    if side < MIN_GLYPH_SIDE:
        raise ConfigurationError(f"glyph side {side} is below the minimum {MIN_GLYPH_SIDE}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), side]))
    geo = glyph_geometry(side)
    patch = rng.integers(*BACKGROUND_RANGE, size=(side, side)).astype(np.float64)
    yy, xx = np.mgrid[0:side, 0:side]
    yy = yy + 0.5 - side / 2.0
    xx = xx + 0.5 - side / 2.0
    face = xx * xx + yy * yy <= geo["face_radius"] ** 2
    patch[face] = rng.integers(*FACE_RANGE, size=int(face.sum()))
    for ex in (-geo["eye_offset_x"], geo["eye_offset_x"]):
        eye = (xx - ex) ** 2 + (yy + geo["eye_offset_y"]) ** 2 <= geo["eye_radius"] ** 2
        patch[eye] = rng.integers(*FEATURE_RANGE, size=int(eye.sum()))
    mouth = (np.abs(xx) <= geo["mouth_half_w"]) & (
        np.abs(yy - geo["mouth_offset_y"]) <= geo["mouth_half_h"]
    )
    patch[mouth] = rng.integers(*FEATURE_RANGE, size=int(mouth.sum()))
    return patch


def render_scene(spec):
    """Rasterize a SceneSpec into a float64 (H, W) image with integer values."""
    spec.validate()
    h, w = spec.size
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), 0xB6]))
    img = rng.integers(*BACKGROUND_RANGE, size=(h, w)).astype(np.float64)
    for f in spec.faces:
        patch = render_glyph(f.side, spec.seed)
        top = f.cy - f.side // 2
        left = f.cx - f.side // 2
        img[top:top + f.side, left:left + f.side] = patch
    return img


def random_scenes(count, seed, size=(96, 96), faces_per_scene=(1, 3), sides=None,
                  blank_fraction=0.0):
    """Generate non-overlapping random face placements for training and eval."""
    if sides is None:
        sides = [(9, 16), (17, 33), (34, 64)]
    root = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5C]))
    scenes = []
    h, w = size
    for k in range(count):
        scene_seed = int(root.integers(0, 2 ** 31 - 1))
        rng = np.random.default_rng(np.random.SeedSequence([scene_seed, 0xFA]))
        spec = SceneSpec(size=size, seed=scene_seed)
        if blank_fraction and rng.random() < blank_fraction:
            scenes.append(spec)
            continue
        n = int(rng.integers(faces_per_scene[0], faces_per_scene[1] + 1))
        placed = []
        for _ in range(n):
            for _attempt in range(40):
                lo, hi = sides[int(rng.integers(0, len(sides)))]
                side = int(rng.integers(lo, hi + 1))
                half = side // 2
                if w - side < 2 or h - side < 2:
                    continue
                cx = int(rng.integers(half + 1, w - (side - half) - 1))
                cy = int(rng.integers(half + 1, h - (side - half) - 1))
                ok = True
                for f in placed:
                    min_gap = (side + f.side) / 2.0
                    if abs(cx - f.cx) < min_gap and abs(cy - f.cy) < min_gap:
                        ok = False
                        break
                if ok:
                    placed.append(Face(cx, cy, side))
                    break
        spec.faces = placed
        scenes.append(spec)
    return scenes


# ---------------------------------------------------------------------------
# scene text format: "size W H", "seed N", then one "face CX CY SIDE" per face
# ---------------------------------------------------------------------------

def save_scene(spec, path):
    h, w = spec.size
    lines = [f"size {w} {h}", f"seed {spec.seed}"]
    lines += [f"face {f.cx} {f.cy} {f.side}" for f in spec.faces]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_scene(path):
    size = None
    seed = None
    faces = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                if parts[0] == "size" and len(parts) == 3:
                    size = (int(parts[2]), int(parts[1]))
                elif parts[0] == "seed" and len(parts) == 2:
                    seed = int(parts[1])
                elif parts[0] == "face" and len(parts) == 4:
                    faces.append(Face(int(parts[1]), int(parts[2]), int(parts[3])))
                else:
                    raise ValueError(line)
            except ValueError as exc:
                raise ConfigurationError(f"{path}:{lineno}: bad scene record {line!r}") from exc
    if size is None or seed is None:
        raise ConfigurationError(f"{path}: scene file needs size and seed lines")
    spec = SceneSpec(size=size, seed=seed, faces=faces)
    spec.validate()
    return spec
