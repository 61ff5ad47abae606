"""Deterministic synthetic detection scenes and RPN-free proposal generation.

Three object classes, one per aspect group: tall bars (class 1, w/h < 0.75),
square disks (class 2, w/h near 1) and wide bars (class 3, w/h > 1.3). Every
object has a 2-pixel high-contrast rim around a striped or checkered fill,
so boundary and interior sub-regions look different.

On disk a dataset directory holds ``images/*.ppm`` (binary P6),
``annotations.jsonl`` (one scene per line) and ``manifest.json``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import aspect_group, iou_matrix

CLASS_NAMES = ("background", "tall-bar", "square-disk", "wide-bar")
# width / height ranges per class
RATIO_RANGES = {1: (0.3, 0.6), 2: (0.85, 1.15), 3: (1.7, 3.3)}
RIM = 2


@dataclass
class SynthParams:
    image_size: int = 128
    min_objects: int = 1
    max_objects: int = 3
    min_area: float = 24.0 ** 2
    max_area: float = 48.0 ** 2


@dataclass
class Scene:
    image: np.ndarray  # (3, H, W) float in [0, 1], multiples of 1/255
    boxes: np.ndarray  # (K, 4) x1, y1, x2, y2
    classes: np.ndarray  # (K,) 1-based
    seed: int
    name: str = ""

    @property
    def annotations(self) -> list[tuple[int, tuple[float, float, float, float]]]:
        return [(int(c), tuple(float(v) for v in b)) for c, b in zip(self.classes, self.boxes)]


def scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _sample_box(rng, cls, size, p: SynthParams):
    lo, hi = RATIO_RANGES[cls]
    ratio = rng.uniform(lo, hi)
    area = rng.uniform(p.min_area, p.max_area)
    w = int(round(np.sqrt(area * ratio)))
    h = int(round(np.sqrt(area / ratio)))
    w = min(max(w, 8), size - 4)
    h = min(max(h, 8), size - 4)
    x1 = int(rng.integers(0, size - w + 1))
    y1 = int(rng.integers(0, size - h + 1))
    return np.array([x1, y1, x1 + w, y1 + h], dtype=np.float64)


def _render(img, box, cls, rng):
    x1, y1, x2, y2 = (int(v) for v in box)
    h, w = y2 - y1, x2 - x1
    yy, xx = np.mgrid[0:h, 0:w]
    rim_color = rng.uniform(0.85, 1.0, 3) if rng.random() < 0.5 else rng.uniform(0.0, 0.15, 3)
    fill_a = rng.uniform(0.3, 0.7, 3)
    fill_b = np.clip(fill_a + rng.choice([-0.25, 0.25]), 0, 1)
    period = int(rng.integers(3, 6))
    if rng.random() < 0.5:
        pattern = ((xx + yy) // period) % 2
    else:
        pattern = ((xx // period) + (yy // period)) % 2
    fill = np.where(pattern[None], fill_b[:, None, None], fill_a[:, None, None])
    if cls == 2:
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        r = np.sqrt(((yy - cy) / (h / 2.0)) ** 2 + ((xx - cx) / (w / 2.0)) ** 2) * min(h, w) / 2.0
        inside = r <= min(h, w) / 2.0
        rim = inside & (r > min(h, w) / 2.0 - RIM)
    else:
        inside = np.ones((h, w), dtype=bool)
        rim = (yy < RIM) | (yy >= h - RIM) | (xx < RIM) | (xx >= w - RIM)
    patch = img[:, y1:y2, x1:x2]
    patch[:] = np.where(inside[None], fill, patch)
    patch[:] = np.where(rim[None], rim_color[:, None, None], patch)


def generate_scene(seed: int, p: SynthParams = SynthParams(), name: str = "") -> Scene:
    rng = np.random.default_rng(seed)
    size = p.image_size
    base = rng.uniform(0.2, 0.6, 3)
    img = np.clip(base[:, None, None] + rng.normal(0.0, 0.05, (3, size, size)), 0.0, 1.0)
    n_obj = int(rng.integers(p.min_objects, p.max_objects + 1))
    boxes, classes = [], []
    attempts = 0
    while len(boxes) < n_obj and attempts < 200:
        attempts += 1
        cls = int(rng.integers(1, 4))
        box = _sample_box(rng, cls, size, p)
        if aspect_group(box) != cls:
            continue
        if boxes and iou_matrix(box[None], np.array(boxes)).max() > 0.0:
            continue
        boxes.append(box)
        classes.append(cls)
    for box, cls in zip(boxes, classes):
        _render(img, box, cls, rng)
    img = np.round(img * 255.0) / 255.0
    return Scene(img, np.array(boxes).reshape(-1, 4), np.array(classes, dtype=np.int64), seed, name)


TEST_OFFSET = 1_000_000  # scene index where held-out splits start


def generate_dataset(n_scenes: int, seed: int, p: SynthParams = SynthParams(), start: int = 0) -> list[Scene]:
    """Scenes ``start .. start + n_scenes - 1`` of the stream for ``seed``."""
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    return [generate_scene(scene_seed(seed, i), p, name=f"scene_{i:07d}") for i in range(start, start + n_scenes)]


def generate_proposals(scene: Scene, n: int = 300, seed: int = 0, jitter: float = 0.25,
                       gt_fraction: float = 0.4) -> np.ndarray:
    """``n`` boxes: ``gt_fraction`` jittered ground truths, the rest uniform.

    Each coordinate of a jittered box moves by up to ``jitter`` times the
    box's width (x) or height (y). All boxes are clipped and at least 2 px.
    """
    if n < 1:
        raise ValueError("need n >= 1 proposals")
    rng = np.random.default_rng([seed, scene.seed])
    _, H, W = scene.image.shape
    n_gt = int(round(n * gt_fraction)) if len(scene.boxes) else 0
    out = np.empty((n, 4))
    if n_gt:
        src = scene.boxes[rng.integers(0, len(scene.boxes), n_gt)]
        wh = np.stack([src[:, 2] - src[:, 0], src[:, 3] - src[:, 1]] * 2, axis=1)
        out[:n_gt] = src + rng.uniform(-jitter, jitter, (n_gt, 4)) * wh
    n_rand = n - n_gt
    bw = rng.uniform(8, 0.6 * W, n_rand)
    bh = rng.uniform(8, 0.6 * H, n_rand)
    bx = rng.uniform(0, W - bw)
    by = rng.uniform(0, H - bh)
    out[n_gt:] = np.stack([bx, by, bx + bw, by + bh], axis=1)
    return clip_proposals(out, W, H)


def clip_proposals(boxes: np.ndarray, width: float, height: float, min_size: float = 2.0) -> np.ndarray:
    b = boxes.copy()
    b[:, 0] = np.clip(b[:, 0], 0, width - min_size)
    b[:, 1] = np.clip(b[:, 1], 0, height - min_size)
    b[:, 2] = np.clip(np.maximum(b[:, 2], b[:, 0] + min_size), 0, width)
    b[:, 3] = np.clip(np.maximum(b[:, 3], b[:, 1] + min_size), 0, height)
    return b


# --- disk format -----------------------------------------------------------

def write_ppm(path, image: np.ndarray) -> None:
    """(3, H, W) float image in [0, 1] -> binary P6."""
    _, H, W = image.shape
    data = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    W, H, maxval = (int(t) for t in tokens[1:])
    pos += 1
    data = np.frombuffer(raw, dtype=np.uint8, count=W * H * 3, offset=pos)
    return data.reshape(H, W, 3).transpose(2, 0, 1).astype(np.float64) / maxval


@dataclass
class DatasetManifest:
    n_scenes: int
    seed: int
    params: dict = field(default_factory=dict)
    classes: list = field(default_factory=lambda: list(CLASS_NAMES[1:]))
    format: str = "fsnet-synth-v1"


def save_dataset(path, scenes: list[Scene], seed: int, p: SynthParams = SynthParams()) -> None:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    with open(root / "annotations.jsonl", "w") as fh:
        for sc in scenes:
            fname = f"images/{sc.name}.ppm"
            write_ppm(root / fname, sc.image)
            objs = [{"class": int(c), "x1": float(b[0]), "y1": float(b[1]), "x2": float(b[2]), "y2": float(b[3])}
                    for c, b in zip(sc.classes, sc.boxes)]
            fh.write(json.dumps({"file": fname, "seed": sc.seed, "objects": objs}) + "\n")
    manifest = DatasetManifest(len(scenes), seed, asdict(p))
    (root / "manifest.json").write_text(json.dumps(asdict(manifest), indent=2) + "\n")


def load_dataset(path) -> list[Scene]:
    root = Path(path)
    ann = root / "annotations.jsonl"
    if not ann.exists():
        raise FileNotFoundError(f"no dataset at {root} (missing {ann.name})")
    scenes = []
    for line in ann.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        objs = rec["objects"]
        boxes = np.array([[o["x1"], o["y1"], o["x2"], o["y2"]] for o in objs], dtype=np.float64).reshape(-1, 4)
        classes = np.array([o["class"] for o in objs], dtype=np.int64)
        scenes.append(Scene(read_ppm(root / rec["file"]), boxes, classes, int(rec["seed"]),
                            Path(rec["file"]).stem))
    return scenes
