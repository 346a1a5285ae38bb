"""Synthetic day/night sequences with low-resolution targets, and dataset file I/O.

Dataset layout (OTB style, also used for real corpora)::

    <root>/<name>/img/0001.png ...
    <root>/<name>/groundtruth.txt     one "x,y,w,h" line per frame
    <root>/<name>/attributes.txt      optional, comma-separated tags
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from PIL import Image

from .config import RunConfig

ATTRIBUTES = ("ARC", "BC", "CM", "FM", "OCC", "SV", "SOB", "VC", "IV", "LAI")
LR_LIMIT = 25  # targets are strictly smaller than LR_LIMIT x LR_LIMIT


class DatasetError(Exception):
    pass


class MissingFileError(DatasetError):
    pass


class MalformedLineError(DatasetError):
    def __init__(self, path, lineno: int, line: str):
        super().__init__(f"{path}:{lineno}: malformed line {line!r}")
        self.lineno = lineno


class CountMismatchError(DatasetError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box needs positive size, got w={self.w}, h={self.h}")

    @property
    def center(self) -> tuple[float, float]:
        return self.x + self.w / 2.0, self.y + self.h / 2.0

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BoundingBox":
        return cls(cx - w / 2.0, cy - h / 2.0, w, h)

    def to_line(self) -> str:
        return ",".join(f"{v:g}" for v in (self.x, self.y, self.w, self.h))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return self.x, self.y, self.w, self.h


@dataclass
class TrackSequence:
    name: str
    boxes: list[BoundingBox]
    domain: str = "night"
    attributes: frozenset[str] = frozenset()
    frames: list[Path] = field(default_factory=list)
    images: list[np.ndarray] | None = None  # uint8 (H, W, 3), in-memory frames

    def __post_init__(self):
        n = len(self.images) if self.images is not None else len(self.frames)
        if n != len(self.boxes):
            raise CountMismatchError(f"{self.name}: {n} frames but {len(self.boxes)} boxes")
        if self.domain not in ("day", "night"):
            raise ValueError(f"unknown domain {self.domain!r}")

    def __len__(self) -> int:
        return len(self.boxes)

    def frame_array(self, i: int) -> np.ndarray:
        if self.images is not None:
            return self.images[i]
        return np.array(Image.open(self.frames[i]).convert("RGB"))

    def frame_tensor(self, i: int) -> torch.Tensor:
        """Frame ``i`` as a float (3, H, W) tensor with values in [0, 1]."""
        arr = self.frame_array(i)
        return torch.from_numpy(arr).permute(2, 0, 1).float().div_(255.0)


@dataclass(frozen=True)
class NightTransform:
    """Low-light degradation: ambient scale, tone curve, sensor noise, clamp.

    With ``z = ambient * x`` the tone curve is the encoding power law
    ``z ** (1 / gamma)``, which lifts the dark frame while flattening its
    contrast; noise is added afterwards, so it is not amplified by the curve.
    """

    ambient: float = 1.0
    gamma: float = 1.0
    noise_sigma: float = 0.0

    def apply(self, image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Map a float image in [0, 1] to its night version (float, clamped)."""
        z = np.power(self.ambient * image, 1.0 / self.gamma)
        if self.noise_sigma > 0:
            z = z + rng.normal(0.0, self.noise_sigma, size=image.shape)
        return np.clip(z, 0.0, 1.0)

    @classmethod
    def random(cls, rng: np.random.Generator) -> "NightTransform":
        return cls(ambient=float(rng.uniform(0.05, 0.3)),
                   gamma=float(rng.uniform(2.0, 3.5)),
                   noise_sigma=float(rng.uniform(0.01, 0.05)))


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def _render_background(rng: np.random.Generator, size: int, margin: int) -> tuple[np.ndarray, int]:
    """A world canvas larger than the view so the camera can pan."""
    n = size + 2 * margin
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) / n
    c0 = rng.uniform(0.25, 0.6, 3)
    c1 = rng.uniform(0.25, 0.6, 3)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    ramp = (ramp - ramp.min()) / (np.ptp(ramp) + 1e-9)
    canvas = c0 + (c1 - c0) * ramp[..., None]

    n_clutter = int(rng.integers(6, 16))
    for _ in range(n_clutter):
        cw, ch = rng.integers(6, 36, 2)
        cx, cy = rng.integers(0, n, 2)
        color = rng.uniform(0.15, 0.7, 3)
        x0, x1 = max(cx - cw // 2, 0), min(cx + cw // 2, n)
        y0, y1 = max(cy - ch // 2, 0), min(cy + ch // 2, n)
        if rng.random() < 0.5:
            canvas[y0:y1, x0:x1] = color
        else:
            sub_y, sub_x = np.mgrid[y0:y1, x0:x1]
            inside = ((sub_x - cx) / max(cw / 2, 1)) ** 2 + ((sub_y - cy) / max(ch / 2, 1)) ** 2 <= 1
            canvas[y0:y1, x0:x1][inside] = color
    canvas += rng.normal(0, 0.01, canvas.shape)
    return np.clip(canvas, 0, 1), n_clutter


def _target_texture(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Bright body colour and a darker accent colour."""
    body = rng.uniform(0.75, 1.0, 3)
    body[rng.integers(0, 3)] = rng.uniform(0.85, 1.0)
    accent = body * rng.uniform(0.1, 0.35)
    return body, accent


def _paint_target(img: np.ndarray, box: tuple[int, int, int, int], body, accent) -> None:
    x, y, w, h = box
    patch = np.empty((h, w, 3))
    patch[:] = body
    # dark cross through the middle plus a dark rim: gives the target internal structure
    patch[h // 2 - max(h // 8, 1): h // 2 + max(h // 8, 1), :] = accent
    patch[:, w // 2 - max(w // 8, 1): w // 2 + max(w // 8, 1)] = accent
    patch[[0, -1], :] = accent
    patch[:, [0, -1]] = accent
    img[y:y + h, x:x + w] = patch


def _attributes(boxes: Sequence[tuple[int, int, int, int]], n_clutter: int, pan: bool,
                distractor: bool) -> set[str]:
    arr = np.asarray(boxes, dtype=np.float64)
    tags = set()
    centers = arr[:, :2] + arr[:, 2:] / 2
    if len(arr) > 1 and np.max(np.linalg.norm(np.diff(centers, axis=0), axis=1)) > 4.0:
        tags.add("FM")
    area = arr[:, 2] * arr[:, 3]
    if area.max() / area.min() > 1.3:
        tags.add("SV")
    ratio = arr[:, 2] / arr[:, 3]
    if ratio.max() / ratio.min() > 1.2:
        tags.add("ARC")
    if n_clutter >= 12:
        tags.add("BC")
    if pan:
        tags.add("CM")
    if distractor:
        tags.add("SOB")
    return tags


def gen_sequence_frames(cfg: RunConfig, rng: np.random.Generator):
    """Render day frames; returns (uint8 frames, integer boxes, attribute tags)."""
    size = cfg.img_size
    pan = bool(rng.random() < 0.3)
    margin = 24 if pan else 0
    world, n_clutter = _render_background(rng, size, margin)
    body, accent = _target_texture(rng)

    w0 = int(rng.integers(cfg.min_target, cfg.max_target + 1))
    h0 = int(rng.integers(cfg.min_target, cfg.max_target + 1))
    scale_amp = rng.uniform(0.0, 0.25) if rng.random() < 0.3 else 0.0
    phase = rng.uniform(0, 2 * np.pi)

    distractor = bool(rng.random() < 0.2)
    d_body = body * rng.uniform(0.6, 0.8) if distractor else None
    d_pos = rng.uniform(30, size - 30, 2) if distractor else None

    pos = rng.uniform(size * 0.25, size * 0.75, 2)
    angle = rng.uniform(0, 2 * np.pi)
    speed = rng.uniform(0.3, 1.0) * cfg.max_speed
    vel = speed * np.array([np.cos(angle), np.sin(angle)])
    cam = np.zeros(2)
    cam_vel = rng.uniform(-1.0, 1.0, 2) if pan else np.zeros(2)

    frames, boxes = [], []
    for k in range(cfg.frames):
        s = 1.0 + scale_amp * np.sin(phase + 0.25 * k)
        w = int(np.clip(round(w0 * s), cfg.min_target, cfg.max_target))
        h = int(np.clip(round(h0 * s), cfg.min_target, cfg.max_target))
        x = int(np.clip(round(pos[0] - w / 2), 1, size - w - 1))
        y = int(np.clip(round(pos[1] - h / 2), 1, size - h - 1))

        ox, oy = (np.round(cam + margin).astype(int) if pan else (0, 0))
        img = world[oy:oy + size, ox:ox + size].copy()
        if distractor:
            dx, dy = np.round(d_pos).astype(int)
            dw, dh = max(w - 2, 2), max(h - 2, 2)
            img[dy:dy + dh, dx:dx + dw] = d_body
        _paint_target(img, (x, y, w, h), body, accent)
        frames.append(_to_uint8(img))
        boxes.append((x, y, w, h))

        vel = vel + rng.normal(0, 0.3, 2)
        sp = np.linalg.norm(vel)
        if sp > cfg.max_speed:
            vel *= cfg.max_speed / sp
        pos = pos + vel
        for i in range(2):
            lo, hi = 20.0, size - 20.0
            if pos[i] < lo or pos[i] > hi:
                vel[i] = -vel[i]
                pos[i] = np.clip(pos[i], lo, hi)
        if pan:
            cam = np.clip(cam + cam_vel, -margin, margin)

    return frames, boxes, _attributes(boxes, n_clutter, pan, distractor)


def gen_pair(cfg: RunConfig, seed: int, name: str = "seq",
             night: NightTransform | None = None) -> tuple[TrackSequence, TrackSequence]:
    """Render a day sequence and its pixel-aligned night counterpart.

    The night frames are derived from the quantised day frames, so the pair
    shares geometry exactly. ``night`` overrides the randomly drawn transform.
    """
    if cfg.frames < 2 or cfg.img_size < 128:
        raise ValueError("need frames >= 2 and img_size >= 128")
    if cfg.max_target >= LR_LIMIT:
        raise ValueError(f"max_target must stay below {LR_LIMIT}")
    ss = np.random.SeedSequence(seed)
    scene_ss, night_ss = ss.spawn(2)
    rng = np.random.default_rng(scene_ss)
    frames, boxes, tags = gen_sequence_frames(cfg, rng)

    nrng = np.random.default_rng(night_ss)
    drawn = NightTransform.random(nrng)
    transform = night if night is not None else drawn
    night_frames = [_to_uint8(transform.apply(f.astype(np.float64) / 255.0, nrng)) for f in frames]

    bb = [BoundingBox(*b) for b in boxes]
    night_tags = set(tags) | {"LAI"}
    if transform.ambient < 0.15:
        night_tags.add("IV")
    day_seq = TrackSequence(f"{name}_day", bb, "day", frozenset(tags), images=frames)
    night_seq = TrackSequence(f"{name}_night", list(bb), "night", frozenset(night_tags),
                              images=night_frames)
    return day_seq, night_seq


def write_sequence(seq: TrackSequence, root: str | Path) -> Path:
    """Write ``seq`` in the dataset layout; returns the sequence directory."""
    out = Path(root) / seq.name
    img_dir = out / "img"
    img_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(len(seq)):
        p = img_dir / f"{i + 1:04d}.png"
        Image.fromarray(seq.frame_array(i)).save(p, optimize=False)
        paths.append(p)
    (out / "groundtruth.txt").write_text("".join(b.to_line() + "\n" for b in seq.boxes))
    if seq.attributes:
        (out / "attributes.txt").write_text(",".join(sorted(seq.attributes)) + "\n")
    return out


def parse_box_line(line: str) -> BoundingBox:
    parts = line.replace("\t", ",").replace(" ", ",").split(",")
    parts = [p for p in parts if p]
    if len(parts) != 4:
        raise ValueError(line)
    return BoundingBox(*(float(p) for p in parts))


def read_boxes(path: str | Path) -> list[BoundingBox]:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"missing {path}")
    boxes = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            boxes.append(parse_box_line(line.strip()))
        except ValueError:
            raise MalformedLineError(path, lineno, line) from None
    return boxes


def write_boxes(boxes: Iterable[BoundingBox], path: str | Path) -> None:
    lines = []
    for b in boxes:
        lines.append(",".join(str(int(round(v))) for v in b.as_tuple()))
    Path(path).write_text("".join(line + "\n" for line in lines))


def load_sequence(dir_path: str | Path, domain: str | None = None) -> TrackSequence:
    """Read a sequence directory.

    The domain defaults to ``day`` for directory names ending in ``_day`` and
    ``night`` otherwise.
    """
    root = Path(dir_path)
    img_dir = root / "img"
    if not img_dir.is_dir():
        raise MissingFileError(f"missing image folder {img_dir}")
    frames = sorted(p for p in img_dir.iterdir()
                    if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"))
    boxes = read_boxes(root / "groundtruth.txt")
    if len(frames) != len(boxes):
        raise CountMismatchError(
            f"{root.name}: {len(frames)} images but {len(boxes)} ground-truth lines")
    tags: frozenset[str] = frozenset()
    attr = root / "attributes.txt"
    if attr.exists():
        tags = frozenset(t.strip() for t in attr.read_text().replace("\n", ",").split(",") if t.strip())
    if domain is None:
        domain = "day" if root.name.endswith("_day") else "night"
    return TrackSequence(root.name, boxes, domain, tags, frames=frames)


def load_dataset(root: str | Path, domain: str | None = None) -> list[TrackSequence]:
    root = Path(root)
    if (root / "groundtruth.txt").exists():
        return [load_sequence(root, domain)]
    dirs = sorted(p for p in root.iterdir() if (p / "groundtruth.txt").exists())
    seqs = [load_sequence(p) for p in dirs]
    if domain is not None:
        seqs = [s for s in seqs if s.domain == domain]
    return seqs


def dump_features(maps: Sequence, labels: Sequence[str], path: str | Path) -> None:
    """Write feature maps as a JSON header line followed by raw float32 data."""
    if len(maps) != len(labels):
        raise ValueError(f"{len(maps)} maps but {len(labels)} labels")
    arrays = [np.asarray(m.detach().cpu() if isinstance(m, torch.Tensor) else m, dtype="<f4")
              for m in maps]
    c, h, w = arrays[0].shape if arrays else (0, 0, 0)
    for a in arrays:
        if a.shape != (c, h, w):
            raise ValueError(f"inconsistent map shape {a.shape}, expected {(c, h, w)}")
    header = {"count": len(arrays), "channels": c, "height": h, "width": w,
              "labels": list(labels)}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode() + b"\n")
        for a in arrays:
            fh.write(np.ascontiguousarray(a).tobytes())


def load_features(path: str | Path) -> tuple[np.ndarray, list[str]]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        payload = fh.read()
    shape = (header["count"], header["channels"], header["height"], header["width"])
    data = np.frombuffer(payload, dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise DatasetError(f"{path}: payload holds {data.size} floats, header says {shape}")
    return data.reshape(shape).copy(), header["labels"]
