"""KITTI-format label and calibration I/O plus binary PPM/PGM images.

Label lines carry 15 space-separated fields (detections append a 16th score
field): type, truncated, occluded, alpha, bbox x1 y1 x2 y2, dimensions
h w l, location x y z, rotation_y.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class ObjectLabel:
    type: str
    truncated: float
    occluded: int
    alpha: float
    box2d: np.ndarray  # x1, y1, x2, y2
    h: float
    w: float
    l: float
    x: float
    y: float
    z: float
    ry: float
    score: float | None = None

    def to_line(self) -> str:
        fields = [
            self.type,
            f"{self.truncated:.2f}",
            str(int(self.occluded)),
            f"{self.alpha:.6f}",
            f"{self.box2d[0]:.2f}", f"{self.box2d[1]:.2f}",
            f"{self.box2d[2]:.2f}", f"{self.box2d[3]:.2f}",
            f"{self.h:.6f}", f"{self.w:.6f}", f"{self.l:.6f}",
            f"{self.x:.6f}", f"{self.y:.6f}", f"{self.z:.6f}",
            f"{self.ry:.6f}",
        ]
        if self.score is not None:
            fields.append(f"{self.score:.6f}")
        return " ".join(fields)


def parse_label_line(line: str, lineno: int = 0) -> ObjectLabel:
    parts = line.split()
    if len(parts) not in (15, 16):
        raise ValueError(f"label line {lineno}: expected 15 or 16 fields, got {len(parts)}")
    try:
        vals = [float(p) for p in parts[1:]]
    except ValueError as exc:
        raise ValueError(f"label line {lineno}: non-numeric field ({exc})") from None
    return ObjectLabel(
        type=parts[0],
        truncated=vals[0],
        occluded=int(vals[1]),
        alpha=vals[2],
        box2d=np.array(vals[3:7]),
        h=vals[7], w=vals[8], l=vals[9],
        x=vals[10], y=vals[11], z=vals[12],
        ry=vals[13],
        score=vals[14] if len(parts) == 16 else None,
    )


def read_kitti_label(path) -> list:
    labels = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if line:
                labels.append(parse_label_line(line, lineno))
    return labels


def write_kitti_label(path, labels) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for lb in labels:
            fh.write(lb.to_line() + "\n")


# ---------------------------------------------------------------------------
# calibration


@dataclass
class Calibration:
    p_left: np.ndarray   # 3x4
    p_right: np.ndarray  # 3x4

    @property
    def f(self) -> float:
        return float(self.p_left[0, 0])

    @property
    def cx(self) -> float:
        return float(self.p_left[0, 2])

    @property
    def cy(self) -> float:
        return float(self.p_left[1, 2])

    @property
    def baseline(self) -> float:
        return float((self.p_left[0, 3] - self.p_right[0, 3]) / self.f)

    def disparity_at(self, z: float) -> float:
        return self.f * self.baseline / z


def make_calibration(f: float, cx: float, cy: float, baseline: float) -> Calibration:
    p_left = np.array([[f, 0.0, cx, 0.0], [0.0, f, cy, 0.0], [0.0, 0.0, 1.0, 0.0]])
    p_right = p_left.copy()
    p_right[0, 3] = -f * baseline
    return Calibration(p_left=p_left, p_right=p_right)


def read_calib(path) -> Calibration:
    rows = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or ":" not in line:
                continue
            key, rest = line.split(":", 1)
            vals = [float(v) for v in rest.split()]
            if len(vals) == 12:
                rows[key.strip()] = np.array(vals).reshape(3, 4)
    if "P2" not in rows or "P3" not in rows:
        missing = [k for k in ("P2", "P3") if k not in rows]
        raise ValueError(f"calibration file '{path}' missing rows: {missing}")
    return Calibration(p_left=rows["P2"], p_right=rows["P3"])


def write_calib(path, calib: Calibration) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, mat in (("P2", calib.p_left), ("P3", calib.p_right)):
            vals = " ".join(f"{v:.12e}" for v in mat.reshape(-1))
            fh.write(f"{key}: {vals}\n")


# ---------------------------------------------------------------------------
# images (binary portable pixmap / graymap)


def write_ppm(path, img: np.ndarray) -> None:
    """8-bit binary P6 from a float image in [0, 1] or a uint8 array."""
    if img.dtype != np.uint8:
        img = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    h, w, c = img.shape
    if c != 3:
        raise ValueError(f"P6 needs 3 channels, got {c}")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def _read_header_tokens(blob: bytes, n_tokens: int):
    tokens, i = [], 2
    while len(tokens) < n_tokens:
        while i < len(blob) and blob[i : i + 1].isspace():
            i += 1
        if blob[i : i + 1] == b"#":
            while i < len(blob) and blob[i : i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < len(blob) and not blob[i : i + 1].isspace():
            i += 1
        tokens.append(blob[start:i])
    return tokens, i + 1


def read_ppm(path) -> np.ndarray:
    """Float32 image in [0, 1], shape (H, W, 3)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:2] != b"P6":
        raise ValueError(f"'{path}' is not a binary PPM")
    (w, h, maxval), offset = _read_header_tokens(blob, 3)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"unsupported max value {maxval}")
    data = np.frombuffer(blob, dtype=np.uint8, count=h * w * 3, offset=offset)
    return (data.reshape(h, w, 3).astype(np.float32)) / 255.0


def write_pgm(path, img: np.ndarray) -> None:
    """8-bit binary P5 from a float image (min-max normalized) or uint8."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        lo, hi = float(img.min()), float(img.max())
        span = hi - lo if hi > lo else 1.0
        img = np.clip(np.round((img - lo) / span * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:2] != b"P5":
        raise ValueError(f"'{path}' is not a binary PGM")
    (w, h, maxval), offset = _read_header_tokens(blob, 3)
    w, h = int(w), int(h)
    data = np.frombuffer(blob, dtype=np.uint8, count=h * w, offset=offset)
    return data.reshape(h, w).copy()


# ---------------------------------------------------------------------------
# raw float/byte rasters (pseudo ground-truth cache)


def write_raster_f32(path, arr: np.ndarray) -> None:
    np.asarray(arr, dtype="<f4").tofile(path)


def read_raster_f32(path, h: int, w: int) -> np.ndarray:
    return np.fromfile(path, dtype="<f4").reshape(h, w)


def write_raster_mask(path, mask: np.ndarray) -> None:
    np.asarray(mask, dtype=np.uint8).tofile(path)


def read_raster_mask(path, h: int, w: int) -> np.ndarray:
    return np.fromfile(path, dtype=np.uint8).reshape(h, w).astype(bool)
