"""Side-by-side match overlays written as binary PPM."""
from pathlib import Path

import numpy as np

GREEN = (0, 200, 0)
RED = (230, 0, 0)
GREY = (160, 160, 160)


def to_uint8(image):
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def draw_line(canvas, p, q, colour):
    """Integer DDA line, clipped to the canvas."""
    H, W = canvas.shape[:2]
    n = int(np.ceil(max(abs(q[0] - p[0]), abs(q[1] - p[1])))) + 1
    xs = np.rint(np.linspace(p[0], q[0], n)).astype(int)
    ys = np.rint(np.linspace(p[1], q[1], n)).astype(int)
    ok = (xs >= 0) & (xs < W) & (ys >= 0) & (ys < H)
    canvas[ys[ok], xs[ok]] = colour


def match_overlay(img1, img2, pts1, pts2, good=None):
    """Concatenate images horizontally and draw one line per match in input order.

    ``good`` is a bool per match (green/red); ``None`` draws grey lines.
    """
    a, b = to_uint8(img1), to_uint8(img2)
    H = max(a.shape[0], b.shape[0])
    canvas = np.zeros((H, a.shape[1] + b.shape[1], 3), dtype=np.uint8)
    canvas[:a.shape[0], :a.shape[1]] = a
    canvas[:b.shape[0], a.shape[1]:] = b
    off = a.shape[1]
    for i, (p, q) in enumerate(zip(pts1, pts2)):
        colour = GREY if good is None else (GREEN if good[i] else RED)
        draw_line(canvas, p, (q[0] + off, q[1]), colour)
    return canvas


def write_ppm(path, rgb):
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    H, W = rgb.shape[:2]
    Path(path).write_bytes(f"P6\n{W} {H}\n255\n".encode() + rgb.tobytes())


def read_ppm(path):
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    W, H = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(H, W, 3)
