"""Regenerates the mask-pipeline golden files from an independent numpy/scipy oracle.

Usage: python make_mask_golden.py OUT_DIR
"""
import sys
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage


def face_mask(h, w):
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    m = np.zeros((h, w), np.uint8)
    m[((yy - h * 0.52) / (h * 0.36)) ** 2 + ((xx - w * 0.5) / (w * 0.30)) ** 2 <= 1] = 1
    for cx in (0.38, 0.62):
        m[((yy - h * 0.42) / (h * 0.06)) ** 2 + ((xx - w * cx) / (w * 0.07)) ** 2 <= 1] = 2
    m[(np.abs(yy - h * 0.70) <= h * 0.04) & (np.abs(xx - w * 0.5) <= w * 0.12)] = 3
    return m


def contour(mask, n_labels, thickness):
    h, w = mask.shape
    edges = np.zeros((h, w), bool)
    for label in range(n_labels):
        region = np.pad(mask == label, 1, constant_values=False)
        inner = region[1:-1, 1:-1]
        neighbours_out = ~region[:-2, 1:-1] | ~region[2:, 1:-1] | ~region[1:-1, :-2] | ~region[1:-1, 2:]
        edges |= inner & neighbours_out
    r = thickness // 2
    out = np.zeros_like(edges)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy * dy + dx * dx > r * r:
                continue
            shifted = np.zeros_like(edges)
            ys = slice(max(dy, 0), h + min(dy, 0))
            yd = slice(max(-dy, 0), h + min(-dy, 0))
            xs = slice(max(dx, 0), w + min(dx, 0))
            xd = slice(max(-dx, 0), w + min(-dx, 0))
            shifted[ys, xs] = edges[yd, xd]
            out |= shifted
    return out


def main():
    out_dir = Path(sys.argv[1])
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, (h, w, thickness) in {"face32": (32, 32, 3), "face48x40": (48, 40, 3), "face32_t1": (32, 32, 1)}.items():
        mask = face_mask(h, w)
        c = contour(mask, 6, thickness)
        d = ndimage.distance_transform_edt(~c)
        norm = np.floor(255.0 * d / d.max() + 0.5).astype(np.uint8)
        Image.fromarray(mask, "L").save(out_dir / f"{name}_mask.png")
        Image.fromarray(c.astype(np.uint8) * 255, "L").save(out_dir / f"{name}_contour.png")
        Image.fromarray(norm, "L").save(out_dir / f"{name}_distance.png")


if __name__ == "__main__":
    main()
