"""Regenerate the bundled 128x128 grayscale test images.

The six images under ``src/dvamp/data`` are square center crops of
scikit-image's sample data, area-downsampled to 128x128 and quantized
to 8 bits.  scikit-image is only needed to rerun this script.

    python demos/make_test_images.py
"""
from pathlib import Path

import numpy as np
from skimage import color, data, transform

from dvamp.harness import save_pgm

SIDE = 128
OUT = Path(__file__).resolve().parents[1] / "src" / "dvamp" / "data"

SOURCES = {
    "cameraman": data.camera,
    "moon": data.moon,
    "astronaut": data.astronaut,
    "coffee": data.coffee,
    "chelsea": data.chelsea,
    "clock": data.clock,
}


def center_square(img):
    h, w = img.shape[:2]
    k = min(h, w)
    top, left = (h - k) // 2, (w - k) // 2
    return img[top:top + k, left:left + k]


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    for name, loader in SOURCES.items():
        img = loader()
        if img.ndim == 3:
            img = color.rgb2gray(img) * 255.0
        img = center_square(img.astype(float))
        small = transform.resize(img, (SIDE, SIDE), anti_aliasing=True,
                                 preserve_range=True)
        save_pgm(np.clip(np.round(small), 0, 255), OUT / f"{name}.pgm")
        print(f"wrote {name}.pgm")


if __name__ == "__main__":
    main()
