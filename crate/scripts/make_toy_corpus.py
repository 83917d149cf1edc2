#!/usr/bin/env python3
"""Build the small PNG corpus used by the toy-training and integration tests.

Images come from the public-domain / CC0 sample data bundled with
scikit-image and matplotlib, so no network access is needed.
"""
import os
import sys

import numpy as np
from PIL import Image
from skimage import data
import matplotlib

OUT = sys.argv[1] if len(sys.argv) > 1 else os.path.join(
    os.path.dirname(__file__), "..", "crates", "core", "tests", "data", "toy")


def crop_at(img, y, x, h, w):
    assert y + h <= img.shape[0] and x + w <= img.shape[1]
    return img[y:y + h, x:x + w, :3]


def center_crop(img, h, w, dy=0, dx=0):
    H, W = img.shape[:2]
    y = max(0, (H - h) // 2 + dy)
    x = max(0, (W - w) // 2 + dx)
    return img[y:y + h, x:x + w, :3]


def main():
    left, right, _ = data.stereo_motorcycle()
    hopper = np.asarray(Image.open(os.path.join(
        os.path.dirname(matplotlib.__file__), "mpl-data", "sample_data", "grace_hopper.jpg")))
    train = {
        "astronaut": center_crop(data.astronaut(), 320, 320),
        "coffee": center_crop(data.coffee(), 320, 320),
        "rocket": center_crop(data.rocket(), 320, 320),
        "motorcycle_left": center_crop(left, 320, 320),
        "ihc": center_crop(data.immunohistochemistry(), 320, 320),
        "hubble": center_crop(data.hubble_deep_field(), 320, 320),
        "retina": center_crop(data.retina(), 320, 320),
        "hopper": center_crop(hopper, 320, 320, dy=-60),
    }
    # Held-out crops never overlap a training crop.
    val = {
        "chelsea": center_crop(data.chelsea(), 192, 192),
        "coffee_edge": crop_at(data.coffee(), 120, 462, 144, 138),
        "rocket_edge": crop_at(data.rocket(), 140, 490, 144, 144),
        "hubble_corner": crop_at(data.hubble_deep_field(), 60, 60, 192, 192),
    }
    for split, imgs in (("train", train), ("val", val)):
        d = os.path.join(OUT, split)
        os.makedirs(d, exist_ok=True)
        for name, img in imgs.items():
            Image.fromarray(np.ascontiguousarray(img)).save(os.path.join(d, name + ".png"))
            print(split, name, img.shape)


if __name__ == "__main__":
    main()
