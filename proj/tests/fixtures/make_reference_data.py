#!/usr/bin/env python3
"""Regenerates the frozen image fixtures and their pixel oracles.

The TIFF is written with tifffile and decoded back with Pillow, so the expected
values come from a decoder independent of the engine.
"""
import json
import pathlib

import numpy as np
import tifffile
from PIL import Image, ImageSequence

here = pathlib.Path(__file__).resolve().parent / "data"
here.mkdir(exist_ok=True)
rng = np.random.default_rng(20240611)

pages = rng.integers(0, 65536, size=(3, 7, 5), dtype=np.uint16)
pages[0, 0, 0] = 0
pages[0, 0, 1] = 65535
tifffile.imwrite(here / "stack16.tif", pages, photometric="minisblack")

decoded = []
with Image.open(here / "stack16.tif") as im:
    for page in ImageSequence.Iterator(im):
        decoded.append(np.array(page, dtype=np.uint16).tolist())
(here / "stack16.json").write_text(json.dumps({"shape": [3, 7, 5], "raw": decoded}) + "\n")

with tifffile.TiffWriter(here / "mismatch.tif") as tw:
    tw.write(np.zeros((4, 4), np.uint8))
    tw.write(np.zeros((5, 4), np.uint8))

Image.fromarray(np.full((64, 64), 255, np.uint8), mode="L").save(here / "white8.png")
rgba = rng.integers(0, 256, size=(6, 9, 4), dtype=np.uint8)
Image.fromarray(rgba, mode="RGBA").save(here / "rgba8.png")
(here / "rgba8.json").write_text(json.dumps({"shape": [6, 9, 4], "raw": np.array(Image.open(here / "rgba8.png")).tolist()}) + "\n")
