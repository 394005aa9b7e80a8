#!/usr/bin/env python3
"""Writes the golden adapter transcript for the mock sidecar in fixed mode.

The fixed-mode segment reply fills pixels whose centre lies in the half-open prompt rect.

Each line is {"request": ..., "reply": ...}. Images and masks are encoded here with
numpy and base64, independently of the engine's codecs.
"""
import base64
import json
import pathlib

import numpy as np

out = pathlib.Path(__file__).resolve().parent / "data" / "transcript_fixed.ndjson"


def image(arr):
    arr = np.asarray(arr, dtype="<f8")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return {"shape": list(arr.shape), "dtype": "<f8", "data": base64.b64encode(arr.tobytes()).decode()}


def rle(mask):
    flat = mask.astype(bool).ravel()
    counts, value, run = [], False, 0
    for v in flat:
        if v == value:
            run += 1
        else:
            counts.append(run)
            value, run = v, 1
    counts.append(run)
    return {"shape": list(mask.shape), "counts": counts}


def filled(h, w, rect):
    x0, y0, x1, y1 = rect
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    return (xs >= x0) & (xs < x1) & (ys >= y0) & (ys < y1)


lines = [
    ({"id": 1, "op": "health", "protocol": 1},
     {"id": 1, "ok": True, "capabilities": {"detect": True, "segment": True}, "model": "mock-fixture"}),
]
tile = np.arange(6 * 8, dtype=float).reshape(6, 8) / 47.0
lines.append(({"id": 2, "op": "detect", "image": image(tile)},
              {"id": 2, "ok": True, "boxes": [{"rect": [1.0, 1.0, 5.0, 5.0], "confidence": 0.9}]}))
for i, (h, w, rect) in enumerate([(5, 4, [1.0, 1.0, 3.0, 4.0]), (7, 9, [0.0, 2.0, 9.0, 3.5]), (3, 3, [0.0, 0.0, 3.0, 3.0])]):
    crop = np.full((h, w), 0.25)
    lines.append(({"id": 3 + i, "op": "segment", "image": image(crop), "prompt_rect": rect},
                  {"id": 3 + i, "ok": True, "mask": rle(filled(h, w, rect))}))
lines.append(({"id": 6, "op": "classify"}, {"id": 6, "ok": False, "error": "unknown op 'classify'"}))

with out.open("w") as f:
    for req, rep in lines:
        f.write(json.dumps({"request": req, "reply": rep}, sort_keys=True) + "\n")
print(f"wrote {out}")
