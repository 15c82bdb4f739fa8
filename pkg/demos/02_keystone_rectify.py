"""Photograph-like keystone warp and its correction from four corner points.

The screen rectangle lands on an inset quad of a larger canvas; knowing the
quad (here: the simulator's ground truth, in practice: clicked corners) is
enough to undo the projection.

Run: python3 demos/02_keystone_rectify.py
"""

import numpy as np

from photoproxy.classifier import synth_lesion_dataset
from photoproxy.geometry import CornerQuad, apply, homography_from_corners, invert, rectify, warp_image
from photoproxy.metrics import psnr

clean = synth_lesion_dataset(0, 1, image_size=64, seed=8).images[0]
h, w = clean.shape

quad = CornerQuad.from_points([[9.0, 6.5], [78.0, 11.0], [74.0, 70.0], [4.5, 66.0]])
H = homography_from_corners(CornerQuad.rectangle(w, h), quad)
print("homography (clean grid -> photo canvas):")
print(np.array2string(H.m, precision=5, suppress_small=True))

for p in CornerQuad.rectangle(w, h).points():
    q = apply(H, p)
    print(f"  corner ({p[0]:.0f}, {p[1]:.0f}) -> ({q.x:.6f}, {q.y:.6f})")

p = (20.25, 41.5)
back = apply(invert(H), apply(H, p))
print(f"round trip of {p}: ({back.x:.12f}, {back.y:.12f})")

photo = warp_image(clean, H, 84, 78)
restored = rectify(photo, quad, w, h)

# a naive resize of the whole canvas ignores the projection
naive = rectify(photo, CornerQuad.rectangle(84, 78), w, h)
print(f"PSNR naive resize {psnr(clean, naive):.2f} dB, rectified {psnr(clean, restored):.2f} dB")
