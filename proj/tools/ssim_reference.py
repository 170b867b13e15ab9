"""Frozen SSIM reference values for tests/oracles/ssim_reference.hpp."""

import numpy as np
from skimage.metrics import structural_similarity


def pattern_image(pair, second):
    side = 16 + 2 * pair
    img = np.zeros((side, side, 3))
    for c in range(3):
        for y in range(side):
            for x in range(side):
                if pair == 0:
                    v = 255 if second else 0
                else:
                    v = (x * (pair + 3) + y * y * (2 * c + 1) + 7 * pair * c + x * y) % 256
                    if second:
                        noise = (x * 5 + y * 3 + pair * c) % (2 * pair + 3) - pair
                        v = min(255, max(0, v + noise * (pair % 4 + 1)))
                img[y, x, c] = v
    return img


for pair in range(20):
    a, b = pattern_image(pair, False), pattern_image(pair, True)
    s = structural_similarity(a, b, data_range=255, channel_axis=2, gaussian_weights=True,
                              sigma=1.5, use_sample_covariance=False)
    print(f"    {s:.12f},")
