"""Reference SSIM value for the Rust test suite.

Independent implementation (numpy + scipy.signal) of mean SSIM with a 7x7
Gaussian window (sigma 1.5), K1=0.01, K2=0.03, valid-region averaging and
dynamic range max(ref). The test image and noise sequence are reproduced
bit-for-bit in `crates/core/src/eval.rs` tests.
"""
import numpy as np
from scipy.signal import correlate2d

N = 32
MASK64 = (1 << 64) - 1


def lcg_uniform(n, seed=12345):
    state = seed
    out = []
    for _ in range(n):
        state = (state * 6364136223846793005 + 1442695040888963407) & MASK64
        out.append((state >> 11) / float(1 << 53))
    return np.array(out)


i, j = np.meshgrid(np.arange(N), np.arange(N), indexing="ij")
ref = 0.8 + 0.4 * np.sin(2 * np.pi * i / 17.0) * np.cos(2 * np.pi * j / 23.0) + 0.1 * (i + j) / N
rng = ref.max()
noise = (lcg_uniform(N * N).reshape(N, N) - 0.5) * 0.2 * rng
img = ref + noise

ax = np.arange(7) - 3
g1 = np.exp(-(ax ** 2) / (2 * 1.5 ** 2))
w = np.outer(g1, g1)
w /= w.sum()


def filt(a):
    return correlate2d(a, w, mode="valid")


c1 = (0.01 * rng) ** 2
c2 = (0.03 * rng) ** 2
mx, my = filt(img), filt(ref)
sxx = filt(img * img) - mx * mx
syy = filt(ref * ref) - my * my
sxy = filt(img * ref) - mx * my
ssim_map = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
print(repr(float(ssim_map.mean())))
mse = np.mean((img - ref) ** 2)
print(repr(float(10 * np.log10(rng ** 2 / mse))))
