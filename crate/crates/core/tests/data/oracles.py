"""Standalone reference computations used to freeze expected values in the Rust tests.

Run: python3 oracles.py  (writes heatmap_2x2.ppm next to this file and prints constants)
"""
import math, os

MASK64 = (1 << 64) - 1

def splitmix64(seed):
    state = seed & MASK64
    while True:
        state = (state + 0x9E3779B97F4A7C15) & MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        yield z ^ (z >> 31)

def unit(z):
    return (z >> 11) * 2.0 ** -53

def weight_stream(seed, count, scale):
    g = splitmix64(seed)
    return [(2.0 * unit(next(g)) - 1.0) * scale for _ in range(count)]

# --- generator reference vector (seed 42, token embedding scale 1.0)
print("splitmix64(42) raw:", [hex(x) for x, _ in zip(splitmix64(42), range(4))])
print("weights(42):", [repr(w) for w in weight_stream(42, 4, 1.0)])

# --- rasterization by pixel enumeration
def raster_pixels(w, h, n, bbox):
    x0, y0, x1, y1 = bbox
    cells = set()
    # a pixel (x, y) covers [x, x+1) x [y, y+1); sample at sub-pixel resolution 1/4
    for py in range(h * 4):
        for px in range(w * 4):
            fx, fy = (px + 0.5) / 4, (py + 0.5) / 4
            if x0 <= fx < x1 and y0 <= fy < y1:
                cells.add((int(fy * n // h), int(fx * n // w)))
    return sorted(cells)
cells = raster_pixels(336, 336, 24, (100, 100, 150, 150))
print("raster rows:", sorted({c[0] for c in cells}), "cols:", sorted({c[1] for c in cells}), "count", len(cells))

# --- joint score for uniform A, single-quadrant M, N=2, eps=1e-8
def score(a, m, eps):
    n2 = len(a)
    sa, sm = sum(a), sum(m)
    ar = sum(x * y for x, y in zip(a, m)) / ((sa / n2) * sm)
    sm_ = [x / sm for x in m]
    ae = [x + eps for x in a]
    se = sum(ae)
    ah = [x / se for x in ae]
    kl = sum(p * math.log(p / q) for p, q in zip(sm_, ah) if p > 0)
    r = [(p + q) / 2 for p, q in zip(sm_, ah)]
    js = 0.5 * sum(p * math.log(p / q) for p, q in zip(sm_, r) if p > 0) + \
         0.5 * sum(p * math.log(p / q) for p, q in zip(ah, r) if p > 0)
    return ar, kl, js
print("score uniform/quadrant:", [repr(v) for v in score([0.25] * 4, [1, 0, 0, 0], 1e-8)])
print("ar example:", 0.4 / ((1.0 / 4) * 1))

# --- P6 golden: 2x2 map [[0.1,0.2],[0.3,0.4]], mask [[1,0],[0,0]], scale 16
def render(n, amap, mask, scale=16):
    mx = max(amap)
    side = n * scale
    px = bytearray()
    for y in range(side):
        for x in range(side):
            i, j = y // scale, x // scale
            v = int(math.floor(255.0 * amap[i * n + j] / mx + 0.5))
            rgb = (v, v, v)
            if mask[i * n + j]:
                dy, dx = y % scale, x % scale
                def out(ii, jj):
                    return not (0 <= ii < n and 0 <= jj < n) or not mask[ii * n + jj]
                if (dy == 0 and out(i - 1, j)) or (dy == scale - 1 and out(i + 1, j)) or \
                   (dx == 0 and out(i, j - 1)) or (dx == scale - 1 and out(i, j + 1)):
                    rgb = (255, 0, 0)
            px += bytes(rgb)
    return b"P6\n%d %d\n255\n" % (side, side) + bytes(px)
here = os.path.dirname(os.path.abspath(__file__))
with open(os.path.join(here, "heatmap_2x2.ppm"), "wb") as f:
    f.write(render(2, [0.1, 0.2, 0.3, 0.4], [1, 0, 0, 0]))
print("wrote heatmap_2x2.ppm")
