"""Independent reference implementations used only by the tests.

Each oracle recomputes a quantity by a different (slower, more literal)
route than the package does.
"""
from __future__ import annotations

import math
from collections import deque

import numpy as np


# -- clustering ------------------------------------------------------------

def dbscan_closure(coords, eps, min_points):
    """Density-reachability closure over all point pairs.

    Clusters are ordered by their lowest-index core point; a border point
    joins the lowest-ordered cluster owning a core point within eps.
    """
    pts = np.asarray(coords, float)
    n = len(pts)
    if n == 0:
        return np.empty(0, int)
    near = np.zeros((n, n), bool)
    for i in range(n):
        for j in range(n):
            near[i, j] = math.dist(pts[i], pts[j]) <= eps
    core = near.sum(axis=1) >= min_points
    labels = -np.ones(n, int)
    cid = 0
    for i in range(n):
        if not core[i] or labels[i] != -1:
            continue
        queue = deque([i])
        labels[i] = cid
        while queue:
            a = queue.popleft()
            for b in np.nonzero(near[a] & core)[0]:
                if labels[b] == -1:
                    labels[b] = cid
                    queue.append(b)
        cid += 1
    out = labels.copy()
    for i in range(n):
        if core[i]:
            continue
        owners = [labels[j] for j in range(n) if core[j] and near[i, j]]
        if owners:
            out[i] = min(owners)
    return out


def canonical(labels):
    """Relabel clusters by first appearance so labelings compare up to permutation."""
    mapping, out = {}, []
    for lab in labels:
        if lab == -1:
            out.append(-1)
            continue
        mapping.setdefault(lab, len(mapping))
        out.append(mapping[lab])
    return np.array(out, int)


def haversine_scan(position, centroids, radius_m, r_earth=6_371_008.8):
    out = []
    lat1, lon1 = map(math.radians, position)
    for i, (la, lo) in enumerate(centroids):
        lat2, lon2 = math.radians(la), math.radians(lo)
        a = math.sin((lat2 - lat1) / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
        d = 2 * r_earth * math.asin(math.sqrt(a))
        if d <= radius_m:
            out.append(i)
    return out


def haversine_single(p, q, r_earth=6_371_008.8):
    lat1, lon1 = map(math.radians, p)
    lat2, lon2 = map(math.radians, q)
    a = math.sin((lat2 - lat1) / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
    return 2 * r_earth * math.asin(math.sqrt(a))


# -- convolution / attention ----------------------------------------------

def conv2d_same(x, w, b=None):
    """Naive stride-1 zero-padded cross-correlation. x: CxHxW, w: OxCxkxk."""
    c, h, wd = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    xp = np.zeros((c, h + 2 * p, wd + 2 * p))
    xp[:, p:p + h, p:p + wd] = x
    out = np.zeros((o, h, wd))
    for oc in range(o):
        for i in range(h):
            for j in range(wd):
                acc = 0.0
                for ic in range(c):
                    for di in range(k):
                        for dj in range(k):
                            acc += w[oc, ic, di, dj] * xp[ic, i + di, j + dj]
                out[oc, i, j] = acc + (b[oc] if b is not None else 0.0)
    return out


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def relu(x):
    return np.maximum(x, 0.0)


def bn_eval(x, bn):
    """Batch norm with running statistics, from a torch BatchNorm2d's tensors."""
    g = bn.weight.detach().double().numpy()
    b = bn.bias.detach().double().numpy()
    m = bn.running_mean.detach().double().numpy()
    v = bn.running_var.detach().double().numpy()
    return (x - m[:, None, None]) / np.sqrt(v[:, None, None] + bn.eps) * g[:, None, None] + b[:, None, None]


def _np(t):
    return t.detach().double().numpy()


def channel_attention_ref(x, mod):
    """x: CxHxW; mod: ChannelAttention."""
    pooled = x.max(axis=(1, 2)) + x.mean(axis=(1, 2))
    l1, l2 = mod.mlp[0], mod.mlp[2]
    hidden = relu(_np(l1.weight) @ pooled + _np(l1.bias))
    ca = sigmoid(_np(l2.weight) @ hidden + _np(l2.bias))
    return ca, ca[:, None, None] * x


def vrecfield_ref(x, mod):
    f = 0.0
    for branch in (mod.branch1, mod.branch3, mod.branch5):
        conv, bn = branch[0], branch[1]
        f = f + bn_eval(conv2d_same(x, _np(conv.weight), _np(conv.bias)), bn)
    t = relu(conv2d_same(f, _np(mod.conv3.weight), _np(mod.conv3.bias)))
    return sigmoid(conv2d_same(t, _np(mod.conv7.weight), _np(mod.conv7.bias)))


def spatial_attention_ref(ca, x, mod):
    v1 = vrecfield_ref(ca, mod.field1)
    v2 = vrecfield_ref(ca, mod.field2)
    sa = sigmoid(conv2d_same(np.concatenate([v1, v2]), _np(mod.conv.weight), _np(mod.conv.bias)))
    return sa, sa * x


def point_attention_ref(x, mod):
    h = relu(conv2d_same(x, _np(mod.conv1.weight), _np(mod.conv1.bias)))
    pa = sigmoid(conv2d_same(h, _np(mod.conv2.weight), _np(mod.conv2.bias)))
    return pa, pa * x


# -- finite differences ----------------------------------------------------

def central_diff(f, x, step=1e-5):
    """Gradient of scalar f at array x by central differences."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        fp = f(x)
        x[i] = old - step
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * step)
    return g


# -- CAM -------------------------------------------------------------------

def gradcampp_elementwise(acts, grads):
    """Per-element loop over the closed-form alpha weights."""
    k, h, w = acts.shape
    weights = np.zeros(k)
    for c in range(k):
        total = 0.0
        for i in range(h):
            for j in range(w):
                total += acts[c, i, j]
        acc = 0.0
        for i in range(h):
            for j in range(w):
                g = grads[c, i, j]
                den = 2.0 * g * g + total * g * g * g
                alpha = (g * g) / den if den != 0.0 else 0.0
                acc += alpha * max(g, 0.0)
        weights[c] = acc
    return weights


# -- images ----------------------------------------------------------------

def bilinear_resize(img, out_h, out_w):
    """Half-pixel-centered bilinear resampling with edge clamping (no antialias)."""
    in_h, in_w = img.shape[:2]
    out = np.zeros((out_h, out_w) + img.shape[2:])
    sy, sx = in_h / out_h, in_w / out_w
    for i in range(out_h):
        y = (i + 0.5) * sy - 0.5
        y0 = int(math.floor(y))
        fy = y - y0
        y0c, y1c = min(max(y0, 0), in_h - 1), min(max(y0 + 1, 0), in_h - 1)
        for j in range(out_w):
            x = (j + 0.5) * sx - 0.5
            x0 = int(math.floor(x))
            fx = x - x0
            x0c, x1c = min(max(x0, 0), in_w - 1), min(max(x0 + 1, 0), in_w - 1)
            out[i, j] = ((1 - fy) * ((1 - fx) * img[y0c, x0c] + fx * img[y0c, x1c])
                         + fy * ((1 - fx) * img[y1c, x0c] + fx * img[y1c, x1c]))
    return out


def components_touching_rows(mask, row_start):
    """Flood fill (8-connected) from every set pixel at or below row_start."""
    h, w = mask.shape
    keep = np.zeros_like(mask, dtype=bool)
    queue = deque((i, j) for i in range(row_start, h) for j in range(w) if mask[i, j])
    for i, j in queue:
        keep[i, j] = True
    while queue:
        i, j = queue.popleft()
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                a, b = i + di, j + dj
                if 0 <= a < h and 0 <= b < w and mask[a, b] and not keep[a, b]:
                    keep[a, b] = True
                    queue.append((a, b))
    return keep


def disk_union_area(r, d):
    """Area of the union of two radius-r disks whose centers are d apart."""
    if d >= 2 * r:
        return 2 * math.pi * r * r
    lens = 2 * r * r * math.acos(d / (2 * r)) - 0.5 * d * math.sqrt(4 * r * r - d * d)
    return 2 * math.pi * r * r - lens


# -- geometry --------------------------------------------------------------

def ray_march_plane(origin, direction, corners, t_max=100.0, samples=20001):
    """Locate the ray/plane crossing by dense sampling plus bisection.

    The plane is rebuilt from three windshield corners.
    """
    o = np.asarray(origin, float)
    d = np.asarray(direction, float)
    c0, c1, c3 = (np.asarray(c, float) for c in (corners[0], corners[1], corners[3]))
    n = np.cross(c1 - c0, c3 - c0)

    def f(t):
        return float(n @ (o + t * d - c0))

    # widen the marching range until a crossing shows up
    while True:
        ts = np.linspace(0.0, t_max, samples)
        vals = (o[None] + ts[:, None] * d[None] - c0[None]) @ n
        if vals[0] == 0.0:
            return o
        idx = np.nonzero(np.sign(vals[1:]) != np.sign(vals[:-1]))[0]
        if idx.size:
            break
        if t_max > 1e9:
            return None
        t_max *= 10.0
    lo, hi = ts[idx[0]], ts[idx[0] + 1]
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.sign(f(mid)) == np.sign(f(lo)):
            lo = mid
        else:
            hi = mid
    return o + 0.5 * (lo + hi) * d


def monitor_scan(trace, centroids, radius_m, r_earth=6_371_008.8):
    """Per-sample inside/outside flags and the resulting transitions."""
    inside = []
    for _, lat, lon in trace:
        d = min((haversine_single((lat, lon), c, r_earth) for c in centroids), default=float("inf"))
        inside.append(d <= radius_m)
    events, prev = [], False
    for (t, _, _), now in zip(trace, inside):
        if now != prev:
            events.append((t, "ap_detection" if now else "cruise"))
        prev = now
    return events
