"""Front-to-back compositing of Gaussian splats with direction-disentangled radiance.

Per-ray model: each primitive contributes at its closest approach along the
ray (in the Mahalanobis metric), with weight w = alpha * exp(-q/2) where q is
the squared Mahalanobis distance at that point. Contributions are t-sorted and
alpha-composited front to back: color = sum_i T_i w_i c_i + T_final * background
with T_{i+1} = T_i (1 - w_i) and c_i = l_iso + f_i * l_aniso. The factor
f = (1 - g^2) / (s * sqrt(s)), s = 1 + g^2 - 2 g (dir . normal), is the
Henyey-Greenstein lobe normalized so f = 1 when g = 0.

Bit-determinism: every color-producing path (tiles, single rays, the fitting
forward pass) runs the same arithmetic expressions in the same order; per-pixel
reductions use sequential scans (np.cumsum / np.cumprod), so results are
independent of tile size, worker count, and of zero-weight entries that
per-tile culling may or may not include. Matrix products and pairwise sums are
deliberately avoided in per-pixel math.
"""
from __future__ import annotations

import atexit
import math
import multiprocessing
from dataclasses import dataclass

import numpy as np

from .errors import InvalidPrimitiveError
from .scene import Camera, ImageBuffer, ImageKind, Ray, Scene, MIN_EIGENVALUE

FINE_TILE = 16
COARSE_TILE = 64


@dataclass
class RenderConfig:
    """Compositing controls and ablation toggles.

    disentangle=False folds l_aniso into l_iso (f pinned to 1);
    anisotropy_enabled=False drops the anisotropic term entirely (f pinned
    to 0). When both are off, anisotropy_enabled wins: there is no
    anisotropic radiance to fold.
    """

    termination_epsilon: float = 1e-3
    cutoff_sigma: float = 3.0
    disentangle: bool = True
    anisotropy_enabled: bool = True

    def __post_init__(self):
        if not 0.0 < self.termination_epsilon < 1.0:
            raise ValueError("termination_epsilon must be in (0,1)")
        if not self.cutoff_sigma > 0.0:
            raise ValueError("cutoff_sigma must be > 0")


@dataclass
class RaySample:
    index: int
    t: float
    weight: float
    transmittance_before: float


def phase(dir, normal, g: float) -> float:
    """Henyey-Greenstein phase value for cos(theta) = dir . normal.

    Positive everywhere and integrates to 1 over the unit sphere.
    """
    if not -1.0 < g < 1.0:
        raise ValueError("g must be in (-1, 1)")
    d = np.asarray(dir, dtype=np.float64)
    n = np.asarray(normal, dtype=np.float64)
    cos = d[0] * n[0] + d[1] * n[1] + d[2] * n[2]
    s = (1.0 + g * g) - (2.0 * g) * cos
    return (1.0 - g * g) / (4.0 * math.pi * (s * math.sqrt(s)))


class ScenePrecompute:
    """Per-scene flat arrays the kernel consumes; cached on the Scene object."""

    __slots__ = ("n", "mu0", "mu1", "mu2", "i00", "i01", "i02", "i11", "i12", "i22",
                 "alpha", "li0", "li1", "li2", "la0", "la1", "la2",
                 "n0", "n1", "n2", "g", "rad", "bg")

    @classmethod
    def from_scene(cls, scene: Scene) -> "ScenePrecompute":
        self = cls()
        G = len(scene.gaussians)
        self.n = G
        self.bg = np.asarray(scene.background, dtype=np.float64).copy()
        if G == 0:
            for name in cls.__slots__[1:-1]:
                setattr(self, name, np.zeros(0))
            return self
        mu = np.array([p.mu for p in scene.gaussians])
        cov = np.array([0.5 * (p.cov + p.cov.T) for p in scene.gaussians])
        eig = np.linalg.eigvalsh(cov)
        bad = np.where(eig[:, 0] < MIN_EIGENVALUE)[0]
        if bad.size:
            raise InvalidPrimitiveError(
                f"gaussian {bad[0]}: singular covariance (eigenvalue < 1e-12)")
        inv = np.linalg.inv(cov)
        inv = 0.5 * (inv + np.transpose(inv, (0, 2, 1)))
        self.mu0, self.mu1, self.mu2 = (np.ascontiguousarray(mu[:, k]) for k in range(3))
        self.i00 = np.ascontiguousarray(inv[:, 0, 0])
        self.i01 = np.ascontiguousarray(inv[:, 0, 1])
        self.i02 = np.ascontiguousarray(inv[:, 0, 2])
        self.i11 = np.ascontiguousarray(inv[:, 1, 1])
        self.i12 = np.ascontiguousarray(inv[:, 1, 2])
        self.i22 = np.ascontiguousarray(inv[:, 2, 2])
        self.alpha = np.array([p.alpha for p in scene.gaussians])
        li = np.array([p.l_iso for p in scene.gaussians])
        la = np.array([p.l_aniso for p in scene.gaussians])
        nr = np.array([p.normal for p in scene.gaussians])
        self.li0, self.li1, self.li2 = (np.ascontiguousarray(li[:, k]) for k in range(3))
        self.la0, self.la1, self.la2 = (np.ascontiguousarray(la[:, k]) for k in range(3))
        self.n0, self.n1, self.n2 = (np.ascontiguousarray(nr[:, k]) for k in range(3))
        self.g = np.array([p.g for p in scene.gaussians])
        self.rad = 3.0 * np.sqrt(eig[:, 2])
        return self

    def state(self):
        return {name: getattr(self, name) for name in self.__slots__}

    @classmethod
    def from_state(cls, st) -> "ScenePrecompute":
        self = cls()
        for name, v in st.items():
            setattr(self, name, v)
        return self


def precompute(scene: Scene) -> ScenePrecompute:
    pre = scene.__dict__.get("_precompute")
    if pre is None:
        pre = ScenePrecompute.from_scene(scene)
        scene.__dict__["_precompute"] = pre
    return pre


def _origin_terms(pre: ScenePrecompute, origin: np.ndarray):
    """Per-gaussian quantities that depend only on the ray origin."""
    d0 = pre.mu0 - origin[0]
    d1 = pre.mu1 - origin[1]
    d2 = pre.mu2 - origin[2]
    v0 = pre.i00 * d0 + pre.i01 * d1 + pre.i02 * d2
    v1 = pre.i01 * d0 + pre.i11 * d1 + pre.i12 * d2
    v2 = pre.i02 * d0 + pre.i12 * d1 + pre.i22 * d2
    cg = np.maximum(d0 * v0 + d1 * v1 + d2 * v2, 0.0)
    dist = np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
    return v0, v1, v2, cg, dist


def _ray_geometry(pre, v0, v1, v2, cg, dx, dy, dz, sub):
    """t of peak weight and squared Mahalanobis distance there.

    dx/dy/dz are [P] ray direction components (one shared origin), sub indexes
    the gaussians under consideration. Returns [P, len(sub)] arrays. Buffers
    are reused aggressively; the expression grouping (and therefore every bit
    of the result) matches the reference forms
        tn  = dx*v0 + dy*v1 + dz*v2
        den = i00 dx^2 + i11 dy^2 + i22 dz^2 + 2 (i01 dx dy + i02 dx dz + i12 dy dz)
        ts  = tn / den,  q = max(cg - tn*ts, 0)
    """
    dxc = dx[:, None]
    dyc = dy[:, None]
    dzc = dz[:, None]
    tn = dxc * v0[sub]
    tmp = dyc * v1[sub]
    tn += tmp
    np.multiply(dzc, v2[sub], out=tmp)
    tn += tmp
    pair = dxc * dxc
    den = pre.i00[sub] * pair
    np.multiply(dyc, dyc, out=pair)
    np.multiply(pre.i11[sub], pair, out=tmp)
    den += tmp
    np.multiply(dzc, dzc, out=pair)
    np.multiply(pre.i22[sub], pair, out=tmp)
    den += tmp
    np.multiply(dxc, dyc, out=pair)
    cross = pre.i01[sub] * pair
    np.multiply(dxc, dzc, out=pair)
    np.multiply(pre.i02[sub], pair, out=tmp)
    cross += tmp
    np.multiply(dyc, dzc, out=pair)
    np.multiply(pre.i12[sub], pair, out=tmp)
    cross += tmp
    cross *= 2.0
    den += cross
    np.divide(tn, den, out=den)
    ts = den
    np.multiply(tn, ts, out=tn)
    np.subtract(cg[sub], tn, out=tn)
    np.maximum(tn, 0.0, out=tn)
    return ts, tn


def _phase_factor(pre, dx, dy, dz, sub):
    """Normalized anisotropy factor f = 4*pi*phase, elementwise over [P, sub].

    Grouping matches s = (1 + g^2) - (2 g) cos, f = (1 - g^2) / (s sqrt(s)).
    """
    cos = dx[:, None] * pre.n0[sub]
    tmp = dy[:, None] * pre.n1[sub]
    cos += tmp
    np.multiply(dz[:, None], pre.n2[sub], out=tmp)
    cos += tmp
    gk = pre.g[sub]
    g2 = gk * gk
    np.multiply(2.0 * gk, cos, out=cos)
    np.subtract(1.0 + g2, cos, out=cos)
    s = cos
    np.sqrt(s, out=tmp)
    np.multiply(s, tmp, out=tmp)
    np.divide(1.0 - g2, tmp, out=tmp)
    return tmp


def _composite(pre, cfg: RenderConfig, near: float, origin_terms, dx, dy, dz,
               sub=None, fused_streams=False):
    """Shared compositing kernel over P rays with one origin.

    Returns (color [P,3], depth [P], final_T [P]) plus, when fused_streams,
    the separately accumulated isotropic / anisotropic sums [P,3] each.
    """
    v0, v1, v2, cg, _ = origin_terms
    P = dx.shape[0]
    if sub is None:
        sub = np.arange(pre.n)
    bg = pre.bg
    empty_extra = (np.zeros((P, 3)), np.zeros((P, 3))) if fused_streams else ()
    if sub.size == 0:
        color = np.broadcast_to(bg, (P, 3)).copy()
        return (color, np.zeros(P), np.ones(P)) + empty_extra

    ts, q = _ray_geometry(pre, v0, v1, v2, cg, dx, dy, dz, sub)
    cutoff2 = cfg.cutoff_sigma * cfg.cutoff_sigma
    live = q <= cutoff2
    live &= ts >= near
    colmask = live.any(axis=0)
    k2 = sub[colmask]
    if k2.size == 0:
        color = np.broadcast_to(bg, (P, 3)).copy()
        return (color, np.zeros(P), np.ones(P)) + empty_extra
    if k2.size < sub.size:
        ts = np.ascontiguousarray(ts[:, colmask])
        q = np.ascontiguousarray(q[:, colmask])
        live = live[:, colmask]
    Gc = k2.size
    # w = live * alpha * exp(-q/2), built in place in q (dead entries are
    # multiplied to an exact +0.0, same bits as masking with where)
    np.multiply(q, -0.5, out=q)
    np.exp(q, out=q)
    np.multiply(pre.alpha[k2], q, out=q)
    np.multiply(q, live, out=q)
    w = q

    if cfg.anisotropy_enabled:
        if cfg.disentangle:
            f = _phase_factor(pre, dx, dy, dz, k2)
            a0 = f * pre.la0[k2]
            a1 = f * pre.la1[k2]
            a2 = f * pre.la2[k2]
        else:
            a0, a1, a2 = pre.la0[k2], pre.la1[k2], pre.la2[k2]
        c0 = pre.li0[k2] + a0
        c1 = pre.li1[k2] + a1
        c2 = pre.li2[k2] + a2
    else:
        a0 = a1 = a2 = None
        c0, c1, c2 = pre.li0[k2], pre.li1[k2], pre.li2[k2]

    order = np.argsort(ts, axis=1, kind="stable")
    prow = np.arange(P)[:, None]
    flat = order + prow * Gc
    w_s = np.take(w, flat)
    C = np.cumprod(1.0 - w_s, axis=1)
    eps = cfg.termination_epsilon
    terminated = C < eps
    anyterm = terminated.any(axis=1)
    first = np.argmax(terminated, axis=1)
    final_T = np.where(anyterm, C[prow[:, 0], first], C[:, -1])
    # columns past every ray's termination point contribute exactly nothing
    kmax = int(np.max(np.where(anyterm, first, Gc - 1))) + 1
    w_s = w_s[:, :kmax]
    Tb = np.empty((P, kmax))
    Tb[:, 0] = 1.0
    Tb[:, 1:] = C[:, :kmax - 1]
    # tw = (Tb >= eps) * Tb * w_s, built in place in Tb (exact +0.0 masking)
    keep = Tb >= eps
    np.multiply(Tb, w_s, out=Tb)
    np.multiply(Tb, keep, out=Tb)
    tw = Tb
    order = order[:, :kmax]
    flat = flat[:, :kmax]

    def _sorted(values):
        return np.take(values, flat if values.ndim == 2 else order)

    # each row of `stack` holds tw * (per-sample value, t-sorted); the column
    # loop below runs the same front-to-back sequential sum as a per-quantity
    # cumsum would, leaving the accumulated totals in `tot`
    nq = 11 if fused_streams else 5
    stack = np.empty((nq, P, kmax))
    np.multiply(tw, _sorted(c0), out=stack[0])
    np.multiply(tw, _sorted(c1), out=stack[1])
    np.multiply(tw, _sorted(c2), out=stack[2])
    np.multiply(tw, _sorted(ts), out=stack[3])
    stack[4] = tw
    if fused_streams:
        np.multiply(tw, np.take(pre.li0[k2], order), out=stack[5])
        np.multiply(tw, np.take(pre.li1[k2], order), out=stack[6])
        np.multiply(tw, np.take(pre.li2[k2], order), out=stack[7])
        if a0 is not None:
            np.multiply(tw, _sorted(a0), out=stack[8])
            np.multiply(tw, _sorted(a1), out=stack[9])
            np.multiply(tw, _sorted(a2), out=stack[10])
        else:
            stack[8:] = 0.0
    tot = stack[:, :, 0].copy()
    for j in range(1, kmax):
        np.add(tot, stack[:, :, j], out=tot)
    color = np.empty((P, 3))
    color[:, 0] = tot[0] + final_T * bg[0]
    color[:, 1] = tot[1] + final_T * bg[1]
    color[:, 2] = tot[2] + final_T * bg[2]
    depth = np.zeros(P)
    np.divide(tot[3], tot[4], out=depth, where=tot[4] > 0)
    if not fused_streams:
        return color, depth, final_T
    iso = np.ascontiguousarray(tot[5:8].T)
    aniso = np.ascontiguousarray(tot[8:11].T)
    return color, depth, final_T, iso, aniso


def _scene_pre_for(p) -> ScenePrecompute:
    from .scene import GaussianPrimitive  # local to avoid cycle confusion
    if not isinstance(p, GaussianPrimitive):
        raise TypeError("expected a GaussianPrimitive")
    return ScenePrecompute.from_scene(Scene((p,), np.zeros(3)))


def ray_gaussian_weight(p, r: Ray, near: float = 0.0,
                        cutoff_sigma: float = 3.0) -> tuple[float, float]:
    """(t of peak weight, weight) for one primitive along one ray.

    The weight is zero when the peak lies before `near` or farther than
    `cutoff_sigma` Mahalanobis units from the center.
    """
    pre = _scene_pre_for(p)
    ot = _origin_terms(pre, r.origin)
    v0, v1, v2, cg, _ = ot
    dx = np.array([r.dir[0]])
    dy = np.array([r.dir[1]])
    dz = np.array([r.dir[2]])
    sub = np.arange(1)
    ts, q = _ray_geometry(pre, v0, v1, v2, cg, dx, dy, dz, sub)
    dxc = dx[:, None]
    dyc = dy[:, None]
    dzc = dz[:, None]
    den = (pre.i00[sub] * (dxc * dxc) + pre.i11[sub] * (dyc * dyc)
           + pre.i22[sub] * (dzc * dzc)
           + 2.0 * (pre.i01[sub] * (dxc * dyc) + pre.i02[sub] * (dxc * dzc)
                    + pre.i12[sub] * (dyc * dzc)))
    if not den[0, 0] > 0.0:
        raise InvalidPrimitiveError("direction quadratic form not positive")
    t_star = float(ts[0, 0])
    qv = float(q[0, 0])
    if qv > cutoff_sigma * cutoff_sigma or t_star < near:
        return t_star, 0.0
    w = p.alpha * math.exp(-0.5 * qv)
    return t_star, min(max(w, 0.0), 1.0)


def composite_ray(scene: Scene, r: Ray, cfg: RenderConfig | None = None,
                  near: float = 0.0):
    """Composite one ray: (color 3-vector, depth, final transmittance, samples).

    Runs the same kernel as `render`, so a pixel rendered through its center
    matches this bitwise. `samples` lists the contributing primitives front to
    back with the transmittance seen by each.
    """
    cfg = cfg if cfg is not None else RenderConfig()
    pre = precompute(scene)
    ot = _origin_terms(pre, r.origin)
    dx = np.array([r.dir[0]])
    dy = np.array([r.dir[1]])
    dz = np.array([r.dir[2]])
    color, depth, final_T = _composite(pre, cfg, near, ot, dx, dy, dz)
    samples: list[RaySample] = []
    if pre.n:
        v0, v1, v2, cg, _ = ot
        sub = np.arange(pre.n)
        ts, q = _ray_geometry(pre, v0, v1, v2, cg, dx, dy, dz, sub)
        cutoff2 = cfg.cutoff_sigma * cfg.cutoff_sigma
        live = (q <= cutoff2) & (ts >= near)
        w = np.where(live, pre.alpha * np.exp(-0.5 * q), 0.0)[0]
        tsr = ts[0]
        hit = np.where(live[0])[0]
        hit = hit[np.argsort(tsr[hit], kind="stable")]
        T = 1.0
        for idx in hit:
            if T < cfg.termination_epsilon:
                break
            samples.append(RaySample(int(idx), float(tsr[idx]), float(w[idx]), T))
            T = T * (1.0 - w[idx])
    return color[0], float(depth[0]), float(final_T[0]), samples


def _cone_cull(pre, origin, dist, cd, gamma, sub):
    """Indices in `sub` whose 3-sigma bounding ball can meet a ray in the cone.

    Conservative: a primitive contributes weight only where the ray passes
    within 3 sigma of its center, and every such ray lies within `gamma` of
    the cone axis once the ball's angular radius is subtracted.
    """
    d0 = pre.mu0[sub] - origin[0]
    d1 = pre.mu1[sub] - origin[1]
    d2 = pre.mu2[sub] - origin[2]
    ds = dist[sub]
    rad = pre.rad[sub]
    inside = ds <= rad
    cos = np.ones(sub.size)
    np.divide(d0 * cd[0] + d1 * cd[1] + d2 * cd[2], ds, out=cos, where=ds > 0)
    ang = np.arccos(np.clip(cos, -1.0, 1.0))
    halfap = np.arcsin(np.clip(np.divide(rad, np.maximum(ds, 1e-300)), 0.0, 1.0))
    return sub[(ang - halfap <= gamma) | inside]


def _cone_of(dxb, dyb, dzb):
    """Axis (unit 3-vector) and half-angle of the cone containing given dirs."""
    ax = float(np.mean(dxb))
    ay = float(np.mean(dyb))
    az = float(np.mean(dzb))
    n = math.sqrt(ax * ax + ay * ay + az * az)
    if n == 0.0:
        return np.array([0.0, 0.0, 1.0]), math.pi
    ax, ay, az = ax / n, ay / n, az / n
    cosg = float(np.min(dxb * ax + dyb * ay + dzb * az))
    return np.array([ax, ay, az]), math.acos(min(max(cosg, -1.0), 1.0))


def _render_coarse_block(pre, cam, cfg, r0, r1, c0, c1, ot):
    """Render one coarse block; two-level cone culling, fine-tile kernel calls."""
    rows = np.arange(r0, r1, dtype=np.float64)
    cols = np.arange(c0, c1, dtype=np.float64)
    dxb, dyb, dzb = cam.pixel_dirs(rows[:, None], cols[None, :])
    Hb, Wb = dxb.shape
    color = np.empty((Hb, Wb, 3))
    depth = np.empty((Hb, Wb, 1))
    trans = np.empty((Hb, Wb, 1))
    if pre.n:
        cd, gamma = _cone_of(dxb, dyb, dzb)
        sub1 = _cone_cull(pre, cam.position, ot[4], cd, gamma, np.arange(pre.n))
    else:
        sub1 = np.arange(0)
    for fr in range(0, Hb, FINE_TILE):
        fr1 = min(fr + FINE_TILE, Hb)
        for fc in range(0, Wb, FINE_TILE):
            fc1 = min(fc + FINE_TILE, Wb)
            dxt = dxb[fr:fr1, fc:fc1]
            dyt = dyb[fr:fr1, fc:fc1]
            dzt = dzb[fr:fr1, fc:fc1]
            if sub1.size:
                cd, gamma = _cone_of(dxt, dyt, dzt)
                sub2 = _cone_cull(pre, cam.position, ot[4], cd, gamma, sub1)
            else:
                sub2 = sub1
            sh = dxt.shape
            col, dep, fT = _composite(pre, cfg, cam.near, ot,
                                      dxt.ravel(), dyt.ravel(), dzt.ravel(),
                                      sub=sub2)
            color[fr:fr1, fc:fc1] = col.reshape(sh + (3,))
            depth[fr:fr1, fc:fc1, 0] = dep.reshape(sh)
            trans[fr:fr1, fc:fc1, 0] = fT.reshape(sh)
    return color, depth, trans


def _coarse_blocks(height: int, width: int):
    return [(r, min(r + COARSE_TILE, height), c, min(c + COARSE_TILE, width))
            for r in range(0, height, COARSE_TILE)
            for c in range(0, width, COARSE_TILE)]


def _worker_render(payload):
    st, camf, cfgf, blocks = payload
    pre = ScenePrecompute.from_state(st)
    cam = Camera(**camf)
    cfg = RenderConfig(**cfgf)
    ot = _origin_terms(pre, cam.position)
    return [_render_coarse_block(pre, cam, cfg, r0, r1, c0, c1, ot)
            for (r0, r1, c0, c1) in blocks]


_POOLS: dict[int, "multiprocessing.pool.Pool"] = {}


def _pool_for(workers: int):
    pool = _POOLS.get(workers)
    if pool is None:
        ctx = multiprocessing.get_context("fork")
        pool = ctx.Pool(processes=workers)
        _POOLS[workers] = pool
    return pool


def _shutdown_pools():
    for pool in _POOLS.values():
        pool.terminate()
        pool.join()
    _POOLS.clear()


atexit.register(_shutdown_pools)


def render(scene: Scene, cam: Camera, cfg: RenderConfig | None = None,
           workers: int = 1):
    """Render color, depth, and transmittance images through pixel centers.

    Output is bitwise independent of `workers`; workers > 1 forks a process
    pool (reused across calls) and splits the image by coarse tile blocks.
    """
    cfg = cfg if cfg is not None else RenderConfig()
    if workers < 1:
        raise ValueError("workers must be >= 1")
    pre = precompute(scene)
    H, W = cam.height, cam.width
    blocks = _coarse_blocks(H, W)
    use_pool = (workers > 1 and len(blocks) > 1
                and "fork" in multiprocessing.get_all_start_methods())
    if not use_pool:
        ot = _origin_terms(pre, cam.position)
        results = [_render_coarse_block(pre, cam, cfg, r0, r1, c0, c1, ot)
                   for (r0, r1, c0, c1) in blocks]
    else:
        nw = min(workers, len(blocks))
        camf = dict(position=cam.position, forward=cam.forward, up=cam.up,
                    right=cam.right, fov_y=cam.fov_y, width=cam.width,
                    height=cam.height, near=cam.near)
        cfgf = dict(termination_epsilon=cfg.termination_epsilon,
                    cutoff_sigma=cfg.cutoff_sigma, disentangle=cfg.disentangle,
                    anisotropy_enabled=cfg.anisotropy_enabled)
        st = pre.state()
        splits = np.array_split(np.arange(len(blocks)), nw)
        payloads = [(st, camf, cfgf, [blocks[i] for i in chunk])
                    for chunk in splits if chunk.size]
        outs = _pool_for(workers).map(_worker_render, payloads)
        results = [blk for out in outs for blk in out]
    color = np.empty((H, W, 3))
    depth = np.empty((H, W, 1))
    trans = np.empty((H, W, 1))
    for (r0, r1, c0, c1), (cb, db, tb) in zip(blocks, results):
        color[r0:r1, c0:c1] = cb
        depth[r0:r1, c0:c1] = db
        trans[r0:r1, c0:c1] = tb
    return (ImageBuffer(color, ImageKind.RADIANCE),
            ImageBuffer(depth, ImageKind.DEPTH),
            ImageBuffer(trans, ImageKind.TRANSMITTANCE))


def render_rays(scene: Scene, origin, dirs, cfg: RenderConfig | None = None,
                near: float = 0.0, fused_streams: bool = False):
    """Composite a batch of rays sharing one origin.

    dirs is [P,3] of unit vectors. Returns (color [P,3], depth [P], final_T [P])
    and, when fused_streams, the isotropic and phase-weighted anisotropic sums
    accumulated separately (the inputs the fusion head consumes).
    """
    cfg = cfg if cfg is not None else RenderConfig()
    pre = precompute(scene)
    origin = np.asarray(origin, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    if dirs.ndim != 2 or dirs.shape[1] != 3:
        raise ValueError("dirs must be [P,3]")
    ot = _origin_terms(pre, origin)
    return _composite(pre, cfg, near, ot,
                      np.ascontiguousarray(dirs[:, 0]),
                      np.ascontiguousarray(dirs[:, 1]),
                      np.ascontiguousarray(dirs[:, 2]),
                      fused_streams=fused_streams)
