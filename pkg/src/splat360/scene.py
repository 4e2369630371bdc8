"""Scene primitives, cameras, image buffers, and scene file I/O.

Conventions fixed here and relied on everywhere else:
  - world space is right-handed, world up is +z;
  - camera frames satisfy right = forward x up;
  - radiance is linear, no gamma until 8-bit export;
  - pixel (row, col) is sampled at its center, row 0 is the top image row
    and +v in camera space points up.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidPrimitiveError, SceneFormatError

# Covariance eigenvalues below this are treated as singular.
MIN_EIGENVALUE = 1e-12
# Extent multiplier used for scene bounds; matches the renderer's Mahalanobis cutoff.
BOUND_SIGMA = 3.0

_WORLD_UP = np.array([0.0, 0.0, 1.0])
_WORLD_ALT = np.array([1.0, 0.0, 0.0])


def _vec3(v, name: str) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    if a.shape != (3,):
        raise ValueError(f"{name} must be a 3-vector, got shape {a.shape}")
    return a.copy()


@dataclass
class GaussianPrimitive:
    """One splat: center, covariance, opacity, two radiance terms, orientation.

    l_iso is the view-independent radiance, l_aniso the view-dependent one;
    `normal` and `g` steer the angular redistribution of l_aniso.
    """

    mu: np.ndarray
    cov: np.ndarray
    alpha: float
    l_iso: np.ndarray
    l_aniso: np.ndarray
    normal: np.ndarray
    g: float

    def __post_init__(self):
        self.mu = _vec3(self.mu, "mu")
        self.cov = np.asarray(self.cov, dtype=np.float64).copy()
        if self.cov.shape != (3, 3):
            raise ValueError(f"cov must be 3x3, got shape {self.cov.shape}")
        self.alpha = float(self.alpha)
        self.l_iso = _vec3(self.l_iso, "l_iso")
        self.l_aniso = _vec3(self.l_aniso, "l_aniso")
        self.normal = _vec3(self.normal, "normal")
        self.g = float(self.g)

    def sigma_max(self) -> float:
        """Standard deviation along the widest principal axis."""
        return float(np.sqrt(np.linalg.eigvalsh(self.cov)[-1]))

    def violations(self) -> list[str]:
        out = []
        if not np.all(np.isfinite(self.mu)):
            out.append("mu not finite")
        if not np.all(np.isfinite(self.cov)):
            out.append("cov not finite")
        elif not np.allclose(self.cov, self.cov.T, rtol=0.0, atol=1e-12):
            out.append("cov not symmetric")
        elif np.linalg.eigvalsh(0.5 * (self.cov + self.cov.T))[0] < MIN_EIGENVALUE:
            out.append("cov not positive-definite")
        if not (math.isfinite(self.alpha) and 0.0 < self.alpha <= 1.0):
            out.append("alpha out of range")
        if not (np.all(np.isfinite(self.l_iso)) and np.all(self.l_iso >= 0.0) and np.all(self.l_iso <= 1.0)):
            out.append("l_iso out of range")
        if not (np.all(np.isfinite(self.l_aniso)) and np.all(self.l_aniso >= 0.0)):
            out.append("l_aniso negative")
        if not np.all(np.isfinite(self.normal)) or abs(np.linalg.norm(self.normal) - 1.0) > 1e-9:
            out.append("normal not unit")
        if not (math.isfinite(self.g) and -1.0 < self.g < 1.0):
            out.append("g out of range")
        return out


def eval_gaussian(p: GaussianPrimitive, x) -> float:
    """alpha * exp(-1/2 (x-mu)^T cov^-1 (x-mu)); exactly alpha at x = mu."""
    x = _vec3(x, "x")
    sym = 0.5 * (p.cov + p.cov.T)
    if np.linalg.eigvalsh(sym)[0] < MIN_EIGENVALUE:
        raise InvalidPrimitiveError("singular covariance (eigenvalue < 1e-12)")
    delta = x - p.mu
    quad = float(delta @ np.linalg.solve(sym, delta))
    return p.alpha * math.exp(-0.5 * max(quad, 0.0))


@dataclass
class Scene:
    """Immutable-by-convention list of primitives plus a background radiance.

    Derived bounds are recomputed at construction; to change the gaussians,
    build a new Scene (concurrent renders share scenes read-only).
    """

    gaussians: tuple[GaussianPrimitive, ...]
    background: np.ndarray
    bounds_min: np.ndarray = field(init=False)
    bounds_max: np.ndarray = field(init=False)
    center: np.ndarray = field(init=False)
    radius: float = field(init=False)

    def __post_init__(self):
        self.gaussians = tuple(self.gaussians)
        self.background = _vec3(self.background, "background")
        if not self.gaussians:
            self.bounds_min = np.zeros(3)
            self.bounds_max = np.zeros(3)
            self.center = np.zeros(3)
            self.radius = 0.0
            return
        mus = np.array([p.mu for p in self.gaussians])
        ext = np.array([BOUND_SIGMA * p.sigma_max() for p in self.gaussians])
        self.bounds_min = (mus - ext[:, None]).min(axis=0)
        self.bounds_max = (mus + ext[:, None]).max(axis=0)
        self.center = 0.5 * (self.bounds_min + self.bounds_max)
        self.radius = float(np.max(np.linalg.norm(mus - self.center, axis=1) + ext))

    def with_gaussians(self, gaussians) -> "Scene":
        return Scene(tuple(gaussians), self.background)


def validate_scene(s: Scene) -> list[str]:
    """Empty list iff valid; each entry names the primitive index and rule."""
    out = []
    if not np.all(np.isfinite(s.background)) or np.any(s.background < 0.0):
        out.append("background not finite and non-negative")
    for i, p in enumerate(s.gaussians):
        out.extend(f"gaussian {i}: {v}" for v in p.violations())
    return out


def _normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("cannot normalize zero vector")
    return v / n


@dataclass
class Camera:
    """Pinhole camera with an explicit orthonormal frame (right = forward x up)."""

    position: np.ndarray
    forward: np.ndarray
    up: np.ndarray
    right: np.ndarray
    fov_y: float
    width: int
    height: int
    near: float = 1e-3

    def __post_init__(self):
        self.position = _vec3(self.position, "position")
        self.forward = _vec3(self.forward, "forward")
        self.up = _vec3(self.up, "up")
        self.right = _vec3(self.right, "right")
        self.fov_y = float(self.fov_y)
        self.width = int(self.width)
        self.height = int(self.height)
        self.near = float(self.near)
        if not 0.0 < self.fov_y < math.pi:
            raise ValueError("fov_y must be in (0, pi)")
        if self.width < 1 or self.height < 1:
            raise ValueError("width and height must be >= 1")
        if not self.near > 0.0:
            raise ValueError("near must be > 0")
        for name, v in (("forward", self.forward), ("up", self.up), ("right", self.right)):
            if abs(np.linalg.norm(v) - 1.0) > 1e-9:
                raise ValueError(f"{name} must be unit length")
        if (abs(self.forward @ self.up) > 1e-9
                or np.max(np.abs(np.cross(self.forward, self.up) - self.right)) > 1e-9):
            raise ValueError("camera frame must be orthonormal with right = forward x up")

    @classmethod
    def look_at(cls, position, target, fov_y: float, width: int, height: int,
                near: float = 1e-3) -> "Camera":
        """Camera at `position` looking at `target`, up chosen near world +z."""
        position = _vec3(position, "position")
        forward = _normalize(_vec3(target, "target") - position)
        axis = _WORLD_UP if np.linalg.norm(np.cross(forward, _WORLD_UP)) > 1e-6 else _WORLD_ALT
        right = _normalize(np.cross(forward, axis))
        up = np.cross(right, forward)
        return cls(position, forward, up, right, fov_y, width, height, near)

    def pixel_dirs(self, rows, cols):
        """Unit ray directions through pixel centers; broadcasts rows/cols.

        Returns (dx, dy, dz) arrays. This is the only place ray directions are
        computed, so scalar and tile paths agree bitwise.
        """
        rows = np.asarray(rows, dtype=np.float64)
        cols = np.asarray(cols, dtype=np.float64)
        u = (cols + 0.5) / self.width * 2.0 - 1.0
        v = 1.0 - (rows + 0.5) / self.height * 2.0
        t = math.tan(0.5 * self.fov_y)
        a = self.width / self.height * t
        dx = self.forward[0] + u * (a * self.right[0]) + v * (t * self.up[0])
        dy = self.forward[1] + u * (a * self.right[1]) + v * (t * self.up[1])
        dz = self.forward[2] + u * (a * self.right[2]) + v * (t * self.up[2])
        n = np.sqrt(dx * dx + dy * dy + dz * dz)
        return dx / n, dy / n, dz / n

    def ray_through_pixel(self, row: int, col: int) -> "Ray":
        dx, dy, dz = self.pixel_dirs(np.array([float(row)]), np.array([float(col)]))
        return Ray(self.position, np.array([dx[0], dy[0], dz[0]]))


@dataclass
class Ray:
    origin: np.ndarray
    dir: np.ndarray

    def __post_init__(self):
        self.origin = _vec3(self.origin, "origin")
        self.dir = _vec3(self.dir, "dir")
        if abs(np.linalg.norm(self.dir) - 1.0) > 1e-9:
            raise ValueError("ray dir must be unit length")


class ImageKind(str, enum.Enum):
    RADIANCE = "radiance"
    DEPTH = "depth"
    LINE_INTEGRAL = "line_integral"
    TRANSMITTANCE = "transmittance"


@dataclass
class ImageBuffer:
    """H x W x C float64 image; kind records channel semantics."""

    data: np.ndarray
    kind: ImageKind

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 2:
            self.data = self.data[:, :, None]
        if self.data.ndim != 3 or self.data.shape[2] not in (1, 3):
            raise ValueError(f"image data must be HxWx1 or HxWx3, got {self.data.shape}")
        self.kind = ImageKind(self.kind)
        if self.kind is ImageKind.RADIANCE and not np.all(np.isfinite(self.data)):
            raise ValueError("radiance images must be finite")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def make_orbit_cameras(center, radius: float, n: int, elevation: float, mode: str,
                       width: int, height: int, fov_y: float, near: float = 1e-3) -> list[Camera]:
    """Cameras on an orbit around `center`, all looking at it.

    ring: n uniform azimuth steps at fixed `elevation` (radians above the xy
    plane). fibonacci_sphere: n Fibonacci-lattice directions covering the whole
    sphere; `elevation` is ignored in that mode.
    """
    center = _vec3(center, "center")
    if n < 1:
        raise ValueError("n must be >= 1")
    if radius <= 0.0:
        raise ValueError("radius must be > 0")
    dirs = []
    if mode == "ring":
        ce, se = math.cos(elevation), math.sin(elevation)
        for i in range(n):
            az = 2.0 * math.pi * i / n
            dirs.append(np.array([math.cos(az) * ce, math.sin(az) * ce, se]))
    elif mode == "fibonacci_sphere":
        golden = math.pi * (3.0 - math.sqrt(5.0))
        for i in range(n):
            z = 1.0 - (2.0 * i + 1.0) / n
            s = math.sqrt(max(1.0 - z * z, 0.0))
            dirs.append(np.array([math.cos(golden * i) * s, math.sin(golden * i) * s, z]))
    else:
        raise ValueError(f"unknown orbit mode {mode!r}")
    return [Camera.look_at(center + radius * d, center, fov_y, width, height, near)
            for d in dirs]


# ---------------------------------------------------------------------------
# Scene file format: UTF-8 JSON, background + gaussians, cov as upper triangle
# in order xx, xy, xz, yy, yz, zz. Unknown keys are rejected.

_GAUSSIAN_KEYS = ("mu", "cov", "alpha", "l_iso", "l_aniso", "normal", "g")


def _cov_to_triu(cov: np.ndarray) -> list[float]:
    return [cov[0, 0], cov[0, 1], cov[0, 2], cov[1, 1], cov[1, 2], cov[2, 2]]


def _triu_to_cov(t) -> np.ndarray:
    xx, xy, xz, yy, yz, zz = (float(v) for v in t)
    return np.array([[xx, xy, xz], [xy, yy, yz], [xz, yz, zz]])


def scene_to_json(scene: Scene) -> dict:
    return {
        "background": [float(v) for v in scene.background],
        "gaussians": [
            {
                "mu": [float(v) for v in p.mu],
                "cov": [float(v) for v in _cov_to_triu(p.cov)],
                "alpha": float(p.alpha),
                "l_iso": [float(v) for v in p.l_iso],
                "l_aniso": [float(v) for v in p.l_aniso],
                "normal": [float(v) for v in p.normal],
                "g": float(p.g),
            }
            for p in scene.gaussians
        ],
    }


def _require_floats(obj, n: int, where: str) -> list[float]:
    if not isinstance(obj, list) or len(obj) != n:
        raise SceneFormatError(f"{where} must be a list of {n} numbers")
    out = []
    for v in obj:
        if not isinstance(v, (int, float)) or isinstance(v, bool) or not math.isfinite(v):
            raise SceneFormatError(f"{where} must contain finite numbers")
        out.append(float(v))
    return out


def scene_from_json(obj) -> Scene:
    if not isinstance(obj, dict):
        raise SceneFormatError("scene file must hold a JSON object")
    unknown = set(obj) - {"background", "gaussians"}
    if unknown:
        raise SceneFormatError(f"unknown scene key {sorted(unknown)[0]!r}")
    if "background" not in obj or "gaussians" not in obj:
        raise SceneFormatError("scene file needs 'background' and 'gaussians'")
    background = _require_floats(obj["background"], 3, "background")
    if not isinstance(obj["gaussians"], list):
        raise SceneFormatError("'gaussians' must be a list")
    prims = []
    for i, entry in enumerate(obj["gaussians"]):
        where = f"gaussian {i}"
        if not isinstance(entry, dict):
            raise SceneFormatError(f"{where} must be an object")
        unknown = set(entry) - set(_GAUSSIAN_KEYS)
        if unknown:
            raise SceneFormatError(f"{where}: unknown key {sorted(unknown)[0]!r}")
        missing = set(_GAUSSIAN_KEYS) - set(entry)
        if missing:
            raise SceneFormatError(f"{where}: missing key {sorted(missing)[0]!r}")
        for scalar_key in ("alpha", "g"):
            v = entry[scalar_key]
            if not isinstance(v, (int, float)) or isinstance(v, bool) or not math.isfinite(v):
                raise SceneFormatError(f"{where}: {scalar_key} must be a finite number")
        prims.append(GaussianPrimitive(
            mu=np.array(_require_floats(entry["mu"], 3, f"{where}: mu")),
            cov=_triu_to_cov(_require_floats(entry["cov"], 6, f"{where}: cov")),
            alpha=float(entry["alpha"]),
            l_iso=np.array(_require_floats(entry["l_iso"], 3, f"{where}: l_iso")),
            l_aniso=np.array(_require_floats(entry["l_aniso"], 3, f"{where}: l_aniso")),
            normal=np.array(_require_floats(entry["normal"], 3, f"{where}: normal")),
            g=float(entry["g"]),
        ))
    scene = Scene(tuple(prims), np.array(background))
    problems = validate_scene(scene)
    if problems:
        raise SceneFormatError("invalid scene: " + "; ".join(problems))
    return scene


def _reject_constant(name):
    raise SceneFormatError(f"non-finite JSON constant {name!r} not allowed")


def load_scene(path) -> Scene:
    try:
        with open(path, "r", encoding="utf-8") as f:
            obj = json.load(f, parse_constant=_reject_constant)
    except OSError as e:
        raise SceneFormatError(f"cannot read scene file: {e}") from e
    except json.JSONDecodeError as e:
        raise SceneFormatError(f"scene file is not valid JSON: {e}") from e
    return scene_from_json(obj)


def save_scene(path, scene: Scene) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(scene_to_json(scene), f, indent=1)
        f.write("\n")


def make_random_scene(n: int, seed: int, spread: float = 1.0,
                      sigma_range: tuple[float, float] = (0.008, 0.02),
                      alpha_range: tuple[float, float] = (0.3, 0.95),
                      aniso_max: float = 0.5,
                      background=(0.1, 0.1, 0.1)) -> Scene:
    """Seeded random scene: n splats in a ball of radius `spread`."""
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    mu = u * (spread * rng.uniform(0.0, 1.0, n) ** (1.0 / 3.0))[:, None]
    sig = rng.uniform(sigma_range[0], sigma_range[1], (n, 3)) * spread
    basis, _ = np.linalg.qr(rng.normal(size=(n, 3, 3)))
    cov = np.einsum("gij,gj,gkj->gik", basis, sig ** 2, basis)
    cov = 0.5 * (cov + np.transpose(cov, (0, 2, 1)))
    alpha = rng.uniform(alpha_range[0], alpha_range[1], n)
    l_iso = rng.uniform(0.05, 0.95, (n, 3))
    l_aniso = rng.uniform(0.0, aniso_max, (n, 3))
    nrm = rng.normal(size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    g = rng.uniform(-0.8, 0.8, n)
    prims = [GaussianPrimitive(mu[i], cov[i], float(alpha[i]), l_iso[i],
                               l_aniso[i], nrm[i], float(g[i])) for i in range(n)]
    return Scene(tuple(prims), np.asarray(background, dtype=np.float64))


def perturb_appearance(scene: Scene, seed: int, rel: float = 0.2) -> Scene:
    """Jitter every appearance parameter by a random relative factor in
    [1-rel, 1+rel]; geometry stays untouched and constrained values are
    clipped back into their legal ranges.

    The standard way to build a fit-recovery problem with known ground truth.
    """
    rng = np.random.default_rng(seed)
    lo, hi = 1.0 - rel, 1.0 + rel
    out = []
    for p in scene.gaussians:
        out.append(replace(
            p,
            alpha=float(np.clip(p.alpha * rng.uniform(lo, hi), 1e-4, 1.0)),
            l_iso=np.clip(p.l_iso * rng.uniform(lo, hi, 3), 0.0, 1.0),
            l_aniso=p.l_aniso * rng.uniform(lo, hi, 3),
            g=float(np.clip(p.g * rng.uniform(lo, hi), -0.999, 0.999))))
    return Scene(tuple(out), scene.background)
