"""Gaussian-splat scenes, cameras and their file formats.

Parameters live in *activated* space (linear scales, opacity in (0, 1),
linear RGB) and are flattened group-major::

    x = (positions | scales | quaternions | opacities | colors)
         [0,3K)      [3K,6K)  [6K,10K)      [10K,11K)   [11K,14K)

Quaternions are stored unnormalized as (q_x, q_y, q_z, q_w) and are never
renormalized; every formula divides by ``|q|^2`` instead.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad

PARAMS_PER_SPLAT = 14

S_MIN = 1e-6
ALPHA_MIN = 1e-4
ALPHA_MAX = 0.995
C_MIN = 1e-6
C_MAX = 1.5

Z_NEAR = 0.01
LOWPASS = 0.3

PLY_COMMENT = "comment splat-tr v1"
PLY_PROPERTIES = (
    "x", "y", "z",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
    "opacity",
    "red", "green", "blue",
)


class SceneFormatError(ValueError):
    """A scene or camera file could not be parsed or violates invariants."""


# ---------------------------------------------------------------------------
# Quaternion / covariance math
# ---------------------------------------------------------------------------

def unnormalized_rotation(q) -> np.ndarray:
    """``|q|^2 * R(q)`` for a quaternion ``(q_x, q_y, q_z, q_w)``.

    Every entry is a quadratic form in ``q``; works on stacked ``(..., 4)``
    arrays and returns ``(..., 3, 3)``.
    """
    q = np.asarray(q, dtype=np.float64)
    x, y, z, w = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r2 = x * x + y * y + z * z + w * w
    rows = [
        [r2 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), r2 - 2 * (z * z + x * x), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), r2 - 2 * (x * x + y * y)],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def quat_to_rotation(q) -> np.ndarray:
    """Rotation matrix of an unnormalized quaternion ``(q_x, q_y, q_z, q_w)``.

    Invariant under ``q -> c q`` for any ``c != 0``.
    """
    q = np.asarray(q, dtype=np.float64)
    r2 = np.sum(q * q, axis=-1)
    if np.any(np.sqrt(r2) < 1e-12):
        raise ValueError("degenerate quaternion")
    return unnormalized_rotation(q) / r2[..., None, None]


def rotation_components(qx, qy, qz, qw):
    """Rotation entries ``R[i][j]`` as a nested list; accepts duals."""
    r2 = qx * qx + qy * qy + qz * qz + qw * qw
    inv = 1.0 / r2
    return [
        [1.0 - 2.0 * (qy * qy + qz * qz) * inv, 2.0 * (qx * qy - qw * qz) * inv, 2.0 * (qx * qz + qw * qy) * inv],
        [2.0 * (qx * qy + qw * qz) * inv, 1.0 - 2.0 * (qz * qz + qx * qx) * inv, 2.0 * (qy * qz - qw * qx) * inv],
        [2.0 * (qx * qz - qw * qy) * inv, 2.0 * (qy * qz + qw * qx) * inv, 1.0 - 2.0 * (qx * qx + qy * qy) * inv],
    ]


def covariance_from(scales, quats) -> np.ndarray:
    """``R diag(s^2) R^T`` for stacked ``(..., 3)`` scales and ``(..., 4)`` quats.

    The columns of ``R`` are the splat's principal axes.
    """
    R = quat_to_rotation(quats)
    s2 = np.asarray(scales, dtype=np.float64) ** 2
    cov = (R * s2[..., None, :]) @ np.swapaxes(R, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))  # exactly symmetric


def rotation_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion ``(q_x, q_y, q_z, q_w)`` of a rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        w = 0.25 * s
        x = (R[2, 1] - R[1, 2]) / s
        y = (R[0, 2] - R[2, 0]) / s
        z = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        w = (R[2, 1] - R[1, 2]) / s
        x = 0.25 * s
        y = (R[0, 1] + R[1, 0]) / s
        z = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        w = (R[0, 2] - R[2, 0]) / s
        x = (R[0, 1] + R[1, 0]) / s
        y = 0.25 * s
        z = (R[1, 2] + R[2, 1]) / s
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        w = (R[1, 0] - R[0, 1]) / s
        x = (R[0, 2] + R[2, 0]) / s
        y = (R[1, 2] + R[2, 1]) / s
        z = 0.25 * s
    q = np.array([x, y, z, w])
    return q / np.linalg.norm(q)


# ---------------------------------------------------------------------------
# Primitives and scenes
# ---------------------------------------------------------------------------

@dataclass
class GaussianPrimitive:
    mu: np.ndarray
    s: np.ndarray
    q: np.ndarray
    alpha: float
    color: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(3)
        self.s = np.asarray(self.s, dtype=np.float64).reshape(3)
        self.q = np.asarray(self.q, dtype=np.float64).reshape(4)
        self.alpha = float(self.alpha)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_rotation(self.q)

    def copy(self) -> "GaussianPrimitive":
        return GaussianPrimitive(self.mu.copy(), self.s.copy(), self.q.copy(), self.alpha, self.color.copy())


def covariance(prim: GaussianPrimitive) -> np.ndarray:
    return covariance_from(prim.s, prim.q)


@dataclass
class Scene:
    """K splats stored as per-group arrays."""

    means: np.ndarray      # (K, 3)
    scales: np.ndarray     # (K, 3)
    quats: np.ndarray      # (K, 4)
    opacities: np.ndarray  # (K,)
    colors: np.ndarray     # (K, 3)

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        k = self.means.shape[0]
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(k, 3)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(k, 4)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(k)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(k, 3)

    @property
    def num_splats(self) -> int:
        return self.means.shape[0]

    def __len__(self) -> int:
        return self.num_splats

    @property
    def dim(self) -> int:
        return PARAMS_PER_SPLAT * self.num_splats

    @classmethod
    def empty(cls) -> "Scene":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def from_primitives(cls, prims) -> "Scene":
        prims = list(prims)
        if not prims:
            return cls.empty()
        return cls(
            np.stack([p.mu for p in prims]),
            np.stack([p.s for p in prims]),
            np.stack([p.q for p in prims]),
            np.array([p.alpha for p in prims]),
            np.stack([p.color for p in prims]),
        )

    def primitive(self, k: int) -> GaussianPrimitive:
        return GaussianPrimitive(self.means[k], self.scales[k], self.quats[k], self.opacities[k], self.colors[k])

    def primitives(self) -> list[GaussianPrimitive]:
        return [self.primitive(k) for k in range(self.num_splats)]

    def pack(self) -> np.ndarray:
        return np.concatenate([
            self.means.ravel(), self.scales.ravel(), self.quats.ravel(),
            self.opacities.ravel(), self.colors.ravel(),
        ])

    @classmethod
    def unpack(cls, x) -> "Scene":
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1 or x.size % PARAMS_PER_SPLAT:
            raise ValueError(f"parameter vector of length {x.size} is not a multiple of {PARAMS_PER_SPLAT}")
        k = x.size // PARAMS_PER_SPLAT
        o = layout_offsets(k)
        return cls(
            x[o["means"]].reshape(k, 3).copy(),
            x[o["scales"]].reshape(k, 3).copy(),
            x[o["quats"]].reshape(k, 4).copy(),
            x[o["opacities"]].copy(),
            x[o["colors"]].reshape(k, 3).copy(),
        )

    def copy(self) -> "Scene":
        return Scene.unpack(self.pack())

    def validate(self) -> None:
        """Raise :class:`SceneFormatError` if any type invariant is violated."""
        if self.num_splats == 0:
            return
        for name in ("means", "scales", "quats", "opacities", "colors"):
            arr = getattr(self, name)
            bad = np.flatnonzero(~np.isfinite(arr.reshape(self.num_splats, -1)).all(axis=1))
            if bad.size:
                raise SceneFormatError(f"non-finite {name} at splat {bad[0]}")
        checks = [
            (self.scales > 0).all(axis=1), "scale must be > 0",
            (self.opacities > 0) & (self.opacities < 1), "opacity must lie in (0, 1)",
            (self.colors >= 0).all(axis=1), "color must be >= 0",
            np.linalg.norm(self.quats, axis=1) > 1e-12, "degenerate quaternion",
        ]
        for ok, msg in zip(checks[::2], checks[1::2]):
            bad = np.flatnonzero(~ok)
            if bad.size:
                raise SceneFormatError(f"splat {bad[0]}: {msg}")


def layout_offsets(k: int) -> dict[str, slice]:
    """Slices of each parameter group inside the flat vector."""
    return {
        "means": slice(0, 3 * k),
        "scales": slice(3 * k, 6 * k),
        "quats": slice(6 * k, 10 * k),
        "opacities": slice(10 * k, 11 * k),
        "colors": slice(11 * k, 14 * k),
    }


def group_of_index(i: int, k: int) -> str:
    for name, sl in layout_offsets(k).items():
        if sl.start <= i < sl.stop:
            return name
    raise IndexError(i)


def clamp_parameters(x: np.ndarray, k: int, s_min=S_MIN, alpha_min=ALPHA_MIN, alpha_max=ALPHA_MAX,
                     c_min=C_MIN, c_max=C_MAX) -> np.ndarray:
    """Project a parameter vector onto the activated-space boxes (in place)."""
    o = layout_offsets(k)
    np.maximum(x[o["scales"]], s_min, out=x[o["scales"]])
    np.clip(x[o["opacities"]], alpha_min, alpha_max, out=x[o["opacities"]])
    np.clip(x[o["colors"]], c_min, c_max, out=x[o["colors"]])
    return x


# ---------------------------------------------------------------------------
# Cameras and projection
# ---------------------------------------------------------------------------

@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))     # world -> camera
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    image: np.ndarray | None = None
    image_name: str = ""
    id: int = 0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.image is not None:
            self.image = np.asarray(self.image, dtype=np.float64)
            if self.image.shape != (self.height, self.width, 3):
                raise ValueError(f"image shape {self.image.shape} != {(self.height, self.width, 3)}")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def with_image(self, image) -> "Camera":
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height,
                      self.rotation, self.translation, image, self.image_name, self.id)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera (R, t) for a camera at ``eye`` with +z toward ``target``.

    Image x runs right and image y runs down.
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, [0.0, 1.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return R, -R @ eye


def project_components(means, scales, quats, cam: Camera):
    """Project splats to the image plane; works on floats or duals.

    ``means``/``scales``/``quats`` are sequences of per-component arrays
    (``means[0]`` holds every splat's x coordinate, and so on).

    Returns ``(u, v, s2d_xx, s2d_xy, s2d_yy, depth)`` where ``(u, v)`` is the
    projected mean in pixels and ``s2d`` the 2D covariance including the
    low-pass floor.
    """
    W, t = cam.rotation, cam.translation
    mx, my, mz = means
    pc = [W[i, 0] * mx + W[i, 1] * my + W[i, 2] * mz + t[i] for i in range(3)]
    x, y, z = pc
    inv_z = 1.0 / z
    u = cam.fx * x * inv_z + cam.cx
    v = cam.fy * y * inv_z + cam.cy

    R = rotation_components(*quats)
    # M = W R; covariance in camera space is M diag(s^2) M^T.
    M = [[W[i, 0] * R[0][j] + W[i, 1] * R[1][j] + W[i, 2] * R[2][j] for j in range(3)] for i in range(3)]
    # Rows of J_aff M, J_aff = [[fx/z, 0, -fx x/z^2], [0, fy/z, -fy y/z^2]].
    a0 = cam.fx * inv_z
    a2 = -cam.fx * x * inv_z * inv_z
    b1 = cam.fy * inv_z
    b2 = -cam.fy * y * inv_z * inv_z
    T0 = [a0 * M[0][k] + a2 * M[2][k] for k in range(3)]
    T1 = [b1 * M[1][k] + b2 * M[2][k] for k in range(3)]
    s2 = [scales[k] * scales[k] for k in range(3)]
    sxx = T0[0] * T0[0] * s2[0] + T0[1] * T0[1] * s2[1] + T0[2] * T0[2] * s2[2] + LOWPASS
    sxy = T0[0] * T1[0] * s2[0] + T0[1] * T1[1] * s2[1] + T0[2] * T1[2] * s2[2]
    syy = T1[0] * T1[0] * s2[0] + T1[1] * T1[1] * s2[1] + T1[2] * T1[2] * s2[2] + LOWPASS
    return u, v, sxx, sxy, syy, z


def project(prim: GaussianPrimitive, cam: Camera, z_near: float = Z_NEAR):
    """Project one primitive.

    Returns ``(mu2d, sigma2d, depth, culled)``; a splat at or in front of the
    near plane comes back with ``culled=True``.
    """
    u, v, sxx, sxy, syy, z = project_components(prim.mu, prim.s, prim.q, cam)
    culled = bool(z <= z_near)
    return (np.array([u, v], dtype=np.float64),
            np.array([[sxx, sxy], [sxy, syy]], dtype=np.float64),
            float(z), culled)


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def save_scene(scene: Scene, path) -> None:
    """Write a binary little-endian PLY with float64 properties."""
    header = ["ply", "format binary_little_endian 1.0", PLY_COMMENT,
              f"element vertex {scene.num_splats}"]
    header += [f"property double {name}" for name in PLY_PROPERTIES]
    header.append("end_header")
    data = np.concatenate([
        scene.means, scene.scales, scene.quats, scene.opacities[:, None], scene.colors,
    ], axis=1).astype("<f8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())
    os.replace(tmp, path)


def load_scene(path) -> Scene:
    with open(path, "rb") as fh:
        raw = fh.read()
    lines, offset = [], 0
    while True:
        end = raw.find(b"\n", offset)
        if end < 0:
            raise SceneFormatError(f"{path}: header not terminated (byte offset {offset})")
        try:
            line = raw[offset:end].decode("ascii").strip()
        except UnicodeDecodeError:
            raise SceneFormatError(f"{path}: non-ASCII header at line {len(lines) + 1}") from None
        lines.append(line)
        offset = end + 1
        if line == "end_header":
            break
    if lines[0] != "ply":
        raise SceneFormatError(f"{path}: line 1: expected 'ply', got {lines[0]!r}")
    count, props = None, []
    for lineno, line in enumerate(lines[1:-1], start=2):
        tok = line.split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            if tok[1:] != ["binary_little_endian", "1.0"]:
                raise SceneFormatError(f"{path}: line {lineno}: unsupported format {' '.join(tok[1:])!r}")
        elif tok[0] == "element":
            if len(tok) != 3 or tok[1] != "vertex" or count is not None:
                raise SceneFormatError(f"{path}: line {lineno}: unexpected element declaration {line!r}")
            try:
                count = int(tok[2])
            except ValueError:
                raise SceneFormatError(f"{path}: line {lineno}: bad vertex count {tok[2]!r}") from None
        elif tok[0] == "property":
            if len(tok) != 3 or tok[1] != "double":
                raise SceneFormatError(f"{path}: line {lineno}: expected 'property double <name>', got {line!r}")
            props.append(tok[2])
        else:
            raise SceneFormatError(f"{path}: line {lineno}: unknown header keyword {tok[0]!r}")
    if count is None:
        raise SceneFormatError(f"{path}: missing 'element vertex' line")
    if tuple(props) != PLY_PROPERTIES:
        raise SceneFormatError(
            f"{path}: expected {len(PLY_PROPERTIES)} properties {PLY_PROPERTIES}, got {len(props)} {tuple(props)}")
    nbytes = count * len(PLY_PROPERTIES) * 8
    if len(raw) - offset != nbytes:
        raise SceneFormatError(
            f"{path}: body at byte offset {offset} has {len(raw) - offset} bytes, expected {nbytes}")
    data = np.frombuffer(raw, dtype="<f8", count=count * len(PLY_PROPERTIES), offset=offset)
    data = data.reshape(count, len(PLY_PROPERTIES)).astype(np.float64)
    bad = np.flatnonzero(~np.isfinite(data).all(axis=1))
    if bad.size:
        row = bad[0]
        raise SceneFormatError(f"{path}: non-finite value in vertex {row} (byte offset {offset + row * 8 * 14})")
    scene = Scene(data[:, 0:3], data[:, 3:6], data[:, 6:10], data[:, 10], data[:, 11:14])
    try:
        scene.validate()
    except SceneFormatError as exc:
        raise SceneFormatError(f"{path}: {exc}") from None
    return scene


def load_image(path) -> np.ndarray:
    """Load an RGB image as float64 in [0, 1].

    A lossless ``<stem>.npy`` sidecar, when present, takes precedence over
    the 8-bit PNG.
    """
    path = Path(path)
    sidecar = path.with_suffix(".npy")
    if sidecar.exists():
        return np.load(sidecar).astype(np.float64)
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_image(path, image: np.ndarray, sidecar: bool = False) -> None:
    """Write an 8-bit PNG (values clamped to [0, 1])."""
    from PIL import Image

    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(img * 255.0).astype(np.uint8), mode="RGB").save(path)
    if sidecar:
        np.save(Path(path).with_suffix(".npy"), np.asarray(image, dtype=np.float64))


def save_cameras(cams, path) -> None:
    with open(path, "w") as fh:
        fh.write("# id fx fy cx cy width height qw qx qy qz tx ty tz image_filename\n")
        for cam in cams:
            qx, qy, qz, qw = rotation_to_quat(cam.rotation)
            vals = [cam.fx, cam.fy, cam.cx, cam.cy]
            fh.write(f"{cam.id} " + " ".join(repr(float(v)) for v in vals)
                     + f" {cam.width} {cam.height} "
                     + " ".join(repr(float(v)) for v in (qw, qx, qy, qz, *cam.translation))
                     + f" {cam.image_name or '-'}\n")


def load_cameras(path, load_images: bool = True) -> list[Camera]:
    path = Path(path)
    cams = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if len(tok) != 15:
            raise SceneFormatError(f"{path}: line {lineno}: expected 15 fields, got {len(tok)}")
        try:
            cid = int(tok[0])
            fx, fy, cx, cy = map(float, tok[1:5])
            width, height = int(tok[5]), int(tok[6])
            qw, qx, qy, qz, tx, ty, tz = map(float, tok[7:14])
        except ValueError as exc:
            raise SceneFormatError(f"{path}: line {lineno}: {exc}") from None
        R = quat_to_rotation([qx, qy, qz, qw])
        name = tok[14]
        image = None
        if load_images and name != "-":
            image = load_image(path.parent / name)
        cams.append(Camera(fx, fy, cx, cy, width, height, R, [tx, ty, tz], image, name, cid))
    return cams
