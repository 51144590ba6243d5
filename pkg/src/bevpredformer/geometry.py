"""Pinhole cameras, rigid poses, and the BEV lattice.

Frames
------
* ego: x forward, y left, z up; the origin sits on the ground below the vehicle.
* camera: x right, y down, z along the optical axis.
* BEV lattice: row ``j`` indexes y, column ``i`` indexes x, cell centres at
  ``x = x_min + (i + 0.5) dx`` and ``y = y_min + (j + 0.5) dy``.  Flattened
  lattice order is row-major (y outer, x inner); with several height
  anchors the anchor index is outermost.

Vector quantities measured "in cells" (flow, offsets) store the column (x)
component first and the row (y) component second.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .tensor import bilinear_weights

Z_EPS = 0.1


def rot_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_y(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``p -> R p + t`` (maps child coordinates into the parent frame)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        if not self.is_valid():
            raise ValueError("rotation must be orthonormal with determinant +1")

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def planar(cls, x: float, y: float, yaw: float, z: float = 0.0) -> "Pose":
        return cls(rot_z(yaw), np.array([x, y, z]))

    @classmethod
    def from_array(cls, arr) -> "Pose":
        arr = np.asarray(arr, dtype=np.float64).reshape(12)
        return cls(arr[:9].reshape(3, 3), arr[9:])

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.rotation.reshape(9), self.translation])

    def is_valid(self, tol: float = 1e-5) -> bool:
        r = self.rotation
        return bool(np.allclose(r.T @ r, np.eye(3), atol=tol) and abs(np.linalg.det(r) - 1.0) < tol)

    @property
    def yaw(self) -> float:
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def rounded(self) -> "Pose":
        """Copy with every entry rounded to float32 (the on-disk precision)."""
        return Pose.from_array(self.to_array().astype(np.float32))


def relative_pose(a: Pose, b: Pose) -> Pose:
    """Transform taking b-frame coordinates into the a frame (``a⁻¹ ∘ b``)."""
    return a.inverse().compose(b)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def to_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy, self.width, self.height], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "CameraIntrinsics":
        fx, fy, cx, cy, w, h = [float(v) for v in arr]
        return cls(fx, fy, cx, cy, int(round(w)), int(round(h)))


@dataclass(frozen=True)
class Camera:
    """Intrinsics plus the camera-to-ego extrinsic."""

    intrinsics: CameraIntrinsics
    extrinsic: Pose

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.extrinsic.to_array(), self.intrinsics.to_array()])

    @classmethod
    def from_array(cls, arr) -> "Camera":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(CameraIntrinsics.from_array(arr[12:18]), Pose.from_array(arr[:12]))


# optical frame -> ego frame for a camera looking along +x
_OPTICAL_TO_EGO = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


def make_camera(yaw: float, pitch: float, position: Sequence[float], hfov_deg: float,
                width: int, height: int) -> Camera:
    """Pinhole camera at ``position`` (ego frame), yawed left by ``yaw`` and pitched
    down by ``pitch`` radians, with square pixels."""
    f = (width / 2.0) / np.tan(np.radians(hfov_deg) / 2.0)
    intr = CameraIntrinsics(f, f, width / 2.0, height / 2.0, width, height)
    rot = rot_z(yaw) @ rot_y(pitch) @ _OPTICAL_TO_EGO
    return Camera(intr, Pose(rot, np.asarray(position, dtype=np.float64)))


def default_rig(width: int = 96, height: int = 64) -> list[Camera]:
    """Front-left / front-right pair with 100° of combined horizontal coverage."""
    return [make_camera(np.radians(s * 20.0), np.radians(10.0), (1.0, 0.0, 1.6), 60.0, width, height)
            for s in (1, -1)]


@dataclass(frozen=True)
class BEVGridConfig:
    H: int = 32
    W: int = 32
    x_range: tuple = (-16.0, 16.0)
    y_range: tuple = (-16.0, 16.0)
    z_anchors: tuple = (0.0, 0.5, 1.0, 2.0)

    def __post_init__(self):
        if self.H < 4 or self.W < 4:
            raise ValueError("BEV grid needs at least 4x4 cells")
        if not (self.x_range[1] > self.x_range[0] and self.y_range[1] > self.y_range[0]):
            raise ValueError("BEV ranges must be positive")
        if len(self.z_anchors) < 1:
            raise ValueError("at least one z anchor required")

    @property
    def dx(self) -> float:
        return (self.x_range[1] - self.x_range[0]) / self.W

    @property
    def dy(self) -> float:
        return (self.y_range[1] - self.y_range[0]) / self.H

    def metric_to_cell(self, xy) -> np.ndarray:
        """Metric (x, y) -> continuous (col, row); cell centres land on integers."""
        xy = np.asarray(xy, dtype=np.float64)
        col = (xy[..., 0] - self.x_range[0]) / self.dx - 0.5
        row = (xy[..., 1] - self.y_range[0]) / self.dy - 0.5
        return np.stack([col, row], axis=-1)

    def cell_to_metric(self, cr) -> np.ndarray:
        cr = np.asarray(cr, dtype=np.float64)
        x = self.x_range[0] + (cr[..., 0] + 0.5) * self.dx
        y = self.y_range[0] + (cr[..., 1] + 0.5) * self.dy
        return np.stack([x, y], axis=-1)

    def cell_centers(self) -> np.ndarray:
        """[H, W, 2] metric (x, y) of every cell centre."""
        cols, rows = np.meshgrid(np.arange(self.W), np.arange(self.H))
        return self.cell_to_metric(np.stack([cols, rows], axis=-1))

    def to_dict(self) -> dict:
        return {"H": self.H, "W": self.W, "x_range": list(self.x_range),
                "y_range": list(self.y_range), "z_anchors": list(self.z_anchors)}

    @classmethod
    def from_dict(cls, d: dict) -> "BEVGridConfig":
        return cls(int(d["H"]), int(d["W"]), tuple(d["x_range"]), tuple(d["y_range"]),
                   tuple(d["z_anchors"]))


def build_bev_grid(cfg: BEVGridConfig) -> np.ndarray:
    """[Z*H*W, 3] lattice points in the BEV frame (anchor-major, then row, then column)."""
    xy = cfg.cell_centers().reshape(-1, 2)
    pts = [np.concatenate([xy, np.full((xy.shape[0], 1), z)], axis=1) for z in cfg.z_anchors]
    return np.concatenate(pts, axis=0)


def camera_from_present(ego_present: Pose, ego_past: Pose, cam_extrinsic: Pose) -> Pose:
    """Transform from present-ego coordinates to the past frame's camera coordinates."""
    return cam_extrinsic.inverse().compose(ego_past.inverse()).compose(ego_present)


def project_points(points, ego_present: Pose, ego_past: Pose, cam_extrinsic: Pose,
                   intr: CameraIntrinsics, z_eps: float = Z_EPS):
    """Project present-ego points into one camera of a (possibly past) frame.

    Returns ``(pixels [P,2], valid [P])``; ``valid`` is 1 where the camera
    depth exceeds ``z_eps`` and the pixel lies in ``[0,width) x [0,height)``.
    """
    cam = camera_from_present(ego_present, ego_past, cam_extrinsic).apply(points)
    z = cam[:, 2]
    safe = np.where(z > z_eps, z, 1.0)
    u = intr.fx * cam[:, 0] / safe + intr.cx
    v = intr.fy * cam[:, 1] / safe + intr.cy
    valid = (z > z_eps) & (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
    pix = np.stack([u, v], axis=1)
    pix[~valid] = -1.0
    return pix, valid.astype(np.float32)


def unproject_pixels(pixels, depth, ego_present: Pose, ego_past: Pose, cam_extrinsic: Pose,
                     intr: CameraIntrinsics) -> np.ndarray:
    """Inverse of :func:`project_points` for known camera depths."""
    pixels = np.asarray(pixels, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    x = (pixels[:, 0] - intr.cx) / intr.fx * depth
    y = (pixels[:, 1] - intr.cy) / intr.fy * depth
    cam = np.stack([x, y, depth], axis=1)
    return camera_from_present(ego_present, ego_past, cam_extrinsic).inverse().apply(cam)


@dataclass
class ReferenceSet:
    """Projected lattice per (frame, camera, anchor).

    ``pixels`` has shape [T, N_cam, Z, H*W, 2] and ``valid`` [T, N_cam, Z, H*W].
    """

    pixels: np.ndarray
    valid: np.ndarray
    _weights: dict = field(default_factory=dict, repr=False)

    @property
    def n_frames(self) -> int:
        return self.pixels.shape[0]

    @property
    def n_cams(self) -> int:
        return self.pixels.shape[1]

    def sampling_matrix(self, t: int, cam: int, feat_hw: tuple, stride: float):
        """Cached bilinear matrix sampling a stride-``stride`` feature map."""
        key = (t, cam, feat_hw, stride)
        if key not in self._weights:
            pix = self.pixels[t, cam].reshape(-1, 2) / stride
            ok = self.valid[t, cam].reshape(-1) > 0
            pix = np.where(ok[:, None], pix, -1e3)
            self._weights[key] = bilinear_weights(pix, feat_hw[0], feat_hw[1])
        return self._weights[key]


def build_reference_set(cfg: BEVGridConfig, rig: Sequence[Camera], ego_poses: Sequence[Pose],
                        bev_pose: Optional[Pose] = None, n_frames: Optional[int] = None) -> ReferenceSet:
    """Project the present-frame lattice through every camera of every input frame.

    The last pose is the present frame.  ``bev_pose`` maps present-ego
    coordinates into the (augmented) BEV frame; identity when omitted.
    """
    if n_frames is not None and len(ego_poses) != n_frames:
        raise ValueError(f"expected {n_frames} ego poses, got {len(ego_poses)}")
    if not ego_poses:
        raise ValueError("no ego poses")
    pts = build_bev_grid(cfg)
    hw = cfg.H * cfg.W
    nz = len(cfg.z_anchors)
    anchor = ego_poses[-1] if bev_pose is None else ego_poses[-1].compose(bev_pose.inverse())
    t_n, c_n = len(ego_poses), len(rig)
    pixels = np.zeros((t_n, c_n, nz, hw, 2), dtype=np.float32)
    valid = np.zeros((t_n, c_n, nz, hw), dtype=np.float32)
    for t, pose in enumerate(ego_poses):
        for c, cam in enumerate(rig):
            pix, ok = project_points(pts, anchor, pose, cam.extrinsic, cam.intrinsics)
            pixels[t, c] = pix.reshape(nz, hw, 2)
            valid[t, c] = ok.reshape(nz, hw)
    return ReferenceSet(pixels, valid)


def planar_pose(theta: float, tx: float, ty: float) -> Pose:
    return Pose.planar(tx, ty, theta)


def warp_bev(bev_map, theta: float, tx: float, ty: float, cfg: BEVGridConfig,
             order: str = "bilinear") -> np.ndarray:
    """Resample a [C,H,W] map after moving its content by the rigid transform
    (rotation ``theta`` then translation ``(tx, ty)`` metres).

    Out-of-range samples are zero.  ``order`` is ``"bilinear"`` or
    ``"nearest"`` (for label maps).
    """
    if abs(theta) > np.pi + 1e-12:
        raise ValueError("|theta| must not exceed pi")
    arr = np.asarray(bev_map)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    c, h, w = arr.shape
    if (h, w) != (cfg.H, cfg.W):
        raise ValueError(f"map extents {(h, w)} do not match grid {(cfg.H, cfg.W)}")
    q = cfg.cell_centers().reshape(-1, 2)
    ct, st = np.cos(theta), np.sin(theta)
    d = q - np.array([tx, ty])
    src = np.stack([ct * d[:, 0] + st * d[:, 1], -st * d[:, 0] + ct * d[:, 1]], axis=1)
    cr = cfg.metric_to_cell(src)
    flat = arr.reshape(c, h * w)
    if order == "nearest":
        ci = np.floor(cr + 0.5 + 1e-9).astype(np.int64)
        ok = (ci[:, 0] >= 0) & (ci[:, 0] < w) & (ci[:, 1] >= 0) & (ci[:, 1] < h)
        out = np.zeros((c, h * w), dtype=arr.dtype)
        out[:, ok] = flat[:, ci[ok, 1] * w + ci[ok, 0]]
    elif order == "bilinear":
        # snap near-lattice coordinates so exact shifts and quarter turns are exact
        snapped = np.where(np.abs(cr - np.round(cr)) < 1e-9, np.round(cr), cr)
        mat = bilinear_weights(snapped, h, w)
        out = np.asarray(mat @ flat.astype(np.float64).T).T.astype(arr.dtype)
    else:
        raise ValueError(f"unknown interpolation order {order!r}")
    out = out.reshape(c, h, w)
    return out[0] if squeeze else out


def rotate_cell_vectors(vec, theta: float, cfg: BEVGridConfig) -> np.ndarray:
    """Rotate [2,...] vectors given in cells (col, row) by ``theta`` in metric space."""
    vec = np.asarray(vec, dtype=np.float64)
    mx, my = vec[0] * cfg.dx, vec[1] * cfg.dy
    ct, st = np.cos(theta), np.sin(theta)
    rx, ry = ct * mx - st * my, st * mx + ct * my
    return np.stack([rx / cfg.dx, ry / cfg.dy])
