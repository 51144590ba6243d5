"""Deterministic synthetic driving scenes with exact BEV supervision.

Vehicles are boxes moving with constant speed and turn rate.  Cameras are
rendered by ray casting against the boxes and a flat ground whose shade
falls off with distance.  Ground truth is rasterised in the present ego
frame for the output frames ``t = -1 .. T_pred`` (relative to the present).
"""

from __future__ import annotations

import colorsys
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dataset import GroundTruth, SequenceSample
from .geometry import BEVGridConfig, Camera, Pose, default_rig


class GenerationError(RuntimeError):
    pass


@dataclass
class GenConfig:
    n_agents: tuple = (1, 5)
    speed: tuple = (0.0, 6.0)            # m/s
    turn_rate: tuple = (-0.3, 0.3)       # rad/s
    length: tuple = (3.8, 5.0)
    width: tuple = (1.8, 2.2)
    height: float = 1.5
    ego_speed: tuple = (0.0, 4.0)
    ego_turn_rate: tuple = (-0.1, 0.1)
    spawn_range: tuple = (4.0, 15.0)     # present-frame distance from ego, metres
    spawn_bearing_deg: float = 50.0
    frame_dt: float = 0.5
    t_in: int = 3
    t_pred: int = 4
    image_hw: tuple = (64, 96)
    centerness_sigma: float = 1.5        # cells
    separation_cells: float = 2.0
    max_retries: int = 200
    grid: BEVGridConfig = field(default_factory=BEVGridConfig)

    @property
    def n_frames(self) -> int:
        return self.t_in + self.t_pred

    @property
    def present(self) -> int:
        return self.t_in - 1

    @property
    def t_out(self) -> int:
        return self.t_pred + 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = self.grid.to_dict()
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        d = dict(d)
        grid = BEVGridConfig.from_dict(d.pop("grid")) if "grid" in d else BEVGridConfig()
        known = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()
                 if k in cls.__dataclass_fields__}
        return cls(grid=grid, **known)


@dataclass
class Agent:
    id: int
    length: float
    width: float
    height: float
    poses: list          # world Pose per frame
    velocity: np.ndarray  # [n_frames, 2] world velocity, m/s


@dataclass
class Scenario:
    seed: int
    agents: list
    ego: list            # world Pose per frame
    rig: list
    frame_dt: float
    config: GenConfig

    @property
    def present(self) -> int:
        return self.config.present


def ctrv(x: float, y: float, yaw: float, v: float, omega: float, tau: np.ndarray):
    """Constant turn-rate and velocity motion evaluated at times ``tau``."""
    tau = np.asarray(tau, dtype=np.float64)
    heading = yaw + omega * tau
    if abs(omega) < 1e-9:
        px = x + v * tau * np.cos(yaw)
        py = y + v * tau * np.sin(yaw)
    else:
        r = v / omega
        px = x + r * (np.sin(heading) - np.sin(yaw))
        py = y - r * (np.cos(heading) - np.cos(yaw))
    vel = np.stack([v * np.cos(heading), v * np.sin(heading)], axis=-1)
    return px, py, heading, vel


def _corners(cx, cy, yaw, length, width):
    c, s = np.cos(yaw), np.sin(yaw)
    hx, hy = length / 2, width / 2
    local = np.array([[hx, hy], [hx, -hy], [-hx, -hy], [-hx, hy]])
    return local @ np.array([[c, s], [-s, c]]) + np.array([cx, cy])


def boxes_overlap(a, b) -> bool:
    """Separating-axis test for two convex quadrilaterals given as [4,2] corners."""
    ca, cb = a.mean(axis=0), b.mean(axis=0)
    ra = np.sqrt(((a - ca) ** 2).sum(axis=1).max())
    rb = np.sqrt(((b - cb) ** 2).sum(axis=1).max())
    if ((ca - cb) ** 2).sum() > (ra + rb) ** 2:
        return False
    for poly in (a, b):
        for i in range(4):
            edge = poly[(i + 1) % 4] - poly[i]
            axis = np.array([-edge[1], edge[0]])
            pa, pb = a @ axis, b @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def generate_scenario(seed: int, cfg: Optional[GenConfig] = None) -> Scenario:
    """Draw a scene; a pure function of ``(seed, cfg)``."""
    cfg = cfg or GenConfig()
    rng = np.random.default_rng(seed)
    n = cfg.n_frames
    tau = (np.arange(n) - cfg.present) * cfg.frame_dt

    # ego trajectory, parameterised at the present frame
    start = Pose.planar(rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(-np.pi, np.pi))
    ev = rng.uniform(*cfg.ego_speed)
    ew = rng.uniform(*cfg.ego_turn_rate) if ev > 0 else 0.0
    ex, ey, eyaw, _ = ctrv(0.0, 0.0, 0.0, ev, ew, tau)
    ego = [start.compose(Pose.planar(ex[k], ey[k], eyaw[k])) for k in range(n)]
    rel_ego = [ego[cfg.present].inverse().compose(p) for p in ego]

    n_agents = int(rng.integers(cfg.n_agents[0], cfg.n_agents[1] + 1))
    margin = cfg.separation_cells * max(cfg.grid.dx, cfg.grid.dy)
    for _attempt in range(cfg.max_retries):
        placed: list = []     # (params, per-frame present-frame boxes)
        ok = True
        for _ in range(n_agents):
            for _try in range(cfg.max_retries):
                r = rng.uniform(*cfg.spawn_range)
                bearing = np.radians(rng.uniform(-cfg.spawn_bearing_deg, cfg.spawn_bearing_deg))
                x, y = r * np.cos(bearing), r * np.sin(bearing)
                yaw = rng.uniform(-np.pi, np.pi)
                v = rng.uniform(*cfg.speed)
                w = rng.uniform(*cfg.turn_rate) if v >= 0.5 else 0.0
                length, width = rng.uniform(*cfg.length), rng.uniform(*cfg.width)
                px, py, hd, vel = ctrv(x, y, yaw, v, w, tau)
                boxes = [_corners(px[k], py[k], hd[k], length + margin, width + margin) for k in range(n)]
                ego_boxes = [_corners(p.translation[0], p.translation[1], p.yaw, 4.6, 2.0) for p in rel_ego]
                clash = any(boxes_overlap(boxes[k], ego_boxes[k]) for k in range(n))
                for _, other in placed:
                    clash = clash or any(boxes_overlap(boxes[k], other[k]) for k in range(n))
                if not clash:
                    placed.append(((px, py, hd, vel, length, width), boxes))
                    break
            else:
                ok = False
                break
        if ok:
            break
    else:
        raise GenerationError(f"could not place {n_agents} agents without overlap "
                              f"after {cfg.max_retries} retries")

    present = ego[cfg.present]
    agents = []
    for i, ((px, py, hd, vel, length, width), _) in enumerate(placed):
        poses = [present.compose(Pose.planar(px[k], py[k], hd[k])) for k in range(n)]
        wvel = vel @ present.rotation[:2, :2].T
        agents.append(Agent(i + 1, float(length), float(width), cfg.height, poses, wvel))
    rig = default_rig(cfg.image_hw[1], cfg.image_hw[0])
    return Scenario(int(seed), agents, ego, rig, cfg.frame_dt, cfg)


def agent_color(agent_id: int) -> np.ndarray:
    hue = (agent_id * 0.61803398875) % 1.0
    return np.array(colorsys.hsv_to_rgb(hue, 0.85, 0.95))


_SKY = np.array([0.55, 0.70, 0.95])


def render_camera(scn: Scenario, k: int, cam: Camera) -> np.ndarray:
    """[3, H, W] image of frame ``k`` seen by ``cam``."""
    intr = cam.intrinsics
    world_cam = scn.ego[k].compose(cam.extrinsic)
    u, v = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
    d_cam = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u, dtype=float)], -1)
    dirs = d_cam.reshape(-1, 3) @ world_cam.rotation.T
    origin = world_cam.translation
    npx = dirs.shape[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = np.where(dirs[:, 2] < -1e-9, -origin[2] / dirs[:, 2], np.inf)
    hit = np.isfinite(t_ground)
    img = np.tile(_SKY, (npx, 1))
    dist = np.hypot(dirs[hit, 0] * t_ground[hit], dirs[hit, 1] * t_ground[hit])
    shade = 0.12 + 0.6 * np.exp(-dist / 12.0)
    img[hit] = np.stack([shade, shade, 0.9 * shade], -1)
    depth = t_ground.copy()
    for agent in scn.agents:
        pose = agent.poses[k]
        o = pose.rotation.T @ (origin - pose.translation)
        dl = dirs @ pose.rotation
        half = np.array([agent.length / 2, agent.width / 2, agent.height / 2])
        centre = np.array([0.0, 0.0, agent.height / 2])
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / np.where(np.abs(dl) < 1e-12, 1e-12, dl)
            t1 = (centre - half - o) * inv
            t2 = (centre + half - o) * inv
        tmin, tmax = np.minimum(t1, t2), np.maximum(t1, t2)
        t_near, face = tmin.max(axis=1), tmin.argmax(axis=1)
        t_far = tmax.min(axis=1)
        box_hit = (t_near <= t_far) & (t_near > 0) & (t_near < depth)
        if not box_hit.any():
            continue
        factor = np.array([1.0, 0.75, 1.2])[face[box_hit]]
        img[box_hit] = np.clip(agent_color(agent.id)[None] * factor[:, None], 0, 1)
        depth[box_hit] = t_near[box_hit]
    return img.reshape(intr.height, intr.width, 3).transpose(2, 0, 1).astype(np.float32)


def render_frame(scn: Scenario, k: int) -> np.ndarray:
    """[N_cam, 3, H_im, W_im] render of frame index ``k``."""
    if not 0 <= k < len(scn.ego):
        raise IndexError(f"frame {k} outside trajectory of {len(scn.ego)} frames")
    return np.stack([render_camera(scn, k, cam) for cam in scn.rig])


def output_frames(cfg: GenConfig) -> list[int]:
    """Frame indices of the output timeline t = -1 .. T_pred."""
    return list(range(cfg.present - 1, cfg.present + cfg.t_pred + 1))


def rasterize_gt(scn: Scenario, cfg: Optional[BEVGridConfig] = None,
                 bev_pose: Optional[Pose] = None) -> GroundTruth:
    """Exact supervision maps in the present BEV frame (optionally transformed by ``bev_pose``)."""
    gen = scn.config
    grid = cfg or gen.grid
    frames = output_frames(gen)
    if frames[-1] >= len(scn.ego) or frames[0] < 1:
        raise ValueError("scenario too short for the output timeline")
    to_bev = scn.ego[scn.present].inverse()
    if bev_pose is not None:
        to_bev = bev_pose.compose(to_bev)
    h, w = grid.H, grid.W
    t_out = len(frames)
    seg = np.zeros((t_out, h, w), np.float32)
    inst = np.zeros((t_out, h, w), np.int32)
    flow = np.zeros((t_out, 2, h, w), np.float32)
    offset = np.zeros((t_out, 2, h, w), np.float32)
    centerness = np.zeros((t_out, 1, h, w), np.float32)
    centers_xy = grid.cell_centers().reshape(-1, 2)
    cols, rows = np.meshgrid(np.arange(w), np.arange(h))
    cell_cr = np.stack([cols, rows], 0).astype(np.float64)
    sigma = gen.centerness_sigma

    def centre_cells(agent, k):
        p = to_bev.compose(agent.poses[k])
        return grid.metric_to_cell(p.translation[:2]), p

    for ti, k in enumerate(frames):
        for agent in scn.agents:
            c_now, p = centre_cells(agent, k)
            c_prev, _ = centre_cells(agent, k - 1)
            local = (centers_xy - p.translation[:2]) @ p.rotation[:2, :2]
            mask = ((np.abs(local[:, 0]) <= agent.length / 2) &
                    (np.abs(local[:, 1]) <= agent.width / 2)).reshape(h, w)
            if not mask.any():
                continue
            seg[ti][mask] = 1.0
            inst[ti][mask] = agent.id
            for ch in range(2):
                flow[ti, ch][mask] = (c_prev[ch] - cell_cr[ch])[mask]
                offset[ti, ch][mask] = (c_now[ch] - cell_cr[ch])[mask]
            peak = np.floor(c_now + 0.5)
            d2 = (cell_cr[0] - peak[0]) ** 2 + (cell_cr[1] - peak[1]) ** 2
            centerness[ti, 0] = np.maximum(centerness[ti, 0], np.exp(-d2 / (2 * sigma ** 2)))
    return GroundTruth(seg, inst, flow, centerness, offset)


def make_sample(scn: Scenario) -> SequenceSample:
    gen = scn.config
    images = np.stack([render_frame(scn, k) for k in range(gen.t_in)])
    cams = [Camera(c.intrinsics.__class__.from_array(np.float32(c.intrinsics.to_array())),
                   c.extrinsic.rounded()) for c in scn.rig]
    poses = [scn.ego[k].rounded() for k in range(gen.t_in)]
    meta = {"seed": scn.seed, "gen": gen.to_dict()}
    return SequenceSample(images, cams, poses, rasterize_gt(scn), Pose.identity(), meta)


def generate_dataset(n: int, seed: int = 0, cfg: Optional[GenConfig] = None) -> list[SequenceSample]:
    """``n`` samples whose scenario seeds derive from ``seed``."""
    seeds = np.random.SeedSequence(seed).generate_state(n)
    return [make_sample(generate_scenario(int(s), cfg)) for s in seeds]
