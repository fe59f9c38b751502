"""2D side-view runner environment.

A 3 kg body with two telescoping, body-frame-vertical legs (front/rear hips)
and direct pitch actuation runs over procedural terrain. Control at 50 Hz,
four semi-implicit Euler substeps at 200 Hz per control step. Depth sensing
is a 64-ray forward fan rendered every `depth_interval` steps and delivered
with `depth_latency` steps of delay.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ConfigurationError
from .terrain import MAX_LEVEL, TerrainFamily, TerrainSpec, generate_terrain

GRAVITY = 9.81

PROPRIO_DIM = 17
DEPTH_RAYS = 64
ACTION_DIM = 3
N_HEIGHT_PROBES = 16
PRIVILEGED_DIM = N_HEIGHT_PROBES + 2 + 3

DEPTH_FOV = math.radians(58.0)
DEPTH_TILT = math.radians(15.0)   # camera pitched down from body forward
DEPTH_MAX_RANGE = 4.0

LEG_MIN, LEG_MAX = 0.08, 0.40
TORQUE_LIMIT = 33.5
CONTACT_TOL = 1e-4

PROBE_OFFSETS = np.linspace(-0.3, 1.5, N_HEIGHT_PROBES)


@dataclass
class EnvConfig:
    dt_control: float = 0.02
    substeps: int = 4
    body_mass: float = 3.0
    body_inertia: float = 0.06
    body_half_height: float = 0.06
    body_clearance: float = 0.04      # min body-to-ground distance before fall
    hip_offset: float = 0.15
    leg_mass: float = 0.3
    leg_damping: float = 2.0
    slip_damping: float = 5.0
    kp: tuple = (600.0, 600.0, 40.0)
    kd: tuple = (30.0, 30.0, 4.0)
    q_stand: tuple = (0.3, 0.3, 0.0)
    action_scale: float = 0.25
    episode_seconds: float = 20.0
    sigma_tracking: float = 0.25
    v_cmd_range: tuple = (0.3, 1.2)
    depth_interval: int = 5
    depth_latency: int = 5
    pitch_limit: float = 1.2
    spawn_x: float = 0.5
    stall_seconds: float = 2.0
    friction_range: tuple = (0.4, 1.25)
    payload_range: tuple = (-0.5, 1.0)
    motor_scale_range: tuple = (0.9, 1.1)
    reward_weights: dict = field(default_factory=lambda: {
        "tracking": 2.0, "style": 0.5, "action_rate": 1.0, "torque": 1.0,
        "collision": 1.0, "stall": 1.0, "termination": 1.0,
    })


@dataclass
class RobotState:
    x: float
    z: float
    vx: float
    vz: float
    pitch: float
    pitch_rate: float
    q: np.ndarray          # [L_front, L_rear, pitch], pitch duplicated as joint 3
    qdot: np.ndarray
    foot_contacts: np.ndarray   # 2 bools
    contact_forces: np.ndarray  # 2 normal forces (N)


@dataclass
class Observation:
    proprio: np.ndarray   # 17
    depth: np.ndarray     # 64, normalized [0, 1]
    command: float

    def vector(self) -> np.ndarray:
        return np.concatenate([self.proprio, self.depth]).astype(np.float32)


@dataclass
class PrivilegedInfo:
    height_samples: np.ndarray    # 16 ground probes, relative to body z
    contact_forces: np.ndarray    # 2
    randomized_params: np.ndarray  # friction, payload, motor scale

    def vector(self) -> np.ndarray:
        return np.concatenate(
            [self.height_samples, self.contact_forces, self.randomized_params]
        ).astype(np.float32)


def pd_torque(q_d, q, qdot, kp, kd, limit=TORQUE_LIMIT):
    """PD torque with zero target velocity, clamped to the motor limit."""
    tau = np.asarray(kp) * (np.asarray(q_d) - np.asarray(q)) - np.asarray(kd) * np.asarray(qdot)
    return np.clip(tau, -limit, limit)


def tracking_reward(vx, v_cmd, sigma):
    """Velocity tracking with overspeed forgiveness up to +0.1 m/s."""
    err = min(vx, v_cmd + 0.1) - v_cmd
    return math.exp(-(err * err) / sigma)


def randomize_physics(rng: np.random.Generator, cfg: EnvConfig) -> np.ndarray:
    friction = rng.uniform(*cfg.friction_range)
    payload = rng.uniform(*cfg.payload_range)
    motor = rng.uniform(*cfg.motor_scale_range)
    return np.array([friction, payload, motor], dtype=np.float64)


def render_depth(state: RobotState, terrain: TerrainSpec,
                 march_step: float = 0.02) -> np.ndarray:
    """64-ray fan, 58 deg vertical, camera tilted 15 deg down from body forward.

    Ray i=0 points most downward. Values are min(hit distance, 4 m) / 4.
    """
    ox = state.x + 0.15 * math.cos(state.pitch)
    oz = state.z + 0.15 * math.sin(state.pitch)
    angles = state.pitch - DEPTH_TILT + np.linspace(-DEPTH_FOV / 2, DEPTH_FOV / 2, DEPTH_RAYS)
    dx = np.cos(angles)[:, None]
    dz = np.sin(angles)[:, None]
    s = np.arange(0.05, DEPTH_MAX_RANGE + march_step, march_step)[None, :]
    px = ox + dx * s
    pz = oz + dz * s
    ground = terrain.height_at(px.ravel()).reshape(px.shape)
    clear = pz - ground
    if terrain.ceiling_x is not None:
        ceil = np.interp(px.ravel(), terrain.ceiling_x, terrain.ceiling_z,
                         left=np.inf, right=np.inf).reshape(px.shape)
        clear = np.minimum(clear, ceil - pz)
    hit = clear <= 0.0
    dist = np.full(DEPTH_RAYS, DEPTH_MAX_RANGE)
    any_hit = hit.any(axis=1)
    first = hit.argmax(axis=1)
    for i in np.nonzero(any_hit)[0]:
        j = first[i]
        if j == 0:
            dist[i] = s[0, 0]
            continue
        f0, f1 = clear[i, j - 1], clear[i, j]
        frac = f0 / (f0 - f1) if f0 != f1 else 0.0
        dist[i] = s[0, j - 1] + frac * march_step
    return np.minimum(dist, DEPTH_MAX_RANGE) / DEPTH_MAX_RANGE


class TerrainEnv:
    """Single-robot environment over one terrain instance."""

    def __init__(self, cfg: EnvConfig | None = None, family=TerrainFamily.SLOPE,
                 level: int = 0, seed: int = 0):
        self.cfg = cfg or EnvConfig()
        self.rng = np.random.default_rng(seed)
        self.family = TerrainFamily(family)
        self.level = int(level)
        self.terrain = generate_terrain(self.family, self.level, seed)
        self.max_steps = int(round(self.cfg.episode_seconds / self.cfg.dt_control))
        self.fault = False
        self.reset()

    # ---- lifecycle ----

    def reset(self, level: int | None = None, v_cmd: float | None = None):
        cfg = self.cfg
        if level is not None and level != self.level:
            self.level = int(np.clip(level, 0, MAX_LEVEL))
        self.terrain = generate_terrain(
            self.family, self.level, int(self.rng.integers(0, 2**31 - 1))
        )
        self.randomized = randomize_physics(self.rng, cfg)
        self.v_cmd = float(v_cmd) if v_cmd is not None else float(
            self.rng.uniform(*cfg.v_cmd_range))
        x0 = cfg.spawn_x
        z0 = float(self.terrain.height_at(x0)) + cfg.q_stand[0] - 0.02
        self.state = RobotState(
            x=x0, z=z0, vx=0.0, vz=0.0, pitch=0.0, pitch_rate=0.0,
            q=np.array([cfg.q_stand[0], cfg.q_stand[1], 0.0]),
            qdot=np.zeros(3),
            foot_contacts=np.array([True, True]),
            contact_forces=np.zeros(2),
        )
        self.t = 0
        self.last_action = np.zeros(ACTION_DIM)
        self.stall_steps = 0
        self.fault = False
        self._episode_distance_start = x0
        # depth pipeline: (rendered_at, scan); initial scan delivered immediately
        scan = render_depth(self.state, self.terrain)
        self._depth_queue = [(0, scan)]
        self._delivered = (0, scan)
        return self._observation()

    # ---- physics ----

    def _hip(self, i: int):
        cfg = self.cfg
        r = cfg.hip_offset if i == 0 else -cfg.hip_offset
        st = self.state
        return (st.x + r * math.cos(st.pitch), st.z + r * math.sin(st.pitch), r)

    def _substep(self, q_d, dt):
        cfg = self.cfg
        st = self.state
        friction, payload, motor = self.randomized
        mass = cfg.body_mass + payload
        cos_p = math.cos(st.pitch)
        sin_p = math.sin(st.pitch)
        down = (sin_p, -cos_p)

        # pin legs that touch the ground; free legs keep integrated length
        contacts = [False, False]
        normals = [0.0, 0.0]
        for i in range(2):
            hx, hz, _ = self._hip(i)
            foot_x = hx + st.q[i] * down[0]
            ground = float(self.terrain.height_at(foot_x))
            denom = max(cos_p, 0.2)
            l_pin = (hz - ground) / denom
            if st.q[i] >= l_pin - CONTACT_TOL and l_pin <= LEG_MAX + 0.02:
                new_l = min(max(l_pin, LEG_MIN), LEG_MAX)
                st.qdot[i] = float(np.clip((new_l - st.q[i]) / dt, -5.0, 5.0))
                st.q[i] = new_l
                contacts[i] = True

        # joint 3 mirrors body pitch
        st.q[2] = st.pitch
        st.qdot[2] = st.pitch_rate

        tau = pd_torque(q_d, st.q, st.qdot, cfg.kp, cfg.kd) * motor
        self._last_tau = tau

        fx, fz = 0.0, -mass * GRAVITY
        torque = 0.0
        for i in range(2):
            if not contacts[i]:
                continue
            f_axial = max(tau[i], 0.0)  # leg cannot pull on the ground
            f_up = f_axial * cos_p
            f_horiz = -f_axial * sin_p - cfg.slip_damping * st.vx
            lim = friction * max(f_up, 0.0)
            f_horiz = float(np.clip(f_horiz, -lim, lim))
            hx, hz, r = self._hip(i)
            fx += f_horiz
            fz += f_up
            torque += (hx - st.x) * f_up - (hz - st.z) * f_horiz
            normals[i] = f_up
        if any(contacts):
            torque += tau[2]

        st.vx += fx / mass * dt
        st.vz += fz / mass * dt
        st.pitch_rate += torque / cfg.body_inertia * dt
        st.x += st.vx * dt
        st.z += st.vz * dt
        st.pitch += st.pitch_rate * dt

        # free-leg dynamics
        for i in range(2):
            if contacts[i]:
                continue
            acc = (tau[i] - cfg.leg_damping * st.qdot[i]) / cfg.leg_mass
            st.qdot[i] += acc * dt
            st.q[i] += st.qdot[i] * dt
            if st.q[i] < LEG_MIN:
                st.q[i], st.qdot[i] = LEG_MIN, 0.0
            elif st.q[i] > LEG_MAX:
                st.q[i], st.qdot[i] = LEG_MAX, 0.0

        st.foot_contacts = np.array(contacts)
        st.contact_forces = np.array(normals)

        # body-ground / ceiling collision
        collided = False
        ground_body = float(self.terrain.height_at(st.x))
        if st.z - ground_body < cfg.body_clearance:
            st.z = ground_body + cfg.body_clearance
            st.vz = max(st.vz, 0.0)
            collided = True
        ceil = float(self.terrain.ceiling_at(st.x))
        if math.isfinite(ceil):
            top = st.z + cfg.body_half_height
            if top > ceil:
                st.z = ceil - cfg.body_half_height
                fast = abs(st.vz) > 0.5 or abs(st.vx) > 2.0
                st.vz = min(st.vz, 0.0)
                collided = collided or fast
                self._ceiling_contact = True
        return collided

    def step(self, action):
        """Advance one 50 Hz control step. Returns (obs, reward_terms, done, info)."""
        cfg = self.cfg
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (ACTION_DIM,) or not np.all(np.isfinite(action)):
            self.fault = True
            obs = self.reset()
            return obs, {}, True, {"fault": True}
        action = np.clip(action, -1.0, 1.0)
        q_d = np.asarray(cfg.q_stand) + action * cfg.action_scale

        dt = cfg.dt_control / cfg.substeps
        self._ceiling_contact = False
        collided = False
        for _ in range(cfg.substeps):
            collided = self._substep(q_d, dt) or collided

        st = self.state
        self.t += 1
        done = False
        reason = None
        if collided:
            done, reason = True, "collision"
        elif abs(st.pitch) > cfg.pitch_limit:
            done, reason = True, "pitch"
        elif st.z < float(self.terrain.height_at(st.x)) - 2.0:
            done, reason = True, "fell"
        elif self.t >= self.max_steps:
            done, reason = True, "timeout"
        if not np.isfinite(st.x + st.z + st.vx + st.vz + st.pitch):
            self.fault = True
            done, reason = True, "fault"

        # reward terms
        terms = {}
        terms["tracking"] = tracking_reward(st.vx, self.v_cmd, cfg.sigma_tracking)
        terms["action_rate"] = -float(np.sum((action - self.last_action) ** 2))
        terms["torque"] = -float(np.sum(self._last_tau**2)) * 1e-4
        terms["collision"] = -1.0 if (collided or self._ceiling_contact) else 0.0
        if abs(st.vx) < 0.1 * self.v_cmd:
            self.stall_steps += 1
        else:
            self.stall_steps = 0
        stall_limit = int(cfg.stall_seconds / cfg.dt_control)
        terms["stall"] = -0.5 if self.stall_steps > stall_limit else 0.0
        terms["termination"] = -10.0 if (done and reason in ("collision", "pitch", "fell")) else 0.0

        self.last_action = action.copy()

        # depth pipeline
        if self.t % cfg.depth_interval == 0:
            self._depth_queue.append((self.t, render_depth(st, self.terrain)))
        while self._depth_queue and self._depth_queue[0][0] + cfg.depth_latency <= self.t:
            self._delivered = self._depth_queue.pop(0)

        obs = self._observation()
        info = {
            "x": st.x, "reason": reason, "depth_rendered_at": self._delivered[0],
            "success": st.x >= self.terrain.border_x,
            "distance": st.x - self._episode_distance_start,
            "level": self.level, "v_cmd": self.v_cmd, "t": self.t,
        }
        return obs, terms, done, info

    # ---- observation ----

    def _observation(self) -> Observation:
        st = self.state
        grav = np.array([-math.sin(st.pitch), -math.cos(st.pitch)])
        proprio = np.concatenate([
            [st.vz, st.pitch, st.pitch_rate],
            grav,
            [self.v_cmd],
            st.q, st.qdot, self.last_action,
            st.foot_contacts.astype(np.float64),
        ])
        assert proprio.shape == (PROPRIO_DIM,)
        return Observation(
            proprio=proprio.astype(np.float32),
            depth=self._delivered[1].astype(np.float32),
            command=self.v_cmd,
        )

    def privileged(self) -> PrivilegedInfo:
        st = self.state
        probes = self.terrain.height_at(st.x + PROBE_OFFSETS) - st.z
        return PrivilegedInfo(
            height_samples=np.asarray(probes, dtype=np.float64),
            contact_forces=st.contact_forces.copy(),
            randomized_params=self.randomized.copy(),
        )

    def style_features(self) -> np.ndarray:
        """Pose-dynamics features for the style discriminator (no task vars)."""
        st = self.state
        height = st.z - float(self.terrain.height_at(st.x))
        return np.array([
            height, st.pitch, st.pitch_rate, st.vz,
            st.q[0], st.q[1], st.qdot[0], st.qdot[1],
        ], dtype=np.float32)

    # ---- checkpointable state ----

    def get_state(self) -> dict:
        st = self.state
        return {
            "body": np.array([st.x, st.z, st.vx, st.vz, st.pitch, st.pitch_rate]),
            "q": st.q.copy(), "qdot": st.qdot.copy(),
            "contacts": st.foot_contacts.astype(np.float64),
            "forces": st.contact_forces.copy(),
            "t": self.t, "level": self.level, "v_cmd": self.v_cmd,
            "last_action": self.last_action.copy(),
            "stall_steps": self.stall_steps,
            "randomized": self.randomized.copy(),
            "terrain_ground_x": self.terrain.ground_x.copy(),
            "terrain_ground_z": self.terrain.ground_z.copy(),
            "terrain_ceiling_x": None if self.terrain.ceiling_x is None
                else self.terrain.ceiling_x.copy(),
            "terrain_ceiling_z": None if self.terrain.ceiling_z is None
                else self.terrain.ceiling_z.copy(),
            "border_x": self.terrain.border_x,
            "episode_start": self._episode_distance_start,
            "depth_queue": [(t, s.copy()) for t, s in self._depth_queue],
            "delivered": (self._delivered[0], self._delivered[1].copy()),
            "rng_state": self.rng.bit_generator.state,
            "family": self.family.value,
        }

    def set_state(self, snap: dict):
        b = snap["body"]
        self.state = RobotState(
            x=float(b[0]), z=float(b[1]), vx=float(b[2]), vz=float(b[3]),
            pitch=float(b[4]), pitch_rate=float(b[5]),
            q=snap["q"].copy(), qdot=snap["qdot"].copy(),
            foot_contacts=snap["contacts"].astype(bool),
            contact_forces=snap["forces"].copy(),
        )
        self.t = int(snap["t"])
        self.level = int(snap["level"])
        self.v_cmd = float(snap["v_cmd"])
        self.last_action = snap["last_action"].copy()
        self.stall_steps = int(snap["stall_steps"])
        self.randomized = snap["randomized"].copy()
        self.family = TerrainFamily(snap["family"])
        self.terrain = TerrainSpec(
            family=self.family, level=self.level,
            ground_x=snap["terrain_ground_x"].copy(),
            ground_z=snap["terrain_ground_z"].copy(),
            ceiling_x=None if snap["terrain_ceiling_x"] is None
                else snap["terrain_ceiling_x"].copy(),
            ceiling_z=None if snap["terrain_ceiling_z"] is None
                else snap["terrain_ceiling_z"].copy(),
            border_x=float(snap["border_x"]),
        )
        self._episode_distance_start = float(snap["episode_start"])
        self._depth_queue = [(t, s.copy()) for t, s in snap["depth_queue"]]
        self._delivered = (snap["delivered"][0], snap["delivered"][1].copy())
        self.rng.bit_generator.state = snap["rng_state"]
        self._ceiling_contact = False
        self._last_tau = np.zeros(3)


@dataclass
class CurriculumState:
    levels: np.ndarray      # per-robot level
    promotions: int = 0
    demotions: int = 0


def curriculum_update(curr: CurriculumState, env_index: int,
                      episode_summary: dict) -> CurriculumState:
    """Promote on border crossing, demote below half the commanded distance."""
    level = int(curr.levels[env_index])
    required = 0.5 * episode_summary["v_cmd"] * episode_summary["duration"]
    if episode_summary["x_final"] >= episode_summary["border_x"]:
        level = min(level + 1, MAX_LEVEL)
        curr.promotions += 1
    elif episode_summary["distance"] < required:
        level = max(level - 1, 0)
        curr.demotions += 1
    curr.levels[env_index] = level
    return curr
