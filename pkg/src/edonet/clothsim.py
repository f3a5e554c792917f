"""Deterministic mass-spring cloth simulator and the three scripted scenes.

Conventions: the cloth rest grid lies in the x-y plane, node ``r * cols + c``
at ``(c * spacing, r * spacing, 0)``. Rows 0 and ``rows - 1`` are the
gripped edges. Gravity acts along -z.
"""

from dataclasses import dataclass, field, replace
import zlib

import numpy as np

from . import _kernels
from .graphrep import downsample_cloth

STRUCTURAL, SHEAR, BENDING = 0, 1, 2


class SimulationDiverged(RuntimeError):
    pass


class NotConverged(RuntimeError):
    pass


@dataclass(frozen=True)
class PhysicalParams:
    stiffness: float
    bending: float

    def as_array(self):
        return np.array([self.stiffness, self.bending])


@dataclass
class Sphere:
    position: np.ndarray
    velocity: np.ndarray
    radius: float
    mass: float
    stiffness: float


@dataclass
class ClothState:
    positions: np.ndarray
    velocities: np.ndarray
    rows: int
    cols: int
    spacing: float
    spring_i: np.ndarray
    spring_j: np.ndarray
    rest: np.ndarray
    kind: np.ndarray
    params: PhysicalParams
    held: np.ndarray  # N x 3 bool: coordinate follows a prescribed trajectory
    gripper_mask: np.ndarray
    loads: np.ndarray = None  # N x 3 external forces
    sphere: Sphere = None
    node_mass: float = 0.01

    def __post_init__(self):
        if self.loads is None:
            self.loads = np.zeros_like(self.positions)

    @property
    def n_nodes(self):
        return len(self.positions)

    @property
    def fixed(self):
        return self.held.all(axis=1)

    def spring_constants(self):
        return np.where(self.kind == BENDING, self.params.bending, self.params.stiffness)

    def copy(self):
        sphere = None
        if self.sphere is not None:
            sphere = replace(self.sphere, position=self.sphere.position.copy(),
                             velocity=self.sphere.velocity.copy())
        return replace(self, positions=self.positions.copy(), velocities=self.velocities.copy(),
                       held=self.held.copy(), loads=self.loads.copy(), sphere=sphere)


@dataclass(frozen=True)
class Obstacles:
    """Static penalty obstacles: a cylinder along x and/or a table plane."""

    cylinder: tuple = None  # (center_y, center_z, radius, stiffness)
    table: tuple = None  # (height, stiffness)


@dataclass(frozen=True)
class SimConfig:
    rows: int = 8
    cols: int = 8
    spacing: float = 0.05
    node_mass: float = 0.01
    dt: float = 1e-3
    damping: float = 0.02
    gravity: float = -9.81
    settle_tol: float = 1e-4
    settle_damping: float = 0.2
    settle_max_steps: int = 200_000
    settle_check_every: int = 20
    # pulling exploratory action
    ea_frames: int = 100
    ea_substeps: int = 20
    ea_pull: float = 0.03
    ea_tilt: float = 10.0
    force_noise: float = 0.0
    savgol_window: int = 21
    savgol_order: int = 3
    # partial bandage
    arm_radius: float = 0.06
    arm_stiffness: float = 2e3
    wrap_angle: float = 60.0
    pretension: float = 0.05
    arm_gravity: float = 0.0
    f_max: float = 2.0
    # lifting
    table_stiffness: float = 5e3
    sphere_radius: float = 0.06
    sphere_mass: float = 0.02
    sphere_stiffness: float = 5e3
    d_max: float = 0.2
    lift_steps: int = 500
    n_actions: int = 30

    def action_grid(self, env):
        top = self.f_max if env == "bandage" else self.d_max
        return np.linspace(0.0, top, self.n_actions)


# ---------------------------------------------------------------------------
# cloth construction and integration
# ---------------------------------------------------------------------------


def make_cloth(rows, cols, spacing, params, node_mass=0.01):
    if rows < 2 or cols < 2:
        raise ValueError(f"cloth needs rows, cols >= 2, got {rows}x{cols}")
    if not spacing > 0:
        raise ValueError(f"spacing must be positive, got {spacing}")
    idx = np.arange(rows * cols).reshape(rows, cols)
    pairs = []
    for kind, (dr, dc) in ((STRUCTURAL, (0, 1)), (STRUCTURAL, (1, 0)),
                           (SHEAR, (1, 1)), (SHEAR, (1, -1)),
                           (BENDING, (0, 2)), (BENDING, (2, 0))):
        r0, r1 = 0, rows - dr
        c0, c1 = max(0, -dc), cols - max(0, dc)
        a = idx[r0:r1, c0:c1].ravel()
        b = idx[r0 + dr:r1 + dr, c0 + dc:c1 + dc].ravel()
        pairs.append((a, b, np.full(len(a), kind)))
    si = np.concatenate([p[0] for p in pairs])
    sj = np.concatenate([p[1] for p in pairs])
    kind = np.concatenate([p[2] for p in pairs])
    r, c = np.divmod(np.arange(rows * cols), cols)
    pos = np.stack([c * spacing, r * spacing, np.zeros(rows * cols)], axis=1).astype(np.float64)
    rest = np.linalg.norm(pos[sj] - pos[si], axis=1)
    grip = np.zeros(rows * cols, dtype=bool)
    grip[:cols] = True
    grip[-cols:] = True
    return ClothState(pos, np.zeros_like(pos), rows, cols, float(spacing), si, sj, rest, kind,
                      params, np.zeros((rows * cols, 3), dtype=bool), grip, node_mass=float(node_mass))


def _pack(state, obstacles, gravity):
    """Flatten a state into the kernel's argument arrays (sphere appended last)."""
    n = state.n_nodes
    x = state.positions
    v = state.velocities
    mass = np.full(n, state.node_mass)
    free = ~state.held
    ext = state.loads
    sphere = np.array([-1.0, 0.0, 0.0])
    if state.sphere is not None:
        s = state.sphere
        x = np.vstack([x, s.position])
        v = np.vstack([v, s.velocity])
        mass = np.append(mass, s.mass)
        free = np.vstack([free, [False, False, True]])
        ext = np.vstack([ext, np.zeros(3)])
        sphere = np.array([float(n), s.radius, s.stiffness])
    cyl = np.zeros(5)
    if obstacles is not None and obstacles.cylinder is not None:
        cyl = np.array([1.0, *obstacles.cylinder])
    table = np.zeros(3)
    if obstacles is not None and obstacles.table is not None:
        table = np.array([1.0, *obstacles.table])
    g = np.asarray(gravity, dtype=np.float64)
    if g.ndim == 0:
        g = np.array([0.0, 0.0, float(g)])
    return dict(x=np.array(x, dtype=np.float64, order="C"), v=np.array(v, dtype=np.float64, order="C"),
                mass=mass, free=np.ascontiguousarray(free), ext=np.ascontiguousarray(ext, dtype=np.float64),
                sphere=sphere, cyl=cyl, table=table, gravity=g)


def _unpack(state, x, v):
    out = state.copy()
    n = state.n_nodes
    out.positions = x[:n].copy()
    out.velocities = v[:n].copy()
    if state.sphere is not None:
        out.sphere.position = x[n].copy()
        out.sphere.velocity = v[n].copy()
    return out


def _run(state, n_steps, dt, gravity, damping, obstacles=None, velocity=None, tol=0.0,
         check_every=20):
    p = _pack(state, obstacles, gravity)
    x, v = p["x"], p["v"]
    x0 = x.copy()
    vel = np.zeros_like(x)
    if velocity is not None:
        vel[:state.n_nodes] = velocity
    taken, residual = _kernels.simulate(
        x, v, x0, vel, 0, state.spring_i, state.spring_j, state.rest, state.spring_constants(),
        p["mass"], p["ext"], p["gravity"], p["cyl"], p["table"], p["sphere"], p["free"],
        float(dt), float(damping), int(n_steps), float(tol), int(check_every))
    if not np.isfinite(residual) or not np.all(np.isfinite(x)):
        raise SimulationDiverged(
            f"simulation diverged (dt={dt}, stiffness={state.params.stiffness}, bending={state.params.bending})")
    return _unpack(state, x, v), taken, residual


def step(state, dt, gravity=-9.81, damping=0.0, obstacles=None, velocity=None):
    """One semi-implicit Euler step.

    Held coordinates move along ``velocity`` (zero by default) and ignore
    forces; free ones integrate spring, gravity, load and contact forces
    minus ``damping * v``.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if not 0.0 <= damping < 1.0:
        raise ValueError("damping must lie in [0, 1)")
    out, _, _ = _run(state, 1, dt, gravity, damping, obstacles, velocity)
    return out


def static_forces(state, gravity=-9.81, obstacles=None):
    """Net velocity-independent force on every node (and the sphere, last row)."""
    p = _pack(state, obstacles, gravity)
    return _kernels.static_forces(p["x"], state.spring_i, state.spring_j, state.rest,
                                  state.spring_constants(), p["mass"], p["ext"], p["gravity"],
                                  p["cyl"], p["table"], p["sphere"])


def residual(state, gravity=-9.81, obstacles=None):
    f = static_forces(state, gravity, obstacles)
    free = _pack(state, obstacles, gravity)["free"]
    return float(np.sqrt(np.max(np.sum(np.where(free, f, 0.0) ** 2, axis=1))))


def settle(state, tol=1e-4, max_steps=200_000, dt=1e-3, gravity=-9.81, damping=0.2,
           obstacles=None, check_every=20):
    """Damped stepping until the largest free-node force residual is below ``tol``."""
    if not tol > 0:
        raise ValueError("tol must be positive")
    out, taken, res = _run(state, max_steps, dt, gravity, damping, obstacles, tol=tol,
                           check_every=check_every)
    if not res < tol:
        raise NotConverged(f"settle did not converge in {max_steps} steps (residual {res:.3e} N)")
    if taken == 0:
        return state.copy()
    out.velocities[:] = 0.0
    if out.sphere is not None:
        out.sphere.velocity[:] = 0.0
    return out


def total_energy(state, gravity=-9.81):
    """Kinetic + spring + gravitational energy (no contacts)."""
    ke = 0.5 * state.node_mass * np.sum(state.velocities ** 2)
    length = np.linalg.norm(state.positions[state.spring_j] - state.positions[state.spring_i], axis=1)
    pe = 0.5 * np.sum(state.spring_constants() * (length - state.rest) ** 2)
    ge = -state.node_mass * gravity * np.sum(state.positions[:, 2])
    return ke + pe + ge


# ---------------------------------------------------------------------------
# smoothing
# ---------------------------------------------------------------------------


def _fit_row(offsets, order):
    """Row of the pseudo-inverse giving the fitted value at offset 0."""
    A = np.vander(offsets.astype(np.float64), order + 1, increasing=True)
    return np.linalg.pinv(A)[0]


def savgol_smooth(signal, window=21, order=3):
    """Savitzky-Golay smoothing; edge samples use the truncated window."""
    y = np.asarray(signal, dtype=np.float64)
    n = len(y)
    if window % 2 != 1:
        raise ValueError("window must be odd")
    if order >= window:
        raise ValueError("order must be smaller than window")
    if n < window:
        raise ValueError(f"signal of length {n} is shorter than the window {window}")
    h = window // 2
    out = np.empty(n)
    center = _fit_row(np.arange(-h, h + 1), order)
    for i in range(h, n - h):
        out[i] = center @ y[i - h:i + h + 1]
    for i in list(range(h)) + list(range(n - h, n)):
        lo, hi = max(0, i - h), min(n, i + h + 1)
        out[i] = _fit_row(np.arange(lo, hi) - i, order) @ y[lo:hi]
    return out


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------


@dataclass
class Observation:
    graph: object
    force: np.ndarray
    t: int


def _settle_cfg(state, cfg, obstacles=None, gravity=None):
    gravity = cfg.gravity if gravity is None else gravity
    return settle(state, cfg.settle_tol, cfg.settle_max_steps, cfg.dt, gravity, cfg.settle_damping,
                  obstacles, cfg.settle_check_every)


def _hold_rows(state):
    held = np.zeros_like(state.held)
    held[state.gripper_mask] = True
    state.held = held
    return state


def hanging_cloth(params, cfg):
    """Cloth held flat by its two gripped rows and settled under gravity."""
    state = _hold_rows(make_cloth(cfg.rows, cfg.cols, cfg.spacing, params, cfg.node_mass))
    return _settle_cfg(state, cfg)


def _gripper_force(state, cfg, side):
    """Net spring force the cloth exerts on one gripper row (sensor reading)."""
    st = state.copy()
    st.loads = np.zeros_like(st.loads)
    st.sphere = None
    f = static_forces(st, gravity=0.0)
    rows = slice(0, cfg.cols) if side == 0 else slice(-cfg.cols, None)
    return f[rows].sum(axis=0)


def sample_seed(params, seed):
    key = f"{params.stiffness:.17g}/{params.bending:.17g}".encode()
    return [int(seed) & 0xFFFFFFFF, zlib.crc32(key)]


def subsample_indices(n, T):
    """T strictly increasing, evenly spaced frame indices ending at the last frame."""
    if not 1 <= T <= n:
        raise ValueError(f"need 1 <= T <= {n}, got {T}")
    return (np.arange(1, T + 1) * n) // T - 1


def ea_frames(params, cfg, seed=0, pull=None, raw_steps=None):
    """Full pulling exploratory action: (graphs, smoothed forces), one per frame.

    The gripped rows are held flat, the cloth settles, then the rows move
    apart at constant speed for ``raw_steps`` frames, along y turned by
    ``ea_tilt`` degrees towards x (a square pull would leave the lateral
    force identically zero). The sensor reads the net spring force on the
    far gripper row, tared at the settled state, plus optional seeded
    Gaussian noise.
    """
    raw_steps = cfg.ea_frames if raw_steps is None else int(raw_steps)
    if raw_steps < cfg.savgol_window:
        raise ValueError(f"need at least {cfg.savgol_window} frames for smoothing, got {raw_steps}")
    pull = cfg.ea_pull if pull is None else pull
    state = hanging_cloth(params, cfg)
    speed = 0.5 * pull / (raw_steps * cfg.ea_substeps * cfg.dt)
    tilt = np.deg2rad(cfg.ea_tilt)
    direction = np.array([np.sin(tilt), np.cos(tilt), 0.0])
    vel = np.zeros_like(state.positions)
    vel[:cfg.cols] = -speed * direction
    vel[-cfg.cols:] = speed * direction
    tare = _gripper_force(state, cfg, 1)
    rng = np.random.default_rng(sample_seed(params, seed))
    graphs, forces = [], []
    st = state
    for _ in range(raw_steps):
        st, _, _ = _run(st, cfg.ea_substeps, cfg.dt, cfg.gravity, cfg.damping, velocity=vel)
        graphs.append(downsample_cloth(st))
        forces.append(_gripper_force(st, cfg, 1) - tare)
    forces = np.asarray(forces)
    if cfg.force_noise > 0:
        forces = forces + rng.normal(0.0, cfg.force_noise, size=forces.shape)
    smooth = np.stack([savgol_smooth(forces[:, d], cfg.savgol_window, cfg.savgol_order)
                       for d in range(3)], axis=1)
    return graphs, smooth


def select_observations(graphs, forces, T):
    idx = subsample_indices(len(graphs), T)
    return [Observation(graphs[i], forces[i], int(i) + 1) for i in idx]


def run_pulling_ea(params, raw_steps=None, T=5, cfg=None, seed=0, pull=None):
    """T observations evenly spaced over the pull, the last one at its final frame."""
    cfg = SimConfig() if cfg is None else cfg
    graphs, forces = ea_frames(params, cfg, seed, pull, raw_steps)
    return select_observations(graphs, forces, T)


def _arc_path(s, radius, alpha, straight):
    """Point at arc length ``s`` on a path up a tangent, over the cylinder top, down the other side."""
    arc = 2.0 * alpha * radius
    if s < straight:
        p = np.array([-radius * np.sin(alpha), radius * np.cos(alpha)])
        return p - (straight - s) * np.array([np.cos(alpha), np.sin(alpha)])
    if s <= straight + arc:
        theta = -alpha + (s - straight) / radius
        return np.array([radius * np.sin(theta), radius * np.cos(theta)])
    p = np.array([radius * np.sin(alpha), radius * np.cos(alpha)])
    return p + (s - straight - arc) * np.array([np.cos(alpha), -np.sin(alpha)])


def bandage_obstacles(cfg):
    return Obstacles(cylinder=(0.0, 0.0, cfg.arm_radius, cfg.arm_stiffness))


def bandage_initial(params, cfg):
    """Cloth wrapped over the arm, gripped rows hanging on both sides, settled."""
    state = make_cloth(cfg.rows, cfg.cols, cfg.spacing, params, cfg.node_mass)
    alpha = np.deg2rad(cfg.wrap_angle)
    length = (cfg.rows - 1) * cfg.spacing * (1.0 + cfg.pretension)
    straight = 0.5 * (length - 2.0 * alpha * cfg.arm_radius)
    if straight < 0:
        raise ValueError("cloth too short for the configured wrap")
    pos = state.positions.copy()
    for r in range(cfg.rows):
        yz = _arc_path(r * length / (cfg.rows - 1), cfg.arm_radius, alpha, straight)
        sl = slice(r * cfg.cols, (r + 1) * cfg.cols)
        pos[sl, 0] = np.arange(cfg.cols) * cfg.spacing - 0.5 * (cfg.cols - 1) * cfg.spacing
        pos[sl, 1] = yz[0]
        pos[sl, 2] = yz[1]
    state.positions = pos
    _hold_rows(state)
    return _settle_cfg(state, cfg, bandage_obstacles(cfg), cfg.arm_gravity)


def run_bandage(params, a, cfg, before=None):
    """Pull both gripped rows down with total force ``a`` per gripper.

    Grippers are force controlled along z (x and y held). Their loads are
    set to cancel the holding force of the settled state, so ``a == 0``
    leaves the state untouched.
    """
    if not 0.0 <= a <= cfg.f_max:
        raise ValueError(f"action {a} outside [0, {cfg.f_max}]")
    obstacles = bandage_obstacles(cfg)
    before = bandage_initial(params, cfg) if before is None else before
    hold = static_forces(before, cfg.arm_gravity, obstacles)
    st = before.copy()
    loads = np.zeros_like(st.loads)
    g = st.gripper_mask
    loads[g, 2] = -hold[:st.n_nodes][g, 2] - a / cfg.cols
    st.loads = loads
    held = st.held.copy()
    held[g, 2] = False
    st.held = held
    after = _settle_cfg(st, cfg, obstacles, cfg.arm_gravity)
    return downsample_cloth(before), downsample_cloth(after), after


def lifting_obstacles(cfg):
    return Obstacles(table=(0.0, cfg.table_stiffness))


def lifting_initial(params, cfg):
    """Cloth flat on the table with the sphere resting at its centre."""
    state = _hold_rows(make_cloth(cfg.rows, cfg.cols, cfg.spacing, params, cfg.node_mass))
    centre = state.positions.mean(axis=0)
    state.sphere = Sphere(np.array([centre[0], centre[1], cfg.sphere_radius]), np.zeros(3),
                          cfg.sphere_radius, cfg.sphere_mass, cfg.sphere_stiffness)
    return _settle_cfg(state, cfg, lifting_obstacles(cfg))


def run_lifting(params, a, cfg, before=None):
    """Raise both gripped rows by ``a`` (displacement control), then settle."""
    if not 0.0 <= a <= cfg.d_max:
        raise ValueError(f"action {a} outside [0, {cfg.d_max}]")
    obstacles = lifting_obstacles(cfg)
    before = lifting_initial(params, cfg) if before is None else before
    if a == 0.0:
        after = before.copy()
    else:
        vel = np.zeros_like(before.positions)
        vel[before.gripper_mask, 2] = a / (cfg.lift_steps * cfg.dt)
        st, _, _ = _run(before, cfg.lift_steps, cfg.dt, cfg.gravity, cfg.settle_damping, obstacles,
                        velocity=vel)
        st.positions[before.gripper_mask] = before.positions[before.gripper_mask]
        st.positions[before.gripper_mask, 2] += a
        after = _settle_cfg(st, cfg, obstacles)
    return downsample_cloth(before), downsample_cloth(after), after
