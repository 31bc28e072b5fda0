"""Planar articulated environments for reference-motion tracking.

Each environment is a serial chain of rigid links hanging from either a fixed
pivot or a floating trunk, integrated with semi-implicit Euler at 120 Hz behind
a 30 Hz joint-target interface. Joint torques come from a PD law on the target
angles. The floating-base ``hopper2d`` touches the ground through its foot
point with a one-sided spring-damper and Coulomb-clamped friction.

Angle convention: a link at absolute angle 0 points straight down; absolute
angles are the trunk pitch plus the sum of the joint angles above the link.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, SimulationDiverged, StateError
from .numerics import Rng

ENV_NAMES = ("pendulum-track", "acrobot-track", "hopper2d")
GRAVITY = 9.81


def wrap_angle(x):
    """Wrap to (-pi, pi]."""
    y = np.mod(np.asarray(x, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi
    y = np.where(y == -np.pi, np.pi, y)
    return float(y) if np.ndim(y) == 0 else y


@dataclass(frozen=True)
class Link:
    mass: float
    length: float
    com: float  # distance of the centre of mass from the proximal joint
    inertia: float  # about the centre of mass


@dataclass(frozen=True)
class EnvSpec:
    name: str
    joints: int
    floating: bool
    links: tuple[Link, ...]
    cycle: float  # seconds
    sim_hz: int = 120
    control_hz: int = 30
    kp: float = 60.0
    kd: float = 6.0
    torque_limit: float = 40.0
    joint_limit: float = 2.6
    joint_damping: float = 0.0
    trunk_mass: float = 0.0
    trunk_inertia: float = 0.0
    contact_stiffness: float = 2.0e4
    contact_damping: float = 200.0
    friction: float = 0.8
    max_ori_error: float = 0.8
    min_height_frac: float = 0.6
    max_joint_error: float = 1.5
    max_len: int = 300

    def __post_init__(self):
        if self.sim_hz % self.control_hz:
            raise ConfigError("sim_hz must be divisible by control_hz")
        if len(self.links) != self.joints:
            raise ConfigError("one link per joint required")
        steps = self.cycle * self.control_hz
        if abs(steps - round(steps)) > 1e-9:
            raise ConfigError("reference cycle must span a whole number of control steps")

    @property
    def m(self) -> int:
        return self.joints

    @property
    def n(self) -> int:
        return 2 * self.joints + (6 if self.floating else 0)

    @property
    def n_ref(self) -> int:
        return 2 + (3 if self.floating else 0) + self.joints

    @property
    def ndof(self) -> int:
        return self.joints + (3 if self.floating else 0)

    @property
    def substeps(self) -> int:
        return self.sim_hz // self.control_hz

    @property
    def dt(self) -> float:
        return 1.0 / self.sim_hz

    @property
    def cycle_steps(self) -> int:
        return int(round(self.cycle * self.control_hz))


@dataclass
class CharacterState:
    """Generalised coordinates: ``[x, z, pitch, q_1..q_J]`` (floating) or ``q``."""
    q: np.ndarray
    qd: np.ndarray
    floating: bool

    @property
    def joints(self) -> np.ndarray:
        return self.q[3:] if self.floating else self.q

    @property
    def joint_vel(self) -> np.ndarray:
        return self.qd[3:] if self.floating else self.qd

    @property
    def root_pos(self) -> np.ndarray:
        return self.q[:2] if self.floating else np.zeros(0)

    @property
    def root_ori(self) -> float:
        return float(self.q[2]) if self.floating else 0.0

    @property
    def root_vel(self) -> np.ndarray:
        return self.qd[:2] if self.floating else np.zeros(0)

    @property
    def root_angvel(self) -> float:
        return float(self.qd[2]) if self.floating else 0.0

    def copy(self) -> "CharacterState":
        return CharacterState(self.q.copy(), self.qd.copy(), self.floating)


@dataclass
class ReferenceFrame:
    t: float
    phase: float
    root_pose: np.ndarray  # (x, z, pitch) or empty for fixed base
    joints: np.ndarray
    action: np.ndarray  # actuated targets; every joint is actuated here

    def encode(self) -> np.ndarray:
        """Policy-side encoding: cyclic phase, reference root pose, reference joints."""
        ang = 2.0 * np.pi * self.phase
        return np.concatenate([[math.sin(ang), math.cos(ang)], self.root_pose, self.joints])


@dataclass
class StepResult:
    state: CharacterState
    ref: ReferenceFrame
    reward: float
    r_pos: float
    r_ori: float
    r_joint: float
    terminated: bool
    truncated: bool


# reference motions --------------------------------------------------------

class SineReference:
    def __init__(self, amplitudes, phases, cycle):
        self.amplitudes = np.asarray(amplitudes, dtype=np.float64)
        self.phases = np.asarray(phases, dtype=np.float64)
        self.cycle = float(cycle)

    def pose(self, t: float):
        ang = 2.0 * np.pi * t / self.cycle + self.phases
        return np.zeros(0), self.amplitudes * np.sin(ang)


class HopReference:
    """Crouch-extend hop cycle in place: foot stays under the hip, and the
    root lifts off during the extended half of the cycle."""

    def __init__(self, thigh: float, shank: float, cycle: float = 0.6,
                 bend: float = 0.5, bend_amp: float = 0.1, clearance: float = 0.05):
        self.thigh, self.shank, self.cycle = thigh, shank, float(cycle)
        self.bend, self.bend_amp, self.clearance = bend, bend_amp, clearance

    def pose(self, t: float):
        phi = (t / self.cycle) % 1.0
        beta = self.bend + self.bend_amp * math.sin(2.0 * math.pi * phi)
        flight = max(0.0, math.sin(2.0 * math.pi * (phi - 0.5)))
        q1 = beta
        q2 = -q1 - math.asin(self.thigh * math.sin(q1) / self.shank)
        z = self.thigh * math.cos(q1) + self.shank * math.cos(q1 + q2) + self.clearance * flight**2
        return np.array([0.0, z, 0.0]), np.array([q1, q2])


class CsvReference:
    """Tabulated reference (columns ``t, [x, z, pitch,] joints...``), linearly
    interpolated and repeated with period equal to the last time stamp."""

    def __init__(self, path, floating: bool, joints: int):
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and not r[0].lstrip().startswith("#")]
        try:
            float(rows[0][0])
        except ValueError:
            rows = rows[1:]
        data = np.array([[float(v) for v in r] for r in rows], dtype=np.float64)
        width = 1 + (3 if floating else 0) + joints
        if data.ndim != 2 or data.shape[1] != width or len(data) < 2:
            raise ConfigError(f"reference CSV {path} needs {width} columns and >= 2 rows")
        if np.any(np.diff(data[:, 0]) <= 0) or data[0, 0] != 0.0:
            raise ConfigError("reference CSV time column must start at 0 and increase")
        self.data = data
        self.floating = floating
        self.cycle = float(data[-1, 0])

    def pose(self, t: float):
        tt = t % self.cycle
        vals = np.array([np.interp(tt, self.data[:, 0], col) for col in self.data[:, 1:].T])
        if self.floating:
            return vals[:3], vals[3:]
        return np.zeros(0), vals


# environment --------------------------------------------------------------

def _spec_for(name: str) -> tuple[EnvSpec, object]:
    if name == "pendulum-track":
        spec = EnvSpec(name=name, joints=1, floating=False, cycle=1.0,
                       links=(Link(mass=2.0, length=1.0, com=1.0, inertia=0.01),))
        return spec, SineReference([0.8], [0.0], 1.0)
    if name == "acrobot-track":
        link = Link(mass=1.0, length=0.5, com=0.25, inertia=1.0 * 0.5**2 / 12)
        spec = EnvSpec(name=name, joints=2, floating=False, cycle=1.2, links=(link, link))
        return spec, SineReference([0.6, 0.5], [0.0, 0.5 * np.pi], 1.2)
    if name == "hopper2d":
        thigh = Link(mass=1.5, length=0.45, com=0.225, inertia=1.5 * 0.45**2 / 12)
        shank = Link(mass=1.0, length=0.45, com=0.225, inertia=1.0 * 0.45**2 / 12)
        spec = EnvSpec(name=name, joints=2, floating=True, cycle=0.6, links=(thigh, shank),
                       trunk_mass=3.0, trunk_inertia=0.3, joint_limit=2.4)
        return spec, HopReference(thigh.length, shank.length, cycle=0.6)
    raise ConfigError(f"unknown environment {name!r}; choose from {', '.join(ENV_NAMES)}")


class Env:
    """Single-owner stateful environment."""

    def __init__(self, spec: EnvSpec, reference, seed: int = 0):
        self.spec = spec
        self.reference = reference
        if abs(reference.cycle - spec.cycle) > 1e-12:
            self.spec = spec = replace(spec, cycle=reference.cycle)
        self.rng = Rng(seed)
        self.state: CharacterState | None = None
        self.ref: ReferenceFrame | None = None
        self.t0 = 0.0
        self.steps = 0
        self._trace: list | None = None
        self._pending_push = 0.0

    # reference ------------------------------------------------------------
    def reference_at(self, t: float) -> ReferenceFrame:
        if t < 0:
            raise ConfigError("reference time must be non-negative")
        root, joints = self.reference.pose(t)
        phase = (t % self.spec.cycle) / self.spec.cycle
        if phase >= 1.0:
            phase = 0.0
        return ReferenceFrame(t=t, phase=phase, root_pose=np.asarray(root, dtype=np.float64),
                              joints=np.asarray(joints, dtype=np.float64),
                              action=np.array(joints, dtype=np.float64))

    def reference_state(self, t: float, h: float = 1e-5) -> CharacterState:
        """Reference pose at ``t`` with velocities from central differences."""
        def coords(tt):
            r = self.reference_at(tt % self.spec.cycle)
            return np.concatenate([r.root_pose, r.joints])

        q = coords(t)
        qd = (coords(t + h) - coords(t - h)) / (2.0 * h)
        return CharacterState(q, qd, self.spec.floating)

    # resets ---------------------------------------------------------------
    def reset_at(self, t0: float) -> tuple[CharacterState, ReferenceFrame]:
        self.t0 = float(t0)
        self.steps = 0
        self.state = self.reference_state(self.t0)
        self.ref = self.reference_at(self.t0)
        self._pending_push = 0.0
        if self._trace is not None:
            self._trace = []
        return self.state, self.ref

    def reset_rsi(self, rng: Rng | None = None) -> tuple[CharacterState, ReferenceFrame]:
        """Reference state initialisation at a uniformly random phase."""
        phase = float((rng or self.rng).uniform())
        return self.reset_at(phase * self.spec.cycle)

    @property
    def time(self) -> float:
        return self.t0 + self.steps / self.spec.control_hz

    # observations and reward ---------------------------------------------
    def observe(self, state: CharacterState | None = None, ref: ReferenceFrame | None = None) -> np.ndarray:
        s = self.state if state is None else state
        r = self.ref if ref is None else ref
        if self.spec.floating:
            pos_err = s.q[:2] - r.root_pose[:2]
            ori_err = wrap_angle(s.q[2] - r.root_pose[2])
            return np.concatenate([pos_err, [ori_err], s.qd[:3], s.q[3:], s.qd[3:]])
        return np.concatenate([s.q, s.qd])

    def reward_terms(self, state: CharacterState, ref: ReferenceFrame) -> tuple[float, float, float, float]:
        jerr = ref.joints - state.joints
        r_joint = math.exp(-2.0 * float(jerr @ jerr))
        if self.spec.floating:
            perr = ref.root_pose[:2] - state.q[:2]
            r_pos = math.exp(-50.0 * float(perr @ perr))
            oerr = wrap_angle(ref.root_pose[2] - state.q[2])
            r_ori = math.exp(-10.0 * oerr * oerr)
        else:
            r_pos = r_ori = 1.0
        return 0.3 * r_pos + 0.3 * r_ori + 0.4 * r_joint, r_pos, r_ori, r_joint

    def check_termination(self, state: CharacterState, ref: ReferenceFrame) -> tuple[bool, bool]:
        """``(terminated, truncated)``; truncation only when not terminated."""
        spec = self.spec
        term = bool(np.max(np.abs(ref.joints - state.joints)) > spec.max_joint_error)
        if spec.floating:
            term |= abs(wrap_angle(ref.root_pose[2] - state.q[2])) > spec.max_ori_error
            term |= state.q[1] < spec.min_height_frac * ref.root_pose[1]
        trunc = (not term) and self.steps >= spec.max_len
        return term, trunc

    # dynamics ---------------------------------------------------------------
    # Scalar float arithmetic throughout: the chains have at most 5 dof and
    # small-array numpy overhead dominates otherwise.
    def _terms(self, q, qd, want_force: bool = True):
        """Mass matrix, generalised gravity/bias/contact force, COM heights, foot."""
        spec = self.spec
        fl = spec.floating
        off = 3 if fl else 0
        nd = spec.ndof
        J = spec.joints
        base = q[2] if fl else 0.0
        base_w = qd[2] if fl else 0.0
        th, w, ux, uy, dx, dy = [], [], [], [], [], []
        acc_t, acc_w = base, base_w
        for j in range(J):
            acc_t += q[off + j]
            acc_w += qd[off + j]
            s, c = math.sin(acc_t), math.cos(acc_t)
            th.append(acc_t)
            w.append(acc_w)
            ux.append(s)
            uy.append(-c)
            dx.append(c)
            dy.append(s)

        mm = [[0.0] * nd for _ in range(nd)]
        force = [0.0] * nd
        if fl:
            mm[0][0] = mm[1][1] = spec.trunk_mass
            mm[2][2] = spec.trunk_inertia
            force[1] -= spec.trunk_mass * GRAVITY
        heights = []
        ox, oz = (q[0], q[1]) if fl else (0.0, 0.0)

        def point(i_last: int, tip: float):
            """Position, Jacobian rows and bias of a point at ``tip`` along link ``i_last``."""
            px, pz = ox, oz
            jx, jz = [0.0] * nd, [0.0] * nd
            bx = bz = 0.0
            if fl:
                jx[0] = 1.0
                jz[1] = 1.0
            # contribution of angle l to coordinates: pitch and joints 0..l
            cx = [0.0] * J
            cz = [0.0] * J
            for l in range(i_last + 1):
                coef = tip if l == i_last else spec.links[l].length
                px += coef * ux[l]
                pz += coef * uy[l]
                cx[l] = coef * dx[l]
                cz[l] = coef * dy[l]
                bx -= coef * ux[l] * w[l] * w[l]
                bz -= coef * uy[l] * w[l] * w[l]
            sx = sz = 0.0
            for j in range(i_last, -1, -1):
                sx += cx[j]
                sz += cz[j]
                jx[off + j] = sx
                jz[off + j] = sz
            if fl:
                jx[2] = sx
                jz[2] = sz
            return px, pz, jx, jz, bx, bz

        for i, link in enumerate(spec.links):
            px, pz, jx, jz, bx, bz = point(i, link.com)
            heights.append(pz)
            m = link.mass
            # angular-velocity Jacobian: ones on pitch and joints 0..i
            ang = [0] * nd
            if fl:
                ang[2] = 1
            for j in range(i + 1):
                ang[off + j] = 1
            for a in range(nd):
                ja, za, ga = jx[a], jz[a], ang[a]
                row = mm[a]
                for b in range(a, nd):
                    v = m * (ja * jx[b] + za * jz[b])
                    if ga and ang[b]:
                        v += link.inertia
                    row[b] += v
                if want_force:
                    force[a] += m * (ja * (-bx) + za * (-GRAVITY - bz))
        for a in range(nd):
            for b in range(a):
                mm[a][b] = mm[b][a]

        foot = point(J - 1, spec.links[-1].length) if (fl or not want_force) else None
        if want_force and fl and foot[1] < 0.0:
            _, fz, jx, jz, _, _ = foot
            vx = sum(jx[k] * qd[k] for k in range(nd))
            vz = sum(jz[k] * qd[k] for k in range(nd))
            fn = max(0.0, -spec.contact_stiffness * fz - spec.contact_damping * vz)
            ft = -spec.contact_damping * vx
            lim = spec.friction * fn
            ft = min(max(ft, -lim), lim)
            for k in range(nd):
                force[k] += jx[k] * ft + jz[k] * fn
        return mm, force, heights, foot

    def mass_matrix(self, q) -> np.ndarray:
        q = [float(v) for v in q]
        return np.array(self._terms(q, [0.0] * len(q), want_force=False)[0])

    def energy(self, state: CharacterState | None = None) -> float:
        s = self.state if state is None else state
        q, qd = s.q.tolist(), s.qd.tolist()
        mm, _, heights, _ = self._terms(q, qd, want_force=False)
        ke = 0.5 * float(s.qd @ np.array(mm) @ s.qd)
        pe = sum(link.mass * GRAVITY * h for link, h in zip(self.spec.links, heights))
        if self.spec.floating:
            pe += self.spec.trunk_mass * GRAVITY * q[1]
        return ke + pe

    def foot_position(self, state: CharacterState | None = None) -> np.ndarray:
        s = self.state if state is None else state
        foot = self._terms(s.q.tolist(), s.qd.tolist(), want_force=False)[3]
        return np.array([foot[0], foot[1]])

    def _accel(self, q, qd, tau) -> list:
        spec = self.spec
        mm, force, _, _ = self._terms(q, qd)
        off = 3 if spec.floating else 0
        for j in range(spec.joints):
            force[off + j] += tau[j] - spec.joint_damping * qd[off + j]
        return _solve_spd(mm, force)

    def pd_torque(self, target, state: CharacterState | None = None) -> np.ndarray:
        s = self.state if state is None else state
        spec = self.spec
        tau = spec.kp * (np.asarray(target) - s.joints) - spec.kd * s.joint_vel
        return np.clip(tau, -spec.torque_limit, spec.torque_limit)

    def apply_push(self, magnitude: float):
        """Perturb on the next step: root velocity impulse (N*s) for the
        floating base, otherwise a torque spike (N*m) on every joint."""
        self._pending_push = float(magnitude)

    def step(self, action) -> StepResult:
        if self.state is None:
            raise StateError("reset the environment before stepping")
        spec = self.spec
        a = np.asarray(action, dtype=np.float64).reshape(spec.m)
        if not np.all(np.isfinite(a)):
            raise SimulationDiverged("non-finite action")
        lim = spec.joint_limit
        a = np.clip(a, -lim, lim).tolist()
        q, qd = self.state.q.tolist(), self.state.qd.tolist()
        off = 3 if spec.floating else 0
        J = spec.joints
        nd = spec.ndof
        push = self._pending_push
        self._pending_push = 0.0
        if push and spec.floating:
            total = spec.trunk_mass + sum(link.mass for link in spec.links)
            qd[0] += push / total
        dt = spec.dt
        kp, kd, tl = spec.kp, spec.kd, spec.torque_limit
        for _ in range(spec.substeps):
            tau = []
            for j in range(J):
                t = kp * (a[j] - q[off + j]) - kd * qd[off + j]
                t = min(max(t, -tl), tl)
                if push and not spec.floating:
                    t += push
                tau.append(t)
            acc = self._accel(q, qd, tau)
            for k in range(nd):
                qd[k] += dt * acc[k]
                q[k] += dt * qd[k]
            for j in range(off, nd):
                if q[j] > lim:
                    q[j], qd[j] = lim, 0.0
                elif q[j] < -lim:
                    q[j], qd[j] = -lim, 0.0
            if not all(math.isfinite(v) for v in q + qd):
                raise SimulationDiverged(f"{spec.name}: non-finite state at t={self.time:.4f}s")
            if self._trace is not None:
                self._trace.append((q[off:], qd[off:]))
        self.steps += 1
        self.state = CharacterState(np.array(q), np.array(qd), spec.floating)
        self.ref = self.reference_at(self.time)
        reward, rp, ro, rj = self.reward_terms(self.state, self.ref)
        term, trunc = self.check_termination(self.state, self.ref)
        return StepResult(self.state, self.ref, reward, rp, ro, rj, term, trunc)

    # tracing ------------------------------------------------------------------
    def enable_trace(self):
        self._trace = []

    def sim_trace(self) -> dict[str, np.ndarray]:
        """Joint positions/velocities at every 120 Hz substep since the last reset."""
        if self._trace is None:
            raise StateError("sim-rate tracing was not enabled for this environment")
        J = self.spec.joints
        if not self._trace:
            return {"q": np.zeros((0, J)), "qd": np.zeros((0, J)), "rate_hz": self.spec.sim_hz}
        q = np.array([p for p, _ in self._trace])
        qd = np.array([v for _, v in self._trace])
        return {"q": q, "qd": qd, "rate_hz": self.spec.sim_hz}


def _solve_spd(a: list[list[float]], b: list[float]) -> list[float]:
    """Cholesky solve of a small symmetric positive-definite system."""
    n = len(b)
    if n == 1:
        return [b[0] / a[0][0]]
    low = [[0.0] * n for _ in range(n)]
    for i in range(n):
        for j in range(i + 1):
            s = a[i][j] - sum(low[i][k] * low[j][k] for k in range(j))
            if i == j:
                if s <= 0.0:
                    raise SimulationDiverged("mass matrix lost positive definiteness")
                low[i][i] = math.sqrt(s)
            else:
                low[i][j] = s / low[j][j]
    y = [0.0] * n
    for i in range(n):
        y[i] = (b[i] - sum(low[i][k] * y[k] for k in range(i))) / low[i][i]
    x = [0.0] * n
    for i in range(n - 1, -1, -1):
        x[i] = (y[i] - sum(low[k][i] * x[k] for k in range(i + 1, n))) / low[i][i]
    return x


def make_env(name: str, seed: int = 0, reference_csv: str | Path | None = None, **overrides) -> Env:
    """Build a named environment; ``overrides`` replace EnvSpec fields."""
    spec, ref = _spec_for(name)
    if overrides:
        unknown = set(overrides) - set(EnvSpec.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown environment option(s): {', '.join(sorted(unknown))}")
        spec = replace(spec, **overrides)
    if reference_csv is not None:
        ref = CsvReference(reference_csv, spec.floating, spec.joints)
    return Env(spec, ref, seed)


def record_sim_rate_trace(env: Env) -> dict[str, np.ndarray]:
    return env.sim_trace()
