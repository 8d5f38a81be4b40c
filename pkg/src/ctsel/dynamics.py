"""Ground-truth ODE dynamics for the cardiovascular and COVID-19 systems.

Both systems are integrated with a fixed-step classical Runge-Kutta
scheme on a shared time grid: 31 observed points at t = 0..30 tiled by
5 equal treatment cycles, then 10 horizon points at t = 31..40. Doses
are piecewise constant; the cycle tiling continues through the horizon
so the integrand stays smooth within every step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit


class SimulationDivergence(Exception):
    """Integration produced a non-finite state; carries the failure time."""

    def __init__(self, t: float, message: str = ""):
        self.t = t
        super().__init__(message or f"simulation diverged at t={t}")


@dataclass(frozen=True)
class CvsState:
    """Cardiovascular state: stroke volume, arterial/venous pressure, baroreflex tone."""
    sv: float
    pa: float
    pv: float
    s: float

    def as_array(self) -> np.ndarray:
        return np.array([self.sv, self.pa, self.pv, self.s], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "CvsState":
        return cls(*(float(v) for v in a))


@dataclass(frozen=True)
class CovidState:
    """COVID-19 state: disease progression, immune reaction, immunity, drug concentration."""
    z1: float
    z2: float
    z3: float
    z4: float

    def as_array(self) -> np.ndarray:
        return np.array([self.z1, self.z2, self.z3, self.z4], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "CovidState":
        return cls(*(float(v) for v in a))


@dataclass(frozen=True)
class CvsParams:
    """Cardiovascular simulation parameters (appendix table values)."""
    f_hr_max: float = 3.0
    f_hr_min: float = 0.6666
    r_tpr_max: float = 2.134
    r_tpr_min: float = 0.5335
    r_tpr_mod: float = 0.0
    sv_mod: float = 0.001
    ca: float = 4.0
    cv: float = 111.0
    k_width: float = 0.1838
    p_aset: float = 70.0
    tau_baro: float = 20.0
    # Zenker-model rows kept for table fidelity; the simplified equations
    # displayed for this system do not use them.
    p_0lv: float = 2.03
    r_valve: float = 0.0025
    k_elv: float = 0.066
    v_ed0: float = 7.14
    t_sys: float = 0.2666
    cprsw_max: float = 103.8
    cprsw_min: float = 25.9


@dataclass(frozen=True)
class CovidParams:
    """COVID-19 simulation parameters (appendix table values).

    drug_coupling selects how the drug concentration Z4 feeds back into
    the disease dynamics: "as-printed" keeps the equations exactly as
    displayed (Z4 never influences Z1..Z3, so treatment is inert), while
    "z4-substitution" (default) uses Z4 in place of Z3 in the k_di and
    k_d interaction terms so dosing can suppress the outcome.
    """
    hill_cure: float = 2.0
    h_p: float = 2.0
    k_cp: float = 1.0
    k_ep: float = 1.0
    k_d: float = 1.0
    k_dp: float = 1.0
    k_dr: float = 1.0
    k_di: float = 1.0
    k_id: float = 1.0
    k_if: float = 1.0
    k_io: float = 1.0
    k_im: float = 1.0
    k_kel: float = 1.0
    drug_coupling: str = "z4-substitution"

    def __post_init__(self):
        if self.drug_coupling not in ("as-printed", "z4-substitution"):
            raise ValueError(f"unknown drug_coupling {self.drug_coupling!r}")


@dataclass(frozen=True)
class TimeGrid:
    """Shared simulation grid: dt, observed points, horizon points, cycles."""
    dt: float = 1.0
    n_obs: int = 31
    n_horizon: int = 10
    n_cycles: int = 5

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if (self.n_obs - 1) % self.n_cycles != 0:
            raise ValueError("observed window must tile into equal cycles")

    @property
    def n_points(self) -> int:
        return self.n_obs + self.n_horizon

    @property
    def n_steps(self) -> int:
        return self.n_points - 1

    @property
    def cycle_steps(self) -> int:
        return (self.n_obs - 1) // self.n_cycles

    @property
    def cycle_length(self) -> float:
        return self.cycle_steps * self.dt

    def times(self) -> np.ndarray:
        return np.arange(self.n_points) * self.dt

    def cycle_start(self, t: float) -> float:
        return np.floor(t / self.cycle_length) * self.cycle_length


def _validate_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite values")


def cvs_derivative(state: CvsState, dose: float, t_in_cycle: float,
                   params: CvsParams | None = None) -> CvsState:
    """Time derivative of the cardiovascular state under the given dose.

    t_in_cycle is the time elapsed since the current treatment cycle
    began; the external fluid input is dose * exp(-(5 - t_in_cycle)/5).
    """
    params = params or CvsParams()
    y = state.as_array()
    _validate_finite(y, "state")
    if dose < 0:
        raise ValueError("dose must be nonnegative")
    return CvsState.from_array(_cvs_rhs(y, dose, t_in_cycle, params))


def _cvs_rhs(y: np.ndarray, dose: float, t_in_cycle: float, p: CvsParams) -> np.ndarray:
    sv, pa, pv, s = y
    r_tpr = s * (p.r_tpr_max - p.r_tpr_min) + p.r_tpr_min + p.r_tpr_mod
    f_hr = s * (p.f_hr_max - p.f_hr_min) + p.f_hr_min
    i_ext = dose * np.exp(-(5.0 - t_in_cycle) / 5.0)
    d_sv = i_ext
    d_pa = ((pa - pv) / r_tpr - sv * f_hr) / p.ca
    d_pv = (-p.ca * d_pa + i_ext) / p.cv
    d_s = (1.0 - expit(p.k_width * (pa - p.p_aset)) - s) / p.tau_baro
    return np.array([d_sv, d_pa, d_pv, d_s])


def covid_derivative(state: CovidState, dose_input: float,
                     params: CovidParams | None = None) -> CovidState:
    """Time derivative of the COVID-19 state under drug input C(t)."""
    params = params or CovidParams()
    y = state.as_array()
    _validate_finite(y, "state")
    if np.any(y < 0):
        raise ValueError("COVID state components must be nonnegative")
    if dose_input < 0:
        raise ValueError("dose input must be nonnegative")
    return CovidState.from_array(_covid_rhs(y, dose_input, params))


def _covid_rhs(y: np.ndarray, c: float, p: CovidParams) -> np.ndarray:
    # Runge-Kutta stage states can dip below zero mid-step; the Hill term
    # needs z2 >= 0, so stage evaluations see the clamped state.
    z1, z2, z3, z4 = np.maximum(y, 0.0)
    drug = z4 if p.drug_coupling == "z4-substitution" else z3
    hill = p.k_ep * z2 ** p.h_p / (p.k_cp ** p.h_p + z2 ** p.h_p)
    d_z1 = p.k_dp * z1 - p.k_di * z1 * drug - p.k_dr * z1 * z2
    d_z2 = (p.k_id * z1 - p.k_io * z2 + p.k_if * z1 * z2 + hill
            - p.k_d * drug * z2)
    d_z3 = p.k_im * z2
    d_z4 = p.k_kel * c - p.k_kel * z4
    return np.array([d_z1, d_z2, d_z3, d_z4])


def rk4_step(state: np.ndarray, inputs, dt: float, derivative_fn) -> np.ndarray:
    """Classical 4-stage Runge-Kutta update.

    derivative_fn(state, inputs, stage_dt) must return the derivative at
    the stage state, where stage_dt is the stage's offset from the start
    of the step (0, dt/2 or dt). Raises SimulationDivergence if any
    intermediate goes non-finite.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    k1 = derivative_fn(state, inputs, 0.0)
    k2 = derivative_fn(state + 0.5 * dt * k1, inputs, 0.5 * dt)
    k3 = derivative_fn(state + 0.5 * dt * k2, inputs, 0.5 * dt)
    k4 = derivative_fn(state + dt * k3, inputs, dt)
    nxt = state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(nxt)):
        raise SimulationDivergence(float(inputs[1]) if isinstance(inputs, tuple) else 0.0)
    return nxt


class System:
    """Common integration driver over a piecewise-constant dose schedule."""

    name: str
    outcome_index: int
    state_dim = 4

    def rhs(self, y: np.ndarray, dose: float, t: float, cycle_start: float) -> np.ndarray:
        raise NotImplementedError

    def post_step(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def covariate_indices(self):
        return [i for i in range(self.state_dim) if i != self.outcome_index]

    def step(self, y: np.ndarray, dose: float, t: float, cycle_start: float,
             dt: float) -> np.ndarray:
        # Dose and the cycle clock are frozen at the step's left endpoint,
        # keeping the integrand smooth inside the step.
        def f(state, inputs, stage_dt):
            d, t0, c0 = inputs
            if not np.all(np.isfinite(state)):
                raise SimulationDivergence(t0 + stage_dt)
            return self.rhs(state, d, t0 + stage_dt, c0)

        nxt = rk4_step(y, (dose, t, cycle_start), dt, f)
        return self.post_step(nxt)

    def integrate(self, y0: np.ndarray, step_doses: np.ndarray, grid: TimeGrid,
                  t_offset: float = 0.0) -> np.ndarray:
        """Integrate len(step_doses) steps from y0; returns all visited states."""
        y = np.array(y0, dtype=np.float64, copy=True)
        out = np.empty((len(step_doses) + 1, self.state_dim))
        out[0] = y
        for i, dose in enumerate(step_doses):
            t = t_offset + i * grid.dt
            y = self.step(y, max(float(dose), 0.0), t, grid.cycle_start(t), grid.dt)
            out[i + 1] = y
        return out


class CvsSystem(System):
    name = "cvs"
    outcome_index = 2  # venous pressure P_v

    def __init__(self, params: CvsParams | None = None):
        self.params = params or CvsParams()

    def rhs(self, y, dose, t, cycle_start):
        return _cvs_rhs(y, dose, t - cycle_start, self.params)

    def post_step(self, y):
        y[3] = min(max(y[3], 0.0), 1.0)  # baroreflex tone lives in [0, 1]
        return y


class CovidSystem(System):
    name = "covid"
    outcome_index = 0  # disease progression Z_1

    def __init__(self, params: CovidParams | None = None):
        self.params = params or CovidParams()

    def rhs(self, y, dose, t, cycle_start):
        return _covid_rhs(y, dose, self.params)

    def post_step(self, y):
        return np.maximum(y, 0.0)  # states are physical quantities


def make_system(name: str, params=None) -> System:
    if name == "cvs":
        return CvsSystem(params)
    if name == "covid":
        return CovidSystem(params)
    raise ValueError(f"unknown system {name!r}")


@dataclass
class SimResult:
    """Full simulated trajectory on the grid, split into model channels."""
    times: np.ndarray        # (n_points,)
    states: np.ndarray       # (n_points, 4) hidden ground truth
    outcomes: np.ndarray     # (n_points, 1)
    treatments: np.ndarray   # (n_points, 1) dose applied on [t_i, t_{i+1})
    covariates: np.ndarray   # (n_points, 3)


def expand_dose_schedule(cycle_doses, horizon_doses, grid: TimeGrid) -> np.ndarray:
    """Per-step doses: cycle doses tile the observed window, then per-step horizon doses."""
    cycle_doses = np.asarray(cycle_doses, dtype=np.float64)
    horizon_doses = np.asarray(horizon_doses, dtype=np.float64)
    if cycle_doses.shape != (grid.n_cycles,):
        raise ValueError(f"expected {grid.n_cycles} cycle doses, got {cycle_doses.shape}")
    if horizon_doses.shape != (grid.n_horizon,):
        raise ValueError(f"expected {grid.n_horizon} horizon doses, got {horizon_doses.shape}")
    return np.concatenate([np.repeat(cycle_doses, grid.cycle_steps), horizon_doses])


def simulate_trajectory(system: System, initial: np.ndarray, cycle_doses,
                        horizon_doses, grid: TimeGrid | None = None) -> SimResult:
    """Simulate one patient under per-cycle observed doses plus per-step horizon doses."""
    grid = grid or TimeGrid()
    step_doses = expand_dose_schedule(cycle_doses, horizon_doses, grid)
    states = system.integrate(np.asarray(initial, dtype=np.float64), step_doses, grid)
    treatments = np.append(step_doses, step_doses[-1])  # hold last dose at the final point
    cov_idx = system.covariate_indices()
    return SimResult(
        times=grid.times(),
        states=states,
        outcomes=states[:, [system.outcome_index]],
        treatments=treatments[:, None],
        covariates=states[:, cov_idx],
    )


def resimulate_horizon(system: System, state_at_t: np.ndarray, horizon_doses,
                       grid: TimeGrid | None = None) -> np.ndarray:
    """Ground-truth counterfactual outcomes over the horizon under new doses.

    Starts from the stored hidden state at the prediction time t and
    applies the per-step doses (clamped at 0: negative selected doses
    cannot be administered). Returns the tau outcome values at
    t+1 .. t+tau.
    """
    grid = grid or TimeGrid()
    horizon_doses = np.asarray(horizon_doses, dtype=np.float64)
    if horizon_doses.shape != (grid.n_horizon,):
        raise ValueError(f"expected {grid.n_horizon} horizon doses, got {horizon_doses.shape}")
    t0 = (grid.n_obs - 1) * grid.dt
    states = system.integrate(np.asarray(state_at_t, dtype=np.float64),
                              np.maximum(horizon_doses, 0.0), grid, t_offset=t0)
    return states[1:, system.outcome_index]
