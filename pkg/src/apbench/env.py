"""Glucoregulatory simulation environment.

The simulator is a minimal 7-compartment model: plasma glucose, remote
insulin action, a two-compartment subcutaneous insulin depot, plasma
insulin, and a two-compartment gut. Per-patient parameters are scaled
from the registry (insulin sensitivity derived from the correction
factor, so sensitivity falls as total daily insulin rises). It is not a
full-fidelity physiological model; it reproduces the qualitative
dynamics (meal excursions, insulin absorption delay, hypoglycemia from
overdose, steady state at the basal rate) behind the same interface.

State vector layout: [G, X, Isc1, Isc2, Ip, Q1, Q2]
  G     plasma glucose, mg/dL
  X     remote insulin action, 1/min
  Isc1  subcutaneous insulin depot 1, units
  Isc2  subcutaneous insulin depot 2, units
  Ip    plasma insulin, mU/L
  Q1    gut carbohydrate compartment 1, grams
  Q2    gut carbohydrate compartment 2, grams

The environment observes a clamped integer CGM in [40, 400] mg/dL and
maintains a 48-step (4-hour) rolling window of CGM and insulin as the
agent-facing state. Episodes terminate with a large penalty when true
glucose leaves [10, 1000] mg/dL.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .meals import MealSlotSpec, generate_schedule
from .patients import PatientProfile
from .risk import (BG_TERMINATE_HIGH, BG_TERMINATE_LOW, RewardConfig, reward)

STEPS_PER_DAY = 288
STEP_MINUTES = 5.0
WINDOW_STEPS = 48
COOLDOWN_STEPS = 36  # 3 hours

CGM_MIN = 40
CGM_MAX = 400

STATE_DIM = 7
IDX_G, IDX_X, IDX_ISC1, IDX_ISC2, IDX_IP, IDX_Q1, IDX_Q2 = range(7)


@dataclass(frozen=True)
class ModelParams:
    weight: float        # kg
    basal_rate: float    # U/min
    s_i: float           # remote-action gain per (mU/L), 1/min
    egp: float           # endogenous glucose production, mg/dL/min
    k_gg: float = 0.002  # insulin-independent clearance, 1/min
    p2: float = 0.02     # remote-action turnover, 1/min
    ke: float = 0.15     # plasma insulin elimination, 1/min
    v_i: float = 0.12    # insulin distribution volume, L/kg
    tau_sc: float = 20.0  # subcutaneous absorption time constant, min
    tau_g: float = 30.0   # gut absorption time constant, min
    f_bio: float = 0.9    # carbohydrate bioavailability
    v_g: float = 1.6      # glucose distribution volume, dL/kg

    @property
    def plasma_gain(self) -> float:
        """mU/L of plasma insulin per unit absorbed per minute."""
        return 1000.0 / (self.v_i * self.weight)

    @property
    def carb_gain(self) -> float:
        """mg/dL per gram of glucose appearing in plasma."""
        return 1000.0 / (self.v_g * self.weight)


def params_for_patient(profile: PatientProfile,
                       equilibrium_bg: float = 140.0) -> ModelParams:
    """Scale model parameters so the patient sits at `equilibrium_bg`
    under their basal rate and one unit drops glucose by roughly CF."""
    weight = profile.weight
    basal_rate = profile.bas / STEP_MINUTES
    ke, v_i = 0.15, 0.12
    # A 1-unit bolus multiplies glucose by exp(-s_i * integral(Ip)); match
    # that multiplier to a CF-sized drop from the equilibrium level.
    drop_ratio = max(0.1, (equilibrium_bg - profile.cf) / equilibrium_bg)
    s_i = -math.log(drop_ratio) * ke * v_i * weight / 1000.0
    ip_b = basal_rate * 1000.0 / (ke * v_i * weight)
    k_gg = 0.002
    egp = equilibrium_bg * (k_gg + s_i * ip_b)
    return ModelParams(weight=weight, basal_rate=basal_rate, s_i=s_i,
                       egp=egp, k_gg=k_gg, ke=ke, v_i=v_i)


def equilibrium_state(params: ModelParams) -> np.ndarray:
    """Steady state under the basal infusion rate with an empty gut."""
    u_b = params.basal_rate
    ip_b = u_b * params.plasma_gain / params.ke
    x_b = params.s_i * ip_b
    g_eq = params.egp / (params.k_gg + x_b)
    state = np.zeros(STATE_DIM)
    state[IDX_G] = g_eq
    state[IDX_X] = x_b
    state[IDX_ISC1] = u_b * params.tau_sc
    state[IDX_ISC2] = u_b * params.tau_sc
    state[IDX_IP] = ip_b
    return state


def derivatives(state: np.ndarray, u: float, d: float,
                params: ModelParams) -> np.ndarray:
    """Time derivatives; u is insulin infusion (U/min), d carb intake (g/min)."""
    g, x, isc1, isc2, ip, q1, q2 = state
    ra = params.f_bio * (q2 / params.tau_g) * params.carb_gain
    out = np.empty(STATE_DIM)
    out[IDX_G] = params.egp - params.k_gg * g - x * g + ra
    out[IDX_X] = -params.p2 * (x - params.s_i * ip)
    out[IDX_ISC1] = u - isc1 / params.tau_sc
    out[IDX_ISC2] = (isc1 - isc2) / params.tau_sc
    out[IDX_IP] = -params.ke * ip + (isc2 / params.tau_sc) * params.plasma_gain
    out[IDX_Q1] = d - q1 / params.tau_g
    out[IDX_Q2] = (q1 - q2) / params.tau_g
    return out


def _deriv_scalar(s, u, d, p: ModelParams):
    # Scalar twin of derivatives(); this is the hot loop.
    g, x, isc1, isc2, ip, q1, q2 = s
    ra = p.f_bio * (q2 / p.tau_g) * p.carb_gain
    return (p.egp - p.k_gg * g - x * g + ra,
            -p.p2 * (x - p.s_i * ip),
            u - isc1 / p.tau_sc,
            (isc1 - isc2) / p.tau_sc,
            -p.ke * ip + (isc2 / p.tau_sc) * p.plasma_gain,
            d - q1 / p.tau_g,
            (q1 - q2) / p.tau_g)


def integrate_step(state: np.ndarray, u: float, d: float, params: ModelParams,
                   minutes: float = STEP_MINUTES,
                   substep_min: float = 1.0) -> np.ndarray:
    """RK4 over one control interval with constant inputs."""
    n = max(1, int(round(minutes / substep_min)))
    h = minutes / n
    s = tuple(float(v) for v in state)
    for _ in range(n):
        k1 = _deriv_scalar(s, u, d, params)
        k2 = _deriv_scalar(tuple(si + 0.5 * h * ki for si, ki in zip(s, k1)), u, d, params)
        k3 = _deriv_scalar(tuple(si + 0.5 * h * ki for si, ki in zip(s, k2)), u, d, params)
        k4 = _deriv_scalar(tuple(si + h * ki for si, ki in zip(s, k3)), u, d, params)
        s = tuple(max(0.0, si + (h / 6.0) * (a + 2 * b + 2 * c + e))
                  for si, a, b, c, e in zip(s, k1, k2, k3, k4))
    return np.array(s)


@dataclass(frozen=True)
class EnvConfig:
    horizon_days: int = 10
    sensor_noise: bool = True
    noise_std: float = 5.0       # mg/dL, stationary
    noise_autocorr: float = 0.7  # per 5-minute step
    substep_min: float = 1.0
    equilibrium_bg: float = 140.0
    reward_config: RewardConfig = field(default_factory=RewardConfig)

    @property
    def horizon_steps(self) -> int:
        return self.horizon_days * STEPS_PER_DAY


@dataclass
class AugmentedState:
    """Rolling observation window, oldest first. Channels beyond CGM and
    insulin (announced carbs, cooldown) are present only in MA mode."""
    cgm: np.ndarray
    insulin: np.ndarray
    carbs: np.ndarray | None = None
    cooldown: np.ndarray | None = None

    def as_array(self) -> np.ndarray:
        channels = [self.cgm, self.insulin]
        if self.carbs is not None:
            channels += [self.carbs, self.cooldown]
        return np.stack(channels, axis=-1)  # (48, C)

    @property
    def n_channels(self) -> int:
        return 2 if self.carbs is None else 4


@dataclass
class StepResult:
    observation: AugmentedState
    reward: float
    done: bool
    info: dict


class EnvError(RuntimeError):
    pass


class GlucoseEnv:
    """POMDP environment around the compartment model.

    One instance is single-threaded; create independent instances for
    parallel rollouts. reset(seed) derives separate meal and sensor-noise
    streams from the seed, so a (seed, config, action sequence) triple
    reproduces the trajectory exactly.
    """

    def __init__(self, profile: PatientProfile, slots: list[MealSlotSpec],
                 config: EnvConfig = EnvConfig()):
        self.profile = profile
        self.slots = slots
        self.config = config
        self.params = params_for_patient(profile, config.equilibrium_bg)
        self._state = None
        self._done = True

    # -- lifecycle ---------------------------------------------------------

    def reset(self, seed: int) -> AugmentedState:
        ss = np.random.SeedSequence(seed)
        meal_ss, noise_ss = ss.spawn(2)
        self._noise_rng = np.random.default_rng(noise_ss)
        schedule = generate_schedule(self.slots, self.config.horizon_days,
                                     np.random.default_rng(meal_ss))
        self._carbs = schedule.days.reshape(-1)
        self._state = equilibrium_state(self.params)
        self._t = 0
        self._done = False
        self._noise = 0.0
        self._last_meal_step = -10 ** 9
        # Pre-fill the 4-hour window by running the model under basal
        # insulin (no meals) so the initial state is not fabricated.
        cgm_hist, ins_hist = [], []
        for _ in range(WINDOW_STEPS):
            self._state = integrate_step(
                self._state, self.params.basal_rate, 0.0, self.params,
                substep_min=self.config.substep_min)
            cgm_hist.append(self._cgm_reading())
            ins_hist.append(self.profile.bas)
        self._obs = AugmentedState(cgm=np.array(cgm_hist, dtype=float),
                                   insulin=np.array(ins_hist, dtype=float))
        return self._obs

    # -- observation helpers -----------------------------------------------

    def _cgm_reading(self) -> int:
        bg = self._state[IDX_G]
        if self.config.sensor_noise:
            rho = self.config.noise_autocorr
            innov = self.config.noise_std * math.sqrt(1.0 - rho * rho)
            self._noise = rho * self._noise + innov * self._noise_rng.normal()
            bg = bg + self._noise
        return int(np.clip(round(bg), CGM_MIN, CGM_MAX))

    @property
    def true_bg(self) -> float:
        return float(self._state[IDX_G])

    @property
    def last_cgm(self) -> int:
        return int(self._obs.cgm[-1])

    def oracle_state(self) -> np.ndarray:
        """Full model state vector (oracle-mode policies train on this)."""
        if self._state is None:
            raise EnvError("reset() before querying the oracle state")
        return self._state.copy()

    def meal_announcement(self) -> tuple[float, int]:
        """Carbs arriving at the upcoming step and the correction-cooldown
        flag (1 iff no meal in the prior 3 hours)."""
        carbs = float(self._carbs[self._t]) if self._t < len(self._carbs) else 0.0
        cooldown = 1 if (self._t - self._last_meal_step) > COOLDOWN_STEPS else 0
        return carbs, cooldown

    # -- dynamics ------------------------------------------------------------

    def step(self, action: float) -> StepResult:
        if self._done:
            raise EnvError("step() called on a finished episode")
        if action < 0:
            raise EnvError(f"insulin action must be nonnegative, got {action}")
        carbs, cooldown = self.meal_announcement()
        if carbs > 0:
            self._last_meal_step = self._t
        u = action / STEP_MINUTES       # U/min over the control interval
        d = carbs / STEP_MINUTES        # g/min
        self._state = integrate_step(self._state, u, d, self.params,
                                     substep_min=self.config.substep_min)
        self._t += 1
        bg = self.true_bg
        terminated = bg < BG_TERMINATE_LOW or bg > BG_TERMINATE_HIGH
        horizon_hit = self._t >= self.config.horizon_steps
        self._done = terminated or horizon_hit
        r = reward(bg, terminated, self.config.reward_config)
        cgm = self._cgm_reading()
        self._obs = self._advance_window(self._obs, cgm, action, carbs, cooldown)
        return StepResult(
            observation=self._obs, reward=r, done=self._done,
            info={"true_bg": bg, "meal_carbs": carbs,
                  "terminated_dangerously": terminated, "cgm": cgm,
                  "insulin": action, "t": self._t},
        )

    def _advance_window(self, obs, cgm, insulin, carbs, cooldown):
        new = AugmentedState(
            cgm=np.append(obs.cgm[1:], float(cgm)),
            insulin=np.append(obs.insulin[1:], float(insulin)),
        )
        if obs.carbs is not None:
            new.carbs = np.append(obs.carbs[1:], float(carbs))
            new.cooldown = np.append(obs.cooldown[1:], float(cooldown))
        return new

    @property
    def done(self) -> bool:
        return self._done


class MealAnnounceEnv:
    """Wraps an env so meal boluses are delivered automatically on top of
    the policy's action, and the observation gains carb/cooldown channels."""

    def __init__(self, env: GlucoseEnv):
        if isinstance(env, MealAnnounceEnv):
            raise EnvError("environment is already meal-announcement wrapped")
        self.env = env
        self.profile = env.profile
        self.config = env.config

    def reset(self, seed: int) -> AugmentedState:
        obs = self.env.reset(seed)
        obs.carbs = np.zeros(WINDOW_STEPS)
        obs.cooldown = np.ones(WINDOW_STEPS)
        return obs

    def step(self, action: float) -> StepResult:
        carbs, cooldown = self.env.meal_announcement()
        bolus = 0.0
        if carbs > 0:
            p = self.profile
            bolus = carbs / p.cr + cooldown * (self.env.last_cgm - p.glucose_target) / p.cf
            bolus = max(0.0, bolus)
        return self.env.step(action + bolus)

    def oracle_state(self):
        return self.env.oracle_state()

    def meal_announcement(self):
        return self.env.meal_announcement()

    @property
    def true_bg(self):
        return self.env.true_bg

    @property
    def last_cgm(self):
        return self.env.last_cgm

    @property
    def done(self):
        return self.env.done


def ma_wrap(env: GlucoseEnv) -> MealAnnounceEnv:
    return MealAnnounceEnv(env)
