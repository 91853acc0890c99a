"""Grid-fault scenarios, disturbance-sequence construction and datasets.

Faults are single-phase (phase C) voltage drops of depth delta over a time
window, evaluated verbatim in abc coordinates and Clarke-transformed. The
quoted grid amplitude is the power-invariant alpha-beta norm (equivalently the
line-to-line RMS voltage), so the abc phase amplitude is sqrt(2/3) times it.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
import yaml

from . import engine
from .config import Config
from .controller import CtrlGains, References
from .plant import PlantParams, clarke_abc_to_alphabeta

Tensor = torch.Tensor

_TWO_THIRDS_PI = 2.0 * math.pi / 3.0


@dataclass(frozen=True)
class FaultEvent:
    delta: float        # drop fraction in [0, 1]
    t_start: float      # [s]
    t_end: float        # [s]

    def __post_init__(self):
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError("delta must lie in [0, 1]")
        if not 0.0 < self.t_start < self.t_end:
            raise ValueError("need 0 < t_start < t_end")


@dataclass(frozen=True)
class FaultScenario:
    """One rollout's worth of grid conditions and operating point."""

    events: Tuple[FaultEvent, ...]
    amplitude: float            # grid voltage alpha-beta norm [V]
    f: float                    # grid frequency [Hz]
    horizon: int                # steps
    h: float                    # step time [s]
    tau_l: float                # constant load torque [N m]
    eta0: Optional[Tuple[float, ...]] = None   # None -> nominal equilibrium
    label: str = ""

    def __post_init__(self):
        t_end_max = self.horizon * self.h
        last = 0.0
        for ev in sorted(self.events, key=lambda e: e.t_start):
            if ev.t_start < last:
                raise ValueError("fault events must not overlap")
            if ev.t_end > t_end_max:
                raise ValueError("fault event exceeds the horizon")
            if ev.t_start < self.h:
                raise ValueError("faults must start after t = 0")
            last = ev.t_end

    @property
    def delta(self) -> float:
        """Depth of the first (or only) fault."""
        return self.events[0].delta if self.events else 0.0


def single_fault(delta: float, t_start: float, t_end: float, *, horizon: int,
                 h: float, tau_l: float, amplitude: float = 3150.0,
                 f: float = 50.0, eta0=None, label: str = "") -> FaultScenario:
    return FaultScenario(events=(FaultEvent(delta, t_start, t_end),),
                         amplitude=amplitude, f=f, horizon=horizon, h=h,
                         tau_l=tau_l, eta0=eta0, label=label)


def _phase_c_scale(scenario: FaultScenario, t_steps: np.ndarray) -> np.ndarray:
    scale = np.ones_like(t_steps, dtype=np.float64)
    for ev in scenario.events:
        k0 = int(round(ev.t_start / scenario.h))
        k1 = int(round(ev.t_end / scenario.h))
        scale = np.where((t_steps >= k0) & (t_steps <= k1), 1.0 - ev.delta, scale)
    return scale


def grid_voltage(scenario: FaultScenario, t, *, faulted: bool = True) -> Tensor:
    """Grid voltage in alpha-beta at step index t (int or array) [V].

    abc components evaluated verbatim: phases A/B at full amplitude, phase C
    scaled by (1 - delta) inside each fault window (snapped to step
    boundaries). ``faulted=False`` gives the nominal (delta = 0) voltage.
    """
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.int64))
    v_ph = scenario.amplitude * math.sqrt(2.0 / 3.0)
    phase = 2.0 * math.pi * scenario.f * (t_arr * scenario.h)
    va = v_ph * np.cos(phase)
    vb = v_ph * np.cos(phase - _TWO_THIRDS_PI)
    vc = v_ph * np.cos(phase + _TWO_THIRDS_PI)
    if faulted:
        vc = vc * _phase_c_scale(scenario, t_arr)
    abc = torch.from_numpy(np.stack([va, vb, vc], axis=-1))
    out = clarke_abc_to_alphabeta(abc)
    if np.isscalar(t) or (isinstance(t, np.ndarray) and t.ndim == 0):
        return out[0]
    return out


def resolve_eta0(scenario: FaultScenario, params: PlantParams, gains: CtrlGains,
                 refs: References) -> Tensor:
    if scenario.eta0 is not None:
        return torch.tensor(scenario.eta0, dtype=torch.float64)
    return equilibrium(params, gains, refs, scenario.tau_l, scenario.f,
                       scenario.amplitude)


def build_disturbances(
    scenario: FaultScenario,
    params: PlantParams,
    gains: CtrlGains,
    refs: References,
) -> Tuple[Tensor, Tensor]:
    """Disturbance sequences for one scenario.

    Returns (p, d): p is (horizon+1, 10) with p_0 = [eta_0; 0] and
    p_t = [0; h L^-1 (v_g - v_nom)_t] for t >= 1; d is (horizon+1, 3) carrying
    [tau_l, v_nom].
    """
    T = scenario.horizon
    t = np.arange(T + 1)
    v_meas = grid_voltage(scenario, t)
    v_nom = grid_voltage(scenario, t, faulted=False)
    dv = v_meas - v_nom

    p = torch.zeros(T + 1, 10, dtype=torch.float64)
    p[:, 8:10] = dv @ params.hL_inv.T
    p[0, 8:10] = 0.0
    p[0, :8] = resolve_eta0(scenario, params, gains, refs)

    d = torch.zeros(T + 1, 3, dtype=torch.float64)
    d[:, 0] = scenario.tau_l
    d[:, 1:] = v_nom
    return p, d


def rollout_inputs(
    scenarios: Sequence[FaultScenario],
    params: PlantParams,
    gains: CtrlGains,
    refs: References,
) -> dict:
    """Batch scenarios (same horizon and nominal grid) into rollout kwargs."""
    if not scenarios:
        raise ValueError("need at least one scenario")
    T = scenarios[0].horizon
    for s in scenarios:
        if (s.horizon, s.f, s.amplitude, s.h) != (T, scenarios[0].f,
                                                  scenarios[0].amplitude,
                                                  scenarios[0].h):
            raise ValueError("batched scenarios must share horizon and nominal grid")
    p_list, eta0_list = [], []
    for s in scenarios:
        p, _ = build_disturbances(s, params, gains, refs)
        p_list.append(p)
        eta0_list.append(p[0, :8])
    v_g_nom = grid_voltage(scenarios[0], np.arange(T + 1), faulted=False)
    return dict(
        eta0=torch.stack(eta0_list),
        p=torch.stack(p_list),
        v_g_nom=v_g_nom,
        tau_l=torch.tensor([s.tau_l for s in scenarios], dtype=torch.float64),
        horizon=T,
    )


# ---------------------------------------------------------------------------
# nominal equilibrium (periodic steady state sampled at phase zero)

_EQ_CACHE: dict = {}


def equilibrium(params: PlantParams, gains: CtrlGains, refs: References,
                tau_l: float, f: float, amplitude: float) -> Tensor:
    """Nominal-condition steady state at grid phase zero, found as the fixed
    point of the one-grid-period closed-loop map (base controller, u = 0)."""
    key = (
        params.M, params.D, params.C_dc, params.G_dc, params.h,
        tuple(params.L_g.reshape(-1).tolist()), tuple(params.R_g.reshape(-1).tolist()),
        gains.kp_w, gains.ki_w, gains.tau_max, gains.kp_v, gains.ki_v,
        gains.i_ref_max, gains.kp_i, gains.ki_i, gains.ff_grid_voltage,
        gains.ff_decoupling, gains.m_max,
        refs.w_ref, refs.v_dc_ref, refs.Q_ref, tau_l, f, amplitude,
    )
    if key in _EQ_CACHE:
        return _EQ_CACHE[key].clone()

    from scipy.optimize import root

    N = int(round(1.0 / (f * params.h)))
    ref_scenario = FaultScenario(events=(), amplitude=amplitude, f=f,
                                 horizon=N, h=params.h, tau_l=tau_l)
    v_g_nom = grid_voltage(ref_scenario, np.arange(N + 1), faulted=False)
    tau_l_t = torch.tensor([tau_l], dtype=torch.float64)
    p_zero = torch.zeros(1, N + 2, 10, dtype=torch.float64)

    from .config import RpbConfig

    rpb_cfg = RpbConfig()

    def period_map(eta_np: np.ndarray) -> np.ndarray:
        eta = torch.from_numpy(eta_np).reshape(1, 8)
        with torch.no_grad():
            traj = engine.rollout(
                eta0=eta, p=p_zero, v_g_nom=v_g_nom, tau_l=tau_l_t,
                params=params, gains=gains, refs=refs, rpb_cfg=rpb_cfg,
                theta=None, horizon=N, check_every=N + 1,
            )
        return traj.eta()[N, 0].numpy() - eta_np

    # analytic guess: aligned current covering load power plus losses
    V = amplitude
    tau_m = tau_l + params.D * refs.w_ref
    r = float(params.R_g[0, 0])
    p_need = tau_m * refs.w_ref + params.G_dc * refs.v_dc_ref ** 2
    disc = V * V - 4.0 * r * p_need
    i_d = (V - math.sqrt(max(disc, 0.0))) / (2.0 * r) if r > 0 else p_need / V
    i_q = -refs.Q_ref / V
    omega = 2.0 * math.pi * f
    l = float(params.L_g[0, 0])
    guess = np.array([
        refs.w_ref, refs.v_dc_ref, i_d, i_q,
        tau_m, i_d, -r * i_d, -omega * l * i_q if gains.ff_decoupling else 0.0,
    ])
    if not gains.ff_grid_voltage:
        guess[6] += V
    if not gains.ff_decoupling:
        guess[7] += -omega * l * i_d

    sol = root(period_map, guess, method="hybr", tol=1e-13)
    resid = float(np.linalg.norm(period_map(sol.x)))
    if resid > 1e-6:
        raise RuntimeError(
            f"equilibrium solve did not converge (residual {resid:.3e}); "
            "check plant/gain configuration"
        )
    eta = torch.from_numpy(sol.x).clone()
    _EQ_CACHE[key] = eta.clone()
    return eta


def random_initial_conditions(n: int, seed: int, params: PlantParams,
                              gains: CtrlGains, refs: References, tau_l: float,
                              f: float, amplitude: float,
                              scale_pu: float = 0.02) -> Tensor:
    """Admissible initial conditions: per-unit perturbations around the
    nominal equilibrium."""
    eta_eq = equilibrium(params, gains, refs, tau_l, f, amplitude)
    bases = torch.tensor([params.w_base, params.Vdc_base, params.I_base,
                          params.I_base, params.tau_base, params.I_base,
                          params.V_base, params.V_base], dtype=torch.float64)
    gen = torch.Generator().manual_seed(seed)
    noise = (torch.rand(n, 8, generator=gen, dtype=torch.float64) * 2.0 - 1.0)
    return eta_eq.unsqueeze(0) + scale_pu * noise * bases


# ---------------------------------------------------------------------------
# datasets

@dataclass
class Dataset:
    scenarios: list[FaultScenario]
    seed: int
    meta: dict = field(default_factory=dict)

    def content_hash(self) -> str:
        blob = json.dumps(
            [
                {
                    "events": [(e.delta, e.t_start, e.t_end) for e in s.events],
                    "amplitude": s.amplitude, "f": s.f, "horizon": s.horizon,
                    "h": s.h, "tau_l": s.tau_l, "eta0": s.eta0,
                }
                for s in self.scenarios
            ]
            + [self.seed],
            sort_keys=True,
        ).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def split_holdout(self, fraction: float) -> Tuple["Dataset", "Dataset"]:
        """Deterministic train/held-out partition derived from the seed."""
        n = len(self.scenarios)
        k = int(round(fraction * n))
        order = np.random.default_rng(self.seed ^ 0x5EED).permutation(n)
        held = [self.scenarios[i] for i in sorted(order[:k])]
        train = [self.scenarios[i] for i in sorted(order[k:])]
        return (Dataset(train, self.seed, {**self.meta, "split": "train"}),
                Dataset(held, self.seed, {**self.meta, "split": "holdout"}))


def sample_dataset(seed: int, n: int, cfg: Config,
                   fault_len_mean: Optional[float] = None,
                   randomize_eta0: Optional[bool] = None) -> Dataset:
    """Training dataset: phase-C drops with depth ~ U(0,1), length ~
    U(mean-hw, mean+hw), end times jittered uniformly over one grid period."""
    if n < 1:
        raise ValueError("n must be >= 1")
    tr = cfg.train
    mean = fault_len_mean if fault_len_mean is not None else tr.fault_len_mean_s
    hw = tr.fault_len_halfwidth_s
    rand_eta0 = tr.randomize_eta0 if randomize_eta0 is None else randomize_eta0
    h = cfg.plant.h
    horizon = int(round(tr.horizon_s / h))
    tau_l = 0.95 * cfg.gains.tau_max
    period = 1.0 / cfg.gains.f_grid

    rng = np.random.default_rng(seed)
    scenarios = []
    eta0_noise = None
    if rand_eta0:
        eta0_noise = random_initial_conditions(
            n, seed ^ 0xE7A0, PlantParams.from_config(cfg.plant),
            CtrlGains.from_config(cfg.gains, cfg.plant),
            References.from_config(cfg.refs), tau_l, cfg.gains.f_grid,
            cfg.plant.V_base)
    for i in range(n):
        delta = float(rng.uniform(0.0, 1.0))
        length = float(rng.uniform(mean - hw, mean + hw))
        jitter = float(rng.uniform(0.0, period))
        t_start = tr.fault_start_s
        t_end = min(t_start + length + jitter, (horizon - 1) * h)
        eta0 = tuple(eta0_noise[i].tolist()) if eta0_noise is not None else None
        scenarios.append(single_fault(
            delta, t_start, t_end, horizon=horizon, h=h, tau_l=tau_l,
            amplitude=cfg.plant.V_base, f=cfg.gains.f_grid, eta0=eta0,
            label=f"train-{i:04d}",
        ))
    return Dataset(scenarios, seed, {"n": n, "fault_len_mean": mean})


def test_scenario_paper(cfg: Config) -> FaultScenario:
    """The two-fault evaluation scenario: a full phase drop of about 600 ms
    followed by a 60% drop of about 400 ms, ending at different points of the
    grid period, over a 2 s horizon."""
    h = cfg.plant.h
    return FaultScenario(
        events=(
            FaultEvent(delta=1.0, t_start=0.100, t_end=0.703),
            FaultEvent(delta=0.6, t_start=1.000, t_end=1.4105),
        ),
        amplitude=cfg.plant.V_base,
        f=cfg.gains.f_grid,
        horizon=int(round(2.0 / h)),
        h=h,
        tau_l=0.95 * cfg.gains.tau_max,
        label="paper-test",
    )


# ---------------------------------------------------------------------------
# scenario / dataset files

def scenario_to_dict(s: FaultScenario) -> dict:
    return {
        "faults": [{"delta": e.delta, "t_start": e.t_start, "t_end": e.t_end}
                   for e in s.events],
        "amplitude": s.amplitude, "f": s.f, "horizon": s.horizon, "h": s.h,
        "tau_l": s.tau_l,
        "eta0": list(s.eta0) if s.eta0 is not None else None,
        "label": s.label,
    }


def scenario_from_dict(data: dict) -> FaultScenario:
    if "faults" in data:
        events = tuple(FaultEvent(fd["delta"], fd["t_start"], fd["t_end"])
                       for fd in data["faults"])
    else:
        events = (FaultEvent(data["delta"], data["t_start"], data["t_end"]),)
    eta0 = data.get("eta0")
    return FaultScenario(
        events=events, amplitude=data["amplitude"], f=data["f"],
        horizon=data["horizon"], h=data["h"], tau_l=data["tau_l"],
        eta0=tuple(eta0) if eta0 is not None else None,
        label=data.get("label", ""),
    )


def save_scenario(s: FaultScenario, path: str) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(scenario_to_dict(s), fh, sort_keys=False)


def load_scenario(path: str) -> FaultScenario:
    with open(path) as fh:
        return scenario_from_dict(yaml.safe_load(fh))


def save_dataset(ds: Dataset, path: str) -> None:
    payload = {
        "seed": ds.seed, "meta": ds.meta, "content_hash": ds.content_hash(),
        "scenarios": [scenario_to_dict(s) for s in ds.scenarios],
    }
    with open(path, "w") as fh:
        yaml.safe_dump(payload, fh, sort_keys=False)


def load_dataset(path: str) -> Dataset:
    with open(path) as fh:
        payload = yaml.safe_load(fh)
    ds = Dataset([scenario_from_dict(sd) for sd in payload["scenarios"]],
                 payload["seed"], payload.get("meta", {}))
    stored = payload.get("content_hash")
    if stored and stored != ds.content_hash():
        raise ValueError(f"dataset file {path!r} failed its content hash check")
    return ds
