"""Plug-in transient-boost loop around the base-controlled drive.

Internal-model wiring: the measured closed-loop state minus the model's
one-step prediction reconstructs the additive disturbance, which both gates a
rectangular activation window (held past the fault until the next grid-beta
zero crossing) and feeds the factorized control law

    u = (stable recurrent operator) * (bounded MLP)      [elementwise in R^2]

whose output is injected as an offset on the modulation vector before
saturation, so the base controller's steady-state tracking is untouched.
"""

from __future__ import annotations

from typing import NamedTuple, Tuple

import torch

from .config import RpbConfig
from .controller import saturate_modulation
from .operators import M2Realized, MInfParams, m2_step, minf_forward
from .plant import Disturbances, PlantParams, PlantState

Tensor = torch.Tensor

P_DIM = 10   # 8 state slots + 2 grid-current disturbance slots


class WindowState(NamedTuple):
    """Gate state: sigma (0/1 float), hold flag, last nonzero sign of v_g_beta."""

    sigma: Tensor
    in_hold: Tensor
    last_beta_sign: Tensor

    @classmethod
    def initial(cls, batch_shape: Tuple[int, ...] = ()) -> "WindowState":
        return cls(
            sigma=torch.zeros(batch_shape, dtype=torch.float64),
            in_hold=torch.zeros(batch_shape, dtype=torch.bool),
            last_beta_sign=torch.zeros(batch_shape, dtype=torch.float64),
        )


class RpbInputs(NamedTuple):
    s_sigma: Tensor    # (..., 5) windowed per-unit [v_dc, i_g, v_g]
    p_hat: Tensor      # (..., 10) per-unit reconstructed disturbance
    s_inf: Tensor      # (..., 16) per-unit [d, p_hat, v_dc, i_g]


def sigma_threshold(params: PlantParams, cfg: RpbConfig) -> float:
    """Window threshold: a grid deviation of sigma_eps_pu (default 1%) makes
    the disturbance slice h L^-1 dv_g exceed epsilon."""
    l_inv_norm = float(torch.linalg.matrix_norm(params.L_inv, 2))
    return cfg.sigma_eps_pu * params.h * l_inv_norm * params.V_base


def reconstruct_disturbance(eta: Tensor, eta_pred: Tensor, initial: bool = False) -> Tensor:
    """Map the measured-minus-predicted state residual into the disturbance
    layout: at t=0 the residual fills the first 8 slots (initial condition);
    for t>=1 the grid-current residual moves to the last 2 slots and the
    remaining components stay in place (zero under a matched model)."""
    r = eta - eta_pred
    zeros2 = torch.zeros_like(r[..., :2])
    if initial:
        return torch.cat([r, zeros2], dim=-1)
    return torch.cat([r[..., :2], zeros2, r[..., 4:8], r[..., 2:4]], dim=-1)


def update_window(ws: WindowState, p_t: Tensor, v_g_beta: Tensor, eps: float) -> WindowState:
    """Advance the gate one step.

    sigma_t = 1 iff ||p_t|| > eps (strict) or a hold is pending; the hold
    releases on the first strict sign change of v_g_beta after the norm
    condition clears (a zero sample neither releases nor clears the memory).
    """
    norm_active = torch.linalg.vector_norm(p_t, dim=-1) > eps
    holding = ws.in_hold | norm_active
    sigma = holding.to(p_t.dtype)
    sign = torch.sign(v_g_beta)
    sign_change = ws.last_beta_sign * sign < 0
    release = holding & ~norm_active & sign_change
    return WindowState(
        sigma=sigma,
        in_hold=holding & ~release,
        last_beta_sign=torch.where(sign != 0, sign, ws.last_beta_sign),
    )


def assemble_inputs(
    x: PlantState,
    d: Disturbances,
    p_hat: Tensor,
    sigma: Tensor,
    params: PlantParams,
) -> RpbInputs:
    """Build the per-unit operator inputs.

    ``d`` carries the nominal disturbances; the measured grid voltage is
    recovered from the disturbance slice as v_g = v_nom + (L_g/h) p_hat[8:10],
    exact under the matched internal model.
    """
    v_meas = d.v_g + p_hat[..., 8:10] @ (params.L_g / params.h).T
    v_dc_pu = x.v_dc / params.Vdc_base
    i_g_pu = x.i_g / params.I_base
    s = torch.cat([v_dc_pu.unsqueeze(-1), i_g_pu, v_meas / params.V_base], dim=-1)
    s_sigma = s * sigma.unsqueeze(-1)

    eta_bases = torch.tensor(
        [params.w_base, params.Vdc_base, params.I_base, params.I_base,
         params.tau_base, params.I_base, params.V_base, params.V_base,
         params.I_base, params.I_base],
        dtype=p_hat.dtype,
    )
    p_hat_pu = p_hat / eta_bases
    d_pu = torch.cat(
        [(d.tau_l / params.tau_base).unsqueeze(-1), d.v_g / params.V_base], dim=-1
    )
    s_inf = torch.cat([d_pu, p_hat_pu, v_dc_pu.unsqueeze(-1), i_g_pu], dim=-1)
    return RpbInputs(s_sigma=s_sigma, p_hat=p_hat_pu, s_inf=s_inf)


def rpb_control(
    inputs: RpbInputs,
    m2_state: Tensor,
    m2real: M2Realized,
    minf: MInfParams,
    bound: float = 1.0,
    validate: bool = False,
) -> Tuple[Tensor, Tensor]:
    """Factorized control law: elementwise product of the stable operator's
    output (fed the windowed signals + p_hat) and the bounded MLP's output."""
    m2_in = torch.cat([inputs.s_sigma, inputs.p_hat], dim=-1)
    y2, m2_state_next = m2_step(m2real, m2_state, m2_in, validate=validate)
    y_inf = minf_forward(minf, inputs.s_inf, bound=bound, validate=validate)
    return y2 * y_inf, m2_state_next


def interconnect(m_g_b: Tensor, u: Tensor, limit: float = 0.7071067811865476) -> Tensor:
    """Offset the modulation vector before the shared saturation."""
    return saturate_modulation(m_g_b + u, limit)
