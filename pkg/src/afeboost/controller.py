"""Cascaded anti-windup PI control of the drive.

Structure: speed PI -> torque command; DC-voltage PI -> d-axis current
reference; reactive setpoint mapped algebraically to the q-axis reference;
2-D current PI with nominal-voltage feed-forward and omega-L decoupling ->
modulation vector (pre-saturation). The current-loop integrators live in the
synchronous frame spanned by the nominal grid voltage, so all three tracking
errors vanish asymptotically; the frame angle is recovered from the nominal
voltage vector itself (no PLL).

Contributes 4 integrator scalars, so plant state + controller state is an
8-dimensional closed loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Tuple

import torch

from .config import GainsConfig, PlantConfig, RefsConfig
from .plant import Disturbances, PlantState

Tensor = torch.Tensor


class CtrlState(NamedTuple):
    """PI integrators: speed [N m], DC voltage [A], current in dq [V] (dim 2)."""

    xi_w: Tensor
    xi_vdc: Tensor
    xi_i: Tensor


class References(NamedTuple):
    w_ref: float
    v_dc_ref: float
    Q_ref: float

    @classmethod
    def from_config(cls, cfg: RefsConfig) -> "References":
        return cls(cfg.w_ref, cfg.v_dc_ref, cfg.Q_ref)


@dataclass(frozen=True)
class CtrlGains:
    """Runtime gains; ``w_dec`` is the precomputed omega*L*J decoupling matrix."""

    kp_w: float
    ki_w: float
    tau_max: float
    kp_v: float
    ki_v: float
    i_ref_max: float
    kp_i: float
    ki_i: float
    aw_w: float
    aw_v: float
    aw_i: float
    ff_grid_voltage: bool
    ff_decoupling: bool
    m_max: float
    h: float
    w_dec: Tensor

    @classmethod
    def from_config(cls, cfg: GainsConfig, plant: PlantConfig) -> "CtrlGains":
        omega = 2.0 * math.pi * cfg.f_grid
        L = torch.tensor(plant.L_g, dtype=torch.float64)
        J = torch.tensor([[0.0, -1.0], [1.0, 0.0]], dtype=torch.float64)
        return cls(
            kp_w=cfg.kp_w, ki_w=cfg.ki_w, tau_max=cfg.tau_max,
            kp_v=cfg.kp_v, ki_v=cfg.ki_v, i_ref_max=cfg.i_ref_max,
            kp_i=cfg.kp_i, ki_i=cfg.ki_i,
            aw_w=cfg.aw_w, aw_v=cfg.aw_v, aw_i=cfg.aw_i,
            ff_grid_voltage=cfg.ff_grid_voltage, ff_decoupling=cfg.ff_decoupling,
            m_max=cfg.m_max, h=plant.h,
            w_dec=omega * (L @ J),
        )


def saturate_modulation(m: Tensor, limit: float = 1.0 / math.sqrt(2.0)) -> Tensor:
    """Radial projection onto the ball ||m|| <= limit (identity inside)."""
    norm = torch.sqrt((m * m).sum(-1, keepdim=True) + 1e-60)
    scale = torch.clamp(limit / norm, max=1.0)
    return m * scale


def _norm_clip(v: Tensor, limit: float) -> Tensor:
    norm = torch.sqrt((v * v).sum(-1, keepdim=True) + 1e-60)
    return v * torch.clamp(limit / norm, max=1.0)


def base_step(
    c: CtrlState,
    x: PlantState,
    y_ref: References,
    d: Disturbances,
    gains: CtrlGains,
    validate: bool = True,
) -> Tuple[CtrlState, Tensor, Tensor]:
    """One controller step: returns (advanced integrators, tau_m, m_g_b).

    ``d`` must carry the NOMINAL grid voltage; the synchronous frame and the
    feed-forward both derive from it. Anti-windup is back-calculation with the
    configured gains, referenced to the controller's own saturation of m_g_b.
    """
    h = gains.h
    vn = d.v_g
    vn_norm = torch.sqrt((vn * vn).sum(-1) + 1e-60)
    cos_t = vn[..., 0] / vn_norm
    sin_t = vn[..., 1] / vn_norm

    # speed loop
    e_w = y_ref.w_ref - x.w
    tau_unsat = gains.kp_w * e_w + c.xi_w
    tau_m = torch.clamp(tau_unsat, -gains.tau_max, gains.tau_max)
    xi_w_next = c.xi_w + h * gains.ki_w * e_w + gains.aw_w * (tau_m - tau_unsat)

    # DC-voltage loop -> dq current reference, norm-clipped
    e_v = y_ref.v_dc_ref - x.v_dc
    i_d_unsat = gains.kp_v * e_v + c.xi_vdc
    i_q_ref = torch.full_like(i_d_unsat, 0.0) - y_ref.Q_ref / vn_norm
    i_dq_unsat = torch.stack([i_d_unsat, i_q_ref], dim=-1)
    i_dq_ref = _norm_clip(i_dq_unsat, gains.i_ref_max)
    xi_vdc_next = (
        c.xi_vdc + h * gains.ki_v * e_v
        + gains.aw_v * (i_dq_ref[..., 0] - i_d_unsat)
    )

    # current loop: reference rotated to alpha-beta, integrator kept in dq
    i_ref_ab = torch.stack(
        [
            cos_t * i_dq_ref[..., 0] - sin_t * i_dq_ref[..., 1],
            sin_t * i_dq_ref[..., 0] + cos_t * i_dq_ref[..., 1],
        ],
        dim=-1,
    )
    e_i_ab = i_ref_ab - x.i_g
    e_i_dq = torch.stack(
        [
            cos_t * e_i_ab[..., 0] + sin_t * e_i_ab[..., 1],
            -sin_t * e_i_ab[..., 0] + cos_t * e_i_ab[..., 1],
        ],
        dim=-1,
    )
    xi_i_ab = torch.stack(
        [
            cos_t * c.xi_i[..., 0] - sin_t * c.xi_i[..., 1],
            sin_t * c.xi_i[..., 0] + cos_t * c.xi_i[..., 1],
        ],
        dim=-1,
    )
    v_cmd = gains.kp_i * e_i_ab + xi_i_ab
    if gains.ff_grid_voltage:
        v_cmd = v_cmd + vn
    if gains.ff_decoupling:
        v_cmd = v_cmd - x.i_g @ gains.w_dec.T
    m_g_b = v_cmd / x.v_dc.unsqueeze(-1)

    # anti-windup from the controller's own saturated output
    m_sat = saturate_modulation(m_g_b, gains.m_max)
    aw_ab = (m_sat - m_g_b) * x.v_dc.unsqueeze(-1)
    aw_dq = torch.stack(
        [
            cos_t * aw_ab[..., 0] + sin_t * aw_ab[..., 1],
            -sin_t * aw_ab[..., 0] + cos_t * aw_ab[..., 1],
        ],
        dim=-1,
    )
    xi_i_next = c.xi_i + h * gains.ki_i * e_i_dq + gains.aw_i * aw_dq

    if validate:
        ok = (
            torch.isfinite(tau_m).all()
            and torch.isfinite(m_g_b).all()
            and torch.isfinite(xi_w_next).all()
            and torch.isfinite(xi_vdc_next).all()
            and torch.isfinite(xi_i_next).all()
        )
        if not bool(ok):
            from .errors import NonFinite

            raise NonFinite("controller step produced a non-finite output")

    return CtrlState(xi_w_next, xi_vdc_next, xi_i_next), tau_m, m_g_b
