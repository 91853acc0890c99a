"""Forward-Euler drive model: shaft, DC link and grid filter in power-invariant
alpha-beta coordinates, plus coordinate transforms and per-unit scaling.

All operations are pure functions over batched float64 tensors (leading batch
dimensions broadcast), safe to call from concurrent rollouts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Union

import torch

from .config import PlantConfig
from .errors import DcBusCollapse, NonFinite

Tensor = torch.Tensor
_SQRT23 = math.sqrt(2.0 / 3.0)

# power-invariant Clarke matrix, abc -> alpha-beta
CLARKE = torch.tensor(
    [
        [_SQRT23, -_SQRT23 / 2.0, -_SQRT23 / 2.0],
        [0.0, _SQRT23 * math.sqrt(3.0) / 2.0, -_SQRT23 * math.sqrt(3.0) / 2.0],
    ],
    dtype=torch.float64,
)


class PlantState(NamedTuple):
    """Physical state: shaft speed [rad/s], DC-link voltage [V], grid current
    in alpha-beta [A] with trailing dimension 2."""

    w: Tensor
    v_dc: Tensor
    i_g: Tensor


class PlantInputs(NamedTuple):
    tau_m: Tensor   # motor torque command [N m]
    m_g: Tensor     # modulation vector, trailing dim 2


class Disturbances(NamedTuple):
    tau_l: Tensor   # load torque [N m]
    v_g: Tensor     # grid voltage in alpha-beta [V], trailing dim 2


@dataclass(frozen=True)
class PlantParams:
    """Runtime plant constants (float64 tensors, derived matrices precomputed)."""

    M: float
    D: float
    C_dc: float
    G_dc: float
    h: float
    v_dc_floor: float
    L_g: Tensor
    R_g: Tensor
    L_inv: Tensor
    A_ig: Tensor          # I - h L^-1 R
    hL_inv: Tensor        # h L^-1
    V_base: float
    I_base: float
    Vdc_base: float
    w_base: float
    tau_base: float

    @classmethod
    def from_config(cls, cfg: PlantConfig) -> "PlantParams":
        L = torch.tensor(cfg.L_g, dtype=torch.float64)
        R = torch.tensor(cfg.R_g, dtype=torch.float64)
        L_inv = torch.linalg.inv(L)
        if not torch.isfinite(L_inv).all():
            raise ValueError("L_g inverse is not finite")
        eye = torch.eye(2, dtype=torch.float64)
        return cls(
            M=cfg.M, D=cfg.D, C_dc=cfg.C_dc, G_dc=cfg.G_dc, h=cfg.h,
            v_dc_floor=cfg.v_dc_floor,
            L_g=L, R_g=R, L_inv=L_inv,
            A_ig=eye - cfg.h * (L_inv @ R),
            hL_inv=cfg.h * L_inv,
            V_base=cfg.V_base, I_base=cfg.I_base, Vdc_base=cfg.Vdc_base,
            w_base=cfg.w_base, tau_base=cfg.tau_base,
        )


def clarke_abc_to_alphabeta(v_abc: Tensor) -> Tensor:
    """Power-invariant Clarke transform; input (..., 3) -> output (..., 2)."""
    return v_abc @ CLARKE.T


def reactive_power(v_g: Tensor, i_g: Tensor) -> Tensor:
    """Instantaneous reactive power Q = v_be * i_al - v_al * i_be [VAR]."""
    return v_g[..., 1] * i_g[..., 0] - v_g[..., 0] * i_g[..., 1]


def to_per_unit(x: Union[Tensor, float], base: float) -> Union[Tensor, float]:
    return x / base


def from_per_unit(x_pu: Union[Tensor, float], base: float) -> Union[Tensor, float]:
    return x_pu * base


def step_plant(
    x: PlantState,
    u: PlantInputs,
    d: Disturbances,
    params: PlantParams,
    p_phys: Union[Tensor, float] = 0.0,
    validate: bool = True,
) -> PlantState:
    """One forward-Euler step of the drive model.

    ``p_phys`` is the additive grid-current disturbance slice h L^-1 dv_g
    (already scaled); the plant itself sees only the nominal voltage in ``d``.
    ``validate=False`` skips the guard checks so the step stays traceable
    inside compiled rollouts (the caller then checks in chunks).
    """
    if validate and bool((x.v_dc <= params.v_dc_floor).any()):
        raise DcBusCollapse(f"v_dc fell to <= {params.v_dc_floor} V")

    h = params.h
    w_next = (1.0 - h * params.D / params.M) * x.w + (h / params.M) * (u.tau_m - d.tau_l)
    v_dc_next = (
        (1.0 - h * params.G_dc / params.C_dc) * x.v_dc
        - (h / params.C_dc) * (u.tau_m / x.v_dc) * x.w
        + (h / params.C_dc) * (u.m_g * x.i_g).sum(-1)
    )
    i_g_next = (
        x.i_g @ params.A_ig.T
        + d.v_g @ params.hL_inv.T
        - (u.m_g @ params.hL_inv.T) * x.v_dc.unsqueeze(-1)
        + p_phys
    )

    if validate:
        finite = (
            torch.isfinite(w_next).all()
            and torch.isfinite(v_dc_next).all()
            and torch.isfinite(i_g_next).all()
        )
        if not bool(finite):
            raise NonFinite("plant step produced a non-finite state")
    return PlantState(w=w_next, v_dc=v_dc_next, i_g=i_g_next)
