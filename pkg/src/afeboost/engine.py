"""Closed-loop rollout engine and reverse-mode differentiation.

The full loop (plant + cascaded PI + neural boost) advances as one pure step
function over batched tensors; reverse accumulation through the unrolled
horizon is provided by torch's tape. The step can optionally be compiled
(torch.compile) for training speed and segmented with recompute checkpointing
to keep peak memory linear in sqrt-ish chunks for long horizons.

Time convention: eta_t = f(eta_{t-1}, u_{t-1}, y_ref, d_{t-1}) + embed(p_t),
where embed adds the last two disturbance slots to the grid-current
components. The one-step model prediction f is computed exactly once and its
residual against the realized state IS the reconstructed disturbance, so the
internal model is matched by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional, Tuple

import torch

from .config import RpbConfig
from .controller import CtrlGains, CtrlState, References, base_step
from .errors import DcBusCollapse, NonFinite
from .operators import (
    M2Realized,
    MInfParams,
    m2_realize,
    unflatten_params,
)
from .plant import Disturbances, PlantInputs, PlantParams, PlantState, step_plant
from .rpb import (
    WindowState,
    assemble_inputs,
    interconnect,
    reconstruct_disturbance,
    rpb_control,
    sigma_threshold,
    update_window,
)

Tensor = torch.Tensor


@dataclass(frozen=True)
class StepConsts:
    params: PlantParams
    gains: CtrlGains
    refs: References
    m2real: Optional[M2Realized]
    minf: Optional[MInfParams]
    minf_bound: float
    eps_sigma: float
    rpb_enabled: bool


class LoopState(NamedTuple):
    w: Tensor
    v_dc: Tensor
    i_g: Tensor
    xi_w: Tensor
    xi_vdc: Tensor
    xi_i: Tensor
    m2_x: Tensor
    in_hold: Tensor
    last_sign: Tensor
    p_hat: Tensor


class StepOuts(NamedTuple):
    tau_m: Tensor
    m_g_b: Tensor
    m_g: Tensor
    u: Tensor
    sigma: Tensor


def _rollout_step(
    state: LoopState,
    v_gn_t: Tensor,
    tau_l_t: Tensor,
    p_ig_next: Tensor,
    C: StepConsts,
) -> Tuple[LoopState, StepOuts]:
    x = PlantState(w=state.w, v_dc=state.v_dc, i_g=state.i_g)
    c = CtrlState(xi_w=state.xi_w, xi_vdc=state.xi_vdc, xi_i=state.xi_i)
    d = Disturbances(tau_l=tau_l_t, v_g=v_gn_t.expand_as(state.i_g))

    # activation window from the reconstructed disturbance; the measured
    # grid-beta component recovers from the disturbance slice
    beta_meas = d.v_g[..., 1] + (state.p_hat[..., 8:10] @ (C.params.L_g / C.params.h).T)[..., 1]
    ws = update_window(
        WindowState(sigma=torch.zeros_like(state.w), in_hold=state.in_hold,
                    last_beta_sign=state.last_sign),
        state.p_hat, beta_meas, C.eps_sigma,
    )

    if C.rpb_enabled:
        rpbin = assemble_inputs(x, d, state.p_hat, ws.sigma, C.params)
        u, m2_x_next = rpb_control(rpbin, state.m2_x, C.m2real, C.minf, C.minf_bound)
    else:
        u = torch.zeros_like(state.i_g)
        m2_x_next = state.m2_x

    c_next, tau_m, m_g_b = base_step(c, x, C.refs, d, C.gains, validate=False)
    m_g = interconnect(m_g_b, u, C.gains.m_max)

    x_f = step_plant(x, PlantInputs(tau_m=tau_m, m_g=m_g), d, C.params,
                     p_phys=0.0, validate=False)
    i_g_next = x_f.i_g + p_ig_next
    # matched model: all non-current components of the prediction ARE the next
    # state, so only the grid-current residual can be nonzero
    p_hat_next = torch.cat(
        [torch.zeros_like(state.p_hat[..., :8]), i_g_next - x_f.i_g], dim=-1
    )

    new_state = LoopState(
        w=x_f.w, v_dc=x_f.v_dc, i_g=i_g_next,
        xi_w=c_next.xi_w, xi_vdc=c_next.xi_vdc, xi_i=c_next.xi_i,
        m2_x=m2_x_next, in_hold=ws.in_hold, last_sign=ws.last_beta_sign,
        p_hat=p_hat_next,
    )
    return new_state, StepOuts(tau_m=tau_m, m_g_b=m_g_b, m_g=m_g, u=u, sigma=ws.sigma)


_COMPILED_STEP: Optional[Callable] = None


def _get_compiled_step() -> Callable:
    global _COMPILED_STEP
    if _COMPILED_STEP is None:
        _COMPILED_STEP = torch.compile(_rollout_step, dynamic=False)
    return _COMPILED_STEP


@dataclass
class Trajectory:
    """Stacked rollout record; state arrays are (T+1, B, ...)."""

    w: Tensor
    v_dc: Tensor
    i_g: Tensor
    xi_w: Tensor
    xi_vdc: Tensor
    xi_i: Tensor
    tau_m: Tensor
    m_g_b: Tensor
    m_g: Tensor
    u: Tensor
    sigma: Tensor
    p_hat: Tensor
    p: Tensor
    v_g_nom: Tensor
    h: float

    @property
    def horizon(self) -> int:
        return self.w.shape[0] - 1

    @property
    def batch(self) -> int:
        return self.w.shape[1]

    def eta(self) -> Tensor:
        """Closed-loop state (T+1, B, 8): [w, v_dc, i_g, xi_w, xi_vdc, xi_i]."""
        return torch.cat(
            [
                self.w.unsqueeze(-1), self.v_dc.unsqueeze(-1), self.i_g,
                self.xi_w.unsqueeze(-1), self.xi_vdc.unsqueeze(-1), self.xi_i,
            ],
            dim=-1,
        )

    def detach(self) -> "Trajectory":
        kv = {
            name: (getattr(self, name).detach() if torch.is_tensor(getattr(self, name))
                   else getattr(self, name))
            for name in self.__dataclass_fields__
        }
        return Trajectory(**kv)


def eta_split(eta0: Tensor) -> Tuple[Tensor, Tensor, Tensor, Tensor, Tensor, Tensor]:
    return (eta0[..., 0], eta0[..., 1], eta0[..., 2:4],
            eta0[..., 4], eta0[..., 5], eta0[..., 6:8])


def _initial_state(eta0: Tensor, m2_dim: int) -> LoopState:
    w, v_dc, i_g, xi_w, xi_vdc, xi_i = eta_split(eta0)
    batch = eta0.shape[:-1]
    # p_hat at t=0 carries the raw initial condition in the first 8 slots
    p_hat0 = reconstruct_disturbance(eta0, torch.zeros_like(eta0), initial=True)
    return LoopState(
        w=w, v_dc=v_dc, i_g=i_g, xi_w=xi_w, xi_vdc=xi_vdc, xi_i=xi_i,
        m2_x=torch.zeros(*batch, m2_dim, dtype=eta0.dtype),
        in_hold=torch.zeros(batch, dtype=torch.bool),
        last_sign=torch.zeros(batch, dtype=eta0.dtype),
        p_hat=p_hat0,
    )


def rollout(
    eta0: Tensor,
    p: Tensor,
    v_g_nom: Tensor,
    tau_l: Tensor,
    params: PlantParams,
    gains: CtrlGains,
    refs: References,
    rpb_cfg: RpbConfig,
    theta: Optional[Tensor],
    horizon: int,
    compiled: bool = False,
    check_every: int = 40,
    checkpoint_chunk: int = 0,
) -> Trajectory:
    """Run the closed loop for ``horizon`` steps (recording t = 0..horizon).

    eta0 (B, 8); p (B, >=horizon+1, 10); v_g_nom (>=horizon+1, 2); tau_l (B,).
    ``theta=None`` runs the base controller alone (u = 0). Raises
    DcBusCollapse/NonFinite with the offending batch indices.
    """
    if eta0.ndim != 2 or eta0.shape[-1] != 8:
        raise ValueError("eta0 must be (batch, 8)")
    T = int(horizon)
    if T < 1:
        raise ValueError("horizon must be >= 1")
    B = eta0.shape[0]
    if p.shape[0] != B or p.shape[-1] != 10 or p.shape[1] < T + 1:
        raise ValueError("p must be (batch, >=horizon+1, 10)")
    if v_g_nom.shape[0] < T + 1:
        raise ValueError("v_g_nom must cover the horizon")

    if theta is not None:
        m2p, minf = unflatten_params(theta, rpb_cfg)
        m2real: Optional[M2Realized] = m2_realize(m2p, rpb_cfg)
    else:
        m2real, minf = None, None
    C = StepConsts(
        params=params, gains=gains, refs=refs, m2real=m2real, minf=minf,
        minf_bound=rpb_cfg.minf_bound, eps_sigma=sigma_threshold(params, rpb_cfg),
        rpb_enabled=theta is not None,
    )
    step = _get_compiled_step() if compiled else _rollout_step

    # pad the disturbance one step past the horizon (the final recorded step
    # still advances a discarded state)
    if p.shape[1] < T + 2:
        p = torch.cat([p, torch.zeros(B, T + 2 - p.shape[1], 10, dtype=p.dtype)], dim=1)
    p_ig = p[:, :, 8:10]

    state = _initial_state(eta0, rpb_cfg.m2_state_dim)
    states: list[LoopState] = []
    outs: list[StepOuts] = []

    def run_span(state: LoopState, t0: int, t1: int) -> LoopState:
        for t in range(t0, t1):
            states.append(state)
            vg_t = v_g_nom[t] if t <= T else v_g_nom[T]
            state_next, out = step(state, vg_t, tau_l, p_ig[:, t + 1], C)
            outs.append(out)
            state = state_next
            if (t + 1) % check_every == 0 or t + 1 == t1:
                bad = (~torch.isfinite(state.v_dc)) | (state.v_dc <= params.v_dc_floor)
                if bool(bad.any()):
                    idx = bad.nonzero().flatten().tolist()
                    raise DcBusCollapse(
                        f"DC bus collapsed by step {t + 1} in batch entries {idx}"
                    )
        return state

    if checkpoint_chunk > 0 and theta is not None and torch.is_grad_enabled():
        state = _run_checkpointed(state, T, checkpoint_chunk, step, C,
                                  v_g_nom, tau_l, p_ig, states, outs)
    else:
        state = run_span(state, 0, T + 1)

    traj = Trajectory(
        w=torch.stack([s.w for s in states]),
        v_dc=torch.stack([s.v_dc for s in states]),
        i_g=torch.stack([s.i_g for s in states]),
        xi_w=torch.stack([s.xi_w for s in states]),
        xi_vdc=torch.stack([s.xi_vdc for s in states]),
        xi_i=torch.stack([s.xi_i for s in states]),
        tau_m=torch.stack([o.tau_m for o in outs]),
        m_g_b=torch.stack([o.m_g_b for o in outs]),
        m_g=torch.stack([o.m_g for o in outs]),
        u=torch.stack([o.u for o in outs]),
        sigma=torch.stack([o.sigma for o in outs]),
        p_hat=torch.stack([s.p_hat for s in states]),
        p=p[:, : T + 1].transpose(0, 1),
        v_g_nom=v_g_nom[: T + 1],
        h=params.h,
    )
    return traj


def _run_checkpointed(state, T, chunk, step, C, v_g_nom, tau_l, p_ig, states, outs):
    """Recompute-style segmentation: activations inside each chunk are rebuilt
    during backward, so peak memory scales with chunk size, not the horizon.
    Only the loss-relevant columns (states & outputs) are re-exposed."""
    from torch.utils.checkpoint import checkpoint

    def make_chunk(t0: int, t1: int):
        def chunk_fn(*flat):
            st = LoopState(*flat)
            chunk_states, chunk_outs = [], []
            for t in range(t0, t1):
                chunk_states.append(st)
                st, out = step(st, v_g_nom[t] if t <= T else v_g_nom[T],
                               tau_l, p_ig[:, t + 1], C)
                chunk_outs.append(out)
            stacked = [torch.stack(cols) for cols in zip(*chunk_states)]
            stacked += [torch.stack(cols) for cols in zip(*chunk_outs)]
            return (*st, *stacked)
        return chunk_fn

    n_state, n_out = len(LoopState._fields), len(StepOuts._fields)
    for t0 in range(0, T + 1, chunk):
        t1 = min(t0 + chunk, T + 1)
        res = checkpoint(make_chunk(t0, t1), *state, use_reentrant=False)
        state = LoopState(*res[:n_state])
        st_stacks = res[n_state: 2 * n_state]
        out_stacks = res[2 * n_state: 2 * n_state + n_out]
        for k in range(t1 - t0):
            states.append(LoopState(*[s[k] for s in st_stacks]))
            outs.append(StepOuts(*[o[k] for o in out_stacks]))
        bad = (~torch.isfinite(state.v_dc)) | (state.v_dc <= C.params.v_dc_floor)
        if bool(bad.any()):
            idx = bad.nonzero().flatten().tolist()
            raise DcBusCollapse(f"DC bus collapsed by step {t1} in batch entries {idx}")
    return state


def rollout_and_grad(
    theta: Tensor,
    loss_fn: Callable[[Trajectory], Tensor],
    rollout_kwargs: dict,
) -> Tuple[Tensor, Tensor]:
    """Loss and d(loss)/d(theta) for a batched rollout via reverse accumulation.

    ``loss_fn`` maps a Trajectory to the scalar empirical batch loss. The
    activation gate inside the rollout is piecewise constant in theta, so
    gradients flow only through the gated values.
    """
    theta_leaf = theta.detach().clone().requires_grad_(True)
    traj = rollout(theta=theta_leaf, **rollout_kwargs)
    loss = loss_fn(traj)
    (grad,) = torch.autograd.grad(loss, theta_leaf)
    if not bool(torch.isfinite(grad).all()):
        bad = (~torch.isfinite(grad)).nonzero().flatten()
        raise NonFinite(
            f"non-finite gradient in {int(bad.numel())} coordinates "
            f"(first: {bad[:8].tolist()}); loss={float(loss):.6g}"
        )
    return loss.detach(), grad


@dataclass
class AdamState:
    """First/second moment estimates and hyperparameters."""

    m: Tensor
    v: Tensor
    step: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def initial(cls, theta: Tensor, lr: float, beta1: float = 0.9,
                beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(m=torch.zeros_like(theta), v=torch.zeros_like(theta),
                   step=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(theta: Tensor, grad: Tensor, state: AdamState) -> Tuple[Tensor, AdamState]:
    """Standard bias-corrected Adam update; pure and deterministic."""
    if theta.shape != grad.shape or theta.shape != state.m.shape:
        raise ValueError("theta/grad/moment shapes must match")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    theta_next = theta - state.lr * m_hat / (torch.sqrt(v_hat) + state.eps)
    return theta_next, AdamState(m=m, v=v, step=t, lr=state.lr,
                                 beta1=state.beta1, beta2=state.beta2, eps=state.eps)
