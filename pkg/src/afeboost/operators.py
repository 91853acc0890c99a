"""Finitely parametrized operator classes for the neural augmentation.

``M2``: a recurrent operator that is finite-l2-gain for EVERY parameter value.
Realization: x+ = A x + B phi(C x + D u) + E u, y = C_y x (strictly proper),
with A diagonal, a_i = (1 - delta) tanh(a_hat_i), phi = tanh (1-Lipschitz),
and B, C rescaled through their power-iteration spectral norms and sigmoid
gates so that ||B||*||C|| < (1 - gain_margin)*(1 - max|a_i|). The one-step
contraction factor rho = max|a_i| + ||B||*||C|| is then < 1 by construction;
no projection is ever needed during training.

``MInf``: an MLP 16 -> 6 -> 10 -> 10 -> 2 with sigmoid hidden activations and
a tanh output scaled to [-bound, bound], so its output is bounded for every
input and every parameter value.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, fields
from typing import NamedTuple, Tuple

import torch

from .config import RpbConfig
from .errors import NonFinite

Tensor = torch.Tensor

M2_INPUT_DIM = 15    # windowed electrical signals (5) + reconstructed disturbance (10)
MINF_INPUT_DIM = 16  # nominal disturbances (3) + p_hat (10) + v_dc (1) + i_g (2)
OUTPUT_DIM = 2

CHECKPOINT_FORMAT = "afeboost-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class M2Params:
    """Free (unconstrained) parameters of the stable recurrence."""

    a_hat: Tensor     # (n,)   diagonal pre-activation
    B_hat: Tensor     # (n, l) nonlinear-channel injection, normalized at realization
    C_hat: Tensor     # (l, n) nonlinear-channel readout, normalized at realization
    g_b_hat: Tensor   # ()     sigmoid gate on ||B||
    g_c_hat: Tensor   # ()     sigmoid gate on ||C||
    D: Tensor         # (l, m) input -> nonlinear channel
    E: Tensor         # (n, m) input -> linear state
    C_y: Tensor       # (2, n) output map


@dataclass
class MInfParams:
    """MLP weights/biases, layer i maps width[i] -> width[i+1]."""

    weights: list[Tensor]
    biases: list[Tensor]


class M2Realized(NamedTuple):
    """Materialized matrices of the stable recurrence (one realization per
    rollout; differentiable through the normalization)."""

    A: Tensor
    B: Tensor
    C: Tensor
    D: Tensor
    E: Tensor
    C_y: Tensor


def spectral_norm_power(mat: Tensor, iterations: int = 50) -> Tensor:
    """Largest singular value by fixed-length power iteration (differentiable)."""
    v = torch.full((mat.shape[1],), 1.0 / math.sqrt(mat.shape[1]),
                   dtype=mat.dtype, device=mat.device)
    mtm = mat.T @ mat
    for _ in range(iterations):
        v = mtm @ v
        v = v / (torch.linalg.vector_norm(v) + 1e-300)
    return torch.linalg.vector_norm(mat @ v)


def m2_realize(p: M2Params, cfg: RpbConfig) -> M2Realized:
    """Materialize (A, B, C, D, E, C_y) with the small-gain normalization."""
    delta = cfg.contraction_margin
    A = (1.0 - delta) * torch.tanh(p.a_hat)
    a_max = A.abs().max()
    budget = (1.0 - cfg.gain_margin) * (1.0 - a_max)
    scale_b = torch.sigmoid(p.g_b_hat) * torch.sqrt(budget)
    scale_c = torch.sigmoid(p.g_c_hat) * torch.sqrt(budget)
    B = p.B_hat * (scale_b / (spectral_norm_power(p.B_hat, cfg.power_iterations) + 1e-12))
    C = p.C_hat * (scale_c / (spectral_norm_power(p.C_hat, cfg.power_iterations) + 1e-12))
    return M2Realized(A=A, B=B, C=C, D=p.D, E=p.E, C_y=p.C_y)


def m2_contraction(real: M2Realized) -> float:
    """Certified one-step contraction factor rho < 1 (exact spectral norms)."""
    a_max = float(real.A.abs().max())
    bc = float(torch.linalg.matrix_norm(real.B, 2) * torch.linalg.matrix_norm(real.C, 2))
    return a_max + bc


def m2_gain_bound(real: M2Realized) -> float:
    """Constructive l2 gain bound: ||y||_2 <= gamma ||u||_2 for zero initial state."""
    rho = m2_contraction(real)
    k = float(
        torch.linalg.matrix_norm(real.B, 2) * torch.linalg.matrix_norm(real.D, 2)
        + torch.linalg.matrix_norm(real.E, 2)
    )
    cy = float(torch.linalg.matrix_norm(real.C_y, 2))
    return cy * k / (1.0 - rho)


def m2_decay_horizon(real: M2Realized, tol: float = 1e-3) -> int:
    """Steps for the state norm to certifiably shrink by ``tol``."""
    rho = m2_contraction(real)
    return max(1, math.ceil(math.log(tol) / math.log(rho)))


def m2_init(seed: int, cfg: RpbConfig) -> Tuple[M2Params, Tensor]:
    """Reproducible initialization and the zero state (batch added by caller)."""
    gen = torch.Generator().manual_seed(seed)
    n, l, m = cfg.m2_state_dim, cfg.m2_nl_dim, M2_INPUT_DIM

    def randn(*shape, std=1.0, mean=0.0):
        return torch.randn(*shape, generator=gen, dtype=torch.float64) * std + mean

    params = M2Params(
        a_hat=randn(n, std=0.5),
        B_hat=randn(n, l),
        C_hat=randn(l, n),
        g_b_hat=randn((), std=0.25, mean=-1.0),
        g_c_hat=randn((), std=0.25, mean=-1.0),
        D=randn(l, m, std=1.0 / math.sqrt(m)),
        E=randn(n, m, std=1.0 / math.sqrt(m)),
        C_y=randn(OUTPUT_DIM, n, std=cfg.init_output_scale / math.sqrt(n)),
    )
    return params, torch.zeros(n, dtype=torch.float64)


def m2_step(real: M2Realized, state: Tensor, inp: Tensor,
            validate: bool = False) -> Tuple[Tensor, Tensor]:
    """One step of the stable recurrence; output is read from the CURRENT state
    (strictly proper). ``state`` (..., n), ``inp`` (..., m)."""
    y = state @ real.C_y.T
    z = torch.tanh(state @ real.C.T + inp @ real.D.T)
    state_next = real.A * state + z @ real.B.T + inp @ real.E.T
    if validate and not bool(torch.isfinite(y).all() and torch.isfinite(state_next).all()):
        raise NonFinite("M2 step produced a non-finite value")
    return y, state_next


def minf_init(seed: int, cfg: RpbConfig) -> MInfParams:
    gen = torch.Generator().manual_seed(seed)
    widths = [MINF_INPUT_DIM, *cfg.minf_hidden, OUTPUT_DIM]
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        w = torch.randn(fan_out, fan_in, generator=gen, dtype=torch.float64) / math.sqrt(fan_in)
        b = torch.zeros(fan_out, dtype=torch.float64)
        if i == len(widths) - 2:
            w = w * cfg.init_output_scale
        weights.append(w)
        biases.append(b)
    return MInfParams(weights=weights, biases=biases)


def minf_forward(p: MInfParams, inp: Tensor, bound: float = 1.0,
                 validate: bool = False) -> Tensor:
    """Bounded MLP: sigmoid hidden layers, tanh output scaled to [-bound, bound]."""
    h = inp
    for w, b in zip(p.weights[:-1], p.biases[:-1]):
        h = torch.sigmoid(h @ w.T + b)
    out = bound * torch.tanh(h @ p.weights[-1].T + p.biases[-1])
    if validate and not bool(torch.isfinite(out).all()):
        raise NonFinite("MInf forward produced a non-finite value")
    return out


# ---------------------------------------------------------------------------
# flat parameter vector <-> operator params

def _m2_tensors(p: M2Params) -> list[Tuple[str, Tensor]]:
    return [(f.name, getattr(p, f.name)) for f in fields(M2Params)]


def flatten_params(m2: M2Params, minf: MInfParams) -> Tensor:
    parts = [t.reshape(-1) for _, t in _m2_tensors(m2)]
    parts += [t.reshape(-1) for t in minf.weights]
    parts += [t.reshape(-1) for t in minf.biases]
    return torch.cat(parts)


def param_shapes(cfg: RpbConfig) -> dict:
    m2, _ = m2_init(0, cfg)
    minf = minf_init(0, cfg)
    return {
        "m2": {name: list(t.shape) for name, t in _m2_tensors(m2)},
        "minf_weights": [list(t.shape) for t in minf.weights],
        "minf_biases": [list(t.shape) for t in minf.biases],
    }


def unflatten_params(theta: Tensor, cfg: RpbConfig) -> Tuple[M2Params, MInfParams]:
    """Slice a flat parameter vector into operator params (views into theta,
    so gradients w.r.t. theta flow through the rollout)."""
    shapes = param_shapes(cfg)
    pos = 0

    def take(shape: list[int]) -> Tensor:
        nonlocal pos
        numel = int(torch.tensor(shape).prod()) if shape else 1
        out = theta[pos:pos + numel].reshape(shape)
        pos += numel
        return out

    m2_kwargs = {name: take(shape) for name, shape in shapes["m2"].items()}
    m2 = M2Params(**m2_kwargs)
    weights = [take(s) for s in shapes["minf_weights"]]
    biases = [take(s) for s in shapes["minf_biases"]]
    if pos != theta.numel():
        raise ValueError(f"theta has {theta.numel()} entries, layout expects {pos}")
    return m2, MInfParams(weights=weights, biases=biases)


def init_theta(seed: int, cfg: RpbConfig) -> Tensor:
    m2, _ = m2_init(seed, cfg)
    minf = minf_init(seed + 1, cfg)
    return flatten_params(m2, minf)


# ---------------------------------------------------------------------------
# checkpoint file: versioned JSON container

def save_checkpoint(path: str, theta: Tensor, cfg: RpbConfig, bases: dict,
                    meta: dict | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "rpb": cfg.model_dump(mode="json"),
        "shapes": param_shapes(cfg),
        "theta": [float(v) for v in theta.detach().reshape(-1)],
        "bases": bases,
        "meta": meta or {},
    }
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(payload, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> Tuple[Tensor, RpbConfig, dict]:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path!r} is not an afeboost checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    cfg = RpbConfig(**payload["rpb"])
    theta = torch.tensor(payload["theta"], dtype=torch.float64)
    expected = int(init_theta(0, cfg).numel())
    if theta.numel() != expected:
        raise ValueError("checkpoint parameter count does not match its layout")
    return theta, cfg, payload
