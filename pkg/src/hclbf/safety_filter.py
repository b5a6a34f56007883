"""Barrier-inequality safety filter.

A nominal velocity ``u`` is accepted when ``grad(V) . u <= -k_alpha * V``;
otherwise it is replaced by its Euclidean projection onto that half-space.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

PROJECTED = "Projected"
FLAT_GRADIENT_STOP = "FlatGradientStop"
CLAMPED = "Clamped"
OUT_OF_BOUNDS = "OutOfBounds"


class NonFiniteInput(ValueError):
    pass


@dataclass(frozen=True)
class FilterParams:
    k_alpha: float = 1.0
    alpha_adm: float = 0.1
    grad_epsilon: float = 1e-9
    # None disables the post-projection speed clamp
    speed_limit: float | None = None
    enabled: bool = True

    def __post_init__(self):
        if not self.k_alpha > 0:
            raise ValueError("k_alpha must be positive")
        if not self.alpha_adm > 0:
            raise ValueError("alpha_adm must be positive")
        if self.grad_epsilon < 0:
            raise ValueError("grad_epsilon must be non-negative")
        if self.speed_limit is not None and not self.speed_limit > 0:
            raise ValueError("speed_limit must be positive")

    @classmethod
    def from_dict(cls, d: dict | None) -> "FilterParams":
        d = dict(d or {})
        keys = ("k_alpha", "alpha_adm", "grad_epsilon", "speed_limit", "enabled")
        return cls(**{k: d[k] for k in keys if k in d})


@dataclass(frozen=True)
class BarrierCheck:
    satisfied: bool
    lhs: float
    rhs: float


@dataclass(frozen=True)
class FilterDecision:
    nominal_u: tuple[float, float]
    V: float
    grad: tuple[float, float]
    lhs: float
    rhs: float
    violated: bool
    output_u: tuple[float, float]
    flags: frozenset[str] = field(default_factory=frozenset)


def admittance(F: tuple[float, float], alpha_adm: float) -> tuple[float, float]:
    return (alpha_adm * F[0], alpha_adm * F[1])


def check_barrier(u, V: float, grad, k_alpha: float) -> BarrierCheck:
    lhs = grad[0] * u[0] + grad[1] * u[1]
    rhs = -k_alpha * V
    return BarrierCheck(lhs <= rhs, lhs, rhs)


def _finite(*vals: float) -> bool:
    return all(math.isfinite(v) for v in vals)


def project(u, V: float, grad, k_alpha: float, grad_epsilon: float = 1e-9,
            speed_limit: float | None = None) -> FilterDecision:
    """Closest velocity (Euclidean) satisfying the barrier inequality.

    If the gradient norm is at most ``grad_epsilon`` the constraint direction is
    undefined and the command is replaced by a full stop.
    """
    ux, uy = float(u[0]), float(u[1])
    gx, gy = float(grad[0]), float(grad[1])
    V = float(V)
    if not _finite(ux, uy, gx, gy, V):
        raise NonFiniteInput(f"non-finite filter input u={u}, V={V}, grad={grad}")
    chk = check_barrier((ux, uy), V, (gx, gy), k_alpha)
    flags = set()
    if chk.satisfied:
        out = (ux, uy)
    else:
        g2 = gx * gx + gy * gy
        if math.sqrt(g2) <= grad_epsilon:
            out = (0.0, 0.0)
            flags.add(FLAT_GRADIENT_STOP)
        else:
            lam = (chk.lhs - chk.rhs) / g2
            out = (ux - lam * gx, uy - lam * gy)
            flags.add(PROJECTED)
    if speed_limit is not None and FLAT_GRADIENT_STOP not in flags:
        out, clamped = _clamp_speed(out, V, gx, gy, k_alpha, speed_limit)
        if clamped:
            flags.add(CLAMPED)
    return FilterDecision((ux, uy), V, (gx, gy), chk.lhs, chk.rhs, not chk.satisfied, out,
                          frozenset(flags))


def _clamp_speed(u, V, gx, gy, k_alpha, limit):
    """Scale u down to the speed limit.

    Shrinking preserves grad . u <= 0 (no ascent of V) but may give up part of
    the -k_alpha*V decay margin; callers see this through the Clamped flag.
    """
    speed = math.hypot(u[0], u[1])
    if speed <= limit:
        return u, False
    if gx * u[0] + gy * u[1] > 1e-12 * speed * math.hypot(gx, gy):
        # only reachable for infeasible input (beyond rounding); leave it to the caller's flags
        return u, False
    scale = limit / speed
    return (u[0] * scale, u[1] * scale), True


def apply_filter(F, V: float, grad, params: FilterParams) -> FilterDecision:
    """Admittance map followed by projection; a disabled filter passes u through."""
    u = admittance(F, params.alpha_adm)
    if not params.enabled:
        chk = check_barrier(u, V, grad, params.k_alpha)
        return FilterDecision((u[0], u[1]), V, tuple(grad), chk.lhs, chk.rhs, not chk.satisfied,
                              (u[0], u[1]), frozenset())
    return project(u, V, grad, params.k_alpha, params.grad_epsilon, params.speed_limit)
