"""Sublayer combination rules and their coefficients.

Four rules combine a sublayer input ``x`` with its branch ``f``:

* ``postln``:     LN(x + f(x))
* ``preln``:      x + f(LN(x))
* ``deepnorm``:   LN(alpha * x + f(x)), alpha fixed per side from the depth
* ``branchnorm``: LN(x + alpha_t * f(x)), alpha_t ramps 0 -> 1 over T steps
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

from . import tensor as T
from .errors import ConfigError, ContractError
from .layers import LN_EPS, LayerNormParams, layer_norm
from .tensor import Tensor

KINDS = ("postln", "preln", "deepnorm", "branchnorm")
SCHEDULES = ("linear", "exp", "sigmoid")
SIDES = ("encoder", "decoder")


def deepnorm_coeffs(N: int, M: int) -> tuple[float, float, float, float]:
    """DeepNorm (alpha_enc, beta_enc, alpha_dec, beta_dec) for an N-encoder, M-decoder model."""
    if int(N) != N or int(M) != M or N < 1 or M < 1:
        raise ContractError(f"layer counts must be positive integers, got N={N}, M={M}")
    base = float(N) ** 4 * float(M)
    return (0.81 * base ** (1 / 16), 0.87 * base ** (-1 / 16),
            (3.0 * M) ** 0.25, (12.0 * M) ** -0.25)


@dataclass(frozen=True)
class Schedule:
    """Growth curve of the BranchNorm branch scale.

    ``exp_k`` is the curvature of the exponential ramp and ``sigmoid_s`` the
    steepness of the logistic ramp; both only shape the curve between 0 and T.
    """

    kind: str = "linear"
    T: int = 4000
    exp_k: float = 5.0
    sigmoid_s: float = 12.0

    def __post_init__(self):
        if self.kind not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.kind!r}; expected one of {SCHEDULES}")
        if int(self.T) != self.T or self.T < 1:
            raise ConfigError(f"schedule T must be a positive integer, got {self.T}")
        if self.exp_k <= 0 or self.sigmoid_s <= 0:
            raise ConfigError("schedule shape constants must be positive")

    def __call__(self, t: int) -> float:
        return branchnorm_alpha(t, self.T, self)


def _sigmoid(z: float) -> float:
    return 1.0 / (1.0 + math.exp(-z))


def branchnorm_alpha(t: float, T: int, kind: "Schedule | str" = "linear") -> float:
    """Branch scale at training step ``t``; exactly 0 at t=0 and 1 for t >= T."""
    sched = kind if isinstance(kind, Schedule) else Schedule(kind=kind, T=T)
    if t < 0:
        raise ContractError(f"step must be nonnegative, got {t}")
    if T < 1:
        raise ContractError(f"T must be >= 1, got {T}")
    if t >= T:
        return 1.0
    r = t / T
    if sched.kind == "linear":
        a = r
    elif sched.kind == "exp":
        k = sched.exp_k
        a = math.expm1(k * r) / math.expm1(k)
    else:
        s = sched.sigmoid_s
        lo = _sigmoid(-s / 2)
        a = (_sigmoid(s * (r - 0.5)) - lo) / (_sigmoid(s / 2) - lo)
    return min(1.0, max(0.0, a))


@dataclass(frozen=True)
class NormStrategy:
    """Which combination rule to use, plus its scalars.

    ``alpha_*`` are the DeepNorm residual multipliers. ``beta_*`` scale the
    initialization of value/output/feed-forward weights when ``beta_init`` is
    set (DeepNorm always; BranchNorm by default).
    """

    kind: str = "postln"
    alpha_encoder: float = 1.0
    alpha_decoder: float = 1.0
    beta_encoder: float = 1.0
    beta_decoder: float = 1.0
    schedule: Schedule = field(default_factory=Schedule)
    beta_init: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown strategy {self.kind!r}; expected one of {KINDS}")
        for name in ("alpha_encoder", "alpha_decoder", "beta_encoder", "beta_decoder"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")

    @classmethod
    def post_ln(cls) -> "NormStrategy":
        return cls("postln")

    @classmethod
    def pre_ln(cls) -> "NormStrategy":
        return cls("preln")

    @classmethod
    def deep_norm(cls, N: int, M: int) -> "NormStrategy":
        ae, be, ad, bd = deepnorm_coeffs(N, M)
        return cls("deepnorm", ae, ad, be, bd, beta_init=True)

    @classmethod
    def branch_norm(cls, N: int, M: int, T: int = 4000, schedule: str = "linear",
                    beta_init: bool = True, **shape) -> "NormStrategy":
        _, be, _, bd = deepnorm_coeffs(N, M)
        return cls("branchnorm", beta_encoder=be, beta_decoder=bd,
                   schedule=Schedule(schedule, T, **shape), beta_init=beta_init)

    @classmethod
    def named(cls, kind: str, N: int, M: int, **kw) -> "NormStrategy":
        """Default strategy of ``kind`` for an N-encoder, M-decoder model."""
        if kind == "postln":
            return cls.post_ln()
        if kind == "preln":
            return cls.pre_ln()
        if kind == "deepnorm":
            return cls.deep_norm(N, M)
        if kind == "branchnorm":
            return cls.branch_norm(N, M, **kw)
        raise ConfigError(f"unknown strategy {kind!r}; expected one of {KINDS}")

    def with_alpha(self, alpha: float) -> "NormStrategy":
        return replace(self, alpha_encoder=alpha, alpha_decoder=alpha)

    def init_gain(self, side: str) -> float:
        if not self.beta_init:
            return 1.0
        return self.beta_encoder if side == "encoder" else self.beta_decoder

    def residual_alpha(self, side: str) -> float:
        if self.kind != "deepnorm":
            return 1.0
        return self.alpha_encoder if side == "encoder" else self.alpha_decoder

    def branch_alpha(self, t: int) -> float:
        if self.kind != "branchnorm":
            return 1.0
        return branchnorm_alpha(t, self.schedule.T, self.schedule)


def sublayer_apply(strategy: NormStrategy, side: str, x: Tensor, f: Callable[[Tensor], Tensor],
                   t: int, ln: LayerNormParams, eps: float = LN_EPS) -> Tensor:
    """Combine input ``x`` with branch ``f`` according to ``strategy`` at step ``t``."""
    if side not in SIDES:
        raise ConfigError(f"unknown side {side!r}")
    kind = strategy.kind
    if kind == "postln":
        return layer_norm(T.add(x, f(x)), ln, eps)
    if kind == "preln":
        return T.add(x, f(layer_norm(x, ln, eps)))
    if kind == "deepnorm":
        return layer_norm(T.add(T.scale(x, strategy.residual_alpha(side)), f(x)), ln, eps)
    if kind == "branchnorm":
        return layer_norm(T.add(x, T.scale(f(x), strategy.branch_alpha(t))), ln, eps)
    raise ConfigError(f"unknown strategy {kind!r}")
