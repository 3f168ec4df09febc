"""Diagonal state-space scan core.

Continuous parameters (E, F, G, delta) are discretized with a zero-order
hold and run either as a sequential recurrence, as a causal convolution
with a structured kernel, or as an input-dependent (selective) scan with
per-step delta/F/G.  All math is float64.  E is diagonal, stored as a
length-N vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericRangeError

# Below this |delta*E| the ZOH input factor uses its analytic E -> 0 limit.
_ZOH_LIMIT_TOL = 1e-8


def _as_vec(x, n=None, name="vector"):
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ContractError(f"{name} must be 1-D, got shape {v.shape}")
    if n is not None and v.shape[0] != n:
        raise ContractError(f"{name} must have length {n}, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise ContractError(f"{name} has non-finite entries")
    return v


@dataclass(frozen=True)
class SsmParams:
    """Continuous-time parameters of a diagonal SSM."""

    E: np.ndarray          # (N,) diagonal evolution parameter
    F: np.ndarray          # (N,) input projection
    G: np.ndarray          # (N,) output projection
    delta: float           # timescale, > 0

    def __post_init__(self):
        E = _as_vec(self.E, name="E")
        if E.shape[0] < 1:
            raise ContractError("state_dim must be >= 1")
        object.__setattr__(self, "E", E)
        object.__setattr__(self, "F", _as_vec(self.F, E.shape[0], "F"))
        object.__setattr__(self, "G", _as_vec(self.G, E.shape[0], "G"))
        if not (np.isfinite(self.delta) and self.delta > 0):
            raise ContractError("delta must be a positive finite real")

    @property
    def state_dim(self):
        return self.E.shape[0]


@dataclass(frozen=True)
class DiscreteSsm:
    """Zero-order-hold discretized parameters."""

    E_bar: np.ndarray      # (N,)
    F_bar: np.ndarray      # (N,)

    def __post_init__(self):
        Eb = _as_vec(self.E_bar, name="E_bar")
        object.__setattr__(self, "E_bar", Eb)
        object.__setattr__(self, "F_bar", _as_vec(self.F_bar, Eb.shape[0], "F_bar"))


@dataclass(frozen=True)
class SelectiveParams:
    """Input-dependent scan parameters: shared E, per-step delta/F/G."""

    E: np.ndarray          # (N,)
    delta: np.ndarray      # (M,) positive
    F: np.ndarray          # (M, N)
    G: np.ndarray          # (M, N)

    def __post_init__(self):
        E = _as_vec(self.E, name="E")
        d = _as_vec(self.delta, name="delta")
        if d.shape[0] < 1:
            raise ContractError("sequence length must be >= 1")
        if np.any(d <= 0):
            raise ContractError("delta must be positive at every step")
        F = np.asarray(self.F, dtype=np.float64)
        G = np.asarray(self.G, dtype=np.float64)
        if F.shape != (d.shape[0], E.shape[0]) or G.shape != F.shape:
            raise ContractError(
                f"F and G must have shape ({d.shape[0]}, {E.shape[0]}), "
                f"got {F.shape} and {G.shape}")
        if not (np.all(np.isfinite(F)) and np.all(np.isfinite(G))):
            raise ContractError("F/G have non-finite entries")
        object.__setattr__(self, "E", E)
        object.__setattr__(self, "delta", d)
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "G", G)

    @property
    def length(self):
        return self.delta.shape[0]

    @property
    def state_dim(self):
        return self.E.shape[0]


@dataclass(frozen=True)
class ScanResult:
    v: np.ndarray          # (M,) outputs
    z_final: np.ndarray    # (N,) last hidden state


@dataclass
class SelectiveGradients:
    """Adjoints of <dv, v> for a selective scan."""

    du: np.ndarray         # (M,)
    dz0: np.ndarray        # (N,)
    dE: np.ndarray         # (N,)
    ddelta: np.ndarray     # (M,)
    dF: np.ndarray         # (M, N)
    dG: np.ndarray         # (M, N)


def _zoh_factors(dE):
    """Return (exp(dE), expm1(dE)/dE) with the dE -> 0 limit handled."""
    with np.errstate(over="ignore"):
        a = np.exp(dE)
        small = np.abs(dE) < _ZOH_LIMIT_TOL
        safe = np.where(small, 1.0, dE)
        phi = np.where(small, 1.0, np.expm1(dE) / safe)
    return a, phi


def zoh_discretize(params: SsmParams) -> DiscreteSsm:
    """Zero-order-hold discretization of a diagonal system.

    E_bar = exp(delta*E); F_bar = (delta*E)^-1 (exp(delta*E) - 1) * delta*F,
    with F_bar = delta*F for entries where E -> 0.
    """
    dE = params.delta * params.E
    a, phi = _zoh_factors(dE)
    F_bar = phi * params.delta * params.F
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(F_bar))):
        raise NumericRangeError("ZOH discretization overflowed (delta*E too large)")
    return DiscreteSsm(E_bar=a, F_bar=F_bar)


def scan_recurrent(disc: DiscreteSsm, G, u, z0) -> ScanResult:
    """Sequential recurrence z_t = E_bar*z_{t-1} + F_bar*u_t, v_t = <G, z_t>."""
    n = disc.E_bar.shape[0]
    G = _as_vec(G, n, "G")
    u = _as_vec(u, name="u")
    z = _as_vec(z0, n, "z0").copy()
    if u.shape[0] < 1:
        raise ContractError("u must have length >= 1")
    v = np.empty(u.shape[0])
    for t in range(u.shape[0]):
        z = disc.E_bar * z + disc.F_bar * u[t]
        v[t] = G @ z
    return ScanResult(v=v, z_final=z)


def build_conv_kernel(disc: DiscreteSsm, G, M: int) -> np.ndarray:
    """Structured kernel K_j = <G, E_bar^j * F_bar>, j = 0..M-1."""
    n = disc.E_bar.shape[0]
    G = _as_vec(G, n, "G")
    if M < 1:
        raise ContractError("M must be >= 1")
    # powers[j] = E_bar**j, built multiplicatively to avoid 0**0 edge cases
    K = np.empty(M)
    p = disc.F_bar.copy()
    for j in range(M):
        K[j] = G @ p
        p = p * disc.E_bar
    return K


def scan_convolutional(K, u) -> np.ndarray:
    """Causal convolution v = u * K with zero initial state."""
    K = _as_vec(K, name="K")
    u = _as_vec(u, name="u")
    if K.shape[0] != u.shape[0]:
        raise ContractError("K and u must have equal length")
    return np.convolve(u, K)[: u.shape[0]]


def selective_scan(sel: SelectiveParams, u, z0) -> ScanResult:
    """Input-dependent scan: discretize (E, F_t) with delta_t at every step."""
    u = _as_vec(u, sel.length, "u")
    z = _as_vec(z0, sel.state_dim, "z0").copy()
    dE = sel.delta[:, None] * sel.E[None, :]             # (M, N)
    a, phi = _zoh_factors(dE)
    b = phi * sel.delta[:, None] * sel.F                 # (M, N)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise NumericRangeError("selective discretization overflowed")
    v = np.empty(sel.length)
    for t in range(sel.length):
        z = a[t] * z + b[t] * u[t]
        v[t] = sel.G[t] @ z
    return ScanResult(v=v, z_final=z)


def selective_scan_grad(sel: SelectiveParams, u, z0, dv) -> SelectiveGradients:
    """Exact adjoints of <dv, selective_scan(...).v> by reverse accumulation."""
    u = _as_vec(u, sel.length, "u")
    z0 = _as_vec(z0, sel.state_dim, "z0")
    dv = _as_vec(dv, sel.length, "dv")
    M, N = sel.length, sel.state_dim

    dE_t = sel.delta[:, None] * sel.E[None, :]
    a, phi = _zoh_factors(dE_t)
    b = phi * sel.delta[:, None] * sel.F

    # forward pass, storing every state
    zs = np.empty((M + 1, N))
    zs[0] = z0
    for t in range(M):
        zs[t + 1] = a[t] * zs[t] + b[t] * u[t]

    # d/ddelta of a = exp(delta*E) is E*a; of b = ((a-1)/E)*F it is a*F.
    # d/dE of b is F * (delta*a*E - (a-1)) / E^2, limit delta^2/2 as E -> 0.
    small = np.abs(dE_t) < _ZOH_LIMIT_TOL
    E_b = np.broadcast_to(sel.E[None, :], dE_t.shape)
    E_div = np.where(small, 1.0, E_b)
    db_dE = np.where(
        small,
        (sel.delta[:, None] ** 2) / 2.0,
        (sel.delta[:, None] * a * E_b - np.expm1(dE_t)) / E_div**2,
    ) * sel.F
    db_dF = np.where(small, sel.delta[:, None] * np.ones_like(dE_t),
                     np.expm1(dE_t) / E_div)

    du = np.zeros(M)
    dE = np.zeros(N)
    ddelta = np.zeros(M)
    dF = np.zeros((M, N))
    dG = np.zeros((M, N))

    gz = np.zeros(N)
    for t in range(M - 1, -1, -1):
        gz = gz + dv[t] * sel.G[t]
        dG[t] = dv[t] * zs[t + 1]
        ga = gz * zs[t]               # adjoint of a[t]
        gb = gz * u[t]                # adjoint of b[t]
        du[t] = gz @ b[t]
        ddelta[t] = ga @ (sel.E * a[t]) + gb @ (a[t] * sel.F[t])
        dE += ga * (sel.delta[t] * a[t]) + gb * db_dE[t]
        dF[t] = gb * db_dF[t]
        gz = gz * a[t]
    dz0 = gz
    return SelectiveGradients(du=du, dz0=dz0, dE=dE, ddelta=ddelta, dF=dF, dG=dG)
