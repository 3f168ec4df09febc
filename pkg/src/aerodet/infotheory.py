"""Exact mutual-information checks on finite alphabets.

Mutual information is computed in bits from explicit joint tables, so
the data-processing inequality and reversibility statements can be
verified exactly (up to float rounding) rather than estimated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

_MASS_TOL = 1e-12


@dataclass(frozen=True)
class DiscreteJoint:
    """Joint probability table p(x, y) over finite alphabets."""

    p: np.ndarray  # (|X|, |Y|), non-negative, sums to 1

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        if p.ndim != 2:
            raise ContractError("joint table must be 2-D")
        if np.any(p < 0):
            raise ContractError("joint table has negative entries")
        if abs(p.sum() - 1.0) > 1e-9:
            raise ContractError(f"joint mass {p.sum()} != 1")
        object.__setattr__(self, "p", p)


@dataclass(frozen=True)
class MapChain:
    """Initial distribution over X plus a sequence of stochastic maps.

    Each transition table has one row per input symbol; rows are
    distributions over the stage's output alphabet.  Deterministic maps
    are 0/1 tables.
    """

    px: np.ndarray               # (|X|,)
    stages: tuple                # tuple of (n_in, n_out) row-stochastic arrays

    def __post_init__(self):
        px = np.asarray(self.px, dtype=np.float64)
        if px.ndim != 1 or np.any(px < 0) or abs(px.sum() - 1.0) > 1e-9:
            raise ContractError("px must be a 1-D distribution")
        stages = []
        n = px.shape[0]
        for i, T in enumerate(self.stages):
            T = np.asarray(T, dtype=np.float64)
            if T.ndim != 2 or T.shape[0] != n:
                raise ContractError(f"stage {i}: expected {n} input rows, got shape {T.shape}")
            if np.any(T < 0) or np.max(np.abs(T.sum(axis=1) - 1.0)) > _MASS_TOL * T.shape[1] * 100:
                raise ContractError(f"stage {i}: rows must be distributions")
            stages.append(T)
            n = T.shape[1]
        object.__setattr__(self, "px", px)
        object.__setattr__(self, "stages", tuple(stages))


def mutual_information(joint: DiscreteJoint) -> float:
    """I(X;Y) in bits, with the 0*log(0) = 0 convention."""
    p = joint.p
    px = p.sum(axis=1)
    py = p.sum(axis=0)
    mask = p > 0
    outer = px[:, None] * py[None, :]
    terms = np.zeros_like(p)
    terms[mask] = p[mask] * np.log2(p[mask] / outer[mask])
    return float(terms.sum())


def deterministic_map(outputs, n_out):
    """Build a 0/1 transition table sending symbol i to outputs[i]."""
    outputs = np.asarray(outputs, dtype=int)
    T = np.zeros((outputs.shape[0], n_out))
    T[np.arange(outputs.shape[0]), outputs] = 1.0
    return T


def push_chain(chain: MapChain):
    """Joint of X with each stage's output, by exact marginalization.

    Returns joints for stages 0..n where stage 0 is (X, X) itself.
    """
    n = chain.px.shape[0]
    joints = [DiscreteJoint(np.diag(chain.px))]
    # cumulative channel X -> stage-k output
    C = np.eye(n)
    for T in chain.stages:
        C = C @ T
        joints.append(DiscreteJoint(chain.px[:, None] * C))
    return joints


def dpi_check(chain: MapChain, tol: float = 1e-10):
    """MI of X against every stage; True iff the sequence never increases."""
    mis = [mutual_information(j) for j in push_chain(chain)]
    ok = all(mis[k + 1] <= mis[k] + tol for k in range(len(mis) - 1))
    return mis, ok


def reversibility_check(T, px, tol: float = 1e-10) -> bool:
    """True iff the map preserves I(X;X), i.e. loses no information about X."""
    chain = MapChain(px=px, stages=(T,))
    mis, _ = dpi_check(chain, tol)
    return abs(mis[1] - mis[0]) <= tol
