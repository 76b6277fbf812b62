"""Brute-force exact path-space enumeration for finite-support models.

This is the ground-truth engine: laws of backward/forward iterations and of
return-time excursions are computed by expanding every (state path, atom
choice) combination, with sum-preserving merging after each step to fight
atom explosion.  Everything here is exact up to the merge tolerance; caps
are enforced and truncation is reported as explicit tail mass.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import log

import numpy as np

from .laws import MERGE_TOL, DiscreteLaw, mixture
from .model import InitialLaw, Model, PerpetuaError

DEFAULT_MAX_N = 20
DEFAULT_ATOM_CAP = 10_000_000


class ExplosionCap(PerpetuaError):
    """Exact enumeration exceeded the atom budget; use simulation instead."""

    def __init__(self, count, cap):
        self.count = count
        self.cap = cap
        super().__init__(f"atom count {count} exceeds cap {cap}")


@dataclass(frozen=True)
class PathAtom:
    """One fully resolved path: states, atom choices, and its exact weight."""

    states: tuple
    coeff_choices: tuple
    prob: float
    pi_n: float
    s_n: float
    backward_value: float
    forward_value: float


def iter_paths(model, start, n, z0=0.0):
    """Yield every PathAtom of length n from start (small n only)."""
    start = model.state_index(start)

    def rec(state, depth, states, choices, prob, pi, csum, fwd):
        if depth == n:
            yield PathAtom(
                states=tuple(states),
                coeff_choices=tuple(choices),
                prob=prob,
                pi_n=pi,
                s_n=-log(abs(pi)) if pi != 0.0 else float("inf"),
                backward_value=pi * z0 + csum,
                forward_value=fwd,
            )
            return
        for j in range(model.n_states):
            p = model.transition[state, j]
            if p <= 0:
                continue
            law = model.edge_laws[(state, j)]
            for k, (w, a, b) in enumerate(law.atoms()):
                yield from rec(
                    j, depth + 1, states + [j], choices + [k],
                    prob * p * w, pi * a, csum + pi * b, a * fwd + b,
                )

    yield from rec(start, 0, [start], [], 1.0, 1.0, 0.0, float(z0))


def _cluster_rows(cols, prob, tol):
    """Merge rows whose coordinates all agree within tol (prob-weighted means).

    Rows are lexsorted; only consecutive rows are fused, which is safe
    (everything fused really is within tol) and collapses the exact
    duplicates that drive atom explosion.
    """
    m = prob.size
    if m <= 1:
        return cols, prob
    order = np.lexsort(tuple(reversed(cols)))
    cols = [c[order] for c in cols]
    prob = prob[order]
    close = np.ones(m - 1, dtype=bool)
    for c in cols:
        close &= np.abs(np.diff(c)) < tol
    if not close.any():
        return cols, prob
    new = np.concatenate(([True], ~close))
    cl = np.cumsum(new) - 1
    n = cl[-1] + 1
    pm = np.zeros(n)
    np.add.at(pm, cl, prob)
    out_cols = []
    for c in cols:
        acc = np.zeros(n)
        np.add.at(acc, cl, c * prob)
        out_cols.append(acc / pm)
    return out_cols, pm


def _resolve_z0(model, start, z0_law):
    if z0_law is None:
        return DiscreteLaw.point(0.0)
    if isinstance(z0_law, InitialLaw):
        return z0_law.law_for(model.state_index(start))
    if isinstance(z0_law, DiscreteLaw):
        return z0_law
    return DiscreteLaw.point(float(z0_law))


class _BackwardFrontier:
    """Per-state weighted (pi, c) pairs after k steps from a fixed start.

    pi is the running coefficient product, c the accumulated backward sum;
    the backward value after k steps is pi * Z_0 + c.
    """

    def __init__(self, model, start, tol=MERGE_TOL, atom_cap=DEFAULT_ATOM_CAP):
        self.model = model
        self.tol = tol
        self.atom_cap = atom_cap
        start = model.state_index(start)
        self.states = {
            start: (np.array([1.0]), np.array([0.0]), np.array([1.0]))
        }

    def step(self):
        model = self.model
        new = {}
        for i, (pi, c, prob) in self.states.items():
            for j in range(model.n_states):
                p = model.transition[i, j]
                if p <= 0:
                    continue
                law = model.edge_laws[(i, j)]
                # outer product: existing pairs x edge atoms
                pi2 = (pi[:, None] * law.a[None, :]).ravel()
                c2 = (c[:, None] + pi[:, None] * law.b[None, :]).ravel()
                pr2 = (prob[:, None] * (p * law.weights)[None, :]).ravel()
                if j in new:
                    opi, oc, opr = new[j]
                    new[j] = (
                        np.concatenate([opi, pi2]),
                        np.concatenate([oc, c2]),
                        np.concatenate([opr, pr2]),
                    )
                else:
                    new[j] = (pi2, c2, pr2)
        total = 0
        merged = {}
        for j, (pi, c, prob) in new.items():
            (pi, c), prob = _cluster_rows([pi, c], prob, self.tol)
            merged[j] = (pi, c, prob)
            total += prob.size
        if total > self.atom_cap:
            raise ExplosionCap(total, self.atom_cap)
        self.states = merged

    def law(self, z0_law):
        """Fold Z_0 and the end state into the law of the backward value."""
        parts = []
        for j, (pi, c, prob) in sorted(self.states.items()):
            vals = (pi[:, None] * z0_law.values[None, :] + c[:, None]).ravel()
            mass = (prob[:, None] * z0_law.masses[None, :]).ravel()
            parts.append((vals, mass))
        values = np.concatenate([v for v, _ in parts])
        masses = np.concatenate([m for _, m in parts])
        return DiscreteLaw.from_atoms(values, masses, tol=self.tol)


def enumerate_backward(model, start, n, z0_law=None, *, tol=MERGE_TOL,
                       atom_cap=DEFAULT_ATOM_CAP, max_n=DEFAULT_MAX_N):
    """Exact law of the n-step backward iteration started at `start`."""
    if n > max_n:
        raise ExplosionCap(float("inf"), atom_cap)
    z0 = _resolve_z0(model, start, z0_law)
    frontier = _BackwardFrontier(model, start, tol, atom_cap)
    for _ in range(n):
        frontier.step()
    return frontier.law(z0)


def enumerate_backward_sequence(model, start, n_max, z0_law=None, *, tol=MERGE_TOL,
                                atom_cap=DEFAULT_ATOM_CAP):
    """Laws of the backward iteration for every n = 1..n_max (shared prefix work)."""
    z0 = _resolve_z0(model, start, z0_law)
    frontier = _BackwardFrontier(model, start, tol, atom_cap)
    out = []
    for _ in range(n_max):
        frontier.step()
        out.append(frontier.law(z0))
    return out


class _ForwardFrontier:
    """Per-state weighted value atoms of the forward chain R_k."""

    def __init__(self, model, start, z0_law, tol=MERGE_TOL, atom_cap=DEFAULT_ATOM_CAP):
        self.model = model
        self.tol = tol
        self.atom_cap = atom_cap
        start = model.state_index(start)
        self.states = {start: (z0_law.values.copy(), z0_law.masses.copy())}

    def step(self):
        model = self.model
        new = {}
        for i, (r, prob) in self.states.items():
            for j in range(model.n_states):
                p = model.transition[i, j]
                if p <= 0:
                    continue
                law = model.edge_laws[(i, j)]
                r2 = (law.a[None, :] * r[:, None] + law.b[None, :]).ravel()
                pr2 = (prob[:, None] * (p * law.weights)[None, :]).ravel()
                if j in new:
                    orr, opr = new[j]
                    new[j] = (np.concatenate([orr, r2]), np.concatenate([opr, pr2]))
                else:
                    new[j] = (r2, pr2)
        total = 0
        merged = {}
        for j, (r, prob) in new.items():
            (r,), prob = _cluster_rows([r], prob, self.tol)
            merged[j] = (r, prob)
            total += prob.size
        if total > self.atom_cap:
            raise ExplosionCap(total, self.atom_cap)
        self.states = merged

    def law(self):
        values = np.concatenate([r for r, _ in self.states.values()])
        masses = np.concatenate([p for _, p in self.states.values()])
        return DiscreteLaw.from_atoms(values, masses, tol=self.tol)


def enumerate_forward(model, start, n, z0_law=None, *, tol=MERGE_TOL,
                      atom_cap=DEFAULT_ATOM_CAP, max_n=DEFAULT_MAX_N):
    """Exact law of the n-step forward iteration started at `start`."""
    if n > max_n:
        raise ExplosionCap(float("inf"), atom_cap)
    z0 = _resolve_z0(model, start, z0_law)
    frontier = _ForwardFrontier(model, start, z0, tol, atom_cap)
    for _ in range(n):
        frontier.step()
    return frontier.law()


def enumerate_forward_sequence(model, start, n_max, z0_law=None, *, tol=MERGE_TOL,
                               atom_cap=DEFAULT_ATOM_CAP):
    z0 = _resolve_z0(model, start, z0_law)
    frontier = _ForwardFrontier(model, start, z0, tol, atom_cap)
    out = []
    for _ in range(n_max):
        frontier.step()
        out.append(frontier.law())
    return out


def law_under_pi(model, per_state_laws):
    """Mix per-start-state laws by the stationary distribution."""
    return mixture(
        [(model.pi[i], law) for i, law in enumerate(per_state_laws)]
    )


def enumerate_backward_pi(model, n, z0_law=None, **kw):
    return law_under_pi(
        model, [enumerate_backward(model, i, n, z0_law, **kw) for i in range(model.n_states)]
    )


def enumerate_forward_pi(model, n, z0_law=None, **kw):
    return law_under_pi(
        model, [enumerate_forward(model, i, n, z0_law, **kw) for i in range(model.n_states)]
    )


@dataclass(frozen=True)
class ExcursionLaw:
    """Exact joint law of (tau, A, B, W) over one return excursion, truncated.

    A is the coefficient product over the excursion, B the accumulated sum,
    W the running max of |Pi_{k-1} B_k|; tail_mass = P(tau > horizon).
    """

    anchor: int
    tau: np.ndarray
    a: np.ndarray
    b: np.ndarray
    w: np.ndarray
    prob: np.ndarray
    tail_mass: float

    @property
    def s_tau(self):
        with np.errstate(divide="ignore"):
            return -np.log(np.abs(self.a))

    def pi_is_one(self, tol=1e-12):
        return np.abs(np.abs(self.a) - 1.0) <= tol

    def tau_law(self):
        return DiscreteLaw.from_atoms(self.tau.astype(float), self.prob,
                                      tail_mass=self.tail_mass)

    def a_law(self):
        return DiscreteLaw.from_atoms(self.a, self.prob, tail_mass=self.tail_mass)

    def b_law(self):
        return DiscreteLaw.from_atoms(self.b, self.prob, tail_mass=self.tail_mass)

    def s_law(self):
        return DiscreteLaw.from_atoms(self.s_tau, self.prob, tail_mass=self.tail_mass)

    def total_mass(self):
        return float(self.prob.sum())


def excursion_law(model, anchor, horizon, *, tol=MERGE_TOL, atom_cap=DEFAULT_ATOM_CAP):
    """Enumerate all first-return excursions from `anchor` of length <= horizon."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    anchor = model.state_index(anchor)
    # live paths that have not yet returned: per state (pi, c, w, prob)
    live = {anchor: (np.array([1.0]), np.array([0.0]), np.array([0.0]), np.array([1.0]))}
    rec_tau, rec_a, rec_b, rec_w, rec_p = [], [], [], [], []
    for step in range(1, horizon + 1):
        new = {}
        for i, (pi, c, w, prob) in live.items():
            for j in range(model.n_states):
                p = model.transition[i, j]
                if p <= 0:
                    continue
                law = model.edge_laws[(i, j)]
                term = (pi[:, None] * law.b[None, :])
                pi2 = (pi[:, None] * law.a[None, :]).ravel()
                c2 = (c[:, None] + term).ravel()
                w2 = np.maximum(w[:, None], np.abs(term)).ravel()
                pr2 = (prob[:, None] * (p * law.weights)[None, :]).ravel()
                if j == anchor:
                    rec_tau.append(np.full(pr2.size, step))
                    rec_a.append(pi2)
                    rec_b.append(c2)
                    rec_w.append(w2)
                    rec_p.append(pr2)
                    continue
                if j in new:
                    o = new[j]
                    new[j] = tuple(np.concatenate([o[k], x])
                                   for k, x in enumerate((pi2, c2, w2, pr2)))
                else:
                    new[j] = (pi2, c2, w2, pr2)
        total = 0
        live = {}
        for j, (pi, c, w, prob) in new.items():
            (pi, c, w), prob = _cluster_rows([pi, c, w], prob, tol)
            live[j] = (pi, c, w, prob)
            total += prob.size
        if total > atom_cap:
            raise ExplosionCap(total, atom_cap)

    tail = sum(float(prob.sum()) for (_, _, _, prob) in live.values())
    if rec_tau:
        tau = np.concatenate(rec_tau).astype(np.int64)
        a = np.concatenate(rec_a)
        b = np.concatenate(rec_b)
        w = np.concatenate(rec_w)
        prob = np.concatenate(rec_p)
        # merge identical excursion atoms of the same length
        order = np.argsort(tau, kind="stable")
        parts = []
        for t in np.unique(tau):
            sel = tau == t
            (aa, bb, ww), pp = _cluster_rows([a[sel], b[sel], w[sel]], prob[sel], tol)
            parts.append((np.full(pp.size, t), aa, bb, ww, pp))
        tau = np.concatenate([p[0] for p in parts])
        a = np.concatenate([p[1] for p in parts])
        b = np.concatenate([p[2] for p in parts])
        w = np.concatenate([p[3] for p in parts])
        prob = np.concatenate([p[4] for p in parts])
    else:
        tau = np.zeros(0, dtype=np.int64)
        a = b = w = prob = np.zeros(0)
    return ExcursionLaw(anchor, tau, a, b, w, prob, tail)


def excursion_law_auto(model, anchor, *, tail_tol=1e-12, start_horizon=None,
                       max_horizon=4096, tol=MERGE_TOL, atom_cap=DEFAULT_ATOM_CAP):
    """Extend the horizon until the excursion tail mass falls below tail_tol."""
    h = start_horizon or max(4 * model.n_states, 8)
    while True:
        law = excursion_law(model, anchor, h, tol=tol, atom_cap=atom_cap)
        if law.tail_mass <= tail_tol or h >= max_horizon:
            return law
        h *= 2
