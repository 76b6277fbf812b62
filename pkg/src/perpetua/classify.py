"""Stability-regime classification.

Decides, exactly and structurally for finite models, which fluctuation
regime the system inhabits: the random-walk trichotomy for S_n = -log|Pi_n|,
its embedded return-time analogue, null-homology with the potential g,
the integrability gauge J, the periodicity of the sign-adjusted return
time, and the sign-augmented chain on states x {+1,-1}.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import gcd

import numpy as np

from . import oracle
from .model import Model, PerpetuaError, PreconditionError

ZERO_MEAN_TOL = 1e-10
HOMOLOGY_TOL = 1e-10


class InsufficientSamples(PerpetuaError):
    pass


@dataclass(frozen=True)
class HomologyWitness:
    """Potential g with -log|a_ij| = g(j) - g(i) on every edge atom.

    a_scale[i] = exp(g(i)) so that |Pi_n| = a_scale[M_0]/a_scale[M_n];
    sigma (optional) carries sign homology: sign(a_ij) = sigma_j/sigma_i.
    """

    g: dict
    a_scale: dict
    sigma: object  # dict or None
    reference: int
    is_null_homologous: bool = True


@dataclass(frozen=True)
class NotNullHomologous:
    reason: str
    witness: object = None
    is_null_homologous: bool = False


@dataclass(frozen=True)
class TrichotomyTag:
    tag: str                  # T1/T2/T3 or T1p/T2p/T3p
    mean_log_abs_a: float
    homology: object
    note: str = ""


def null_homology(model, reference=0, tol=HOMOLOGY_TOL):
    """Exact null-homology check: point-mass |a| per edge plus cycle consistency."""
    edges = model.edges()
    log_abs = {}
    sign_of = {}
    for (i, j) in edges:
        law = model.edge_laws[(i, j)]
        mags = np.abs(law.a)
        if np.any(mags == 0.0):
            return NotNullHomologous("edge law contains a zero coefficient", (i, j))
        if mags.max() - mags.min() > tol * max(1.0, mags.max()):
            return NotNullHomologous(
                f"|a|-atoms on edge ({i},{j}) are not a point mass", (i, j)
            )
        log_abs[(i, j)] = float(np.log(mags[0]))
        signs = np.sign(law.a)
        sign_of[(i, j)] = int(signs[0]) if np.all(signs == signs[0]) else 0

    n = model.n_states
    g = {reference: 0.0}
    order = [reference]
    queue = [reference]
    while queue:
        u = queue.pop(0)
        for v in range(n):
            if model.transition[u, v] > 0 and v not in g:
                g[v] = g[u] - log_abs[(u, v)]
                order.append(v)
                queue.append(v)
    for (i, j) in edges:
        gap = abs((g[j] - g[i]) + log_abs[(i, j)])
        if gap > tol:
            return NotNullHomologous(
                f"cycle through edge ({i},{j}) has |product| != 1 "
                f"(log gap {gap:.3e})",
                (i, j),
            )

    sigma = None
    if all(s != 0 for s in sign_of.values()):
        sig = {reference: 1}
        queue = [reference]
        while queue:
            u = queue.pop(0)
            for v in range(n):
                if model.transition[u, v] > 0 and v not in sig:
                    sig[v] = sig[u] * sign_of[(u, v)]
                    queue.append(v)
        if all(sig[j] * sig[i] == sign_of[(i, j)] for (i, j) in edges):
            sigma = sig
    a_scale = {i: float(np.exp(g[i])) for i in g}
    return HomologyWitness(g, a_scale, sigma, reference)


def embedded_trichotomy(model, state=None, tol=ZERO_MEAN_TOL):
    """Regime of the return-time products Pi_{tau_n(i)}; the same for every i."""
    hom = null_homology(model)
    mean = model.mean_log_abs_a()
    if hom.is_null_homologous:
        return TrichotomyTag("T2p", mean, hom, "null-homologous")
    if mean < -tol:
        return TrichotomyTag("T1p", mean, hom, "contracting: E_pi log|A| < 0")
    note = ("expanding: E_pi log|A| > 0" if mean > tol
            else "oscillating: E_pi log|A| = 0 and not null-homologous")
    return TrichotomyTag("T3p", mean, hom, note)


def mrw_trichotomy(model, tol=ZERO_MEAN_TOL):
    """Full-sequence regime of S_n.

    For a finite state space with finitely many bounded atoms the
    within-excursion fluctuations are tight, so the full-sequence and
    embedded regimes coincide; the reduction is recorded in the note.
    """
    emb = embedded_trichotomy(model, tol=tol)
    tag = {"T1p": "T1", "T2p": "T2", "T3p": "T3"}[emb.tag]
    return TrichotomyTag(tag, emb.mean_log_abs_a, emb.homology,
                         emb.note + "; finite-model reduction from embedded regime")


def _positive_s_excursion_exists(model, anchor):
    """Is there a first-return excursion from anchor with S = -log|prod a| > 0?

    Exact graph computation: consider per-edge weight max over atoms of
    -log|a|.  A positive-weight cycle avoiding the anchor, or a positive
    total along some first-return walk, makes the answer yes.
    """
    n = model.n_states
    w = {}
    for (i, j) in model.edges():
        law = model.edge_laws[(i, j)]
        mags = np.abs(law.a)
        if np.any(mags == 0.0):
            return True  # S jumps to +infinity on this edge
        w[(i, j)] = float(np.max(-np.log(mags)))
    neg_inf = -np.inf
    # best[v] = max weight of a walk anchor -> v avoiding a revisit of anchor
    best = np.full(n, neg_inf)
    best_return = neg_inf
    for (i, j), wt in w.items():
        if i == anchor:
            if j == anchor:
                best_return = max(best_return, wt)
            else:
                best[j] = max(best[j], wt)
    # relax: positive cycles in S \ {anchor} reveal themselves as growth
    for sweep in range(2 * n + 2):
        changed = False
        for (i, j), wt in w.items():
            if i == anchor or best[i] == neg_inf:
                continue
            if j == anchor:
                if best[i] + wt > best_return:
                    best_return = best[i] + wt
                    changed = True
            elif best[i] + wt > best[j] + 1e-15:
                if sweep >= n:
                    return True  # still improving: positive cycle off-anchor
                best[j] = best[i] + wt
                changed = True
        if not changed:
            break
    return best_return > 1e-12


def j_function(model, anchor, x, excursion=None, tail_tol=1e-12):
    """The integrability gauge J_anchor evaluated at x >= 0.

    J(0) = 1; J(x) = x when no positive-S excursion exists; otherwise
    J(x) = x / E(S_tau^+ minimum x), where the expectation comes from the
    exact truncated excursion law (tail contributes at most tail_mass * x).
    """
    anchor = model.state_index(anchor)
    if x < 0:
        raise ValueError("J is defined on x >= 0")
    if x == 0:
        return 1.0
    hom = null_homology(model)
    if hom.is_null_homologous:
        return float(x)  # S_tau = 0 a.s.
    if not _positive_s_excursion_exists(model, anchor):
        return float(x)  # P(S_tau <= 0) = 1
    if excursion is None:
        excursion = oracle.excursion_law_auto(model, anchor, tail_tol=tail_tol)
    s = excursion.s_tau
    denom = float(np.sum(excursion.prob * np.minimum(np.maximum(s, 0.0), x)))
    # truncated part can add at most tail_mass * x
    denom = max(denom, 1e-300)
    return float(x / denom)


@dataclass(frozen=True)
class JMomentReport:
    anchor: int
    which: str            # "W" or "B"
    verdict: str          # "finite (structural)" or "monte-carlo estimate"
    estimate: float
    tail_mass: float
    note: str = ""


def j_moment_test(model, anchor, which="W", tail_tol=1e-10, mc_samples=None,
                  seed=0):
    """Estimate E J(log+ W) or E J(log+ |B|) over one excursion.

    Finite models: structurally finite (bounded atoms, geometric return
    tails) with an exact truncated estimate.  Generator models: Monte Carlo
    estimate from sampled excursions.
    """
    if isinstance(model, Model):
        anchor = model.state_index(anchor)
        exc = oracle.excursion_law_auto(model, anchor, tail_tol=tail_tol)
        vals = exc.w if which == "W" else np.abs(exc.b)
        logs = np.log(np.maximum(vals, 1.0))
        jvals = np.array([j_function(model, anchor, float(v), excursion=exc)
                          for v in logs])
        est = float(np.sum(exc.prob * jvals))
        return JMomentReport(anchor, which, "finite (structural)", est,
                             exc.tail_mass,
                             "bounded atoms + geometric return tails")
    from . import simulate

    count = mc_samples or 10_000
    if count < 100:
        raise InsufficientSamples(f"{count} excursions is too few")
    samples = simulate.sample_excursions(model, anchor, count, seed=seed)
    vals = samples.w if which == "W" else np.abs(samples.b)
    logs = np.log(np.maximum(vals, 1.0))
    splus = np.maximum(samples.s_tau, 0.0)
    if np.all(splus <= 0):
        jvals = logs  # J(x) = x when S_tau <= 0 a.s.
    else:
        denom = np.array([np.mean(np.minimum(splus, x)) for x in logs])
        jvals = np.where(logs > 0, logs / np.maximum(denom, 1e-300), 1.0)
    est = float(np.mean(jvals))
    return JMomentReport(int(anchor) if anchor is not None else -1, which,
                         "monte-carlo estimate", est, 0.0,
                         f"{count} sampled excursions")


@dataclass(frozen=True)
class HatTauReport:
    anchor: int
    period: int               # 1 (aperiodic) or 2
    p_plus: float             # P_anchor(A_1^anchor = +1)
    p_minus: float
    all_returns_odd: bool


def hat_tau_periodicity(model, anchor, tol=1e-12):
    """Lattice type of the first return with unit product (T2p regime only).

    The return time to (anchor, +1) in the sign-augmented chain is
    2-periodic exactly when every first return flips the sign and every
    first-return length is odd; otherwise it is aperiodic.
    """
    emb = embedded_trichotomy(model)
    if emb.tag != "T2p":
        raise PreconditionError("hat-tau periodicity is defined in the T2p regime")
    anchor = model.state_index(anchor)
    plus_reachable, even_reachable = _first_return_sign_parity(model, anchor)
    p_plus = _first_return_plus_probability(model, anchor)
    period = 2 if (not plus_reachable and not even_reachable) else 1
    return HatTauReport(anchor, period, p_plus, 1.0 - p_plus, not even_reachable)


def _edge_sign_branches(model, i, j):
    law = model.edge_laws[(i, j)]
    out = {}
    for w, a, b in law.atoms():
        s = 1 if a > 0 else -1
        out[s] = out.get(s, 0.0) + w
    return out


def _first_return_sign_parity(model, anchor):
    """Reachability of (sign=+1) and (even length) among first returns to anchor."""
    n = model.n_states
    seen = set()
    returns = set()
    stack = []
    for j in range(n):
        if model.transition[anchor, j] <= 0:
            continue
        for s, w in _edge_sign_branches(model, anchor, j).items():
            if j == anchor:
                returns.add((s, 1 % 2))
            else:
                node = (j, s, 1 % 2)
                if node not in seen:
                    seen.add(node)
                    stack.append(node)
    while stack:
        u, s, par = stack.pop()
        for v in range(n):
            if model.transition[u, v] <= 0:
                continue
            for sv, w in _edge_sign_branches(model, u, v).items():
                s2, par2 = s * sv, (par + 1) % 2
                if v == anchor:
                    returns.add((s2, par2))
                else:
                    node = (v, s2, par2)
                    if node not in seen:
                        seen.add(node)
                        stack.append(node)
    plus_reachable = any(s == 1 for s, _ in returns)
    even_reachable = any(p == 0 for _, p in returns)
    return plus_reachable, even_reachable


def _first_return_plus_probability(model, anchor):
    """Exact P(first return to anchor arrives with positive product sign).

    h[j] = P(sign of the product accumulated from j until first hitting the
    anchor is +1); one linear solve over the non-anchor states.
    """
    n = model.n_states
    others = [j for j in range(n) if j != anchor]
    idx = {j: k for k, j in enumerate(others)}
    m = len(others)
    A = np.eye(m)
    rhs = np.zeros(m)
    for u in others:
        for v in range(n):
            p = model.transition[u, v]
            if p <= 0:
                continue
            for s, w in _edge_sign_branches(model, u, v).items():
                if v == anchor:
                    rhs[idx[u]] += p * w * (1.0 if s == 1 else 0.0)
                elif s == 1:
                    A[idx[u], idx[v]] -= p * w
                else:
                    # sign flips: remaining success prob is 1 - h[v]
                    A[idx[u], idx[v]] += p * w
                    rhs[idx[u]] += p * w
    h = np.linalg.solve(A, rhs) if m else np.zeros(0)
    p_plus = 0.0
    for v in range(n):
        p = model.transition[anchor, v]
        if p <= 0:
            continue
        for s, w in _edge_sign_branches(model, anchor, v).items():
            if v == anchor:
                p_plus += p * w * (1.0 if s == 1 else 0.0)
            else:
                hv = h[idx[v]]
                p_plus += p * w * (hv if s == 1 else 1.0 - hv)
    return float(p_plus)


@dataclass(frozen=True)
class AugmentedSignChain:
    """The chain (M_n, sign(Pi_n)) restricted to its closed communicating class."""

    pair_states: list          # [(state, sign), ...] for the closed class
    transition: np.ndarray     # row-stochastic on pair_states
    stationary: dict           # (state, sign) -> mass
    period: int
    cyclic_classes: list       # [frozenset of pair states]; singleton list if aperiodic

    def class_of(self, pair):
        for cls in self.cyclic_classes:
            if pair in cls:
                return cls
        raise KeyError(pair)


def augmented_sign_chain(model, reference=0, tol=1e-12):
    """Build (M_n, sign(Pi_n)) from (reference, +1); T2p regime only."""
    emb = embedded_trichotomy(model)
    if emb.tag != "T2p":
        raise PreconditionError("sign-augmented chain is analyzed in the T2p regime")
    reference = model.state_index(reference)
    n = model.n_states

    def moves(pair):
        i, s = pair
        for j in range(n):
            p = model.transition[i, j]
            if p <= 0:
                continue
            for sv, w in _edge_sign_branches(model, i, j).items():
                yield (j, s * sv), p * w

    start = (reference, 1)
    closed = {start}
    stack = [start]
    while stack:
        u = stack.pop()
        for v, _ in moves(u):
            if v not in closed:
                closed.add(v)
                stack.append(v)
    pairs = sorted(closed)
    idx = {p: k for k, p in enumerate(pairs)}
    m = len(pairs)
    T = np.zeros((m, m))
    for u in pairs:
        for v, p in moves(u):
            T[idx[u], idx[v]] += p

    A = T.T - np.eye(m)
    A[-1, :] = 1.0
    rhs = np.zeros(m)
    rhs[-1] = 1.0
    stat = np.linalg.solve(A, rhs)

    level = {pairs[0]: 0}
    queue = [pairs[0]]
    while queue:
        u = queue.pop(0)
        for v, _ in moves(u):
            if v not in level:
                level[v] = level[u] + 1
                queue.append(v)
    g = 0
    for u in pairs:
        for v, _ in moves(u):
            g = gcd(g, level[u] + 1 - level[v])
    period = abs(g) if g else 1
    if period == 1:
        classes = [frozenset(pairs)]
    else:
        classes = [
            frozenset(p for p in pairs if level[p] % period == r)
            for r in range(period)
        ]
    stationary = {p: float(stat[idx[p]]) for p in pairs}
    return AugmentedSignChain(pairs, T, stationary, period, classes)


def classification_report(model, anchor=0):
    """Bundle of all classifier outputs for one model (CLI payload)."""
    emb = embedded_trichotomy(model)
    mrw = mrw_trichotomy(model)
    hom = emb.homology
    report = {
        "embedded_tag": emb.tag,
        "mrw_tag": mrw.tag,
        "mean_log_abs_a": emb.mean_log_abs_a,
        "note": emb.note,
        "homology": (
            {
                "null_homologous": True,
                "g": {model.labels[i]: v for i, v in hom.g.items()},
                "sigma": None if hom.sigma is None
                else {model.labels[i]: v for i, v in hom.sigma.items()},
            }
            if hom.is_null_homologous
            else {"null_homologous": False, "reason": hom.reason}
        ),
    }
    jm = j_moment_test(model, anchor, which="W")
    report["j_moment"] = {
        "which": jm.which, "verdict": jm.verdict,
        "estimate": jm.estimate, "tail_mass": jm.tail_mass,
    }
    if emb.tag == "T2p":
        ht = hat_tau_periodicity(model, anchor)
        chain = augmented_sign_chain(model, anchor)
        report["hat_tau"] = {
            "period": ht.period, "p_plus": ht.p_plus, "p_minus": ht.p_minus,
            "all_returns_odd": ht.all_returns_odd,
        }
        report["sign_chain"] = {
            "period": chain.period,
            "stationary": {
                f"{model.labels[i]}{'+' if s > 0 else '-'}": m
                for (i, s), m in sorted(chain.stationary.items())
            },
        }
    else:
        report["hat_tau"] = None
        report["sign_chain"] = None
    return report
