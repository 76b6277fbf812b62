"""The Markov-modulated affine system: driving chain plus per-edge coefficient laws.

A model is an ergodic (irreducible, aperiodic) finite chain with transition
matrix P and, on every edge with p_ij > 0, a finite-atom law for the affine
coefficients (a, b) of one step x -> a*x + b.  Exact mode is restricted to
finite state spaces and finite atom mixtures; countable-state examples are
served by generator mode in :mod:`perpetua.simulate`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from math import gcd, log

import numpy as np

from .laws import MERGE_TOL, DiscreteLaw, merge_atoms


class PerpetuaError(Exception):
    """Base class for package errors."""


class ModelError(PerpetuaError):
    """Invalid model definition."""


@dataclass(frozen=True)
class ModelIssue:
    code: str      # NotIrreducible | NotAperiodic | RowSumError | MissingEdgeLaw | BadWeights
    message: str

    def __str__(self):
        return f"{self.code}: {self.message}"


class ModelValidationError(ModelError):
    def __init__(self, issues):
        self.issues = list(issues)
        super().__init__("; ".join(str(i) for i in self.issues))


class SingularSystem(PerpetuaError):
    """Stationary solve failed; indicates a validation bug."""


class PreconditionError(PerpetuaError):
    """A regime precondition of the requested operation does not hold."""


@dataclass(frozen=True)
class StateId:
    index: int
    label: str


@dataclass(frozen=True)
class EdgeLaw:
    """Finite mixture of (a, b) coefficient pairs with positive weights."""

    weights: np.ndarray
    a: np.ndarray
    b: np.ndarray

    @staticmethod
    def from_atoms(atoms, tol=MERGE_TOL):
        """atoms: iterable of (weight, a, b)."""
        w = np.asarray([t[0] for t in atoms], dtype=float)
        a = np.asarray([t[1] for t in atoms], dtype=float)
        b = np.asarray([t[2] for t in atoms], dtype=float)
        w, a, b = _merge_pairs(w, a, b, tol)
        for arr in (w, a, b):
            arr.setflags(write=False)
        return EdgeLaw(w, a, b)

    @property
    def n_atoms(self):
        return int(self.weights.size)

    def atoms(self):
        return list(zip(self.weights, self.a, self.b))

    def check(self, tol=1e-12):
        issues = []
        if np.any(self.weights <= 0):
            issues.append("nonpositive weight")
        if abs(self.weights.sum() - 1.0) > tol:
            issues.append(f"weights sum to {self.weights.sum()!r}")
        return issues


def _merge_pairs(w, a, b, tol):
    """Fuse duplicate (a, b) atoms within tol; weight-preserving."""
    order = np.lexsort((b, a))
    w, a, b = w[order], a[order], b[order]
    if a.size > 1:
        dup = (np.abs(np.diff(a)) < tol) & (np.abs(np.diff(b)) < tol)
        if dup.any():
            new = np.concatenate(([True], ~dup))
            cl = np.cumsum(new) - 1
            n = cl[-1] + 1
            wm = np.zeros(n)
            am = np.zeros(n)
            bm = np.zeros(n)
            np.add.at(wm, cl, w)
            np.add.at(am, cl, a * w)
            np.add.at(bm, cl, b * w)
            return wm, am / wm, bm / wm
    return w, a, b


@dataclass(frozen=True)
class Model:
    """Validated system: states, transition matrix, edge laws, cached pi."""

    labels: tuple
    transition: np.ndarray
    edge_laws: dict          # (i, j) -> EdgeLaw, exactly where p_ij > 0
    pi: np.ndarray

    @property
    def n_states(self):
        return len(self.labels)

    @property
    def states(self):
        return [StateId(i, lab) for i, lab in enumerate(self.labels)]

    def state_index(self, state):
        if isinstance(state, StateId):
            return state.index
        if isinstance(state, str):
            return self.labels.index(state)
        return int(state)

    def edges(self):
        return sorted(self.edge_laws.keys())

    def edge_atoms(self):
        """Iterate (i, j, p_ij, weight, a, b) over all edge atoms."""
        for (i, j), law in sorted(self.edge_laws.items()):
            p = self.transition[i, j]
            for w, a, b in law.atoms():
                yield i, j, p, w, a, b

    def mean_log_abs_a(self):
        """E_pi log|A| -- the drift deciding contraction vs expansion."""
        total = 0.0
        for i, j, p, w, a, b in self.edge_atoms():
            total += self.pi[i] * p * w * log(abs(a))
        return total

    def to_json_dict(self):
        return {
            "states": list(self.labels),
            "transition": [[float(x) for x in row] for row in self.transition],
            "edges": [
                {
                    "from": self.labels[i],
                    "to": self.labels[j],
                    "atoms": [
                        {"w": float(w), "a": float(a), "b": float(b)}
                        for w, a, b in law.atoms()
                    ],
                }
                for (i, j), law in sorted(self.edge_laws.items())
            ],
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)
            fh.write("\n")


@dataclass(frozen=True)
class StandingAssumptionReport:
    a_never_zero: bool
    b_not_identically_zero: bool
    prob_a_zero: float
    prob_b_zero: float

    @property
    def holds(self):
        return self.a_never_zero and self.b_not_identically_zero


@dataclass(frozen=True)
class InitialLaw:
    """Per-state law of the admissible initial value, drawn given M_0."""

    per_state: dict  # state index -> DiscreteLaw

    @staticmethod
    def point(model, value):
        return InitialLaw({i: DiscreteLaw.point(value) for i in range(model.n_states)})

    @staticmethod
    def uniform_law(model, law):
        return InitialLaw({i: law for i in range(model.n_states)})

    def law_for(self, i):
        return self.per_state[i]

    def check(self):
        bad = [i for i, law in self.per_state.items() if not law.is_probability()]
        if bad:
            raise ModelError(f"initial law not a probability law at states {bad}")
        return self


def build(labels, transition, edge_laws, atol=1e-12):
    """Assemble and validate a model; see :func:`validate`."""
    return validate(labels, transition, edge_laws, atol=atol)


def validate(labels, transition, edge_laws, atol=1e-12):
    """Validate raw fields and return a Model with cached stationary law.

    All violations are collected and raised together as ModelValidationError.
    edge_laws maps (i, j) index pairs (or label pairs) to EdgeLaw or an
    atom list [(w, a, b), ...].
    """
    labels = tuple(str(x) for x in labels)
    P = np.array(transition, dtype=float)
    issues = []
    n = len(labels)
    if len(set(labels)) != n:
        issues.append(ModelIssue("BadWeights", "state labels not unique"))
    if P.shape != (n, n):
        raise ModelValidationError(
            [ModelIssue("RowSumError", f"transition shape {P.shape} != ({n},{n})")]
        )
    if np.any(P < 0):
        issues.append(ModelIssue("RowSumError", "negative transition probability"))
    rowsums = P.sum(axis=1)
    bad_rows = np.nonzero(np.abs(rowsums - 1.0) > atol)[0]
    for r in bad_rows:
        issues.append(ModelIssue("RowSumError", f"row {r} sums to {rowsums[r]!r}"))

    support = P > 0
    if not _strongly_connected(support):
        issues.append(ModelIssue("NotIrreducible", "transition graph not strongly connected"))
    elif _period(support) != 1:
        issues.append(
            ModelIssue("NotAperiodic", f"chain has period {_period(support)}")
        )

    laws = {}
    for key, law in edge_laws.items():
        i, j = key
        i = labels.index(i) if isinstance(i, str) else int(i)
        j = labels.index(j) if isinstance(j, str) else int(j)
        if not isinstance(law, EdgeLaw):
            law = EdgeLaw.from_atoms(law)
        laws[(i, j)] = law
        if not support[i, j]:
            issues.append(
                ModelIssue("MissingEdgeLaw", f"edge law given for p[{i},{j}] = 0")
            )
        for msg in law.check(atol):
            issues.append(ModelIssue("BadWeights", f"edge ({i},{j}): {msg}"))
    for i, j in zip(*np.nonzero(support)):
        if (i, j) not in laws:
            issues.append(
                ModelIssue("MissingEdgeLaw", f"no edge law for p[{i},{j}] > 0")
            )

    if issues:
        raise ModelValidationError(issues)

    model = Model(labels, P, laws, np.zeros(n))
    pi = stationary_distribution(model)
    pi.setflags(write=False)
    P.setflags(write=False)
    return Model(labels, P, laws, pi)


def _strongly_connected(support):
    n = support.shape[0]
    reach = _reachable(support, 0)
    reach_back = _reachable(support.T, 0)
    return bool(reach.all() and reach_back.all()) if n else False


def _reachable(support, start):
    n = support.shape[0]
    seen = np.zeros(n, dtype=bool)
    seen[start] = True
    stack = [start]
    while stack:
        u = stack.pop()
        for v in np.nonzero(support[u])[0]:
            if not seen[v]:
                seen[v] = True
                stack.append(v)
    return seen


def _period(support):
    """Period of an irreducible chain: gcd over edges of level[u]+1-level[v]."""
    n = support.shape[0]
    level = np.full(n, -1)
    level[0] = 0
    queue = [0]
    while queue:
        u = queue.pop(0)
        for v in np.nonzero(support[u])[0]:
            if level[v] < 0:
                level[v] = level[u] + 1
                queue.append(v)
    g = 0
    for u, v in zip(*np.nonzero(support)):
        g = gcd(g, int(level[u] + 1 - level[v]))
    return abs(g) if g else 1


def stationary_distribution(model):
    """Solve pi P = pi, sum(pi) = 1 by a direct pivoted linear solve."""
    P = model.transition
    n = P.shape[0]
    A = P.T - np.eye(n)
    A[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    try:
        pi = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc
    if np.any(pi <= 0):
        raise SingularSystem(f"stationary solve produced nonpositive entries: {pi}")
    return pi


def dual(model):
    """Time reversal: #p_ij = pi_j p_ji / pi_i, dual edge law (i,j) = original (j,i)."""
    P = model.transition
    pi = model.pi
    dual_P = (P.T * pi[None, :]) / pi[:, None]
    # rows sum to 1 up to rounding; renormalize to keep validate() happy
    dual_P = dual_P / dual_P.sum(axis=1, keepdims=True)
    dual_laws = {(j, i): law for (i, j), law in model.edge_laws.items()}
    return validate(model.labels, dual_P, dual_laws)


def check_standing_assumption(model):
    """Exact P_pi(A = 0) and P_pi(B = 0) from pi, P, and the edge atoms."""
    p_a0 = 0.0
    p_b0 = 0.0
    for i, j, p, w, a, b in model.edge_atoms():
        mass = model.pi[i] * p * w
        if a == 0.0:
            p_a0 += mass
        if b == 0.0:
            p_b0 += mass
    return StandingAssumptionReport(
        a_never_zero=(p_a0 == 0.0),
        b_not_identically_zero=(p_b0 < 1.0 - 1e-12),
        prob_a_zero=p_a0,
        prob_b_zero=p_b0,
    )


def from_json_dict(doc, atol=1e-12):
    labels = [str(x) for x in doc["states"]]
    P = doc["transition"]
    laws = {}
    for e in doc["edges"]:
        i = e["from"]
        j = e["to"]
        laws[(i, j)] = EdgeLaw.from_atoms([(a["w"], a["a"], a["b"]) for a in e["atoms"]])
    model = validate(labels, P, laws, atol=atol)
    initial = None
    if "initial_law" in doc:
        per_state = {
            model.state_index(k): DiscreteLaw.from_json_dict(v)
            for k, v in doc["initial_law"].items()
        }
        initial = InitialLaw(per_state).check()
    return model, initial


def load(path, atol=1e-12):
    with open(path) as fh:
        doc = json.load(fh)
    return from_json_dict(doc, atol=atol)
