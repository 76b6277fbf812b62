"""Monte Carlo trajectory engine.

Vectorized backward/forward iteration sampling for finite models, a
generator mode for countable-state systems (opaque per-step samplers),
excursion sampling, truncated perpetuity sampling, and the divergence
diagnostic.  All randomness comes from counter-based Philox streams keyed
by (seed, stream id), so runs are bit-reproducible and independent of any
internal parallelism.

Running coefficient products can leave float range in expanding regimes;
scalar paths therefore track a sign/mantissa/exponent/log-residual
decomposition (:class:`SignedProduct`) that never overflows and keeps
power-of-two products exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .laws import DiscreteLaw
from .model import InitialLaw, Model, PerpetuaError, PreconditionError

_MASK64 = (1 << 64) - 1

# stream ids: keep purposes disjoint so one seed drives unrelated draws
STREAM_BACKWARD = 1
STREAM_FORWARD = 2
STREAM_EXCURSION = 3
STREAM_PERPETUITY = 4
STREAM_DIVERGENCE = 5
_STREAM_TRAJECTORY = 6 << 48


class NumericOverflow(PerpetuaError):
    pass


class ExcursionTimeout(PerpetuaError):
    def __init__(self, cap, n_timed_out, n_total):
        self.cap = cap
        self.n_timed_out = n_timed_out
        self.n_total = n_total
        super().__init__(
            f"{n_timed_out}/{n_total} excursions exceeded the {cap}-step cap"
        )


class NotConvergentRegime(PerpetuaError):
    pass


def philox_stream(seed, stream):
    """Counter-based generator keyed by (seed, stream)."""
    key = np.array([seed & _MASK64, stream & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


class SignedProduct:
    """Running product sign * mant * 2**exp2 * exp(log_res), immune to overflow.

    Plain factors fold into (mant, exp2) by frexp, so products of dyadic
    rationals stay exact; log-space factors accumulate in log_res.  The
    mantissa is kept in [0.5, 1).
    """

    __slots__ = ("sign", "mant", "exp2", "log_res")

    def __init__(self, sign=1, mant=0.5, exp2=1, log_res=0.0):
        self.sign = sign
        self.mant = mant
        self.exp2 = exp2
        self.log_res = log_res

    def copy(self):
        return SignedProduct(self.sign, self.mant, self.exp2, self.log_res)

    def mul(self, a):
        if a == 0.0:
            self.sign = 0
            self.mant = 0.0
            return self
        if a < 0.0:
            self.sign = -self.sign
            a = -a
        m, e = math.frexp(a)
        self.mant *= m
        self.exp2 += e
        if self.mant < 0.5:
            self.mant *= 2.0
            self.exp2 -= 1
        return self

    def mul_log(self, mantissa, log_term):
        """Multiply by mantissa * exp(log_term)."""
        self.log_res += log_term
        return self.mul(mantissa)

    def mul_product(self, other):
        self.log_res += other.log_res
        self.sign *= other.sign
        self.mant *= other.mant
        self.exp2 += other.exp2
        while self.mant and self.mant < 0.5:
            self.mant *= 2.0
            self.exp2 -= 1
        return self

    def log_abs(self):
        if self.sign == 0:
            return -math.inf
        return math.log(self.mant) + self.exp2 * math.log(2.0) + self.log_res

    def to_float(self):
        if self.sign == 0:
            return 0.0
        la = self.log_abs()
        if la > 709.0:
            return math.inf * self.sign
        try:
            return self.sign * self.mant * math.exp(self.log_res) * 2.0 ** self.exp2
        except OverflowError:
            return math.inf * self.sign

    def times_float(self, x):
        """Return self * x as a float (overflow -> inf)."""
        return self.copy().mul(x).to_float() if x != 0.0 else 0.0

    def is_one(self, tol=1e-12):
        return self.sign > 0 and abs(self.log_abs()) <= tol


@dataclass
class GeneratorModel:
    """Simulation-only model: an opaque per-step sampler on a countable space.

    ``sample_step(state, rng)`` returns ``(next_state, a, b)``, or, when
    ``log_space`` is set, ``(next_state, a_mant, a_log, b_mant, b_log)``
    meaning a = a_mant*exp(a_log), b = b_mant*exp(b_log) -- the form needed
    when raw coefficients exceed float range.
    """

    sample_step: object
    start_state: object = 0
    log_space: bool = False
    label: str = "generator"


@dataclass
class FlowerGenerator:
    """Hub-and-petal chain on {0, 1, 2, ...} with geometrically decaying
    petal probabilities: from the hub stay put w.p. p00 or enter petal i
    w.p. (1-p00)*(1-q)*q**(i-1); petals always return to the hub.

    Coefficients are chosen so each petal excursion multiplies the running
    product by exactly 1/2 while the within-petal factor exp(1/p_0i) blows
    up rapidly for deep petals, so the product at hub-return times tends to
    zero although its running maximum is unbounded.
    """

    p00: float = 0.5
    q: float = 0.5
    start_state: int = 0
    log_space: bool = True
    label: str = "flower"

    def petal_probability(self, i):
        return (1.0 - self.p00) * (1.0 - self.q) * self.q ** (i - 1)

    def sample_step(self, state, rng):
        if state == 0:
            if rng.random() < self.p00:
                return 0, 1.0, 0.0, 1.0, 0.0          # a = 1, b = 1
            i = int(rng.geometric(1.0 - self.q))
            x = 1.0 / self.petal_probability(i)
            return i, 1.0, x, 1.0, 0.0                # a = e^x, b = 1
        x = 1.0 / self.petal_probability(state)
        return 0, 0.5, -x, 1.0, -x                    # a = e^-x/2, b = e^-x


@dataclass
class SampleSet:
    """Replica values of one functional, with overflow accounting."""

    values: np.ndarray
    overflow: np.ndarray
    seed: int
    stream: int
    n_steps: int
    start: object
    meta: dict = field(default_factory=dict)

    @property
    def n_overflow(self):
        return int(self.overflow.sum())

    def finite_values(self):
        return self.values[~self.overflow]

    def law(self, max_atoms=None):
        return DiscreteLaw.from_samples(self.finite_values(), max_atoms=max_atoms)


class _Tables:
    """Precomputed lookup tables for vectorized finite-model stepping."""

    def __init__(self, model):
        S = model.n_states
        self.n_states = S
        self.cumP = np.cumsum(model.transition, axis=1)
        self.cumP[:, -1] = 1.0
        edges = model.edges()
        self.edge_id = np.full((S, S), -1, dtype=np.int64)
        K = max(model.edge_laws[e].n_atoms for e in edges)
        E = len(edges)
        self.cumW = np.ones((E, K))
        self.A = np.zeros((E, K))
        self.B = np.zeros((E, K))
        self.n_atoms = np.zeros(E, dtype=np.int64)
        for e, (i, j) in enumerate(edges):
            law = model.edge_laws[(i, j)]
            k = law.n_atoms
            self.edge_id[i, j] = e
            self.cumW[e, :k] = np.cumsum(law.weights)
            self.cumW[e, k - 1:] = 1.0
            self.A[e, :k] = law.a
            self.A[e, k:] = law.a[-1]
            self.B[e, :k] = law.b
            self.B[e, k:] = law.b[-1]
        self.single_atom = bool(K == 1)

    def step(self, states, rng):
        if self.n_states == 1:
            nxt = states
            e = 0
            if self.single_atom:
                return nxt, np.full(states.size, self.A[0, 0]), np.full(states.size, self.B[0, 0])
            u2 = rng.random(states.size)
            k = (self.cumW[0][None, :] < u2[:, None]).sum(axis=1)
            return nxt, self.A[0, k], self.B[0, k]
        u1 = rng.random(states.size)
        nxt = (self.cumP[states] < u1[:, None]).sum(axis=1)
        e = self.edge_id[states, nxt]
        if self.single_atom:
            k = np.zeros(states.size, dtype=np.int64)
        else:
            u2 = rng.random(states.size)
            k = (self.cumW[e] < u2[:, None]).sum(axis=1)
        return nxt, self.A[e, k], self.B[e, k]


def sample_law(law, rng, size):
    """Draw from a DiscreteLaw by inverse transform."""
    cum = np.cumsum(law.masses)
    cum[-1] = max(cum[-1], 1.0)
    idx = np.searchsorted(cum, rng.random(size), side="right")
    return law.values[np.minimum(idx, law.values.size - 1)]


def _resolve_z0_sampler(model_like, start, z0):
    if z0 is None:
        return lambda rng, size: np.zeros(size)
    if isinstance(z0, InitialLaw):
        law = z0.law_for(model_like.state_index(start))
        return lambda rng, size: sample_law(law, rng, size)
    if isinstance(z0, DiscreteLaw):
        return lambda rng, size: sample_law(z0, rng, size)
    if callable(z0):
        return z0
    return lambda rng, size: np.full(size, float(z0))


def run_backward(model, start, n, z0=None, replicas=1, seed=0):
    """Sample the n-step backward value Pi_n Z_0 + sum Pi_{k-1} B_k, replicated."""
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    rng = philox_stream(seed, STREAM_BACKWARD)
    if isinstance(model, GeneratorModel) or not isinstance(model, Model):
        return _run_generator(model, start, n, z0, replicas, rng, backward=True,
                              seed=seed, stream=STREAM_BACKWARD)
    start_i = model.state_index(start)
    draw_z0 = _resolve_z0_sampler(model, start_i, z0)
    z0v = draw_z0(rng, replicas).astype(float)
    tbl = _Tables(model)
    states = np.full(replicas, start_i, dtype=np.int64)
    pi = np.ones(replicas)
    acc = np.zeros(replicas)
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(n):
            states, a, b = tbl.step(states, rng)
            acc += pi * b
            pi = pi * a
        values = pi * z0v + acc
    overflow = ~np.isfinite(values)
    return SampleSet(values, overflow, seed, STREAM_BACKWARD, n, start,
                     meta={"final_states": states})


def run_forward(model, start, n, z0=None, replicas=1, seed=0):
    """Sample the n-step forward value Psi_n(...Psi_1(Z_0)), replicated."""
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    rng = philox_stream(seed, STREAM_FORWARD)
    if isinstance(model, GeneratorModel) or not isinstance(model, Model):
        return _run_generator(model, start, n, z0, replicas, rng, backward=False,
                              seed=seed, stream=STREAM_FORWARD)
    start_i = model.state_index(start)
    draw_z0 = _resolve_z0_sampler(model, start_i, z0)
    r = draw_z0(rng, replicas).astype(float)
    tbl = _Tables(model)
    states = np.full(replicas, start_i, dtype=np.int64)
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(n):
            states, a, b = tbl.step(states, rng)
            r = a * r + b
    overflow = ~np.isfinite(r)
    return SampleSet(r, overflow, seed, STREAM_FORWARD, n, start,
                     meta={"final_states": states})


def _generator_step(gen, state, rng):
    """Uniform view of one generator step: (next, a_mant, a_log, b_mant, b_log)."""
    out = gen.sample_step(state, rng)
    if gen.log_space:
        return out
    nxt, a, b = out
    return nxt, a, 0.0, b, 0.0


def _run_generator(gen, start, n, z0, replicas, rng, backward, seed, stream):
    values = np.empty(replicas)
    overflow = np.zeros(replicas, dtype=bool)
    draw_z0 = _resolve_z0_sampler(gen, start, z0)
    z0v = draw_z0(rng, replicas)
    for r in range(replicas):
        state = start if start is not None else gen.start_state
        if backward:
            pi = SignedProduct()
            acc = 0.0
            for _ in range(n):
                state, am, al, bm, bl = _generator_step(gen, state, rng)
                acc += pi.copy().mul_log(bm, bl).to_float()
                pi.mul_log(am, al)
            val = acc + pi.times_float(z0v[r])
        else:
            val = z0v[r]
            for _ in range(n):
                state, am, al, bm, bl = _generator_step(gen, state, rng)
                a = SignedProduct().mul_log(am, al).to_float()
                b = SignedProduct().mul_log(bm, bl).to_float()
                val = a * val + b
        values[r] = val
        overflow[r] = not math.isfinite(val)
    return SampleSet(values, overflow, seed, stream, n, start)


@dataclass
class Trajectory:
    """One path with per-step records; pi is tracked overflow-safely."""

    rng_stream_id: int
    states: np.ndarray      # length n+1
    a: np.ndarray
    b: np.ndarray
    pi: np.ndarray          # pi[k] = prod a_1..a_k (float view, may be inf)
    s: np.ndarray           # s[k] = -log|pi_k|
    z_backward: np.ndarray  # backward value after k steps (z0 = 0)
    z_forward: np.ndarray


def trajectory(model, start, n, seed=0, replica_id=0, z0=0.0):
    """Simulate a single path with full per-step records (finite models)."""
    rng = philox_stream(seed, _STREAM_TRAJECTORY | replica_id)
    start = model.state_index(start)
    tbl = _Tables(model)
    states = np.empty(n + 1, dtype=np.int64)
    a = np.empty(n)
    b = np.empty(n)
    pi = np.empty(n + 1)
    s = np.empty(n + 1)
    zb = np.empty(n + 1)
    zf = np.empty(n + 1)
    states[0] = start
    pi[0] = 1.0
    s[0] = 0.0
    zb[0] = z0
    zf[0] = z0
    prod = SignedProduct()
    acc = 0.0
    st = np.array([start], dtype=np.int64)
    for k in range(1, n + 1):
        st, ak, bk = tbl.step(st, rng)
        states[k] = st[0]
        a[k - 1] = ak[0]
        b[k - 1] = bk[0]
        acc += prod.times_float(bk[0])
        zf[k] = ak[0] * zf[k - 1] + bk[0]
        prod.mul(ak[0])
        pi[k] = prod.to_float()
        s[k] = -prod.log_abs()
        zb[k] = acc + prod.times_float(z0)
    return Trajectory(_STREAM_TRAJECTORY | replica_id, states, a, b, pi, s, zb, zf)


@dataclass
class ExcursionSample:
    """One return excursion to the anchor state."""

    tau: int
    a_i: float
    b_i: float
    w_i: float
    s_tau: float
    pi_is_one: bool


@dataclass
class ExcursionSampleSet:
    anchor: object
    tau: np.ndarray
    a: np.ndarray
    b: np.ndarray
    w: np.ndarray
    seed: int
    count: int
    step_cap: int
    max_log_abs_pi: float = math.nan   # running max of log|Pi_n| (sequential modes)

    @property
    def s_tau(self):
        with np.errstate(divide="ignore"):
            return -np.log(np.abs(self.a))

    def pi_is_one(self, tol=1e-12):
        return np.abs(np.abs(self.a) - 1.0) <= tol

    def samples(self):
        flags = self.pi_is_one()
        s = self.s_tau
        return [
            ExcursionSample(int(self.tau[k]), float(self.a[k]), float(self.b[k]),
                            float(self.w[k]), float(s[k]), bool(flags[k]))
            for k in range(self.tau.size)
        ]

    def tau_hat_empirical(self, tol=1e-12):
        """First k with prod_{m<=k} A_m^i = 1, reading the samples in order.

        Returns (rho, tau_hat): excursion count and total steps; (None, None)
        if the product never returns to one within the sample.
        """
        prod = SignedProduct()
        steps = 0
        for k in range(self.tau.size):
            prod.mul(float(self.a[k]))
            steps += int(self.tau[k])
            if prod.is_one(tol):
                return k + 1, steps
        return None, None


def sample_excursions(model, anchor, count, seed=0, step_cap=10**6):
    """Draw `count` iid first-return excursions to `anchor` under P_anchor."""
    rng = philox_stream(seed, STREAM_EXCURSION)
    if isinstance(model, GeneratorModel) or not isinstance(model, Model):
        return _sample_excursions_generator(model, anchor, count, rng, seed, step_cap)
    anchor_i = model.state_index(anchor)
    tbl = _Tables(model)
    states = np.full(count, anchor_i, dtype=np.int64)
    active = np.ones(count, dtype=bool)
    pi = np.ones(count)
    acc = np.zeros(count)
    wmax = np.zeros(count)
    tau = np.zeros(count, dtype=np.int64)
    out_a = np.empty(count)
    out_b = np.empty(count)
    out_w = np.empty(count)
    out_tau = np.zeros(count, dtype=np.int64)
    steps = 0
    with np.errstate(over="ignore", invalid="ignore"):
        while active.any():
            if steps >= step_cap:
                raise ExcursionTimeout(step_cap, int(active.sum()), count)
            states, a, b = tbl.step(states, rng)
            steps += 1
            term = pi * b
            acc = np.where(active, acc + term, acc)
            wmax = np.where(active, np.maximum(wmax, np.abs(term)), wmax)
            pi = np.where(active, pi * a, pi)
            tau = np.where(active, tau + 1, tau)
            done = active & (states == anchor_i)
            if done.any():
                out_a[done] = pi[done]
                out_b[done] = acc[done]
                out_w[done] = wmax[done]
                out_tau[done] = tau[done]
                active &= ~done
    return ExcursionSampleSet(anchor, out_tau, out_a, out_b, out_w, seed, count, step_cap)


def _sample_excursions_generator(gen, anchor, count, rng, seed, step_cap):
    """Sequential excursions cut from one trajectory started at the anchor.

    Successive first-return excursions are iid under P_anchor, and the
    per-excursion product restarts from an exact unit, so dyadic excursion
    factors (e.g. the flower chain's 1/2 per petal) come out exact.
    """
    anchor = gen.start_state if anchor is None else anchor
    taus = np.empty(count, dtype=np.int64)
    a_out = np.empty(count)
    b_out = np.empty(count)
    w_out = np.empty(count)
    log_pi_at_anchor = 0.0
    max_log_pi = 0.0
    total_steps = 0
    for k in range(count):
        state = anchor
        prod = SignedProduct()
        acc = 0.0
        wmax = 0.0
        tau = 0
        while True:
            if total_steps >= step_cap:
                raise ExcursionTimeout(step_cap, 1, count)
            state, am, al, bm, bl = _generator_step(gen, state, rng)
            total_steps += 1
            tau += 1
            term = prod.copy().mul_log(bm, bl).to_float()
            acc += term
            wmax = max(wmax, abs(term))
            prod.mul_log(am, al)
            max_log_pi = max(max_log_pi, log_pi_at_anchor + prod.log_abs())
            if state == anchor:
                break
        taus[k] = tau
        a_out[k] = prod.to_float()
        b_out[k] = acc
        w_out[k] = wmax
        log_pi_at_anchor += prod.log_abs()
    return ExcursionSampleSet(anchor, taus, a_out, b_out, w_out, seed, count,
                              step_cap, max_log_abs_pi=max_log_pi)


def perpetuity_samples(model, count, horizon, seed=0, start=None):
    """Sample truncated perpetuities sum_{k<=horizon} Pi_{k-1} B_k.

    Requires the a.s.-convergent regime; the largest |Pi_horizon| observed
    is reported as a residual proxy for the truncation error.
    """
    from . import classify

    tag = classify.embedded_trichotomy(model)
    if tag.tag != "T1p":
        raise NotConvergentRegime(
            f"perpetuity requires the contracting regime, got {tag.tag}"
        )
    rng = philox_stream(seed, STREAM_PERPETUITY)
    if start is None:
        starts = np.searchsorted(np.cumsum(model.pi), rng.random(count), side="right")
        starts = np.minimum(starts, model.n_states - 1).astype(np.int64)
    else:
        starts = np.full(count, model.state_index(start), dtype=np.int64)
    tbl = _Tables(model)
    states = starts.copy()
    pi = np.ones(count)
    acc = np.zeros(count)
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(horizon):
            states, a, b = tbl.step(states, rng)
            acc += pi * b
            pi = pi * a
    overflow = ~np.isfinite(acc)
    residual = float(np.max(np.abs(pi[np.isfinite(pi)]), initial=0.0))
    return SampleSet(acc, overflow, seed, STREAM_PERPETUITY, horizon, start,
                     meta={"start_states": starts, "residual_pi_max": residual})


def divergence_diagnostic(model, window, replicas=10_000, seed=0, x=1.0):
    """Empirical P_pi(|S_n| <= x) at the window checkpoints.

    Valid only for models that are not null-homologous, where |S_n| tends
    to infinity in probability and the report should show a decaying trend.
    """
    from . import classify

    hom = classify.null_homology(model)
    if hom.is_null_homologous:
        raise PreconditionError("model is null-homologous; |S_n| does not diverge")
    window = sorted(int(n) for n in window)
    rng = philox_stream(seed, STREAM_DIVERGENCE)
    starts = np.searchsorted(np.cumsum(model.pi), rng.random(replicas), side="right")
    states = np.minimum(starts, model.n_states - 1).astype(np.int64)
    tbl = _Tables(model)
    s = np.zeros(replicas)
    probs = {}
    step = 0
    for checkpoint in window:
        while step < checkpoint:
            states, a, b = tbl.step(states, rng)
            s -= np.log(np.abs(a))
            step += 1
        probs[checkpoint] = float(np.mean(np.abs(s) <= x))
    vals = [probs[n] for n in window]
    return {
        "x": x,
        "window": window,
        "prob_small": probs,
        "decreasing": all(v2 < v1 for v1, v2 in zip(vals, vals[1:])),
        "replicas": replicas,
        "seed": seed,
    }
