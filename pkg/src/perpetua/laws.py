"""Finite discrete laws on the real line.

Every exact distribution in this package is carried by a ``DiscreteLaw``:
a sorted list of weighted real atoms plus an explicit ``tail_mass`` for
truncated objects.  Atom values closer than the merge tolerance are
combined mass-preservingly (mass-weighted representative value), so laws
obtained along different arithmetic routes compare cleanly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MERGE_TOL = 1e-12


def merge_atoms(values, masses, tol=MERGE_TOL):
    """Sort atoms and fuse runs of values whose consecutive gaps are < tol.

    Mass is preserved exactly; the representative value of a fused run is
    the mass-weighted mean, so first moments are preserved as well.
    """
    values = np.asarray(values, dtype=float)
    masses = np.asarray(masses, dtype=float)
    if values.size == 0:
        return values, masses
    order = np.argsort(values, kind="stable")
    v, m = values[order], masses[order]
    if v.size > 1 and np.min(np.diff(v)) < tol:
        new_cluster = np.empty(v.size, dtype=bool)
        new_cluster[0] = True
        new_cluster[1:] = np.diff(v) >= tol
        cluster = np.cumsum(new_cluster) - 1
        n = cluster[-1] + 1
        cm = np.zeros(n)
        cv = np.zeros(n)
        np.add.at(cm, cluster, m)
        np.add.at(cv, cluster, v * m)
        with np.errstate(invalid="ignore"):
            rep = np.where(cm > 0, cv / np.where(cm > 0, cm, 1.0), 0.0)
        v, m = rep, cm
    keep = m > 0
    return v[keep], m[keep]


@dataclass(frozen=True)
class DiscreteLaw:
    """Weighted real atoms, sorted, merged within ``tol``.

    ``tail_mass`` is the probability a truncated construction could not
    account for; a proper probability law has total_mass + tail_mass == 1.
    """

    values: np.ndarray
    masses: np.ndarray
    tail_mass: float = 0.0
    tol: float = field(default=MERGE_TOL, compare=False)

    @staticmethod
    def from_atoms(values, masses, tail_mass=0.0, tol=MERGE_TOL):
        v, m = merge_atoms(values, masses, tol)
        v.setflags(write=False)
        m.setflags(write=False)
        return DiscreteLaw(v, m, float(tail_mass), tol)

    @staticmethod
    def point(value, mass=1.0):
        return DiscreteLaw.from_atoms([value], [mass])

    @staticmethod
    def from_samples(samples, max_atoms=None, tol=MERGE_TOL):
        """Empirical law of a sample set, optionally coarsened to max_atoms."""
        samples = np.asarray(samples, dtype=float)
        v, counts = np.unique(samples, return_counts=True)
        law = DiscreteLaw.from_atoms(v, counts / samples.size, tol=tol)
        if max_atoms is not None and law.n_atoms > max_atoms:
            law = law.coarsen(max_atoms)
        return law

    @property
    def n_atoms(self):
        return int(self.values.size)

    @property
    def total_mass(self):
        return float(self.masses.sum())

    def is_probability(self, atol=1e-9):
        return abs(self.total_mass + self.tail_mass - 1.0) <= atol

    def mean(self):
        return float(np.dot(self.values, self.masses))

    def affine(self, slope, intercept):
        """Pushforward under x -> slope*x + intercept."""
        return DiscreteLaw.from_atoms(
            slope * self.values + intercept, self.masses, self.tail_mass, self.tol
        )

    def cdf(self, x):
        """Right-continuous CDF (tail mass excluded)."""
        x = np.asarray(x, dtype=float)
        idx = np.searchsorted(self.values, x, side="right")
        return np.concatenate(([0.0], np.cumsum(self.masses)))[idx]

    def restricted_mass(self, lo, hi):
        """Mass carried by atoms in the closed interval [lo, hi]."""
        i = np.searchsorted(self.values, lo, side="left")
        j = np.searchsorted(self.values, hi, side="right")
        return float(self.masses[i:j].sum())

    def mass_near(self, value, radius):
        return self.restricted_mass(value - radius, value + radius)

    def negated(self):
        return self.affine(-1.0, 0.0)

    def symmetrized(self):
        """Even part: the law of +-X with a fair sign, i.e. (law + negated)/2."""
        return mixture([(0.5, self), (0.5, self.negated())], tol=self.tol)

    def coarsen(self, max_atoms):
        """Mass-preserving coarsening to at most max_atoms atoms.

        Atoms are binned by cumulative mass; each bin is replaced by its
        mass-weighted mean, so total mass and the overall mean are kept.
        """
        if self.n_atoms <= max_atoms:
            return self
        cum = np.cumsum(self.masses)
        total = cum[-1]
        # bin k covers cumulative mass ((k/max_atoms)*total, ((k+1)/max_atoms)*total]
        bins = np.minimum(
            (np.ceil(cum / total * max_atoms) - 1).astype(np.int64), max_atoms - 1
        )
        bins = np.maximum.accumulate(bins)  # monotone despite float rounding
        n = bins[-1] + 1
        cm = np.zeros(n)
        cv = np.zeros(n)
        np.add.at(cm, bins, self.masses)
        np.add.at(cv, bins, self.values * self.masses)
        keep = cm > 0
        return DiscreteLaw.from_atoms(
            cv[keep] / cm[keep], cm[keep], self.tail_mass, self.tol
        )

    def remerged(self, tol):
        return DiscreteLaw.from_atoms(self.values, self.masses, self.tail_mass, tol)

    def to_json_dict(self):
        out = {"atoms": [{"v": float(v), "m": float(m)}
                         for v, m in zip(self.values, self.masses)],
               "tail_mass": float(self.tail_mass)}
        return out

    @staticmethod
    def from_json_dict(doc, tol=MERGE_TOL):
        atoms = doc.get("atoms", [])
        return DiscreteLaw.from_atoms(
            [a["v"] for a in atoms], [a["m"] for a in atoms],
            doc.get("tail_mass", 0.0), tol
        )


def mixture(weighted_laws, tol=MERGE_TOL):
    """Combine [(weight, law), ...] into a single law."""
    values = np.concatenate([law.values for _, law in weighted_laws])
    masses = np.concatenate([w * law.masses for w, law in weighted_laws])
    tail = sum(w * law.tail_mass for w, law in weighted_laws)
    return DiscreteLaw.from_atoms(values, masses, tail, tol)


def laws_match(a, b, value_tol=1e-10, mass_tol=1e-10):
    """Atom-for-atom comparison after re-merging both sides at value_tol.

    Returns (ok, description). Tail masses must also agree within mass_tol.
    """
    am = a.remerged(value_tol)
    bm = b.remerged(value_tol)
    if am.n_atoms != bm.n_atoms:
        return False, f"atom counts differ: {am.n_atoms} vs {bm.n_atoms}"
    dv = np.max(np.abs(am.values - bm.values), initial=0.0)
    dm = np.max(np.abs(am.masses - bm.masses), initial=0.0)
    dt = abs(am.tail_mass - bm.tail_mass)
    if dv > value_tol:
        return False, f"max value gap {dv:.3e} > {value_tol:.1e}"
    if dm > mass_tol or dt > mass_tol:
        return False, f"max mass gap {max(dm, dt):.3e} > {mass_tol:.1e}"
    return True, "laws match"


def ks_distance(law, samples):
    """Kolmogorov-Smirnov distance between a DiscreteLaw and a sample set.

    Both CDFs are step functions; the supremum is attained at an atom of
    either, and both one-sided limits are checked there.
    """
    samples = np.sort(np.asarray(samples, dtype=float))
    n = samples.size
    grid = np.union1d(law.values, samples)
    f = law.cdf(grid)
    f_left = f - _point_masses(law, grid)
    femp = np.searchsorted(samples, grid, side="right") / n
    femp_left = np.searchsorted(samples, grid, side="left") / n
    return float(max(np.max(np.abs(f - femp)), np.max(np.abs(f_left - femp_left))))


def _point_masses(law, grid):
    """Mass that `law` puts exactly on each grid point (0 if absent)."""
    idx = np.searchsorted(law.values, grid, side="left")
    out = np.zeros(grid.size)
    in_range = idx < law.values.size
    hit = in_range.copy()
    hit[in_range] = law.values[idx[in_range]] == grid[in_range]
    out[hit] = law.masses[idx[hit]]
    return out


def tv_distance(a, b, value_tol=1e-9):
    """Total variation between two discrete laws, matching atoms within value_tol."""
    values = np.concatenate([a.values, b.values])
    signed = np.concatenate([a.masses, -b.masses])
    order = np.argsort(values, kind="stable")
    v, s = values[order], signed[order]
    # cluster values within value_tol, then sum signed masses per cluster
    if v.size:
        new_cluster = np.empty(v.size, dtype=bool)
        new_cluster[0] = True
        new_cluster[1:] = np.diff(v) >= value_tol
        cluster = np.cumsum(new_cluster) - 1
        sums = np.zeros(cluster[-1] + 1)
        np.add.at(sums, cluster, s)
    else:
        sums = np.zeros(0)
    disc = 0.5 * float(np.abs(sums).sum())
    return disc + 0.5 * abs(a.tail_mass - b.tail_mass)


def tv_distance_samples(law, samples, value_tol=1e-9):
    return tv_distance(law, DiscreteLaw.from_samples(samples), value_tol)


def wasserstein1(a, b):
    """Exact W1 distance between two discrete laws: integral of |CDF_a - CDF_b|."""
    grid = np.union1d(a.values, b.values)
    if grid.size <= 1:
        return 0.0
    fa = a.cdf(grid[:-1])
    fb = b.cdf(grid[:-1])
    return float(np.sum(np.abs(fa - fb) * np.diff(grid)))
