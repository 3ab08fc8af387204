"""Exact naive-Bayes model with descriptor-driven conditionals and greedy CMI selection.

All information quantities are in nats and conditioned on the realized
values of the revealed features.
"""

import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from vardfs.dataio import Dataset, Instance
from vardfs.errors import FormatError, InconsistentEvidenceError

SPEC_FORMAT = "vardfs-nbspec-v1"


@dataclass
class NaiveBayesSpec:
    """p(y) * prod_l p(x_l | y), one row-stochastic table [K, V_l] per feature."""

    prior: np.ndarray
    tables: list
    descriptors: np.ndarray

    def __post_init__(self):
        self.prior = np.asarray(self.prior, dtype=np.float64)
        self.tables = [np.asarray(t, dtype=np.float64) for t in self.tables]
        self.descriptors = np.asarray(self.descriptors, dtype=np.float64)
        k = len(self.prior)
        if abs(self.prior.sum() - 1.0) > 1e-12 or np.any(self.prior < 0):
            raise ValueError("prior must be a probability vector")
        if len(self.descriptors) != len(self.tables):
            raise ValueError("one descriptor per feature required")
        for i, t in enumerate(self.tables):
            if t.ndim != 2 or t.shape[0] != k:
                raise ValueError(f"table {i} must have shape [K={k}, V]")
            if np.any(t < 0) or np.any(np.abs(t.sum(axis=1) - 1.0) > 1e-12):
                raise ValueError(f"table {i} rows must sum to 1")

    @property
    def n_classes(self):
        return len(self.prior)

    @property
    def n_features(self):
        return len(self.tables)

    @classmethod
    def from_descriptors(cls, descriptors, n_classes=4, prior=None, arity=2, max_sharpness=0.49):
        descriptors = np.asarray(descriptors, dtype=np.float64)
        prior = np.full(n_classes, 1.0 / n_classes) if prior is None else prior
        tables = [descriptor_table(z, n_classes, arity, max_sharpness) for z in descriptors]
        return cls(prior, tables, descriptors)

    def permuted(self, order):
        return NaiveBayesSpec(self.prior, [self.tables[i] for i in order], self.descriptors[order])

    def to_json(self):
        return {"format": SPEC_FORMAT, "prior": self.prior.tolist(),
                "tables": [t.tolist() for t in self.tables],
                "descriptors": self.descriptors.tolist()}

    @classmethod
    def from_json(cls, obj):
        if obj.get("format") != SPEC_FORMAT:
            raise FormatError(f"unsupported spec format {obj.get('format')!r}")
        return cls(obj["prior"], obj["tables"], obj["descriptors"])


def class_pairs(n_classes):
    return list(itertools.combinations(range(n_classes), 2))


def descriptor_table(z, n_classes, arity=2, max_sharpness=0.49):
    """Conditional table p(x | y) determined by a descriptor z in [0, 1]^2.

    z[0] picks the class pair (a, b) the feature discriminates, z[1] its
    sharpness s = 0.5 + max_sharpness * z[1]. Class a puts mass s on value 0,
    class b puts mass s on the last value, every other class is uniform.
    """
    pairs = class_pairs(n_classes)
    a, b = pairs[min(int(z[0] * len(pairs)), len(pairs) - 1)]
    s = 0.5 + max_sharpness * float(np.clip(z[1], 0.0, 1.0))
    if arity == 2:
        hi, lo = s, 1.0 - s
    else:
        hi, lo = s, (1.0 - s) / (arity - 1)
    table = np.full((n_classes, arity), 1.0 / arity)
    table[a] = lo
    table[a, 0] = hi
    table[b] = lo
    table[b, -1] = hi
    return table


@dataclass
class OracleInstance:
    label: int
    values: np.ndarray
    descriptors: np.ndarray


def random_spec(rng, n_features=10, n_classes=4, arity=2, descriptor_dim=2):
    """Spec with uniform-random descriptors; the variable-feature-set generator."""
    z = rng.random((n_features, descriptor_dim))
    return NaiveBayesSpec.from_descriptors(z, n_classes, arity=arity)


def sample_instance(spec, rng):
    y = int(rng.choice(spec.n_classes, p=spec.prior))
    values = np.array([rng.choice(t.shape[1], p=t[y]) for t in spec.tables], dtype=np.int64)
    return OracleInstance(y, values, spec.descriptors.copy())


def as_instance(inst):
    """Feature-set view of an oracle draw: ids 0..d-1, value = category index, z = descriptor."""
    ids = list(range(len(inst.values)))
    return Instance(ids, inst.values.astype(np.float64)[:, None], inst.descriptors, inst.label)


def oracle_dataset(n, rng, spec=None, n_features=10, n_classes=4, arity=2):
    """Draw ``n`` labelled instances for training a selector against the oracle.

    With ``spec=None`` every instance gets its own freshly drawn descriptors
    (a new feature set per instance), so a policy can only do well by reading
    the descriptors. A fixed ``spec`` reuses one feature set throughout.
    """
    instances = []
    for _ in range(n):
        s = spec if spec is not None else random_spec(rng, n_features, n_classes, arity)
        instances.append(as_instance(sample_instance(s, rng)))
    k = spec.n_classes if spec is not None else n_classes
    return Dataset(instances, n_classes=k, kind="synthetic-oracle",
                   meta={"per_instance_specs": spec is None})


def _check_revealed(spec, revealed):
    seen = set()
    for lam, v in revealed:
        if lam in seen:
            raise ValueError(f"feature {lam} revealed twice")
        if not 0 <= v < spec.tables[lam].shape[1]:
            raise ValueError(f"value {v} out of range for feature {lam}")
        seen.add(lam)
    return seen


def posterior(spec, revealed=()):
    """p(y | x_s) by Bayes' rule over the revealed (feature, value) pairs."""
    _check_revealed(spec, revealed)
    joint = spec.prior.copy()
    for lam, v in revealed:
        joint = joint * spec.tables[lam][:, v]
        total = joint.sum()
        if total <= 0:
            raise InconsistentEvidenceError("revealed values have zero probability under the spec")
        joint = joint / total
    return joint


def _xlogx_ratio(p, q):
    out = np.zeros_like(p)
    nz = p > 0
    out[nz] = p[nz] * np.log(p[nz] / q[nz])
    return out


def cmi(spec, revealed, candidate):
    """I(y; x_candidate | x_s) at the observed x_s, by enumeration over (y, v)."""
    seen = _check_revealed(spec, revealed)
    if candidate in seen:
        raise ValueError(f"feature {candidate} is already revealed")
    post = posterior(spec, revealed)
    joint = post[:, None] * spec.tables[candidate]          # p(y, v | x_s)
    indep = post[:, None] * joint.sum(axis=0)[None, :]      # p(y|x_s) p(v|x_s)
    return float(max(_xlogx_ratio(joint, indep).sum(), 0.0))


def entropy(p):
    p = np.asarray(p)
    nz = p > 0
    return float(-(p[nz] * np.log(p[nz])).sum())


def expected_posterior_entropy(spec, revealed, candidate):
    """E_v[H(y | x_s, x_candidate = v)] under p(v | x_s)."""
    post = posterior(spec, revealed)
    pv = post @ spec.tables[candidate]
    total = 0.0
    for v, weight in enumerate(pv):
        if weight > 0:
            total += weight * entropy(posterior(spec, list(revealed) + [(candidate, v)]))
    return total


def cmi_table(spec, revealed=()):
    """CMI of every feature; revealed ones are reported as NaN."""
    done = {lam for lam, _ in revealed}
    return np.array([np.nan if lam in done else cmi(spec, revealed, lam)
                     for lam in range(spec.n_features)])


def greedy_oracle_select(spec, revealed=()):
    """Unrevealed feature with the largest CMI; ties go to the lowest index."""
    table = cmi_table(spec, revealed)
    if np.all(np.isnan(table)):
        raise ValueError("every feature is already revealed")
    return int(np.argmax(np.where(np.isnan(table), -np.inf, table)))


def brute_force_cmi(spec, revealed, candidate):
    """CMI from the full joint table over every feature configuration.

    Independent of ``cmi``: marginalizes p(y, x_1..x_d) directly, so it is only
    practical for a handful of low-arity features.
    """
    arities = [t.shape[1] for t in spec.tables]
    fixed = dict(revealed)
    k = spec.n_classes
    joint_yv = np.zeros((k, arities[candidate]))
    for config in itertools.product(*(range(a) for a in arities)):
        if any(config[lam] != v for lam, v in fixed.items()):
            continue
        for y in range(k):
            p = spec.prior[y]
            for lam, v in enumerate(config):
                p *= spec.tables[lam][y, v]
            joint_yv[y, config[candidate]] += p
    joint_yv /= joint_yv.sum()
    py = joint_yv.sum(axis=1, keepdims=True)
    pv = joint_yv.sum(axis=0, keepdims=True)
    total = 0.0
    for y in range(k):
        for v in range(arities[candidate]):
            if joint_yv[y, v] > 0:
                total += joint_yv[y, v] * np.log(joint_yv[y, v] / (py[y, 0] * pv[0, v]))
    return float(total)


def agreement(policy, spec, n_trials, steps, rng):
    """Per-step rate at which ``policy`` matches the greedy CMI pick.

    ``policy(spec, instance, revealed) -> index``. ``spec`` is a fixed
    NaiveBayesSpec or a callable ``rng -> NaiveBayesSpec`` drawing a fresh
    feature set per trial. Both policies are scored along the oracle's own
    reveal trajectory.
    """
    hits = np.zeros(steps)
    for _ in range(n_trials):
        trial_spec = spec(rng) if callable(spec) else spec
        inst = sample_instance(trial_spec, rng)
        revealed = []
        for j in range(steps):
            best = greedy_oracle_select(trial_spec, revealed)
            if policy(trial_spec, inst, revealed) == best:
                hits[j] += 1
            revealed.append((best, int(inst.values[best])))
    return hits / n_trials


def save_spec(path, spec):
    Path(path).write_text(json.dumps(spec.to_json(), indent=1))


def load_spec(path):
    return NaiveBayesSpec.from_json(json.loads(Path(path).read_text()))
