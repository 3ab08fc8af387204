"""Built-in correctness checks: gradients, Gumbel-max sampling and permutation symmetry.

Each check returns a :class:`CheckResult`; :func:`run_all` runs the lot.
The same routines back ``vardfs selfcheck`` and the acceptance tests.
"""

import time
from dataclasses import dataclass

import numpy as np

from vardfs import diffcore as dc
from vardfs.concrete import make_rng, one_hot_argmax, sample_gumbel
from vardfs.diffcore import Tensor
from vardfs.diffcore.gradcheck import check_gradients
from vardfs.setmodel import PolicyNet, PredictorNet, SetEncoderConfig, make_tokens

GRAD_TOLERANCE = 1e-4
GUMBEL_TOLERANCE = 0.01
PERMUTATION_TOLERANCE = 1e-5


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    seconds: float
    detail: str = ""

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.value:.3g} (threshold {self.threshold:g}, {self.seconds:.1f}s) {self.detail}".rstrip()


def _random_nets(rng, index, descriptor_dim=2, n_classes=3):
    arch = "deepsets" if index % 2 == 0 else "attention"
    act = "sine" if index % 4 == 2 else "relu"
    context = "revealed" if index % 4 == 0 else "available"
    cfg = SetEncoderConfig(arch, hidden_dim=4, num_blocks=1, num_heads=2, input_activation=act,
                           sine_scale=2.0, context=context)
    token_dim = 2 + descriptor_dim
    pooling = "attention-pool" if index % 3 == 0 else "masked-mean"
    return (PolicyNet(cfg, token_dim, rng),
            PredictorNet(cfg, token_dim, n_classes, rng, pooling=pooling, head_hidden=4))


def gradient_suite(n_networks=20, seed=0, h=1e-4):
    """Worst relative error between tape and central-difference gradients.

    Every network pair sees 2 to 6 tokens. The scalar checked combines a
    weighted sum of policy logits with the predictor's cross-entropy under a
    relaxed mask, so gradients also flow into the mask and token values.
    """
    rng = make_rng(seed)
    start = time.perf_counter()
    worst = 0.0
    for i in range(n_networks):
        n = int(rng.integers(2, 7))
        b = 2
        policy, predictor = _random_nets(rng, i)
        values = rng.normal(size=(b, n, 1))
        z = rng.random((b, n, 2))
        avail = np.ones((b, n), dtype=bool)
        if n > 2:
            avail[1, -1] = False
        mask = Tensor(rng.uniform(0.1, 0.9, size=(b, n)) * avail, requires_grad=True)
        weights = rng.normal(size=(b, n))
        labels = rng.integers(0, 3, size=b)

        def loss():
            tokens = make_tokens(values, mask, z)
            logits = policy(tokens, avail)
            pol_term = dc.sum(dc.mul(logits, weights * avail))
            ce = dc.cross_entropy(predictor(tokens, avail, mask=mask), labels)
            return dc.add(pol_term, ce)

        tensors = policy.parameters() + predictor.parameters() + [mask]
        worst = max(worst, check_gradients(loss, tensors, h))
    return CheckResult("gradients", worst < GRAD_TOLERANCE, worst, GRAD_TOLERANCE,
                       time.perf_counter() - start, f"{n_networks} networks")


def gumbel_suite(n_draws=100_000, seed=0):
    """Largest deviation of Gumbel-max frequencies from softmax(0, ln 2, ln 3)."""
    start = time.perf_counter()
    logits = np.log(np.array([1.0, 2.0, 3.0]))
    rng = make_rng(seed)
    scores = logits + sample_gumbel((n_draws, 3), rng)
    _, idx = one_hot_argmax(scores, np.ones((n_draws, 3), dtype=bool))
    freq = np.bincount(idx, minlength=3) / n_draws
    dev = float(np.max(np.abs(freq - np.array([1, 2, 3]) / 6)))
    return CheckResult("gumbel-max", dev <= GUMBEL_TOLERANCE, dev, GUMBEL_TOLERANCE,
                       time.perf_counter() - start, f"frequencies {np.round(freq, 4).tolist()}")


def permutation_suite(n_pairs=100, seed=0):
    """Largest change in permuted policy logits / predictor outputs over random cases."""
    rng = make_rng(seed)
    start = time.perf_counter()
    worst = 0.0
    nets = [_random_nets(rng, i) for i in range(4)]
    for t in range(n_pairs):
        policy, predictor = nets[t % len(nets)]
        n = int(rng.integers(2, 9))
        values = rng.normal(size=(1, n, 1))
        z = rng.random((1, n, 2))
        mask = (rng.random((1, n)) < 0.5).astype(float)
        avail = np.ones((1, n), dtype=bool)
        perm = rng.permutation(n)
        with dc.no_grad():
            tokens = make_tokens(values, mask, z).data
            ptoks = tokens[:, perm]
            a = policy(tokens, avail).data[:, perm]
            b = policy(ptoks, avail).data
            p = dc.softmax(predictor(tokens, avail)).data
            q = dc.softmax(predictor(ptoks, avail)).data
        worst = max(worst, float(np.max(np.abs(a - b))), float(np.max(np.abs(p - q))))
    return CheckResult("permutation", worst < PERMUTATION_TOLERANCE, worst, PERMUTATION_TOLERANCE,
                       time.perf_counter() - start, f"{n_pairs} pairs")


def run_all(seed=0):
    return [gradient_suite(seed=seed), gumbel_suite(seed=seed), permutation_suite(seed=seed)]


__all__ = ["CheckResult", "gradient_suite", "gumbel_suite", "permutation_suite", "run_all"]
