"""k-step selection protocol: relaxed end-to-end training and greedy rollouts."""

import logging
import os
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from vardfs import diffcore as dc
from vardfs.concrete import TemperatureSchedule, make_rng, one_hot_argmax, relaxed_select, sample_gumbel
from vardfs.dataio import batch_pad
from vardfs.diffcore import Tensor
from vardfs.errors import ConfigError, NumericalError

log = logging.getLogger(__name__)

SELECTORS = ("learned", "random")


@dataclass
class RunConfig:
    budget: int = 5
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    temperatures: TemperatureSchedule = None
    seed: int = 0
    selector: str = "learned"
    val_fraction: float = 0.1
    eval_budgets: tuple = ()
    clip_norm: float = None
    time_limit: float = None
    lr_end: float = None

    def __post_init__(self):
        if self.budget < 1:
            raise ConfigError("budget k must be at least 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.selector not in SELECTORS:
            raise ConfigError(f"selector must be one of {SELECTORS}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if self.lr_end is not None and not 0 < self.lr_end <= self.lr:
            raise ConfigError("lr_end must lie in (0, lr]")
        if self.temperatures is None:
            self.temperatures = TemperatureSchedule.geometric(2.0, 0.2, self.epochs)


@dataclass
class TrainReport:
    epoch_losses: list = field(default_factory=list)
    val_accuracy: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    steps: int = 0
    initial_loss: float = None

    def to_dict(self):
        out = asdict(self)
        out["val_accuracy"] = {str(k): v for k, v in self.val_accuracy.items()}
        return out


def _check_budget(dataset, k):
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    for i, inst in enumerate(dataset):
        if inst.size < k:
            raise ConfigError(f"instance {i} has {inst.size} features, fewer than budget k={k}")


def epoch_lr(config, epoch):
    """Constant ``lr``, or a geometric decay from ``lr`` to ``lr_end`` over the epochs."""
    if config.lr_end is None or config.epochs == 1:
        return config.lr
    return config.lr * (config.lr_end / config.lr) ** (epoch / (config.epochs - 1))


def split_validation(n, fraction, rng):
    order = rng.permutation(n)
    n_val = int(round(n * fraction))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def trajectory_loss(batch, policy, predictor, k, tau, rng, selector="learned", observer=None):
    """Summed cross-entropy over the k relaxed selection steps of one batch.

    The hard mask drives the policy input and the next step's state; the
    relaxed mask builds the predictor tokens so gradients reach the policy.
    ``observer(step, hard_mask, relaxed_mask)`` sees the state after each step.
    """
    avail = batch.available
    m = np.zeros(avail.shape)
    total = None
    for j in range(k):
        selectable = avail & (m == 0)
        if selector == "learned":
            alpha = policy(batch.tokens(m), avail)
            if not np.all(np.isfinite(alpha.data[selectable])):
                raise NumericalError("policy produced non-finite logits")
        else:
            alpha = Tensor(np.zeros(avail.shape))
        m_soft, m, _ = relaxed_select(alpha, m, selectable, tau, rng)
        if observer is not None:
            observer(j + 1, m, m_soft.data)
        logits = predictor(batch.tokens(m_soft), avail, mask=m_soft)
        step = dc.cross_entropy(logits, batch.labels)
        total = step if total is None else dc.add(total, step)
    return total


def train(dataset, policy, predictor, config, resample=None, callback=None):
    """Fit ``policy`` and ``predictor`` jointly by minibatch Adam on the k-step loss.

    ``resample(epoch, rng)``, when given, returns a fresh dataset for each
    epoch (same instances in the same order, e.g. new pixel subsets); the
    validation split is fixed by index. Deterministic for a fixed seed.
    """
    _check_budget(dataset, config.budget)
    start = time.perf_counter()
    rng = make_rng(config.seed)
    train_idx, val_idx = split_validation(len(dataset), config.val_fraction, rng)
    params = predictor.parameters()
    if config.selector == "learned":
        params = policy.parameters() + params
    opt = dc.Adam(params, lr=config.lr, clip_norm=config.clip_norm)
    report = TrainReport()
    data = dataset
    for epoch in range(config.epochs):
        if resample is not None and epoch > 0:
            data = resample(epoch, rng)
            _check_budget(data, config.budget)
        tau = config.temperatures.at(epoch, config.epochs)
        opt.lr = epoch_lr(config, epoch)
        order = rng.permutation(train_idx)
        losses = []
        for lo in range(0, len(order), config.batch_size):
            batch = batch_pad([data[i] for i in order[lo:lo + config.batch_size]])
            loss = trajectory_loss(batch, policy, predictor, config.budget, tau, rng, config.selector)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericalError(f"non-finite loss at epoch {epoch}, step {report.steps}")
            if report.initial_loss is None:
                report.initial_loss = value
            opt.zero_grad()
            dc.backward(loss)
            opt.step()
            losses.append(value)
            report.steps += 1
        report.epoch_losses.append(float(np.mean(losses)))
        log.info("epoch %d tau=%.3f loss=%.4f (%.1fs)", epoch, tau, report.epoch_losses[-1],
                 time.perf_counter() - start)
        if callback is not None:
            callback(epoch, report)
        if config.time_limit is not None and time.perf_counter() - start > config.time_limit:
            log.info("time limit reached after epoch %d", epoch)
            break
    if len(val_idx) and config.eval_budgets:
        val = dataset.subset(val_idx)
        sel = "random" if config.selector == "random" else "learned"
        report.val_accuracy = evaluate(val, policy if sel == "learned" else None, predictor,
                                       list(config.eval_budgets), rng=make_rng(config.seed + 1))
    report.wall_clock = time.perf_counter() - start
    return report


def rollout_batch(batch, policy, k, rng=None, observer=None):
    """Greedy selection order [b, k] for a padded batch.

    With a policy the choice is the noise-free argmax of masked logits;
    ``policy=None`` selects uniformly among remaining available features.
    ``observer(step, hard_mask)`` is called after each step.
    """
    avail = batch.available
    if np.any(avail.sum(axis=1) < k):
        raise ConfigError(f"budget k={k} exceeds the feature count of some instance")
    m = np.zeros(avail.shape)
    order = np.zeros((len(batch), k), dtype=np.int64)
    with dc.no_grad():
        for j in range(k):
            selectable = avail & (m == 0)
            if policy is None:
                scores = sample_gumbel(avail.shape, rng)
            else:
                scores = policy(batch.tokens(m), avail).data
            hard, idx = one_hot_argmax(scores, selectable)
            m = np.maximum(m, hard)
            order[:, j] = idx
            if observer is not None:
                observer(j + 1, m)
    return order


def prefix_mask(order, budget, shape):
    m = np.zeros(shape)
    rows = np.arange(shape[0])[:, None]
    m[rows, order[:, :budget]] = 1.0
    return m


def predict_probs(batch, predictor, mask):
    with dc.no_grad():
        return dc.masked_softmax(predictor(batch.tokens(mask), batch.available)).data


def rollout(instance, policy, predictor, k):
    """Select k features of one instance greedily, then predict.

    Returns ``(selected feature ids, class probabilities)``.
    """
    if k < 1 or k > instance.size:
        raise ConfigError(f"budget k={k} must lie in [1, {instance.size}]")
    batch = batch_pad([instance])
    order = rollout_batch(batch, policy, k)
    probs = predict_probs(batch, predictor, prefix_mask(order, k, batch.available.shape))
    return [instance.feature_ids[i] for i in order[0]], probs[0]


def _chunks(n, size):
    return [(lo, min(lo + size, n)) for lo in range(0, n, size)]


def _threads():
    try:
        return max(1, int(os.environ.get("VARDFS_THREADS", "1")))
    except ValueError:
        return 1


def evaluate(dataset, policy, predictor, budgets, batch_size=256, rng=None, return_orders=False):
    """Accuracy after greedy rollouts at each budget.

    One rollout to the largest budget is reused through prefix masks.
    ``policy=None`` means a uniform random selector (seeded by ``rng``).
    """
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate an empty dataset")
    budgets = list(budgets)
    if budgets != sorted(budgets) or budgets[0] < 1:
        raise ConfigError("budgets must be positive and sorted ascending")
    kmax = budgets[-1]
    _check_budget(dataset, kmax)
    chunks = _chunks(len(dataset), batch_size)
    if policy is None:
        rng = rng if rng is not None else make_rng(0)
        seeds = rng.integers(0, 2 ** 63, size=len(chunks))
    else:
        seeds = [0] * len(chunks)

    def run(args):
        (lo, hi), seed = args
        batch = batch_pad(dataset.instances[lo:hi])
        order = rollout_batch(batch, policy, kmax, make_rng(seed))
        hits = []
        for b in budgets:
            probs = predict_probs(batch, predictor, prefix_mask(order, b, batch.available.shape))
            hits.append(np.argmax(probs, axis=1) == batch.labels)
        return np.array(hits), order

    jobs = list(zip(chunks, seeds))
    threads = _threads()
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    hits = np.concatenate([r[0] for r in results], axis=1)
    acc = {b: float(hits[i].mean()) for i, b in enumerate(budgets)}
    if return_orders:
        return acc, [row for r in results for row in r[1]]
    return acc


def selection_frequency(dataset, policy, budget, batch_size=256, rng=None):
    """Count how often each feature id is selected over all rollouts."""
    orders = selection_orders(dataset, policy, budget, batch_size, rng)
    counts = Counter()
    for inst, order in zip(dataset, orders):
        counts.update(inst.feature_ids[i] for i in order)
    return counts


def selection_orders(dataset, policy, budget, batch_size=256, rng=None):
    """Per-instance selection order (positions into the instance's features)."""
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate an empty dataset")
    _check_budget(dataset, budget)
    rng = rng if rng is not None else make_rng(0)
    orders = []
    for lo, hi in _chunks(len(dataset), batch_size):
        batch = batch_pad(dataset.instances[lo:hi])
        orders.extend(rollout_batch(batch, policy, budget, rng))
    return orders


def random_selector_baseline(dataset, predictor, budgets, seed, batch_size=256):
    """Accuracy when features are picked uniformly at random (predictor trained the same way)."""
    return evaluate(dataset, None, predictor, budgets, batch_size=batch_size, rng=make_rng(seed))


def oracle_policy(policy):
    """Adapt a PolicyNet to the ``policy(spec, instance, revealed) -> index`` form used by oracle.agreement."""
    from vardfs.oracle import as_instance

    def select(spec, inst, revealed):
        batch = batch_pad([as_instance(inst)])
        m = np.zeros(batch.available.shape)
        for lam, _ in revealed:
            m[0, lam] = 1.0
        with dc.no_grad():
            scores = policy(batch.tokens(m), batch.available).data
        _, idx = one_hot_argmax(scores, batch.available & (m == 0))
        return int(idx[0])

    return select
