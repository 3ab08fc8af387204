"""``vardfs`` command line: train, eval, heatmap, oracle-check and selfcheck.

Runs are described by an INI file with ``[dataset]``, ``[model]``, ``[train]``
and ``[output]`` sections. Relative paths resolve against the INI file's
directory. Exit codes: 0 success, 2 configuration or format problem, 3
numerical failure (non-finite loss), 1 a failed self-check.
"""

import argparse
import configparser
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from vardfs.concrete import TemperatureSchedule
from vardfs.dataio import (
    build_bow_instances,
    image_dataset,
    load_embeddings,
    load_idx_images,
)
from vardfs.dfsengine import (
    RunConfig,
    evaluate,
    oracle_policy,
    selection_frequency,
    split_validation,
    train,
)
from vardfs.errors import ConfigError, FormatError, NumericalError, VardfsError
from vardfs.oracle import (
    agreement,
    brute_force_cmi,
    cmi_table,
    greedy_oracle_select,
    load_spec,
    oracle_dataset,
    random_spec,
    sample_instance,
)
from vardfs.setmodel import PolicyNet, PredictorNet, SetEncoderConfig, load_checkpoint, save_checkpoint

log = logging.getLogger("vardfs")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
DATASET_KINDS = ("image-idx", "bow", "synthetic-oracle")


def stream_rng(seed, stream):
    """Independent generator per purpose (data, test data, ...) derived from one seed."""
    return np.random.default_rng([int(seed), int(stream)])


# -- run spec -----------------------------------------------------------------------

@dataclass
class RunSpec:
    path: Path
    dataset: dict
    encoder: SetEncoderConfig
    pooling: str
    presence_weighting: bool
    run: RunConfig
    output: Path
    resample: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def seed(self):
        return self.run.seed


class _Section:
    """Typed access to one INI section; errors name ``section.key``."""

    def __init__(self, parser, name):
        if not parser.has_section(name):
            raise ConfigError(f"missing section [{name}]")
        self.name = name
        self.sec = parser[name]

    def _field(self, key):
        return f"{self.name}.{key}"

    def has(self, key):
        return key in self.sec

    def str(self, key, default=None):
        if key not in self.sec:
            if default is None:
                raise ConfigError(f"{self._field(key)} is required")
            return default
        return self.sec[key].strip()

    def num(self, key, default, kind=float):
        if key not in self.sec:
            return default
        try:
            return kind(self.sec[key])
        except ValueError:
            raise ConfigError(f"{self._field(key)}: cannot parse {self.sec[key]!r} as {kind.__name__}") from None

    def flag(self, key, default=False):
        if key not in self.sec:
            return default
        try:
            return self.sec.getboolean(key)
        except ValueError:
            raise ConfigError(f"{self._field(key)}: expected true/false") from None

    def floats(self, key):
        try:
            return [float(v) for v in self.sec[key].replace(",", " ").split()]
        except ValueError:
            raise ConfigError(f"{self._field(key)}: expected a list of numbers") from None

    def path(self, key, base, must_exist=True):
        p = Path(self.str(key))
        p = p if p.is_absolute() else Path(os.path.normpath(base / p))
        if must_exist and not p.exists():
            raise ConfigError(f"{self._field(key)}: path {p} does not exist")
        return p


def load_run_spec(path):
    """Parse and validate an INI run spec; every problem is a ConfigError naming the field."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"spec file {path} does not exist")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    base = path.parent
    ds, mo, tr = (_Section(parser, n) for n in ("dataset", "model", "train"))
    kind = ds.str("kind")
    if kind not in DATASET_KINDS:
        raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}, got {kind!r}")
    dataset = {"kind": kind}
    if kind == "image-idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            dataset[key] = ds.path(key, base)
        dataset["sample_count"] = ds.num("sample_count", 100, int)
        dataset["train_limit"] = ds.num("train_limit", None, int)
        dataset["test_limit"] = ds.num("test_limit", None, int)
    elif kind == "bow":
        dataset["corpus"] = ds.path("corpus", base)
        dataset["embeddings"] = ds.path("embeddings", base)
        dataset["embeddings_format"] = ds.str("embeddings_format", "text")
        dataset["sample_count"] = ds.num("sample_count", 20, int)
        dataset["test_fraction"] = ds.num("test_fraction", 0.2)
        dataset["log_counts"] = ds.flag("log_counts")
    else:
        dataset["n_train"] = ds.num("n_train", 20000, int)
        dataset["n_test"] = ds.num("n_test", 1000, int)
        dataset["n_features"] = ds.num("n_features", 10, int)
        dataset["n_classes"] = ds.num("n_classes", 4, int)
        dataset["spec_file"] = ds.path("spec_file", base) if ds.has("spec_file") else None
        dataset["agreement_trials"] = ds.num("agreement_trials", 1000, int)
        dataset["agreement_steps"] = ds.num("agreement_steps", 3, int)
    if "sample_count" in dataset and dataset["sample_count"] < 1:
        raise ConfigError("dataset.sample_count must be positive")

    try:
        encoder = SetEncoderConfig(
            arch=mo.str("arch", "attention"),
            hidden_dim=mo.num("hidden_dim", 64, int),
            num_blocks=mo.num("num_blocks", 2, int),
            num_heads=mo.num("num_heads", 4, int),
            input_activation=mo.str("input_activation", "relu"),
            sine_scale=mo.num("sine_scale", 10.0),
            context=mo.str("context", "available"),
        )
    except ConfigError as exc:
        raise ConfigError(f"model: {exc}") from None
    pooling = mo.str("pooling", "attention-pool")
    if pooling not in ("attention-pool", "masked-mean"):
        raise ConfigError(f"model.pooling: unknown mode {pooling!r}")

    epochs = tr.num("epochs", 10, int)
    temps = tr.floats("temperatures") if tr.has("temperatures") else None
    try:
        if temps is not None:
            schedule = TemperatureSchedule(temps)
        else:
            schedule = TemperatureSchedule.geometric(tr.num("temperature_start", 2.0),
                                                     tr.num("temperature_end", 0.2), max(epochs, 1))
        run = RunConfig(
            budget=tr.num("budget", 5, int),
            epochs=epochs,
            batch_size=tr.num("batch_size", 64, int),
            lr=tr.num("lr", 1e-3),
            lr_end=tr.num("lr_end", None),
            temperatures=schedule,
            seed=tr.num("seed", 0, int),
            val_fraction=tr.num("val_fraction", 0.1),
            eval_budgets=tuple(int(b) for b in tr.floats("eval_budgets")) if tr.has("eval_budgets") else (),
            clip_norm=tr.num("clip_norm", None),
            time_limit=tr.num("time_limit", None),
        )
    except ConfigError as exc:
        raise ConfigError(f"train: {exc}") from None
    out_dir = Path(parser.get("output", "dir", fallback="run"))
    out_dir = out_dir if out_dir.is_absolute() else Path(os.path.normpath(base / out_dir))
    return RunSpec(path, dataset, encoder, pooling, mo.flag("presence_weighting"), run, out_dir,
                   resample=tr.flag("resample_features"))


# -- datasets -----------------------------------------------------------------------

def build_datasets(spec):
    """``(train, test, resample)``; ``resample`` is None unless features are redrawn per epoch."""
    d = spec.dataset
    seed = spec.seed
    if d["kind"] == "image-idx":
        x, y = load_idx_images(d["train_images"], d["train_labels"], limit=d["train_limit"])
        xt, yt = load_idx_images(d["test_images"], d["test_labels"], limit=d["test_limit"])
        n_classes = int(max(y.max(), yt.max())) + 1
        count = d["sample_count"]
        train_set = image_dataset(x, y, count, stream_rng(seed, 1), n_classes=n_classes)
        test_set = image_dataset(xt, yt, count, stream_rng(seed, 2), n_classes=n_classes)
        resample = None
        if spec.resample:
            def resample(epoch, rng):
                return image_dataset(x, y, count, rng, n_classes=n_classes)
        return train_set, test_set, resample
    if d["kind"] == "bow":
        emb = load_embeddings(d["embeddings"], format=d["embeddings_format"])
        full = build_bow_instances(d["corpus"], emb, d["sample_count"], stream_rng(seed, 1),
                                   log_counts=d["log_counts"])
        train_idx, test_idx = split_validation(len(full), d["test_fraction"], stream_rng(seed, 2))
        return full.subset(train_idx), full.subset(test_idx), None
    fixed = load_spec(d["spec_file"]) if d["spec_file"] else None
    kw = {"n_features": d["n_features"], "n_classes": d["n_classes"]}
    train_set = oracle_dataset(d["n_train"], stream_rng(seed, 1), spec=fixed, **kw)
    test_set = oracle_dataset(d["n_test"], stream_rng(seed, 2), spec=fixed, **kw)
    return train_set, test_set, None


def build_nets(spec, dataset):
    rng = stream_rng(spec.seed, 0)
    policy = PolicyNet(spec.encoder, dataset.token_dim, rng, value_dim=dataset.value_dim)
    predictor = PredictorNet(spec.encoder, dataset.token_dim, dataset.n_classes, rng,
                             pooling=spec.pooling, presence_weighting=spec.presence_weighting,
                             value_dim=dataset.value_dim)
    return policy, predictor


def _checkpoint_meta(spec, dataset, selector):
    return {"kind": dataset.kind, "token_dim": dataset.token_dim, "n_classes": dataset.n_classes,
            "image_shape": list(dataset.image_shape) if dataset.image_shape else None,
            "selector": selector, "budget": spec.run.budget, "seed": spec.seed}


def train_run(spec, selector="learned", checkpoint=None):
    """Train one model per the spec; writes checkpoint, loss CSV and summary. Returns the report."""
    train_set, test_set, resample = build_datasets(spec)
    policy, predictor = build_nets(spec, train_set)
    config = RunConfig(**{**spec.run.__dict__, "selector": selector})
    report = train(train_set, policy, predictor, config, resample=resample)
    spec.output.mkdir(parents=True, exist_ok=True)
    suffix = "" if selector == "learned" else f"_{selector}"
    checkpoint = Path(checkpoint) if checkpoint else spec.output / f"checkpoint{suffix}.npz"
    save_checkpoint(checkpoint, policy, predictor, _checkpoint_meta(spec, train_set, selector))
    with open(spec.output / f"loss{suffix}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss"])
        for epoch, loss in enumerate(report.epoch_losses):
            w.writerow([epoch, repr(loss)])
    summary = report.to_dict()
    summary.update({"selector": selector, "checkpoint": str(checkpoint), "n_train": len(train_set),
                    "n_test": len(test_set), "dataset_kind": train_set.kind})
    (spec.output / f"summary{suffix}.json").write_text(json.dumps(summary, indent=1))
    return report, checkpoint


def load_compatible(checkpoint, dataset):
    checkpoint = Path(checkpoint)
    if not checkpoint.is_file():
        raise ConfigError(f"checkpoint {checkpoint} does not exist")
    policy, predictor, meta = load_checkpoint(checkpoint)
    if policy.token_dim != dataset.token_dim or predictor.n_classes != dataset.n_classes:
        raise ConfigError(
            f"checkpoint expects token_dim={policy.token_dim}, K={predictor.n_classes}; "
            f"dataset has token_dim={dataset.token_dim}, K={dataset.n_classes}")
    return policy, predictor, meta


def parse_budgets(text):
    try:
        budgets = sorted({int(b) for b in text.split(",") if b.strip()})
    except ValueError:
        raise ConfigError(f"--budgets: cannot parse {text!r}") from None
    if not budgets or budgets[0] < 1:
        raise ConfigError("--budgets must list positive integers")
    return budgets


# -- commands -----------------------------------------------------------------------

def cmd_train(args):
    spec = load_run_spec(args.spec)
    if args.seed is not None:
        spec.run.seed = args.seed
    report, ckpt = train_run(spec, selector=args.selector, checkpoint=args.checkpoint)
    print(f"trained {len(report.epoch_losses)} epochs in {report.wall_clock:.1f}s; "
          f"final loss {report.epoch_losses[-1]:.4f}; checkpoint {ckpt}")
    return EXIT_OK


def cmd_eval(args):
    spec = load_run_spec(args.spec)
    if args.seed is not None:
        spec.run.seed = args.seed
    _, test_set, _ = build_datasets(spec)
    ckpt = Path(args.checkpoint) if args.checkpoint else spec.output / "checkpoint.npz"
    policy, predictor, _ = load_compatible(ckpt, test_set)
    budgets = parse_budgets(args.budgets)
    acc = evaluate(test_set, policy, predictor, budgets)
    header = ["budget", "accuracy", "n"]
    random_acc = None
    if args.with_random_baseline:
        rckpt = ckpt.with_name(ckpt.stem + "_random.npz")
        if not rckpt.is_file():
            log.info("training the random-selector baseline into %s", rckpt)
            train_run(spec, selector="random", checkpoint=rckpt)
        _, rpred, _ = load_compatible(rckpt, test_set)
        random_acc = evaluate(test_set, None, rpred, budgets, rng=stream_rng(spec.seed, 3))
        header.append("random_accuracy")
    spec.output.mkdir(parents=True, exist_ok=True)
    out = Path(args.output) if args.output else spec.output / "eval.csv"
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for b in budgets:
            row = [b, f"{acc[b]:.6f}", len(test_set)]
            if random_acc is not None:
                row.append(f"{random_acc[b]:.6f}")
            w.writerow(row)
    print(out.read_text(), end="")
    return EXIT_OK


def frequency_grid(dataset, policy, budget):
    if dataset.image_shape is None:
        raise ConfigError("heatmap needs an image dataset")
    h, w = dataset.image_shape[:2]
    grid = np.zeros((h, w), dtype=np.int64)
    for (r, c), count in selection_frequency(dataset, policy, budget).items():
        grid[r, c] += count
    return grid


def write_pgm(path, grid):
    """8-bit binary PGM, max-normalized so the most selected pixel is white."""
    top = grid.max()
    pixels = np.zeros(grid.shape, dtype=np.uint8) if top == 0 else \
        np.round(255.0 * grid / top).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5 {grid.shape[1]} {grid.shape[0]} 255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def cmd_heatmap(args):
    spec = load_run_spec(args.spec)
    if spec.dataset["kind"] != "image-idx":
        raise ConfigError("heatmap needs dataset.kind = image-idx")
    _, test_set, _ = build_datasets(spec)
    ckpt = Path(args.checkpoint) if args.checkpoint else spec.output / "checkpoint.npz"
    policy, _, _ = load_compatible(ckpt, test_set)
    grid = frequency_grid(test_set, policy, args.budget)
    spec.output.mkdir(parents=True, exist_ok=True)
    np.savetxt(spec.output / "heatmap.csv", grid, fmt="%d", delimiter=",")
    write_pgm(spec.output / "heatmap.pgm", grid)
    print(f"heatmap over {len(test_set)} images, budget {args.budget}: {spec.output / 'heatmap.pgm'}")
    return EXIT_OK


def _oracle_policy_fn(kind, policy, rng):
    if kind == "oracle":
        return lambda spec, inst, revealed: greedy_oracle_select(spec, revealed)
    if kind == "random":
        def pick(spec, inst, revealed):
            done = {lam for lam, _ in revealed}
            return int(rng.choice([i for i in range(spec.n_features) if i not in done]))
        return pick
    return oracle_policy(policy)


def oracle_report(spec, policy_kind="trained", policy=None):
    """Agreement of a selector with the greedy CMI oracle, plus CMI verification data."""
    d = spec.dataset
    fixed = load_spec(d["spec_file"]) if d["spec_file"] else None

    def draw(rng):
        return fixed if fixed is not None else random_spec(rng, d["n_features"], d["n_classes"])

    rates = agreement(_oracle_policy_fn(policy_kind, policy, stream_rng(spec.seed, 5)), draw,
                      d["agreement_trials"], d["agreement_steps"], stream_rng(spec.seed, 4))
    # brute-force cross-check of the enumeration on a few trajectories
    rng = stream_rng(spec.seed, 6)
    worst, tables = 0.0, []
    for trial in range(5):
        nb = draw(rng)
        inst = sample_instance(nb, rng)
        revealed = []
        for step in range(d["agreement_steps"]):
            table = cmi_table(nb, revealed)
            for lam in range(nb.n_features):
                if not np.isnan(table[lam]):
                    worst = max(worst, abs(table[lam] - brute_force_cmi(nb, revealed, lam)))
            tables.append((trial, step, table))
            best = greedy_oracle_select(nb, revealed)
            revealed.append((best, int(inst.values[best])))
    return {"policy": policy_kind, "agreement": [float(r) for r in rates],
            "trials": d["agreement_trials"], "brute_force_max_abs_diff": worst}, tables


def cmd_oracle_check(args):
    spec = load_run_spec(args.spec)
    if spec.dataset["kind"] != "synthetic-oracle":
        raise ConfigError("oracle-check needs dataset.kind = synthetic-oracle")
    if args.seed is not None:
        spec.run.seed = args.seed
    policy = None
    if args.policy == "trained":
        ckpt = Path(args.checkpoint) if args.checkpoint else spec.output / "checkpoint.npz"
        if not ckpt.is_file():
            train_run(spec, checkpoint=ckpt)
        policy, _, meta = load_checkpoint(ckpt)
        if meta.get("kind") != "synthetic-oracle":
            raise ConfigError(f"checkpoint {ckpt} was not trained on a synthetic-oracle dataset")
    report, tables = oracle_report(spec, args.policy, policy)
    spec.output.mkdir(parents=True, exist_ok=True)
    (spec.output / "oracle_report.json").write_text(json.dumps(report, indent=1))
    with open(spec.output / "cmi_tables.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", "step", "feature", "cmi"])
        for trial, step, table in tables:
            for lam, v in enumerate(table):
                w.writerow([trial, step, lam, "revealed" if np.isnan(v) else repr(float(v))])
    print(json.dumps(report))
    return EXIT_OK


def cmd_selfcheck(args):
    from vardfs.selfcheck import run_all

    results = run_all(seed=args.seed or 0)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK_FAILED


# -- entry point --------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="vardfs", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=True):
        p.add_argument("--spec", required=True, help="INI run spec")
        if checkpoint:
            p.add_argument("--checkpoint", help="checkpoint path (default: <output>/checkpoint.npz)")
        p.add_argument("--seed", type=int, help="override train.seed")
        return p

    p = common(sub.add_parser("train", help="train policy and predictor"))
    p.add_argument("--selector", choices=("learned", "random"), default="learned")
    p.set_defaults(func=cmd_train)
    p = common(sub.add_parser("eval", help="accuracy per budget on the test split"))
    p.add_argument("--budgets", default="1,5,10")
    p.add_argument("--with-random-baseline", action="store_true")
    p.add_argument("--output", help="CSV path (default: <output>/eval.csv)")
    p.set_defaults(func=cmd_eval)
    p = common(sub.add_parser("heatmap", help="pixel selection frequency grid"))
    p.add_argument("--budget", type=int, default=10)
    p.set_defaults(func=cmd_heatmap)
    p = common(sub.add_parser("oracle-check", help="agreement with the greedy CMI oracle"))
    p.add_argument("--policy", choices=("trained", "oracle", "random"), default="trained")
    p.set_defaults(func=cmd_oracle_check)
    p = sub.add_parser("selfcheck", help="gradient, Gumbel-max and permutation checks")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"vardfs: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, FormatError, VardfsError, OSError) as exc:
        print(f"vardfs: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
