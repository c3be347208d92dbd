"""Training/evaluation orchestration, metrics, checkpoints, experiments.

One RunConfig plus its seed determines every reported number: parameter
init, batch shuffling, and Gumbel noise all flow from a single generator
in a fixed draw order (encoder params, decoder params, reexam params,
then per-epoch shuffles interleaved with per-step noise).
"""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import corpus as corpus_mod
from . import expr
from .autodiff import no_grad
from .corpus import (DEFAULT_CONSTANTS, DEFAULT_N_MAX, MwpRecord, SynthConfig,
                     Vocab, build_decoder_table, build_vocab)
from .fusion import (MODES, FusionSchedule, GumbelSchedule, TrainContext,
                     joint_step)
from .reexam import (NoReexamHead, ReexamModule, infill_metrics,
                     infill_predict)
from .solver import ProblemEncoder, SequentialDecoder, TreeDecoder, beam_search


class HarnessError(RuntimeError):
    pass


class ConfigError(HarnessError):
    pass


class DataEmpty(HarnessError):
    pass


class CheckpointMismatch(HarnessError):
    pass


class CorruptManifest(HarnessError):
    pass


LEARNING_RATES = (1e-3, 1e-4, 5e-5, 2e-5)
BEAM_SIZES = (1, 3, 5)
DECODERS = ("sequential", "tree")
EXPR_ENCODERS = ("seq", "gcn")

DEFAULT_SCHEDULE = {
    "eps_decay": 0.99999,
    "tau0": 1.0,
    "tau_min": 0.5,
    "tau_rate": 3e-5,
    "tau_every": 100,
}

_CONFIG_KEYS = {
    "seed", "mode", "decoder", "expr_encoder", "d_h", "lr", "epochs",
    "batch_size", "beam", "lam", "n_max", "constants", "min_freq",
    "data", "synthetic", "corpus_seed", "split", "train_size",
    "schedule", "max_len",
}


@dataclass(frozen=True)
class RunConfig:
    seed: int
    mode: str = "solve_only"
    decoder: str = "sequential"
    expr_encoder: str = "gcn"
    d_h: int = 128
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 16
    beam: int = 1
    lam: float = 1.0
    n_max: int = DEFAULT_N_MAX
    constants: tuple = DEFAULT_CONSTANTS
    min_freq: int = 1
    data: dict | None = None
    synthetic: dict | None = None
    corpus_seed: int | None = None
    split: tuple = (0.8, 0.1, 0.1)
    train_size: int | None = None
    schedule: dict = field(default_factory=lambda: dict(DEFAULT_SCHEDULE))
    max_len: int = 30

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.decoder not in DECODERS:
            raise ConfigError(f"decoder must be one of {DECODERS}")
        if self.expr_encoder not in EXPR_ENCODERS:
            raise ConfigError(f"expr_encoder must be one of {EXPR_ENCODERS}")
        if not any(abs(self.lr - r) < 1e-12 for r in LEARNING_RATES):
            raise ConfigError(f"lr must be one of {LEARNING_RATES}")
        if self.beam not in BEAM_SIZES:
            raise ConfigError(f"beam must be one of {BEAM_SIZES}")
        if self.d_h < 2 or self.d_h % 2:
            raise ConfigError("d_h must be a positive even integer")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if (self.data is None) == (self.synthetic is None):
            raise ConfigError("specify exactly one of data / synthetic")
        unknown = set(self.schedule) - set(DEFAULT_SCHEDULE)
        if unknown:
            raise ConfigError(f"unknown schedule keys {sorted(unknown)}")
        if self.data is not None:
            missing = {"train", "valid", "test"} - set(self.data)
            extra = set(self.data) - {"train", "valid", "test"}
            if missing or extra:
                raise ConfigError("data needs exactly the keys train/valid/test")

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        if "seed" not in d:
            raise ConfigError("seed is mandatory")
        unknown = set(d) - _CONFIG_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        kw = dict(d)
        if "constants" in kw:
            kw["constants"] = tuple(float(c) for c in kw["constants"])
        if "split" in kw:
            kw["split"] = tuple(kw["split"])
        if "schedule" in kw:
            kw["schedule"] = {**DEFAULT_SCHEDULE, **kw["schedule"]}
        try:
            return RunConfig(**kw)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @staticmethod
    def from_json(path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: {e}") from e
        return RunConfig.from_dict(d)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "mode": self.mode, "decoder": self.decoder,
            "expr_encoder": self.expr_encoder, "d_h": self.d_h, "lr": self.lr,
            "epochs": self.epochs, "batch_size": self.batch_size,
            "beam": self.beam, "lam": self.lam, "n_max": self.n_max,
            "constants": list(self.constants), "min_freq": self.min_freq,
            "data": self.data, "synthetic": self.synthetic,
            "corpus_seed": self.corpus_seed, "split": list(self.split),
            "train_size": self.train_size, "schedule": dict(self.schedule),
            "max_len": self.max_len,
        }


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------

def expression_accuracy(predicted, gold) -> int:
    """1 iff the prefix token sequences are identical; Invalid counts 0."""
    if predicted is None:
        return 0
    if len(predicted) != len(gold):
        return 0
    return int(all(p.text == g.text for p, g in zip(predicted, gold)))


def value_accuracy(predicted, record: MwpRecord) -> int:
    """1 iff the prediction evaluates to the gold answer within tolerance."""
    if predicted is None:
        return 0
    ok, _ = expr.is_complete_prefix(predicted)
    if not ok:
        return 0
    try:
        value = expr.evaluate(expr.parse_prefix(list(predicted)), record.bindings())
    except expr.ExprError:
        return 0
    return int(abs(value - record.answer) <= 1e-4 * max(1.0, abs(record.answer)))


@dataclass
class MetricsReport:
    expr_acc: float
    value_acc: float
    infill_acc: float | None
    infill_pmr: float | None
    n_records: int
    beam: int
    seed: int
    config: dict
    loss_curve: list = field(default_factory=list)
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        return {
            "expr_acc": self.expr_acc, "value_acc": self.value_acc,
            "infill_acc": self.infill_acc, "infill_pmr": self.infill_pmr,
            "n_records": self.n_records, "beam": self.beam, "seed": self.seed,
            "config": self.config, "loss_curve": self.loss_curve,
            "wall_clock": self.wall_clock,
        }

    @staticmethod
    def from_dict(d: dict) -> "MetricsReport":
        return MetricsReport(**d)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def load(path) -> "MetricsReport":
        with open(path, encoding="utf-8") as fh:
            return MetricsReport.from_dict(json.load(fh))


# --------------------------------------------------------------------------
# Model assembly
# --------------------------------------------------------------------------

@dataclass
class Model:
    config: RunConfig
    vocab: Vocab
    table: corpus_mod.DecoderTable
    params: ad.ParameterSet
    encoder: ProblemEncoder
    decoder: object
    reexam: ReexamModule | None


def build_model(config: RunConfig, vocab: Vocab, rng: np.random.Generator) -> Model:
    """Instantiate all parameters in the documented draw order."""
    params = ad.ParameterSet()
    table = build_decoder_table(config.constants, config.n_max)
    encoder = ProblemEncoder(len(vocab), config.d_h, params, rng)
    if config.decoder == "sequential":
        decoder = SequentialDecoder(table, config.d_h, params, rng)
    else:
        decoder = TreeDecoder(table, config.d_h, params, rng)
    reexam = None
    if config.mode != "solve_only":
        reexam = ReexamModule(table, config.d_h, params, rng, config.expr_encoder)
    return Model(config, vocab, table, params, encoder, decoder, reexam)


def make_context(model: Model, rng: np.random.Generator) -> TrainContext:
    sched = model.config.schedule
    return TrainContext(
        vocab=model.vocab,
        table=model.table,
        encoder=model.encoder,
        decoder=model.decoder,
        reexam=model.reexam,
        params=model.params,
        adam=ad.Adam(model.params, lr=model.config.lr),
        fusion=FusionSchedule(decay=sched["eps_decay"]),
        gumbel=GumbelSchedule(tau0=sched["tau0"], floor=sched["tau_min"],
                              rate=sched["tau_rate"], every=sched["tau_every"]),
        lam=model.config.lam,
        rng=rng,
    )


def load_corpus(config: RunConfig):
    """(train, valid, test) records for the run, plus the rejection report."""
    report: dict = {}
    if config.data is not None:
        parts = []
        for name in ("train", "valid", "test"):
            recs, rej = corpus_mod.load_jsonl(
                config.data[name], config.constants, config.n_max)
            parts.append(recs)
            for k, v in rej.items():
                report[k] = report.get(k, 0) + v
        train, valid, test = parts
    else:
        synth = SynthConfig.from_dict(config.synthetic)
        seed = config.corpus_seed if config.corpus_seed is not None else config.seed
        records = corpus_mod.generate_synthetic(
            synth, seed, config.constants, config.n_max)
        train, valid, test = corpus_mod.split(records, fractions=config.split,
                                              seed=seed)
    if config.train_size is not None:
        train = train[: config.train_size]
    for name, recs in (("train", train), ("valid", valid), ("test", test)):
        if not recs:
            raise DataEmpty(f"{name} split is empty")
    return train, valid, test, report


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------

def evaluate_records(model: Model, records, beam: int) -> dict:
    """Free-running beam decode of every record; both accuracies averaged."""
    if not records:
        raise DataEmpty("no records to evaluate")
    n_expr = n_value = 0
    with no_grad():
        for rec in records:
            enc = model.encoder.encode(model.vocab.encode(rec.norm_tokens))
            hit = beam_search(enc, model.decoder, beam, model.config.max_len)
            predicted = None
            if hit is not None:
                try:
                    predicted = model.table.decode(hit[0])
                except corpus_mod.UnknownToken:
                    predicted = None
            n_expr += expression_accuracy(predicted, rec.gold_prefix)
            n_value += value_accuracy(predicted, rec)
    return {
        "expr_acc": n_expr / len(records),
        "value_acc": n_value / len(records),
        "n": len(records),
    }


def infill_eval(model: Model, records) -> dict:
    """Infilling Acc/PMR with gold expressions as the reexamining input."""
    if model.reexam is None:
        raise NoReexamHead("checkpoint was trained without a reexamining module")
    if not records:
        raise DataEmpty("no records to evaluate")
    predictions = []
    scored_records = []
    with no_grad():
        for rec in records:
            masked = corpus_mod.mask_numbers(rec)
            if masked.slot_count == 0:
                continue
            tree = rec.gold_tree()
            gold_ids = model.table.encode_prefix(rec.gold_prefix)
            q = model.reexam.quantity_from_ids(gold_ids, tree, source="gold")
            menc = model.encoder.encode(model.vocab.encode(masked.masked_tokens))
            slot_states = ad.gather_rows(menc.hidden, list(masked.slot_positions))
            logits = model.reexam.head.scores(slot_states, q)
            predictions.append(infill_predict(logits))
            scored_records.append(rec)
    return infill_metrics(predictions, scored_records)


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

def train(config: RunConfig, checkpoint_dir=None) -> tuple[Model, MetricsReport]:
    """Full training run; returns the best-on-validation model and report."""
    started = time.time()
    train_recs, valid_recs, test_recs, _ = load_corpus(config)
    rng = np.random.default_rng(config.seed)
    vocab = build_vocab(train_recs, config.min_freq)
    model = build_model(config, vocab, rng)
    ctx = make_context(model, rng)

    best_val = -1.0
    best_snap = model.params.snapshot()
    best_counters = {"t": 0, "epoch": -1}
    curve = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_recs))
        sums = {"solve": 0.0, "infill": 0.0, "total": 0.0}
        n_batches = 0
        for lo in range(0, len(order), config.batch_size):
            batch = [train_recs[i] for i in order[lo:lo + config.batch_size]]
            losses = joint_step(ctx, batch, config.mode)
            for k in sums:
                sums[k] += losses[k]
            n_batches += 1
        val = evaluate_records(model, valid_recs, beam=1)
        curve.append({
            "epoch": epoch,
            "solve": sums["solve"] / n_batches,
            "infill": sums["infill"] / n_batches,
            "total": sums["total"] / n_batches,
            "val_value_acc": val["value_acc"],
        })
        if val["value_acc"] > best_val:
            best_val = val["value_acc"]
            best_snap = model.params.snapshot()
            best_counters = {"t": ctx.t, "epoch": epoch}

    model.params.restore(best_snap)
    test = evaluate_records(model, test_recs, beam=config.beam)
    infill = infill_eval(model, test_recs) if model.reexam is not None else None
    report = MetricsReport(
        expr_acc=test["expr_acc"],
        value_acc=test["value_acc"],
        infill_acc=infill["acc"] if infill else None,
        infill_pmr=infill["pmr"] if infill else None,
        n_records=test["n"],
        beam=config.beam,
        seed=config.seed,
        config=config.to_dict(),
        loss_curve=curve,
        wall_clock=time.time() - started,
    )
    if checkpoint_dir is not None:
        save_checkpoint(checkpoint_dir, model, best_counters)
    return model, report


# --------------------------------------------------------------------------
# Checkpoints: JSON manifest + one little-endian float32 blob
# --------------------------------------------------------------------------

MANIFEST_NAME = "manifest.json"
BLOB_NAME = "params.bin"
CHECKPOINT_FORMAT = "mwpdual-checkpoint-v1"


def save_checkpoint(dirpath, model: Model, counters: dict) -> None:
    import os

    os.makedirs(dirpath, exist_ok=True)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "vocab": list(model.vocab.words),
        "decoder_tokens": list(model.table.tokens),
        "counters": dict(counters),
        "params": ad.manifest_entries(model.params),
    }
    with open(f"{dirpath}/{MANIFEST_NAME}", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    with open(f"{dirpath}/{BLOB_NAME}", "wb") as fh:
        fh.write(ad.params_to_blob(model.params))


def load_checkpoint(dirpath) -> tuple[Model, dict]:
    """Rebuild the model skeleton from the manifest and load the blob."""
    try:
        with open(f"{dirpath}/{MANIFEST_NAME}", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise CorruptManifest(f"cannot read manifest: {e}") from e
    for key in ("format", "config", "vocab", "decoder_tokens", "counters", "params"):
        if key not in manifest:
            raise CorruptManifest(f"manifest missing {key!r}")
    if manifest["format"] != CHECKPOINT_FORMAT:
        raise CorruptManifest(f"unknown format {manifest['format']!r}")

    config = RunConfig.from_dict(manifest["config"])
    vocab = Vocab(tuple(manifest["vocab"]))
    model = build_model(config, vocab, np.random.default_rng(config.seed))
    if list(model.table.tokens) != manifest["decoder_tokens"]:
        raise CheckpointMismatch("decoder table does not match the config echo")
    entries = {e["name"]: tuple(e["shape"]) for e in manifest["params"]}
    for name, tensor in model.params.items():
        if name not in entries:
            raise CheckpointMismatch(f"parameter {name!r} missing from manifest")
        if entries[name] != tensor.shape:
            raise ad.ShapeMismatch(
                f"parameter {name!r}: manifest {entries[name]}, model {tensor.shape}")
    try:
        with open(f"{dirpath}/{BLOB_NAME}", "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise CorruptManifest(f"cannot read blob: {e}") from e
    try:
        ad.params_from_blob(model.params, blob)
    except ValueError as e:
        raise CorruptManifest(str(e)) from e
    return model, manifest["counters"]


# --------------------------------------------------------------------------
# Training-set-size sweep
# --------------------------------------------------------------------------

SWEEP_HEADER = ("size", "mode", "seed", "value_acc", "expr_acc")


def _sweep_task(config: RunConfig) -> dict:
    _, report = train(config)
    return {
        "size": config.train_size,
        "mode": config.mode,
        "seed": config.seed,
        "value_acc": report.value_acc,
        "expr_acc": report.expr_acc,
    }


def sweep_train_size(config: RunConfig, sizes, repeats: int,
                     modes=("solve_only", "psedual"), max_workers=None) -> list[dict]:
    """Train every (size, mode, seed) combination; rows in task order.

    Runs are independent processes (one thread each), so the sweep
    parallelizes across cores without touching determinism.
    """
    tasks = []
    for size in sizes:
        for mode in modes:
            for r in range(repeats):
                tasks.append(replace(config, train_size=int(size), mode=mode,
                                     seed=config.seed + r))
    if max_workers is None:
        import os

        max_workers = min(len(tasks), os.cpu_count() or 1)
    if max_workers <= 1:
        return [_sweep_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(_sweep_task, tasks))


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_HEADER)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in SWEEP_HEADER})
