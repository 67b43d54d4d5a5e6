"""Deterministic training/evaluation loop, metrics CSV, and checkpoints.

Every stochastic source derives from the master seed: weight init, data
generation, per-epoch shuffling, and per-step dropout each get their own
counter-keyed stream, so a run is a pure function of its config and a
checkpoint can resume bit-exactly mid-schedule.

Metrics land in ``metrics.csv`` with the fixed header
``step,epoch,split,loss,metric,metric_kind,fraction_of_baseline,lr,wall_ms``;
rows are flushed as they are produced so an aborted run keeps its
partial history. Checkpoints are a self-describing container: a text
header (format tag, config hash, name/shape/dtype table) followed by the
raw little-endian buffers in header order.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

log = logging.getLogger(__name__)

from . import nn, tasks
from . import tensor as T
from .config import ExperimentConfig, config_hash, save_config, to_ini
from .optim import NumericalFailure, PlateauAnnealer, make_optimizer, zero_grads
from .tensor import Tensor

CSV_HEADER = "step,epoch,split,loss,metric,metric_kind,fraction_of_baseline,lr,wall_ms"
CHECKPOINT_MAGIC = "seqlab-checkpoint v1"
PRECISION = "float32"


class CheckpointError(RuntimeError):
    """Checkpoint missing, malformed, or inconsistent with the run."""


@dataclass
class MetricsRow:
    step: int
    epoch: int
    split: str
    loss: float
    metric: float
    metric_kind: str
    fraction_of_baseline: Optional[float]
    lr: float
    wall_ms: int

    def to_csv(self) -> str:
        frac = "" if self.fraction_of_baseline is None else repr(float(self.fraction_of_baseline))
        return ",".join(
            [
                str(self.step),
                str(self.epoch),
                self.split,
                repr(float(self.loss)),
                repr(float(self.metric)),
                self.metric_kind,
                frac,
                repr(float(self.lr)),
                str(self.wall_ms),
            ]
        )


def stream_seed(master: int, stream: str, index: int = 0) -> list[int]:
    """Independent, named child seed usable as np.random entropy."""
    digest = hashlib.sha256(f"{stream}:{index}".encode()).digest()
    tag = int.from_bytes(digest[:8], "little")
    return [master, tag, index]


def _rng(master: int, stream: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(stream_seed(master, stream, index))


def _int_seed(master: int, stream: str) -> int:
    digest = hashlib.sha256(f"{stream}:{master}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


# ---------------------------------------------------------------------------
# wiring configs to datasets and models
# ---------------------------------------------------------------------------


def build_datasets(cfg: ExperimentConfig):
    """Materialize (train, test) datasets for the configured task."""
    tc = cfg.task
    master = cfg.seed + tc.data_seed
    if tc.kind == "adding":
        train = tasks.gen_adding(tc.n_train, tc.t_len, _int_seed(master, "data-train"))
        test = tasks.gen_adding(tc.n_test, tc.t_len, _int_seed(master, "data-test"))
        return train, test
    if tc.kind == "copy_memory":
        train = tasks.gen_copy_memory(tc.n_train, tc.t_len, _int_seed(master, "data-train"))
        test = tasks.gen_copy_memory(tc.n_test, tc.t_len, _int_seed(master, "data-test"))
        return train, test
    if tc.kind in ("mnist", "pmnist"):
        perm = tc.permute_seed if tc.permute_seed >= 0 else None
        if not tc.images_path or not tc.test_images_path:
            raise tasks.FormatError(
                "mnist task needs images_path/labels_path and test_images_path/test_labels_path"
            )
        train = tasks.mnist_dataset(tc.images_path, tc.labels_path, perm)
        test = tasks.mnist_dataset(tc.test_images_path, tc.test_labels_path, perm)
        return train, test
    if tc.kind == "charlm":
        corpus_path = tc.corpus_path
        if not corpus_path:
            # self-contained default: deterministic bundled demo corpus
            out_dir = Path(cfg.out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            corpus_path = out_dir / "demo_corpus.txt"
            if not Path(corpus_path).exists():
                tasks.write_demo_corpus(corpus_path)
        corpus = tasks.load_char_corpus(corpus_path)
        train = tasks.char_windows(corpus.train, corpus.vocab_size, tc.unroll)
        test = tasks.char_windows(corpus.test, corpus.vocab_size, tc.unroll)
        return train, test
    if tc.kind == "pianoroll":
        if not tc.data_path:
            raise tasks.FormatError("pianoroll task needs data_path")
        seqs = tasks.load_pianoroll(tc.data_path)
        n_test = max(1, len(seqs) // 10)
        return tasks.pianoroll_dataset(seqs[n_test:]), tasks.pianoroll_dataset(seqs[:n_test])
    raise ValueError(f"unknown task kind {tc.kind!r}")


def build_model(cfg: ExperimentConfig, meta: tasks.TaskMeta) -> nn.SequenceModel:
    mc = cfg.model
    rng = _rng(cfg.seed, "init")
    vocab = meta.vocab_size
    embed = None
    if vocab is not None and not mc.onehot_input:
        embed = mc.embed_dim if mc.embed_dim > 0 else mc.hidden
    if vocab is None:
        in_ch = meta.in_channels
    else:
        in_ch = vocab if mc.onehot_input else embed
    if mc.kind == "tcn":
        spec = nn.TcnSpec(
            in_channels=in_ch,
            level_channels=tuple([mc.hidden] * mc.levels),
            kernel_size=mc.kernel_size,
            dropout=mc.dropout,
            use_residual=mc.use_residual,
            use_gating=mc.use_gating,
            dilation_base=mc.dilation_base,
        )
    elif mc.kind in ("lstm", "gru", "rnn"):
        spec = nn.RnnSpec(
            cell_kind="vanilla" if mc.kind == "rnn" else mc.kind,
            in_channels=in_ch,
            hidden_size=mc.hidden,
            num_layers=mc.num_layers,
            dropout=mc.dropout,
            forget_gate_bias=mc.forget_gate_bias,
        )
    else:
        raise ValueError(f"unknown model kind {mc.kind!r}")
    head = nn.HeadSpec(mode=meta.head_mode, out_dim=meta.out_dim)
    return nn.SequenceModel(
        spec, head, vocab_size=vocab, embed_dim=embed,
        onehot_input=mc.onehot_input, rng=rng,
    )


# ---------------------------------------------------------------------------
# losses and metrics
# ---------------------------------------------------------------------------


def batch_loss(output: Tensor, batch: tasks.TaskBatch) -> Tensor:
    kind = batch.loss_kind
    if kind == "mse_last_step":
        return T.mse(output, Tensor(batch.targets))
    if kind == "ce_last_step":
        return T.cross_entropy(output, batch.targets)
    if kind in ("ce_per_step", "ce_per_token"):
        return T.cross_entropy(output, batch.targets)
    if kind == "bernoulli_per_step":
        return T.bernoulli_nll(output, batch.targets, frame_mask=batch.mask)
    raise ValueError(f"unknown loss kind {kind!r}")


def _metric_counts(output: np.ndarray, batch: tasks.TaskBatch, metric_kind: str):
    """(numerator, denominator) pair for count-style metrics."""
    if metric_kind == "accuracy":
        pred = output.argmax(axis=1)
        return float((pred == batch.targets).sum()), float(len(batch.targets))
    if metric_kind == "payload_accuracy":
        pred = output.argmax(axis=1)
        hits = (pred == batch.targets)[batch.mask]
        return float(hits.sum()), float(hits.size)
    raise ValueError(metric_kind)


def evaluate(
    model: nn.SequenceModel,
    dataset: tasks.ArrayDataset,
    batch_size: int = 256,
) -> tuple[float, float]:
    """Dropout-free pass over a dataset: (mean loss, task metric)."""
    meta = dataset.meta
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot evaluate an empty dataset")
    loss_sum = 0.0
    weight_sum = 0.0
    num = 0.0
    den = 0.0
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        batch = dataset.batch(idx)
        out = model.forward(batch.inputs, training=False)
        loss = batch_loss(out, batch)
        if batch.loss_kind == "bernoulli_per_step":
            w = float(batch.mask.sum())
        elif batch.loss_kind in ("ce_per_step", "ce_per_token"):
            w = float(batch.targets.size)
        else:
            w = float(len(idx))
        loss_sum += loss.item() * w
        weight_sum += w
        if meta.metric_kind in ("accuracy", "payload_accuracy"):
            a, b = _metric_counts(out.data, batch, meta.metric_kind)
            num += a
            den += b
    mean_loss = loss_sum / weight_sum
    if meta.metric_kind in ("accuracy", "payload_accuracy"):
        metric = num / den
    elif meta.metric_kind == "bpc":
        metric = mean_loss / math.log(2.0)
    else:  # mse / nll report the loss itself
        metric = mean_loss
    return mean_loss, metric


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _le(arr: np.ndarray) -> np.ndarray:
    out = np.asarray(arr, dtype=arr.dtype.newbyteorder("<"))
    if not out.flags.c_contiguous:
        out = out.copy()  # note: ascontiguousarray would promote 0-d to 1-d
    return out


def _named_buffers(model: nn.SequenceModel, optimizer) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for name, p in model.params.items():
        out[f"p/{name}"] = p.data
    if optimizer is not None:
        out["o/_step"] = np.asarray(optimizer.step_count, dtype=np.int64)
        out["o/_lr"] = np.asarray(optimizer.lr, dtype=np.float64)
        for key, buf in optimizer.state.items():
            out[f"o/{key}"] = buf
    return out


def checkpoint_save(path, model: nn.SequenceModel, optimizer, cfg_hash: str, step: int) -> None:
    buffers = _named_buffers(model, optimizer)
    header = [CHECKPOINT_MAGIC, f"config_hash {cfg_hash}", f"saved_step {step}"]
    blobs = []
    for name, arr in buffers.items():
        arr = _le(arr)
        dims = ",".join(str(d) for d in arr.shape) or "-"
        header.append(f"tensor {name} {arr.dtype.str} {dims} {arr.nbytes}")
        blobs.append(arr.tobytes())
    header.append("end")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        for blob in blobs:
            f.write(blob)


def _parse_checkpoint(path):
    raw = Path(path).read_bytes()
    cut = raw.find(b"end\n")
    if cut < 0 or not raw.startswith(CHECKPOINT_MAGIC.encode()):
        raise CheckpointError(f"{path} is not a checkpoint file")
    lines = raw[:cut].decode("ascii").splitlines()
    meta = {"config_hash": None, "saved_step": None}
    table = []
    for line in lines[1:]:
        fields = line.split()
        if fields[0] == "config_hash":
            meta["config_hash"] = fields[1]
        elif fields[0] == "saved_step":
            meta["saved_step"] = int(fields[1])
        elif fields[0] == "tensor":
            _, name, dtype, dims, nbytes = fields
            shape = () if dims == "-" else tuple(int(d) for d in dims.split(","))
            table.append((name, np.dtype(dtype), shape, int(nbytes)))
        else:
            raise CheckpointError(f"{path}: unexpected header line {line!r}")
    body = raw[cut + 4 :]
    buffers = {}
    offset = 0
    for name, dtype, shape, nbytes in table:
        expected = dtype.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dtype.itemsize
        if nbytes != expected:
            raise CheckpointError(f"{path}: {name} header claims {nbytes} bytes, shape says {expected}")
        if offset + nbytes > len(body):
            raise CheckpointError(f"{path}: truncated buffer for {name}")
        arr = np.frombuffer(body, dtype=dtype, count=max(1, int(np.prod(shape, dtype=np.int64))), offset=offset)
        buffers[name] = arr.reshape(shape).copy()
        offset += nbytes
    return meta, buffers


def checkpoint_load(path, model: nn.SequenceModel, optimizer=None, expect_hash: Optional[str] = None) -> int:
    """Restore parameters (and optimizer state); returns the saved step.

    Refuses to load when the config hash or the name/shape/dtype table
    disagrees with the receiving model, and reports every mismatch.
    """
    meta, buffers = _parse_checkpoint(path)
    problems = []
    if expect_hash is not None and meta["config_hash"] != expect_hash:
        problems.append(f"config hash {meta['config_hash']} != expected {expect_hash}")
    for name, p in model.params.items():
        key = f"p/{name}"
        if key not in buffers:
            problems.append(f"missing parameter {name}")
        elif buffers[key].shape != p.shape or buffers[key].dtype != p.dtype:
            problems.append(
                f"parameter {name}: checkpoint {buffers[key].dtype}{buffers[key].shape} "
                f"vs model {p.dtype}{p.shape}"
            )
    extra = [k for k in buffers if k.startswith("p/") and k[2:] not in model.params]
    problems.extend(f"unexpected parameter {k[2:]}" for k in extra)
    if problems:
        raise CheckpointError("refusing to load checkpoint:\n  " + "\n  ".join(problems))
    for name, p in model.params.items():
        p.data[...] = buffers[f"p/{name}"]
    if optimizer is not None:
        if "o/_step" in buffers:
            optimizer.step_count = int(buffers["o/_step"].reshape(()))
        if "o/_lr" in buffers:
            optimizer.lr = float(buffers["o/_lr"].reshape(()))
        for key, arr in buffers.items():
            if key.startswith("o/") and key not in ("o/_step", "o/_lr"):
                optimizer.state[key[2:]] = arr.copy()
    return int(meta["saved_step"] or 0)


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------


class _MetricsWriter:
    def __init__(self, path):
        self.f = open(path, "w", encoding="ascii")
        self.f.write(CSV_HEADER + "\n")
        self.f.flush()

    def write(self, row: MetricsRow) -> None:
        self.f.write(row.to_csv() + "\n")
        self.f.flush()

    def close(self) -> None:
        self.f.close()


def _epoch_order(n: int, shuffle_seed_base: list, epoch: int) -> np.ndarray:
    rng = np.random.default_rng(shuffle_seed_base + [epoch])
    return rng.permutation(n)


def train(
    cfg: ExperimentConfig,
    resume_from=None,
    stop_after: Optional[int] = None,
) -> tuple[MetricsRow, Path]:
    """Run one experiment; returns (final test row, checkpoint path).

    Writes into ``cfg.out_dir``: the resolved config, a ``run.json`` with
    the config hash and precision note, incremental ``metrics.csv``, and
    a ``checkpoint.bin``. ``stop_after`` interrupts the schedule early
    (checkpointing at that step) so a later call with ``resume_from`` can
    continue the same config without gaps in the metrics step counter.
    """
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg_hash = config_hash(cfg)
    save_config(cfg, out_dir / "config.ini")

    train_ds, test_ds = build_datasets(cfg)
    meta = train_ds.meta
    model = build_model(cfg, meta)
    sched = cfg.schedule
    oc = cfg.optim
    optimizer = make_optimizer(
        oc.kind,
        model.params,
        oc.lr,
        beta1=oc.beta1,
        beta2=oc.beta2,
        eps=oc.eps,
        momentum=oc.momentum,
        alpha=oc.alpha,
    )
    annealer = None
    if oc.plateau_patience > 0:
        annealer = PlateauAnnealer(
            oc.lr, factor=oc.plateau_factor, patience=oc.plateau_patience,
            threshold=oc.plateau_threshold,
        )

    (out_dir / "run.json").write_text(
        json.dumps(
            {
                "config_hash": cfg_hash,
                "precision": PRECISION,
                "param_count": model.param_count(),
                "task": meta.name,
                "model": cfg.model.kind,
            },
            indent=2,
        )
        + "\n"
    )

    start_step = 0
    if resume_from is not None:
        start_step = checkpoint_load(resume_from, model, optimizer, expect_hash=cfg_hash)

    n = len(train_ds)
    batch_size = min(sched.batch_size, n)
    n_batches = max(n // batch_size, 1)
    shuffle_base = stream_seed(cfg.seed, "shuffle")
    baseline = meta.baseline

    writer = _MetricsWriter(out_dir / "metrics.csv")
    t0 = time.perf_counter()
    train_loss_acc: list[float] = []
    final_row: Optional[MetricsRow] = None

    def emit(step: int, epoch: int) -> MetricsRow:
        nonlocal train_loss_acc
        wall = int((time.perf_counter() - t0) * 1000)
        if train_loss_acc:
            tl = float(np.mean(train_loss_acc))
            train_loss_acc = []
            writer.write(
                MetricsRow(step, epoch, "train", tl, tl, meta.metric_kind,
                           None if baseline is None else tl / baseline,
                           optimizer.lr, wall)
            )
        loss, metric = evaluate(model, test_ds, sched.eval_batch_size)
        row = MetricsRow(
            step, epoch, "test", loss, metric, meta.metric_kind,
            None if baseline is None else loss / baseline,
            optimizer.lr, int((time.perf_counter() - t0) * 1000),
        )
        writer.write(row)
        if annealer is not None:
            new_lr = annealer.update(loss)
            if new_lr != optimizer.lr:
                log.info("step %d: validation plateau, lr %g -> %g", step,
                         optimizer.lr, new_lr)
            optimizer.lr = new_lr
        return row

    stop_step = sched.steps if stop_after is None else min(stop_after, sched.steps)
    try:
        if start_step == 0:
            final_row = emit(0, 0)
        order = None
        current_epoch = -1
        for step in range(start_step + 1, stop_step + 1):
            epoch = (step - 1) // n_batches
            if epoch != current_epoch:
                order = _epoch_order(n, shuffle_base, epoch)
                current_epoch = epoch
            pos = (step - 1) % n_batches
            idx = order[pos * batch_size : (pos + 1) * batch_size]
            batch = train_ds.batch(idx)
            drop_rng = np.random.default_rng(stream_seed(cfg.seed, "dropout", step))
            with T.record() as tape:
                out = model.forward(batch.inputs, training=True, rng=drop_rng)
                loss = batch_loss(out, batch)
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise NumericalFailure(f"non-finite loss {loss_val} at step {step}")
            train_loss_acc.append(loss_val)
            T.backward(loss, tape)
            if oc.grad_clip > 0:
                T.clip_grad_global_norm(list(model.params.values()), oc.grad_clip)
            optimizer.step()
            zero_grads(model.params)
            if step % sched.eval_every == 0 or step == stop_step:
                final_row = emit(step, epoch)
        if final_row is None:  # resumed at or past the step budget
            final_row = emit(start_step, start_step // n_batches)
    finally:
        writer.close()

    ckpt_path = out_dir / "checkpoint.bin"
    checkpoint_save(ckpt_path, model, optimizer, cfg_hash, stop_step)
    assert final_row is not None
    return final_row, ckpt_path
