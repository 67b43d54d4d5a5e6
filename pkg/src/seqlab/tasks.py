"""Benchmark task generators, file-format loaders, and analytic baselines.

Every generator is a pure function of its sizes and seed, so identical
arguments always produce bit-identical data. Datasets come out as
in-memory arrays wrapped with enough metadata (input kind, head mode,
loss kind, baseline) for the trainer to assemble a model without
task-specific branching.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

ADDING_BASELINE_MSE = 1.0 / 6.0  # Var(U+U) for a constant predictor
COPY_ALPHABET = 10  # digits 0..9; payload drawn from 1..8, 9 is the delimiter
COPY_PAYLOAD = 10
PIANO_KEYS = 88


class FormatError(ValueError):
    """A data file does not match its declared format."""


@dataclass
class TaskBatch:
    """One minibatch: inputs, targets, how to score them."""

    inputs: np.ndarray
    targets: np.ndarray
    loss_kind: str
    mask: Optional[np.ndarray] = None


@dataclass(frozen=True)
class TaskMeta:
    """Everything the trainer needs to wire a model to a task."""

    name: str
    input_kind: str  # real | tokens
    in_channels: int
    out_dim: int
    head_mode: str  # last_step | per_step
    loss_kind: str
    metric_kind: str  # mse | accuracy | payload_accuracy | bpc | nll
    vocab_size: Optional[int] = None
    baseline: Optional[float] = None


class ArrayDataset:
    """Fixed arrays plus metadata; batching is index selection."""

    def __init__(self, inputs, targets, meta: TaskMeta, mask=None):
        if len(inputs) != len(targets):
            raise ValueError("inputs and targets disagree on batch size")
        self.inputs = inputs
        self.targets = targets
        self.mask = mask
        self.meta = meta

    def __len__(self) -> int:
        return len(self.inputs)

    def batch(self, idx: np.ndarray) -> TaskBatch:
        return TaskBatch(
            inputs=self.inputs[idx],
            targets=self.targets[idx],
            loss_kind=self.meta.loss_kind,
            mask=None if self.mask is None else self.mask[idx],
        )


# ---------------------------------------------------------------------------
# synthetic stress tests
# ---------------------------------------------------------------------------


def gen_adding(n_samples: int, t_len: int, rng_seed: int) -> ArrayDataset:
    """Two-channel sequences: channel 0 uniform values, channel 1 marks two
    distinct positions; the target is the sum of the two marked values."""
    if t_len < 2:
        raise ValueError("adding task needs T >= 2")
    rng = np.random.default_rng(rng_seed)
    values = rng.random((n_samples, t_len), dtype=np.float64).astype(np.float32)
    markers = np.zeros((n_samples, t_len), dtype=np.float32)
    first = rng.integers(0, t_len, size=n_samples)
    second = rng.integers(0, t_len - 1, size=n_samples)
    second = second + (second >= first)  # uniform over distinct pairs
    rows = np.arange(n_samples)
    markers[rows, first] = 1.0
    markers[rows, second] = 1.0
    inputs = np.stack([values, markers], axis=1)
    targets = (values[rows, first] + values[rows, second]).reshape(-1, 1)
    meta = TaskMeta(
        name="adding",
        input_kind="real",
        in_channels=2,
        out_dim=1,
        head_mode="last_step",
        loss_kind="mse_last_step",
        metric_kind="mse",
        baseline=ADDING_BASELINE_MSE,
    )
    return ArrayDataset(inputs, targets, meta)


def gen_copy_memory(n_samples: int, t_len: int, rng_seed: int) -> ArrayDataset:
    """Recall task: a 10-digit payload, T-1 blanks, then eleven delimiter 9s.

    The target repeats the payload in the last 10 positions and is zero
    elsewhere; the mask flags those payload positions for accuracy.
    """
    if t_len < 1:
        raise ValueError("copy task needs T >= 1")
    rng = np.random.default_rng(rng_seed)
    total = t_len + 2 * COPY_PAYLOAD
    payload = rng.integers(1, 9, size=(n_samples, COPY_PAYLOAD))
    inputs = np.zeros((n_samples, total), dtype=np.int64)
    inputs[:, :COPY_PAYLOAD] = payload
    inputs[:, t_len + COPY_PAYLOAD - 1 :] = 9  # delimiter plus recall window
    targets = np.zeros((n_samples, total), dtype=np.int64)
    targets[:, -COPY_PAYLOAD:] = payload
    mask = np.zeros((n_samples, total), dtype=bool)
    mask[:, -COPY_PAYLOAD:] = True
    meta = TaskMeta(
        name="copy_memory",
        input_kind="tokens",
        in_channels=0,
        out_dim=COPY_ALPHABET,
        head_mode="per_step",
        loss_kind="ce_per_step",
        metric_kind="payload_accuracy",
        vocab_size=COPY_ALPHABET,
        baseline=copy_memory_baseline(t_len),
    )
    return ArrayDataset(inputs, targets, meta, mask=mask)


def copy_memory_baseline(t_len: int) -> float:
    """Loss of the best memoryless predictor: ln 8 on each of the 10
    payload positions, zero elsewhere, averaged over the whole sequence."""
    return COPY_PAYLOAD * math.log(8.0) / (t_len + 2 * COPY_PAYLOAD)


def baseline_loss(task: str, t_len: Optional[int] = None) -> Optional[float]:
    """Analytic memoryless baseline, or None when the task has none."""
    if task == "adding":
        return ADDING_BASELINE_MSE
    if task == "copy_memory":
        if t_len is None:
            raise ValueError("copy baseline needs T")
        return copy_memory_baseline(t_len)
    return None


# ---------------------------------------------------------------------------
# MNIST (IDX format, big endian)
# ---------------------------------------------------------------------------

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _read_be32(buf: bytes, offset: int, path: str) -> int:
    if offset + 4 > len(buf):
        raise FormatError(f"{path}: truncated header at byte {offset}")
    return int.from_bytes(buf[offset : offset + 4], "big")


def load_mnist_idx(images_path, labels_path):
    """Read an IDX image/label file pair into ([n,28,28] u8, [n] u8)."""
    with open(images_path, "rb") as f:
        raw = f.read()
    magic = _read_be32(raw, 0, str(images_path))
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(
            f"{images_path}: bad magic 0x{magic:08x} at byte 0, expected 0x{IDX_IMAGES_MAGIC:08x}"
        )
    count = _read_be32(raw, 4, str(images_path))
    rows = _read_be32(raw, 8, str(images_path))
    cols = _read_be32(raw, 12, str(images_path))
    need = 16 + count * rows * cols
    if len(raw) < need:
        raise FormatError(f"{images_path}: truncated pixel data at byte {len(raw)}")
    images = np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols, offset=16)
    images = images.reshape(count, rows, cols)

    with open(labels_path, "rb") as f:
        raw = f.read()
    magic = _read_be32(raw, 0, str(labels_path))
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(
            f"{labels_path}: bad magic 0x{magic:08x} at byte 0, expected 0x{IDX_LABELS_MAGIC:08x}"
        )
    n_labels = _read_be32(raw, 4, str(labels_path))
    if len(raw) < 8 + n_labels:
        raise FormatError(f"{labels_path}: truncated label data at byte {len(raw)}")
    labels = np.frombuffer(raw, dtype=np.uint8, count=n_labels, offset=8)
    if n_labels != count:
        raise FormatError(f"{labels_path}: {n_labels} labels for {count} images")
    return images, labels


def sequentialize(images: np.ndarray) -> np.ndarray:
    """Flatten [n,28,28] u8 images into [n,1,784] float sequences in [0,1]."""
    n = images.shape[0]
    flat = images.reshape(n, 1, -1).astype(np.float32) / 255.0
    return flat


def permute_pixels(
    sequences: np.ndarray,
    perm_seed: Optional[int] = None,
    perm: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Apply one fixed pixel permutation (drawn from perm_seed, or given
    explicitly) identically to every sequence."""
    t_len = sequences.shape[2]
    if perm is None:
        if perm_seed is None:
            raise ValueError("need perm_seed or perm")
        perm = np.random.default_rng(perm_seed).permutation(t_len)
    return sequences[:, :, perm]


def mnist_dataset(
    images_path, labels_path, permute_seed: Optional[int] = None
) -> ArrayDataset:
    images, labels = load_mnist_idx(images_path, labels_path)
    seqs = sequentialize(images)
    name = "mnist"
    if permute_seed is not None:
        seqs = permute_pixels(seqs, permute_seed)
        name = "pmnist"
    meta = TaskMeta(
        name=name,
        input_kind="real",
        in_channels=1,
        out_dim=10,
        head_mode="last_step",
        loss_kind="ce_last_step",
        metric_kind="accuracy",
    )
    return ArrayDataset(seqs, labels.astype(np.int64), meta)


# ---------------------------------------------------------------------------
# polyphonic piano rolls
# ---------------------------------------------------------------------------


def load_pianoroll(path) -> list[np.ndarray]:
    """Parse the plain-text piano-roll format into [length, 88] 0/1 arrays.

    One sequence per block of lines; each line holds the space-separated
    active key indices (0-87) of one frame, ``-`` denotes a frame with no
    active keys, a blank line ends a sequence, ``#`` starts a comment.
    """
    sequences: list[np.ndarray] = []
    frames: list[np.ndarray] = []

    def flush():
        if frames:
            sequences.append(np.stack(frames))
            frames.clear()

    with open(path, "r", encoding="ascii") as f:
        for lineno, line in enumerate(f, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                flush()
                continue
            frame = np.zeros(PIANO_KEYS, dtype=np.float32)
            if text != "-":
                for tokenstr in text.split():
                    try:
                        key = int(tokenstr)
                    except ValueError:
                        raise FormatError(f"{path}:{lineno}: bad key {tokenstr!r}") from None
                    if not 0 <= key < PIANO_KEYS:
                        raise FormatError(
                            f"{path}:{lineno}: key {key} outside 0..{PIANO_KEYS - 1}"
                        )
                    frame[key] = 1.0
            frames.append(frame)
    flush()
    return sequences


def save_pianoroll(path, sequences) -> None:
    """Inverse of :func:`load_pianoroll`."""
    with open(path, "w", encoding="ascii") as f:
        for i, seq in enumerate(sequences):
            if i:
                f.write("\n")
            for frame in seq:
                keys = np.nonzero(frame)[0]
                line = " ".join(str(k) for k in keys) if len(keys) else "-"
                f.write(line + "\n")


def pianoroll_dataset(sequences) -> ArrayDataset:
    """Next-frame prediction: inputs are frames 0..L-2, targets 1..L-1.

    Sequences shorter than two frames contribute nothing. Variable
    lengths are right-padded; the mask flags valid target frames.
    """
    usable = [s for s in sequences if len(s) >= 2]
    meta = TaskMeta(
        name="pianoroll",
        input_kind="real",
        in_channels=PIANO_KEYS,
        out_dim=PIANO_KEYS,
        head_mode="per_step",
        loss_kind="bernoulli_per_step",
        metric_kind="nll",
    )
    if not usable:
        empty = np.zeros((0, PIANO_KEYS, 0), dtype=np.float32)
        return ArrayDataset(empty, empty.copy(), meta, mask=np.zeros((0, 0), dtype=bool))
    max_steps = max(len(s) for s in usable) - 1
    n = len(usable)
    inputs = np.zeros((n, PIANO_KEYS, max_steps), dtype=np.float32)
    targets = np.zeros((n, PIANO_KEYS, max_steps), dtype=np.float32)
    mask = np.zeros((n, max_steps), dtype=bool)
    for i, seq in enumerate(usable):
        steps = len(seq) - 1
        inputs[i, :, :steps] = seq[:-1].T
        targets[i, :, :steps] = seq[1:].T
        mask[i, :steps] = True
    return ArrayDataset(inputs, targets, meta, mask=mask)


# ---------------------------------------------------------------------------
# character-level corpora
# ---------------------------------------------------------------------------


@dataclass
class CharCorpus:
    """Byte corpus with contiguous disjoint splits and a train-only vocab."""

    vocab: np.ndarray  # sorted byte values present in the train split
    unk_id: int
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray

    @property
    def vocab_size(self) -> int:
        return len(self.vocab) + 1  # plus UNK


def load_char_corpus(path, fractions=(0.8, 0.1, 0.1)) -> CharCorpus:
    with open(path, "rb") as f:
        data = np.frombuffer(f.read(), dtype=np.uint8)
    if data.size == 0:
        raise ValueError(f"{path}: empty corpus")
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError("fractions must be three non-negative values summing to 1")
    n = data.size
    n_train = int(n * fractions[0])
    n_valid = int(n * fractions[1])
    train_bytes = data[:n_train]
    vocab = np.unique(train_bytes)
    unk_id = len(vocab)
    lut = np.full(256, unk_id, dtype=np.int64)
    lut[vocab] = np.arange(len(vocab))
    return CharCorpus(
        vocab=vocab,
        unk_id=unk_id,
        train=lut[train_bytes],
        valid=lut[data[n_train : n_train + n_valid]],
        test=lut[data[n_train + n_valid :]],
    )


def char_windows(ids: np.ndarray, vocab_size: int, unroll: int) -> ArrayDataset:
    """Cut a token stream into non-overlapping next-token windows."""
    if unroll < 1:
        raise ValueError("unroll must be >= 1")
    n_windows = (ids.size - 1) // unroll
    meta = TaskMeta(
        name="charlm",
        input_kind="tokens",
        in_channels=0,
        out_dim=vocab_size,
        head_mode="per_step",
        loss_kind="ce_per_token",
        metric_kind="bpc",
        vocab_size=vocab_size,
    )
    if n_windows < 1:
        empty = np.zeros((0, unroll), dtype=np.int64)
        return ArrayDataset(empty, empty.copy(), meta)
    used = ids[: n_windows * unroll + 1]
    inputs = used[:-1].reshape(n_windows, unroll)
    targets = used[1:].reshape(n_windows, unroll)
    return ArrayDataset(inputs.copy(), targets.copy(), meta)


def generate_demo_corpus(n_bytes: int = 1_000_000, seed: int = 20_24) -> bytes:
    """Deterministic word-like text used as the bundled language corpus.

    Sentences draw from a fixed synthetic lexicon with a Zipf-shaped
    global frequency profile, but each paragraph also carries a small
    topic vocabulary whose words keep recurring locally, the way rare
    words cluster in real text. Predicting those recurrences rewards
    models that can actually see the previous sentences. Lowercase
    letters plus space/period/newline only, so the byte vocabulary stays
    small and the entropy rate sits well below the uniform bound.
    """
    rng = np.random.default_rng(seed)
    lexicon_size = 2000
    lengths = rng.integers(2, 10, size=lexicon_size)
    letters = rng.integers(0, 26, size=int(lengths.sum()))
    words = []
    pos = 0
    for ln in lengths:
        chars = (97 + letters[pos : pos + ln]).astype(np.uint8)
        words.append(chars.tobytes().decode("ascii"))
        pos += ln
    ranks = np.arange(1, lexicon_size + 1, dtype=np.float64)
    probs = 1.0 / ranks
    probs /= probs.sum()
    chunks: list[str] = []
    total = 0
    while total < n_bytes:
        # one paragraph: topic words are drawn uniformly, so rare words
        # recur locally and long context pays off
        topic = rng.choice(lexicon_size, size=24, replace=False)
        for _ in range(int(rng.integers(3, 8))):
            n_words = int(rng.integers(4, 13))
            picks = [
                int(rng.choice(topic)) if rng.random() < 0.7
                else int(rng.choice(lexicon_size, p=probs))
                for _ in range(n_words)
            ]
            sentence = " ".join(words[i] for i in picks) + ". "
            chunks.append(sentence)
            total += len(sentence)
        chunks.append("\n")
        total += 1
    return "".join(chunks).encode("ascii")[:n_bytes]


def write_demo_corpus(path, n_bytes: int = 1_000_000, seed: int = 20_24) -> None:
    with open(path, "wb") as f:
        f.write(generate_demo_corpus(n_bytes, seed))
