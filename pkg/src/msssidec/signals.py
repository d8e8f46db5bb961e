"""Vibration records -> windows -> FFT spectra -> task splits.

Also holds the canonical ``VIB1`` record format, the CSV manifest reader,
and a synthetic corpus generator for desk-scale runs.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

WINDOW = 1024
N_INPUT = 512
MAGIC = b"VIB1"
_HEADER = struct.Struct("<4sId")

# CWRU shaft speeds per motor load; used to shift synthetic fault frequencies
_LOAD_RPM = {"0hp": 1797.0, "1hp": 1772.0, "2hp": 1750.0, "3hp": 1730.0}
CWRU_CONDITIONS = tuple(_LOAD_RPM)


@dataclass
class RawRecord:
    samples: np.ndarray
    sample_rate_hz: float
    class_label: int
    condition_tag: str

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).ravel()
        if not self.sample_rate_hz > 0:
            raise ValueError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        if self.class_label < 0:
            raise ValueError(f"class_label must be non-negative, got {self.class_label}")


@dataclass
class SpectrumSample:
    spectrum: np.ndarray
    label: int | None
    condition_tag: str

    def __post_init__(self):
        self.spectrum = np.asarray(self.spectrum, dtype=np.float64)
        if self.spectrum.shape != (N_INPUT,):
            raise ValueError(f"spectrum must have shape ({N_INPUT},), got {self.spectrum.shape}")
        if not np.all(np.isfinite(self.spectrum)) or np.any(self.spectrum < 0):
            raise ValueError("spectrum entries must be finite and non-negative")


@dataclass
class SpectrumSet:
    """Column-oriented collection of spectra.

    ``sources`` holds one ``(record_index, offset)`` pair per row so that
    window provenance can be audited.
    """

    spectra: np.ndarray
    labels: np.ndarray
    conditions: np.ndarray
    sources: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __post_init__(self):
        self.spectra = np.asarray(self.spectra, dtype=np.float32).reshape(-1, N_INPUT)
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        self.conditions = np.asarray(self.conditions, dtype=object).ravel()
        self.sources = np.asarray(self.sources, dtype=np.int64).reshape(-1, 2)
        n = len(self.spectra)
        if len(self.labels) != n or len(self.conditions) != n:
            raise ValueError("spectra, labels and conditions must have equal length")
        if len(self.sources) not in (0, n):
            raise ValueError("sources must be empty or one row per spectrum")

    def __len__(self) -> int:
        return len(self.spectra)

    def __iter__(self):
        for x, y, c in zip(self.spectra, self.labels, self.conditions):
            yield SpectrumSample(x, int(y), str(c))

    def class_counts(self, n_classes: int) -> np.ndarray:
        return np.bincount(self.labels, minlength=n_classes)

    @classmethod
    def empty(cls) -> "SpectrumSet":
        return cls(np.zeros((0, N_INPUT)), np.zeros(0), np.zeros(0))

    @classmethod
    def concat(cls, parts) -> "SpectrumSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(
            np.concatenate([p.spectra for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.conditions for p in parts]),
            np.concatenate([p.sources for p in parts]),
        )


@dataclass
class TaskSplit:
    task_id: str
    supervised: SpectrumSet
    unsupervised: SpectrumSet
    test: SpectrumSet
    seed: int
    n_classes: int

    def training_spectra(self) -> np.ndarray:
        """D_sp and D_un stacked (labeled rows first)."""
        return np.concatenate([self.supervised.spectra, self.unsupervised.spectra])


def segment(record: RawRecord | np.ndarray, window: int = WINDOW, stride: int = WINDOW // 2) -> np.ndarray:
    """Cut a record into ``[n_windows, window]`` frames in record order."""
    samples = record.samples if isinstance(record, RawRecord) else np.asarray(record, dtype=np.float64)
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be positive")
    if len(samples) < window:
        raise ValueError(f"record of length {len(samples)} is shorter than the window ({window})")
    frames = np.lib.stride_tricks.sliding_window_view(samples, window)[::stride]
    return np.ascontiguousarray(frames)


def fft_preprocess(window: np.ndarray) -> np.ndarray:
    """Max-normalised magnitudes of DFT bins 0..511 of a 1024-sample window.

    Accepts a single window or a ``[n, 1024]`` batch.
    """
    x = np.asarray(window, dtype=np.float64)
    if x.shape[-1] != WINDOW:
        raise ValueError(f"window length must be {WINDOW}, got {x.shape[-1]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("window contains non-finite values")
    mag = np.abs(np.fft.rfft(x, axis=-1))[..., :N_INPUT]
    peak = mag.max(axis=-1, keepdims=True)
    return np.divide(mag, peak, out=mag.copy(), where=peak > 0)


def synth_corpus(
    n_classes: int,
    seed: int,
    conditions: tuple[str, ...] = CWRU_CONDITIONS,
    duration_s: float = 10.0,
    sample_rate_hz: float = 12000.0,
    noise_std: float = 0.5,
) -> list[RawRecord]:
    """One amplitude-modulated multi-tone record per (class, condition).

    Class ``c`` gets a carrier spread over 500 Hz .. 0.42*fs plus a weaker
    tone at half the carrier, both modulated at a class-specific rate.
    Non-CWRU conditions keep nominal speed.
    """
    if n_classes < 2:
        raise ValueError(f"n_classes must be >= 2, got {n_classes}")
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate_hz))
    t = np.arange(n) / sample_rate_hz
    top = 0.42 * sample_rate_hz
    carriers = np.linspace(500.0, top, n_classes)
    records = []
    for c in range(n_classes):
        for cond in conditions:
            speed = _LOAD_RPM.get(cond, 1797.0) / 1797.0
            fc = carriers[c] * speed
            fm = (20.0 + 7.0 * c) * speed
            phase = rng.uniform(0, 2 * np.pi, size=3)
            envelope = 1.0 + 0.5 * np.cos(2 * np.pi * fm * t + phase[0])
            tones = np.sin(2 * np.pi * fc * t + phase[1]) + 0.4 * np.sin(np.pi * fc * t + phase[2])
            x = envelope * tones + noise_std * rng.standard_normal(n)
            records.append(RawRecord(x.astype(np.float32), sample_rate_hz, c, cond))
    return records


def write_record(path: str | Path, samples: np.ndarray, sample_rate_hz: float) -> None:
    samples = np.asarray(samples, dtype="<f4").ravel()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, len(samples), float(sample_rate_hz)))
        fh.write(samples.tobytes())


def read_record(path: str | Path) -> tuple[np.ndarray, float]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, count, rate = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    expected = _HEADER.size + 4 * count
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {count} samples, found {len(raw)}")
    if not rate > 0:
        raise ValueError(f"{path}: non-positive sample rate {rate}")
    samples = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size, count=count)
    return samples.astype(np.float64), rate


def import_corpus(path: str | Path, manifest: str | Path, n_classes: int | None = None) -> list[RawRecord]:
    """Load every record listed in a ``file,label,condition`` manifest."""
    root = Path(path)
    records = []
    with open(manifest, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["file", "label", "condition"]:
            raise ValueError(f"{manifest}: header must be 'file,label,condition', got {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            try:
                label = int(row["label"])
            except (TypeError, ValueError):
                raise ValueError(f"{manifest}:{lineno}: label {row['label']!r} is not an integer") from None
            if label < 0 or (n_classes is not None and label >= n_classes):
                raise ValueError(f"{manifest}:{lineno}: unknown class {label}")
            file = root / row["file"].strip()
            if not file.is_file():
                raise FileNotFoundError(f"{manifest}:{lineno}: missing record file {file}")
            samples, rate = read_record(file)
            records.append(RawRecord(samples, rate, label, row["condition"].strip()))
    return records


# task id -> condition tags for (supervised, unsupervised, test)
_TASK_CONDITIONS = {
    "C1": (("0hp",), ("0hp",), ("0hp",)),
    "C2": (("0hp",), ("0hp",), ("1hp", "2hp", "3hp")),
    "C3": (("0hp",), ("1hp", "2hp", "3hp"), ("1hp", "2hp", "3hp")),
    "C4": (("0hp",), ("0hp", "1hp", "2hp", "3hp"), ("1hp", "2hp", "3hp")),
    "UnsupC1": ((), ("2hp",), ()),
}


def _spread(total: int, conditions) -> dict[str, int]:
    """Split ``total`` windows as evenly as possible over conditions."""
    base, extra = divmod(total, len(conditions))
    return {c: base + (i < extra) for i, c in enumerate(conditions)}


def _windows_for(records, indices, needed, window, stride):
    """Collect ``(record_index, offset)`` for at least ``needed`` windows.

    Stride is shrunk when the records do not hold enough windows at the
    requested stride.
    """
    lengths = [len(records[i].samples) for i in indices]
    usable = [(i, L) for i, L in zip(indices, lengths) if L >= window]

    def count(s):
        return sum((L - window) // s + 1 for _, L in usable)

    s = stride
    while s > 1 and count(s) < needed:
        s = max(1, min(s - 1, int(s * count(s) / max(needed, 1))))
    if count(s) < needed:
        return None, s
    out = [(i, off) for i, L in usable for off in range(0, L - window + 1, s)]
    return out, s


def build_task(task_id: str, corpus: list[RawRecord], config, seed: int | None = None) -> TaskSplit:
    """Assemble D_sp / D_un / D_test for one of the experimental tasks.

    ``config`` supplies n_sp, n_un, n_test, n_cluster, window, stride,
    label_fraction, train_fraction and n_train_total.
    """
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    n_classes = config.n_cluster
    window, stride = config.window, config.stride
    if task_id in ("M1", "UnsupM1"):
        stride = window

    by_key: dict[tuple[int, str], list[int]] = {}
    for idx, rec in enumerate(corpus):
        by_key.setdefault((rec.class_label, rec.condition_tag), []).append(idx)

    if task_id in _TASK_CONDITIONS:
        plan = _fixed_count_plan(task_id, n_classes, config)
    elif task_id in ("C5", "M1", "UnsupM1"):
        plan = _fraction_plan(task_id, corpus, by_key, n_classes, config)
    else:
        raise ValueError(f"unknown task {task_id!r}")

    # total windows needed per (class, condition), across all three roles
    need: dict[tuple[int, str], int] = {}
    for role in plan.values():
        for key, k in role.items():
            need[key] = need.get(key, 0) + k
    for key in sorted(need, key=lambda k: (k[0], k[1])):
        if need[key] and key not in by_key:
            raise ValueError(f"task {task_id}: corpus has no records for class {key[0]} under condition {key[1]!r}")

    pools: dict[tuple[int, str], list[tuple[int, int]]] = {}
    for key, k in need.items():
        if k == 0:
            continue
        windows, used_stride = _windows_for(corpus, by_key[key], k, window, stride)
        if windows is None:
            raise ValueError(
                f"task {task_id}: class {key[0]} / {key[1]!r} holds fewer than {k} windows even at stride 1"
            )
        order = rng.permutation(len(windows))
        pools[key] = [windows[j] for j in order[:k]]

    cursor = {key: 0 for key in pools}
    sets = {}
    for role in ("supervised", "unsupervised", "test"):
        parts = []
        for key, k in sorted(plan[role].items()):
            if k == 0:
                continue
            taken = pools[key][cursor[key]: cursor[key] + k]
            cursor[key] += k
            frames = np.stack([corpus[r].samples[o: o + window] for r, o in taken])
            parts.append(SpectrumSet(fft_preprocess(frames), np.full(k, key[0]), np.full(k, key[1], dtype=object), taken))
        sets[role] = SpectrumSet.concat(parts)
    return TaskSplit(task_id, sets["supervised"], sets["unsupervised"], sets["test"], seed, n_classes)


def _fixed_count_plan(task_id, n_classes, config):
    sp_c, un_c, te_c = _TASK_CONDITIONS[task_id]
    counts = {"supervised": (sp_c, config.n_sp), "unsupervised": (un_c, config.n_un), "test": (te_c, config.n_test)}
    plan = {}
    for role, (conds, per_class) in counts.items():
        plan[role] = {}
        if not conds:
            continue
        for c in range(n_classes):
            for cond, k in _spread(per_class, conds).items():
                plan[role][(c, cond)] = k
    return plan


def _fraction_plan(task_id, corpus, by_key, n_classes, config):
    """Stratified per-class proportional plans for C5, M1 and UnsupM1."""
    plan = {"supervised": {}, "unsupervised": {}, "test": {}}
    if task_id == "C5":
        per_class_train = config.n_train_total // n_classes
        n_sp = max(1, int(round(config.label_fraction * per_class_train)))
        for c in range(n_classes):
            plan["supervised"][(c, "2hp")] = n_sp
            plan["unsupervised"][(c, "2hp")] = per_class_train - n_sp
            plan["test"][(c, "2hp")] = config.n_test
        return plan

    # M1 / UnsupM1 use every non-overlapping window across all conditions
    for c in range(n_classes):
        keys = sorted(k for k in by_key if k[0] == c)
        if not keys:
            raise ValueError(f"task {task_id}: corpus has no records for class {c}")
        for key in keys:
            avail = sum(max(0, (len(corpus[i].samples) - config.window) // config.window + 1) for i in by_key[key])
            if task_id == "UnsupM1":
                plan["unsupervised"][key] = avail
                continue
            n_train = int(avail * config.train_fraction)
            n_sp = max(1, int(round(config.label_fraction * n_train))) if n_train else 0
            plan["supervised"][key] = n_sp
            plan["unsupervised"][key] = n_train - n_sp
            plan["test"][key] = avail - n_train
    return plan
