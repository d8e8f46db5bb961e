"""Experiment orchestration: the three stages, ablations, baselines and sweeps."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .classifier import DiscriminativeModel, augment_labels, predict, train_classifier
from .config import TrainingConfig
from .kmeans import kmeans
from .metrics import EvalReport, clustering_accuracy, evaluate, trial_summary
from .sccae import build_sccae, embed, pretrain
from .signals import TaskSplit, build_task, import_corpus, synth_corpus
from .ssidec import init_centroids_semisup, pseudo_labels, run_ssidec, soft_assign
from .substrate import seed_everything

log = logging.getLogger(__name__)

SWEEP_AXES = {"n_sp": "n_sp", "n_rep": "n_rep", "N_rep": "n_rep", "gamma_c": "gamma_c", "γ_c": "gamma_c"}


@dataclass
class TrialResult:
    trial: int
    seed: int
    report: EvalReport | None
    stage_metrics: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)
    change_trajectory: list = field(default_factory=list)
    failure: dict | None = None
    # exported separately, not part of the JSON record
    embeddings: np.ndarray | None = field(default=None, repr=False)
    embedding_labels: np.ndarray | None = field(default=None, repr=False)
    embedding_assignments: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if not k.startswith("embedding")}
        d["report"] = None if self.report is None else asdict(self.report)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrialResult":
        d = dict(d)
        d["report"] = None if d.get("report") is None else EvalReport.from_dict(d["report"])
        return cls(**d)


@dataclass
class ExperimentResult:
    config: dict
    config_hash: str
    trials: list[TrialResult]
    summary: dict = field(default_factory=dict)
    label: str = ""

    @property
    def task_id(self) -> str:
        return self.config["task_id"]

    def metric(self, name: str) -> list[float]:
        """Per-trial values of a stage metric or of a report field."""
        out = []
        for t in self.trials:
            if name in t.stage_metrics:
                out.append(t.stage_metrics[name])
            elif t.report is not None and getattr(t.report, name, None) is not None:
                out.append(getattr(t.report, name))
        return out

    def to_dict(self) -> dict:
        return {"config": self.config, "config_hash": self.config_hash, "label": self.label,
                "summary": self.summary, "trials": [t.to_dict() for t in self.trials]}

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentResult":
        return cls(config=d["config"], config_hash=d["config_hash"], label=d.get("label", ""),
                   summary=d.get("summary", {}), trials=[TrialResult.from_dict(t) for t in d["trials"]])

    @classmethod
    def load_json(cls, path) -> "ExperimentResult":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _summarise(trials: list[TrialResult]) -> dict:
    keys = set()
    for t in trials:
        keys.update(k for k, v in t.stage_metrics.items() if isinstance(v, (int, float)))
    summary = {}
    for k in sorted(keys):
        vals = [t.stage_metrics[k] for t in trials if k in t.stage_metrics]
        if vals:
            summary[k] = trial_summary(vals)
    return summary


def load_corpus(config: TrainingConfig):
    if config.synthetic_classes:
        if config.synthetic_classes != config.n_cluster:
            raise ValueError("synthetic_classes must equal n_cluster")
        return synth_corpus(config.synthetic_classes, config.seed, noise_std=config.synthetic_noise)
    if config.data_dir:
        manifest = config.manifest or str(Path(config.data_dir) / "manifest.csv")
        return import_corpus(config.data_dir, manifest, config.n_cluster)
    raise ValueError("no data source configured: set synthetic_classes or data_dir")


class PretrainCache:
    """Memoises stage-1 models so ablations and sweeps reuse one pre-training per seed."""

    FIELDS = ("n_input", "n_rep", "no_skip", "skip_conv_activation", "pretrain_epochs", "pretrain_lr",
              "batch_size", "pretrain_patience", "pretrain_min_delta")

    def __init__(self):
        self._store = {}

    def key(self, config, X, seed):
        digest = hashlib.sha1(np.ascontiguousarray(X, dtype=np.float32).tobytes()).hexdigest()
        return tuple(getattr(config, f) for f in self.FIELDS) + (seed, digest)

    def get(self, config, X, seed):
        k = self.key(config, X, seed)
        if k not in self._store:
            torch.manual_seed(seed)
            ae = build_sccae(config)
            ae, curve = pretrain(ae, X, config, seed=seed)
            self._store[k] = (copy.deepcopy(ae.state_dict()), list(curve))
        state, curve = self._store[k]
        ae = build_sccae(config)
        ae.load_state_dict(state)
        return ae, list(curve)


def _pretrained(config, X, seed, cache):
    if cache is None:
        cache = PretrainCache()
    return cache.get(config, X, seed)


class _Stages:
    """Times stages and turns the first exception into a failure record."""

    def __init__(self, trial: TrialResult):
        self.trial = trial

    def run(self, name, fn, *args, **kwargs):
        if self.trial.failure is not None:
            return None
        t0 = time.perf_counter()
        try:
            return fn(*args, **kwargs)
        except Exception as exc:  # noqa: BLE001 - recorded, reported, not swallowed silently
            log.error("stage %s failed: %s", name, exc)
            self.trial.failure = {"stage": name, "error": f"{type(exc).__name__}: {exc}",
                                  "traceback": traceback.format_exc(limit=5)}
            return None
        finally:
            self.trial.timings[name] = time.perf_counter() - t0


def _semisup_trial(config: TrainingConfig, split: TaskSplit, trial_idx: int, seed: int, cache) -> TrialResult:
    seed_everything(seed)
    k = config.n_cluster
    trial = TrialResult(trial=trial_idx, seed=seed, report=None)
    stages = _Stages(trial)
    sp, un = split.supervised, split.unsupervised
    X_train = split.training_spectra()

    out = stages.run("stage1", _pretrained, config, X_train, seed, cache)
    if out is None:
        return trial
    ae, curve = out
    trial.curves["pretrain_rec"] = curve

    # stage-1 reference: k-means on the pre-trained embeddings of D_un
    Z_un = embed(ae, un.spectra)
    km = kmeans(Z_un, k, max_iter=config.kmeans_max_iter, restarts=config.kmeans_restarts, seed=seed)
    trial.stage_metrics["stage1_acc"] = clustering_accuracy(un.labels, km.assignments)[0]

    if config.plain_cnn:
        aug = augment_labels(sp.spectra, sp.labels, un.spectra[:0], np.zeros(0, dtype=np.int64))
        encoder = ae.encoder
    elif config.no_idec:
        def initial_assignment():
            mu = init_centroids_semisup(ae, sp.spectra, sp.labels, k)
            return pseudo_labels(soft_assign(Z_un.astype(np.float64), mu, config.alpha, config.distance))
        s_un = stages.run("stage2", initial_assignment)
        if s_un is None:
            return trial
        aug = augment_labels(sp.spectra, sp.labels, un.spectra, s_un)
        encoder = ae.encoder
        trial.embeddings, trial.embedding_assignments = Z_un, s_un
    else:
        cfg2 = config.replace(mode="semisup")
        out = stages.run("stage2", run_ssidec, ae, X_train, cfg2, (sp.spectra, sp.labels), seed)
        if out is None:
            return trial
        state, model, hist = out
        s_un = state.s[len(sp):]
        trial.change_trajectory = hist["change"]
        for name in ("rec", "c", "v"):
            trial.curves[f"cluster_{name}"] = hist[name]
        aug = augment_labels(sp.spectra, sp.labels, un.spectra, s_un)
        encoder = model.ae.encoder
        trial.embeddings, trial.embedding_assignments = embed(encoder, un.spectra), s_un
    if not config.plain_cnn:
        trial.stage_metrics["stage2_acc"] = float(np.mean(s_un == un.labels))
        trial.embedding_labels = un.labels

    torch.manual_seed(seed)
    disc = DiscriminativeModel(encoder, k)
    curves = stages.run("stage3", train_classifier, disc, aug, config, seed)
    if curves is None:
        return trial
    trial.curves["classifier_loss"] = curves["loss"]
    trial.curves["classifier_train_acc"] = curves["accuracy"]

    # test labels are first touched here
    pred, _ = predict(disc, split.test.spectra)
    trial.report = evaluate(split.test.labels, pred, k, direct=True)
    trial.stage_metrics["stage3_acc"] = trial.report.acc
    trial.stage_metrics["accuracy"] = trial.report.acc
    return trial


def _unsup_trial(config: TrainingConfig, split: TaskSplit, trial_idx: int, seed: int, cache) -> TrialResult:
    seed_everything(seed)
    k = config.n_cluster
    trial = TrialResult(trial=trial_idx, seed=seed, report=None)
    stages = _Stages(trial)
    un = split.unsupervised
    X = un.spectra
    trial.embedding_labels = un.labels

    if config.baseline == "kmeans_raw":
        km = stages.run("kmeans", kmeans, X, k, config.kmeans_max_iter, config.kmeans_restarts, seed)
        if km is None:
            return trial
        assign = km.assignments
    else:
        out = stages.run("stage1", _pretrained, config, X, seed, cache)
        if out is None:
            return trial
        ae, curve = out
        trial.curves["pretrain_rec"] = curve
        Z = embed(ae, X)
        km = kmeans(Z, k, max_iter=config.kmeans_max_iter, restarts=config.kmeans_restarts, seed=seed)
        trial.stage_metrics["stage1_acc"] = clustering_accuracy(un.labels, km.assignments)[0]
        if config.baseline == "ae_kmeans":
            assign = km.assignments
            trial.embeddings = Z
        else:
            cfg2 = config.replace(mode="unsup")
            out = stages.run("stage2", run_ssidec, ae, X, cfg2, None, seed, km.centroids)
            if out is None:
                return trial
            state, model, hist = out
            assign = state.s
            trial.change_trajectory = hist["change"]
            for name in ("rec", "c", "v"):
                trial.curves[f"cluster_{name}"] = hist[name]
            trial.embeddings = embed(model.ae, X)
    trial.embedding_assignments = assign
    trial.report = evaluate(un.labels, assign, k)
    trial.stage_metrics["acc"] = trial.report.acc
    trial.stage_metrics["nmi"] = trial.report.nmi
    return trial


def _run(config: TrainingConfig, trial_fn, corpus, cache, label) -> ExperimentResult:
    corpus = load_corpus(config) if corpus is None else corpus
    cache = PretrainCache() if cache is None else cache
    trials = []
    for t in range(config.trials):
        seed = config.seed + t
        split = build_task(config.task_id, corpus, config, seed=seed)
        log.info("task %s trial %d (seed %d): %d labeled, %d unlabeled, %d test", config.task_id, t, seed,
                 len(split.supervised), len(split.unsupervised), len(split.test))
        trials.append(trial_fn(config, split, t, seed, cache))
    return ExperimentResult(config.to_dict(), config.config_hash(), trials, _summarise(trials), label)


def run_semisupervised(config: TrainingConfig, corpus=None, cache: PretrainCache | None = None,
                       label: str = "") -> ExperimentResult:
    """Stage 1 -> stage 2 -> stage 3 -> test accuracy, per trial."""
    if config.mode != "semisup":
        config = config.replace(mode="semisup")
    return _run(config, _semisup_trial, corpus, cache, label or _ablation_label(config))


def run_unsupervised(config: TrainingConfig, corpus=None, cache: PretrainCache | None = None,
                     label: str = "") -> ExperimentResult:
    """Stage 1 -> stage 2 (k-means initialised) -> ACC / NMI of the pseudo-labels."""
    if config.mode != "unsup":
        config = config.replace(mode="unsup")
    return _run(config, _unsup_trial, corpus, cache, label or (config.baseline or "proposed"))


def _ablation_label(config) -> str:
    if config.plain_cnn:
        return "CNN"
    flags = [name for name, on in (("NoIDEC", config.no_idec), ("NoVAT", config.no_vat),
                                   ("NoSkip", config.no_skip)) if on]
    return "+".join(flags) or "proposed"


def run_experiment(config: TrainingConfig, corpus=None, cache=None) -> ExperimentResult:
    runner = run_unsupervised if config.mode == "unsup" else run_semisupervised
    return runner(config, corpus, cache)


def run_sweep(config: TrainingConfig, axis: str, values, corpus=None, cache=None) -> list[ExperimentResult]:
    """One full run per value of ``axis`` with shared seeds and stage-1 cache."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of n_sp, n_rep, gamma_c")
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    name = SWEEP_AXES[axis]
    corpus = load_corpus(config) if corpus is None else corpus
    cache = PretrainCache() if cache is None else cache
    results = []
    for v in values:
        v = int(v) if name in ("n_sp", "n_rep") else float(v)
        cfg = config.replace(**{name: v})
        res = run_experiment(cfg, corpus, cache)
        res.label = f"{name}={v}"
        results.append(res)
    return results


def sweep_table(results: list[ExperimentResult], metric: str | None = None) -> list[dict]:
    rows = []
    for res in results:
        m = metric or ("acc" if res.config["mode"] == "unsup" else "accuracy")
        vals = res.metric(m)
        stats = trial_summary(vals) if vals else {"mean": float("nan"), "std": float("nan")}
        rows.append({"label": res.label, "metric": m, "mean": stats["mean"], "std": stats["std"]})
    return rows
