"""Mini-batch training with early stopping, cross-validation and freeze workflows."""

import copy
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .audio import FeatureConfig, load_audio, mfcc
from .data import FluencyLabel, Label, class_weights
from .exceptions import (
    AudioDecodeError,
    DivergenceError,
    EmptyInputError,
    IncompatibleCheckpointError,
    TooShortError,
)
from .metrics import (
    EvalCounts,
    RunReport,
    average_reports,
    combined_prediction,
    config_hash,
    joint_loss,
    weighted_nll,
)
from .model import Checkpoint, ModelSpec, StutterModel, apply_freeze, trainable_parameters, transplant

logger = logging.getLogger(__name__)

LOSS_MODES = ("ce", "wce")
WORKFLOWS = ("none", "enc-frz", "enc-disf-frz", "enc-fluent-frz")
# parameter groups held fixed during fine-tuning, per workflow
WORKFLOW_FROZEN = {
    "enc-frz": ("encoder",),
    "enc-disf-frz": ("encoder", "disfluent_branch"),
    "enc-fluent-frz": ("encoder", "fluent_branch"),
}


@dataclass
class TrainConfig:
    lr: float = 1e-2
    batch_size: int = 128
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    max_epochs: int = 50
    patience: int = 7
    seed: int = 0
    variant: str = "mc"
    loss_mode: str = "ce"
    freeze_workflow: str = "none"
    n_mfcc: int = 20
    dims: tuple = (64, 64, 64, 64, 192)
    bilstm_hidden: int = 64
    bilstm_layers: int = 2
    fc_hidden: int = 64
    dropout: float = 0.3
    disfluent_classes: int = 5

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.dims = tuple(self.dims)
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.freeze_workflow not in WORKFLOWS:
            raise ValueError(f"freeze_workflow must be one of {WORKFLOWS}")
        self.model_spec()

    def model_spec(self, **overrides):
        kw = dict(
            variant=self.variant, n_mfcc=self.n_mfcc, dims=self.dims,
            bilstm_hidden=self.bilstm_hidden, bilstm_layers=self.bilstm_layers,
            fc_hidden=self.fc_hidden, dropout=self.dropout,
            disfluent_classes=self.disfluent_classes,
        )
        kw.update(overrides)
        return ModelSpec(**kw)

    def to_dict(self):
        d = asdict(self)
        d["betas"], d["dims"] = list(self.betas), list(self.dims)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes):
        d = asdict(self)
        d.update(changes)
        return TrainConfig(**d)


@dataclass
class ArrayData:
    X: torch.Tensor
    y: torch.Tensor
    ids: list = field(default_factory=list)

    def __len__(self):
        return int(self.y.shape[0])


class FeatureStore:
    """Compute MFCC matrices for manifest records, memoized per segment."""

    def __init__(self, cfg=None):
        self.cfg = cfg or FeatureConfig()
        self._cache = {}

    def features(self, record):
        key = (record.audio_path, record.offset_s, record.duration_s)
        if key not in self._cache:
            wave = load_audio(record.audio_path, self.cfg.sample_rate,
                              record.offset_s, record.duration_s)
            self._cache[key] = mfcc(wave, self.cfg).values.astype(np.float32)
        return self._cache[key]

    def arrays(self, manifest, skip_errors=False):
        """Stack a manifest into :class:`ArrayData`; returns (data, n_skipped)."""
        mats, labels, ids, skipped = [], [], [], 0
        for rec in manifest.records:
            try:
                mats.append(self.features(rec))
            except (AudioDecodeError, EmptyInputError, TooShortError):
                if not skip_errors:
                    raise
                logger.warning("skipping unreadable record %s", rec.id)
                skipped += 1
                continue
            labels.append(int(rec.label))
            ids.append(rec.id)
        if mats:
            t = min(m.shape[0] for m in mats)
            if any(m.shape[0] != t for m in mats):
                logger.warning("cropping feature matrices to %d frames", t)
            X = torch.from_numpy(np.stack([m[:t] for m in mats]))
        else:
            X = torch.zeros((0, 0, self.cfg.n_mfcc))
        return ArrayData(X, torch.tensor(labels, dtype=torch.long), ids), skipped


class EarlyStopping:
    """Track the best validation loss; signal a stop after ``patience`` flat epochs."""

    def __init__(self, patience):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.since_improve = 0

    def update(self, epoch, loss):
        """Record one epoch; returns True when training should stop."""
        if loss < self.best:
            self.best, self.best_epoch, self.since_improve = loss, epoch, 0
            return False
        self.since_improve += 1
        return self.since_improve >= self.patience


def head_targets(head, y, disfluent_classes=5):
    """Targets and sample mask for one head given 5-way labels."""
    if head == "fluent":
        return (y != int(Label.Fluent)).long(), None
    if disfluent_classes == 4:
        mask = y != int(Label.Fluent)
        return y[mask], mask
    return y, None


def loss_weights(cfg, y, heads):
    """Per-head class-weight tensors (None under plain cross-entropy)."""
    if cfg.loss_mode == "ce":
        return {h: None for h in heads}
    y = np.asarray(y)
    out = {}
    for h in heads:
        if h == "fluent":
            pseudo = (y != int(Label.Fluent)).astype(np.int64)
            w = class_weights(pseudo, n_classes=len(FluencyLabel))
        elif cfg.disfluent_classes == 4:
            w = class_weights(y[y != int(Label.Fluent)], n_classes=4)
        else:
            w = class_weights(y)
        out[h] = torch.tensor(w, dtype=torch.float32)
    return out


def model_loss(scores, y, weights, disfluent_classes=5):
    """Joint loss over the heads present; returns (total, {head: loss})."""
    parts = {}
    for head, s in scores.items():
        target, mask = head_targets(head, y, disfluent_classes)
        if mask is not None:
            s = s[mask]
            if s.shape[0] == 0:
                parts[head] = s.sum() * 0.0
                continue
        parts[head] = weighted_nll(torch.log_softmax(s, dim=1), target, weights.get(head))
    total = None
    for part in parts.values():
        total = part if total is None else joint_loss(total, part)
    return total, parts


def batch_indices(n, batch_size, seed, epoch):
    """Shuffled batches for one epoch; the order depends only on (seed, epoch)."""
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


@torch.no_grad()
def dataset_loss(model, data, weights, batch_size, disfluent_classes=5):
    """Mean of per-batch losses in evaluation mode (fixed order)."""
    model.eval()
    losses = []
    for start in range(0, len(data), batch_size):
        sl = slice(start, start + batch_size)
        total, _ = model_loss(model(data.X[sl]), data.y[sl], weights, disfluent_classes)
        losses.append(float(total))
    return float(np.mean(losses)) if losses else math.nan


@dataclass
class TrainResult:
    model: StutterModel
    checkpoint: Checkpoint
    log: list
    best_epoch: int
    best_val_loss: float
    epochs_run: int
    stopped_early: bool
    pretrain: "TrainResult" = None

    def loss_log(self):
        """The log without wall-clock fields."""
        return [{k: v for k, v in row.items() if k != "elapsed_s"} for row in self.log]


def fit_model(model, train, valid, cfg, weights=None, validate=None, batch_hook=None,
              log_path=None):
    """Optimize ``model`` with Adam, keeping the best-validation weights.

    ``validate(model, epoch)`` may replace the built-in validation loss;
    ``batch_hook(epoch, ids)`` sees the record ids of every training batch.
    """
    heads = list(model.heads)
    weights = weights if weights is not None else loss_weights(cfg, train.y.numpy(), heads)
    params = trainable_parameters(model)
    if not params:
        raise ValueError("every parameter is frozen; nothing to train")
    torch.manual_seed(cfg.seed)
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    stopper = EarlyStopping(cfg.patience)
    best_state = copy.deepcopy(model.state_dict())
    best_opt = copy.deepcopy(opt.state_dict())
    log, stopped = [], False
    start = time.perf_counter()
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            model.train()
            batch_losses, branch = [], {h: [] for h in heads}
            for b, idx in enumerate(batch_indices(len(train), cfg.batch_size, cfg.seed, epoch)):
                if batch_hook is not None:
                    batch_hook(epoch, [train.ids[i] for i in idx] if train.ids else list(idx))
                idx = torch.from_numpy(idx)
                total, parts = model_loss(model(train.X[idx]), train.y[idx], weights,
                                          model.spec.disfluent_classes)
                if not torch.isfinite(total):
                    raise DivergenceError(
                        f"non-finite loss at epoch {epoch}, batch {b} (lr={cfg.lr})"
                    )
                opt.zero_grad()
                total.backward()
                opt.step()
                batch_losses.append(total.item())
                for h, v in parts.items():
                    branch[h].append(v.item())
            if validate is not None:
                val_loss = float(validate(model, epoch))
            else:
                val_loss = dataset_loss(model, valid, weights, cfg.batch_size,
                                        model.spec.disfluent_classes)
            row = {"epoch": epoch, "train_loss": float(np.mean(batch_losses)),
                   "val_loss": val_loss}
            row.update({f"loss_{h}": float(np.mean(v)) for h, v in branch.items()})
            row["elapsed_s"] = round(time.perf_counter() - start, 3)
            log.append(row)
            if log_fh:
                log_fh.write(json.dumps(row) + "\n")
                log_fh.flush()
            logger.info("epoch %d train %.4f val %.4f", epoch, row["train_loss"], val_loss)
            improved_before = stopper.best
            stop = stopper.update(epoch, val_loss)
            if stopper.best < improved_before:
                best_state = copy.deepcopy(model.state_dict())
                best_opt = copy.deepcopy(opt.state_dict())
            if stop:
                stopped = True
                break
    finally:
        if log_fh:
            log_fh.close()
    model.load_state_dict(best_state)
    model.eval()
    ckpt = Checkpoint.from_model(
        model, epoch=stopper.best_epoch, best_val_loss=stopper.best,
        optimizer_state=best_opt, config=cfg.to_dict(),
    )
    return TrainResult(model, ckpt, log, stopper.best_epoch, stopper.best, len(log), stopped)


def build_model(cfg, spec=None):
    torch.manual_seed(cfg.seed)
    return StutterModel(spec or cfg.model_spec())


def _arrays(data, store, skip_errors=False):
    if isinstance(data, ArrayData):
        return data
    return store.arrays(data, skip_errors=skip_errors)[0]


def train_fold(cfg, train, valid, store=None, validate=None, batch_hook=None, model=None,
               log_path=None):
    """Train one model from fresh parameters and return the best-validation checkpoint."""
    store = store or FeatureStore()
    train_d, valid_d = _arrays(train, store), _arrays(valid, store)
    if len(train_d) == 0 or (validate is None and len(valid_d) == 0):
        raise ValueError("training and validation sets must be non-empty")
    model = model if model is not None else build_model(cfg)
    return fit_model(model, train_d, valid_d, cfg, validate=validate,
                     batch_hook=batch_hook, log_path=log_path)


def pretrain_finetune(cfg, train, valid, workflow=None, store=None, batch_hook=None,
                      log_path=None):
    """Pretrain one branch with WCE, transplant it, freeze, and fine-tune.

    * ``enc-frz``: pretrain encoder + 5-way head, reuse it as the disfluent
      branch, freeze the encoder and fine-tune both branches.
    * ``enc-disf-frz``: same pretraining; freeze encoder and disfluent branch
      and train a fresh fluent branch.
    * ``enc-fluent-frz``: pretrain encoder + fluent branch; freeze both and
      fine-tune the disfluent branch.
    """
    workflow = workflow or cfg.freeze_workflow
    if workflow not in WORKFLOW_FROZEN:
        raise ValueError(f"workflow must be one of {tuple(WORKFLOW_FROZEN)}")
    store = store or FeatureStore()
    train_d, valid_d = _arrays(train, store), _arrays(valid, store)
    variant = "mb" if cfg.variant == "single" else cfg.variant
    target_spec = cfg.model_spec(variant=variant)
    pre_head = "fluent" if workflow == "enc-fluent-frz" else "disfluent"
    pre_cfg = cfg.replace(loss_mode="wce", variant=variant)
    pre_spec = ModelSpec.from_dict({**target_spec.to_dict(), "heads": (pre_head,)})
    pre = fit_model(build_model(pre_cfg, pre_spec), train_d, valid_d, pre_cfg,
                    log_path=None if log_path is None else Path(log_path).with_suffix(".pretrain.log"))
    model = build_model(cfg, target_spec)
    transplant(pre.model, model, ("encoder", f"{pre_head}_branch"))
    apply_freeze(model, WORKFLOW_FROZEN[workflow])
    fine_cfg = cfg.replace(variant=variant)
    result = fit_model(model, train_d, valid_d, fine_cfg, batch_hook=batch_hook,
                       log_path=log_path)
    result.pretrain = pre
    return result


@torch.no_grad()
def predict_scores(model, X, batch_size=256):
    """Softmax outputs per head, evaluated in inference mode."""
    model.eval()
    out = {h: [] for h in model.heads}
    for start in range(0, X.shape[0], batch_size):
        for h, p in model.predict_proba(X[start:start + batch_size]).items():
            out[h].append(p)
    return {h: torch.cat(v).double().numpy() for h, v in out.items()}


def predict_labels(model, X, batch_size=256):
    probs = predict_scores(model, X, batch_size)
    if "disfluent" not in probs:
        raise IncompatibleCheckpointError("model has no 5-way head to label stutter types")
    if "fluent" in probs:
        disf = probs["disfluent"]
        if disf.shape[1] == 4:
            disf = np.concatenate([disf, np.zeros((disf.shape[0], 1))], axis=1)
        return combined_prediction(probs["fluent"], disf)
    return probs["disfluent"].argmax(axis=1)


def evaluate(model, test, store=None, fold=None, cfg_hash=""):
    """Score a model (or :class:`Checkpoint`) on a manifest and build a RunReport.

    Unreadable records are skipped and reflected in ``coverage``.
    """
    if isinstance(model, Checkpoint):
        try:
            model = model.build()
        except RuntimeError as exc:
            raise IncompatibleCheckpointError(str(exc)) from exc
    store = store or FeatureStore()
    if isinstance(test, ArrayData):
        data, skipped = test, 0
    else:
        data, skipped = store.arrays(test, skip_errors=True)
    if data.X.shape[0] and data.X.shape[2] != model.spec.n_mfcc:
        raise IncompatibleCheckpointError(
            f"model expects {model.spec.n_mfcc} features, data has {data.X.shape[2]}"
        )
    if len(data):
        pred = predict_labels(model, data.X)
        counts = EvalCounts.from_predictions(data.y.numpy(), pred)
    else:
        counts = EvalCounts()
    return RunReport.from_counts(counts, fold=fold, config_hash=cfg_hash, skipped=skipped)


def fold_manifests(manifest, fold):
    return (manifest.subset(fold.train, "train"), manifest.subset(fold.valid, "valid"),
            manifest.subset(fold.test, "test"))


def train_any(cfg, train, valid, store, batch_hook=None, log_path=None):
    if cfg.freeze_workflow != "none":
        return pretrain_finetune(cfg, train, valid, cfg.freeze_workflow, store,
                                 batch_hook=batch_hook, log_path=log_path)
    return train_fold(cfg, train, valid, store, batch_hook=batch_hook, log_path=log_path)


def _run_one_fold(cfg, manifest, fold, k, store, out_dir, batch_hook=None):
    train, valid, test = fold_manifests(manifest, fold)
    fold_dir = None
    if out_dir is not None:
        fold_dir = Path(out_dir) / f"fold{k:02d}"
        fold_dir.mkdir(parents=True, exist_ok=True)
    result = train_any(cfg, train, valid, store, batch_hook=batch_hook,
                       log_path=None if fold_dir is None else fold_dir / "train.log")
    report = evaluate(result.model, test, store, fold=k, cfg_hash=config_hash(cfg.to_dict()))
    result.checkpoint.config["features"] = asdict(store.cfg)
    if fold_dir is not None:
        result.checkpoint.save(fold_dir / "model.pt")
        (fold_dir / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    return result, report


def _fold_worker(args):
    cfg, manifest, fold, k, feat_cfg, out_dir = args
    _, report = _run_one_fold(cfg, manifest, fold, k, FeatureStore(feat_cfg), out_dir)
    return report


@dataclass
class CVResult:
    reports: list
    average: RunReport
    failures: list
    results: list = field(default_factory=list)


def run_cv(cfg, manifest, plan, store=None, out_dir=None, jobs=1, batch_hook=None):
    """Train and test every fold independently; average the completed folds."""
    store = store or FeatureStore()
    missing = set(manifest.podcasts) - set().union(*(f.train | f.valid | f.test for f in plan.folds))
    if missing:
        raise ValueError(f"split plan does not cover podcasts {sorted(missing)[:5]}")
    reports, failures, results = [], [], []
    if jobs > 1:
        args = [(cfg, manifest, fold, k, store.cfg, out_dir) for k, fold in enumerate(plan.folds)]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_fold_worker, a) for a in args]
            for k, fut in enumerate(futures):
                try:
                    reports.append(fut.result())
                except Exception as exc:  # noqa: BLE001 - recorded, not swallowed
                    failures.append({"fold": k, "error": repr(exc)})
    else:
        for k, fold in enumerate(plan.folds):
            try:
                result, report = _run_one_fold(cfg, manifest, fold, k, store, out_dir, batch_hook)
            except Exception as exc:  # noqa: BLE001
                logger.error("fold %d failed: %r", k, exc)
                failures.append({"fold": k, "error": repr(exc)})
                continue
            results.append(result)
            reports.append(report)
    average = average_reports(reports, expected=len(plan.folds)) if reports else None
    if out_dir is not None and average is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "report_average.json").write_text(average.to_json() + "\n",
                                                            encoding="utf-8")
    return CVResult(reports, average, failures, results)


def holdout_split(manifest, valid_fraction=0.1, seed=0):
    """Split by podcast into train/valid manifests (at least one podcast each)."""
    pods = manifest.podcasts
    if len(pods) < 2:
        raise ValueError("need at least two podcasts for a held-out validation set")
    order = [pods[i] for i in np.random.default_rng(seed).permutation(len(pods))]
    n_valid = min(len(pods) - 1, max(1, int(round(valid_fraction * len(pods)))))
    valid = set(order[:n_valid])
    return manifest.subset(set(pods) - valid, "train"), manifest.subset(valid, "valid")


def cross_corpus(cfg, train_manifest, test_manifest, store=None, valid_fraction=0.1):
    """Train on one corpus (podcast-held-out validation) and test on another."""
    store = store or FeatureStore()
    train, valid = holdout_split(train_manifest, valid_fraction, cfg.seed)
    result = train_any(cfg, train, valid, store)
    report = evaluate(result.model, test_manifest, store, fold="cross-corpus",
                      cfg_hash=config_hash(cfg.to_dict()))
    return result, report

