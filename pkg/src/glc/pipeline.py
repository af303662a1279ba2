"""Training, fusion, clustering and evaluation.

Training follows a two-phase schedule: a reconstruction-only warm-up, then
joint optimization of reconstruction plus the two graph-contrastive terms,

    total = rec + alpha * global_graph_term + beta * local_weighted_term,

rebuilding both graphs from the current features on every mini-batch.
Evaluation mean-fuses the contrastive features of each sample's available
views and clusters them with k-means; reported numbers are the mean and
population std over several k-means seeds on the frozen features (a full
retrain per seed sits behind ``eval_protocol="retrain"`` at the CLI level).

Seeding is derived, never shared: with master seed s, model init uses
derive_seed(s, "init"), the warm-up batch order derive_seed(s, "pretrain"),
the joint-phase batch order derive_seed(s, "train"), mid-training metric
checkpoints derive_seed(s, "curve", epoch) and evaluation seeds
derive_seed(s, "eval", i).  Two runs with equal configs are bit-identical.
"""

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import derive_seed, iter_epoch
from .errors import ConfigError, ShapeError, TrainingAborted
from .graphs import build_global_graph, ggc_loss, lwc_total, select_pairs
from .metrics import accuracy, ari, nmi
from .model import (forward_views, init_model, model_parameters,
                    reconstruction_loss)
from .nn import AdamState, Tape, adam_step, backward, mlp_forward, mul, add
from . import nn

logger = logging.getLogger(__name__)

# model widths and epoch budgets; "paper" is the full-scale default,
# "desk" is sized for laptops, tests and synthetic studies
PROFILES = {
    "paper": {"hidden": (500, 500, 2000), "latent_dim": 512, "head_dim": 128,
              "pretrain_epochs": 200, "epochs": 200},
    "desk": {"hidden": (64, 64), "latent_dim": 32, "head_dim": 16,
             "pretrain_epochs": 50, "epochs": 100},
}


@dataclass
class TrainConfig:
    """All knobs of one training run.

    ``None`` for the architecture/epoch fields means "use the profile's
    value"; ``resolved()`` fills them in.
    """

    alpha: float = 0.1
    beta: float = 1.0
    temperature: float = 0.5
    pos_percent: float = 1.0
    neg_percent: float = 50.0
    sigma: object = "median"          # "median" or a fixed positive float
    learning_rate: float = 1e-3
    batch_size: int = 256
    profile: str = "paper"
    hidden: tuple = None
    latent_dim: int = None
    head_dim: int = None
    pretrain_epochs: int = None
    epochs: int = None
    seed: int = 0
    include_positive_in_denominator: bool = False
    normalize_weights: bool = False
    eval_every: int = 0               # 0: no mid-training metric checkpoints
    kmeans_restarts: int = 10
    eval_seeds: int = 5
    fuse_space: str = "contrast"      # or "latent"

    def resolved(self):
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}")
        prof = PROFILES[self.profile]
        cfg = replace(
            self,
            hidden=tuple(self.hidden) if self.hidden is not None else prof["hidden"],
            latent_dim=self.latent_dim if self.latent_dim is not None else prof["latent_dim"],
            head_dim=self.head_dim if self.head_dim is not None else prof["head_dim"],
            pretrain_epochs=(self.pretrain_epochs if self.pretrain_epochs is not None
                             else prof["pretrain_epochs"]),
            epochs=self.epochs if self.epochs is not None else prof["epochs"],
        )
        cfg.validate()
        return cfg

    def validate(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if not (0 < self.pos_percent and 0 < self.neg_percent
                and self.pos_percent + self.neg_percent <= 100):
            raise ConfigError("pair percentages must be positive and sum to <= 100")
        if self.sigma != "median":
            if not isinstance(self.sigma, (int, float)) or self.sigma <= 0:
                raise ConfigError("sigma must be 'median' or a positive number")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if self.epochs is not None and self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.pretrain_epochs is not None and self.pretrain_epochs < 0:
            raise ConfigError("pretrain_epochs must be non-negative")
        if self.fuse_space not in ("contrast", "latent"):
            raise ConfigError("fuse_space must be 'contrast' or 'latent'")
        if self.eval_every < 0 or self.kmeans_restarts < 1 or self.eval_seeds < 1:
            raise ConfigError("eval settings must be positive")


@dataclass
class EpochRecord:
    epoch: int
    phase: str                  # "pretrain" | "train"
    rec: float
    ggc: float
    lwc: float
    total: float
    acc: float = None
    nmi: float = None
    ari: float = None
    seconds: float = 0.0


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    CSV_HEADER = "epoch,L_rec,L_ggc,L_lwc,L_total,acc,nmi,ari"

    def train_records(self):
        return [r for r in self.records if r.phase == "train"]

    def next_epoch(self):
        return len(self.records) + 1

    def write_csv(self, path):
        def cell(x):
            return "" if x is None else repr(float(x))

        lines = [self.CSV_HEADER]
        for r in self.records:
            lines.append(",".join([str(r.epoch), cell(r.rec), cell(r.ggc),
                                   cell(r.lwc), cell(r.total), cell(r.acc),
                                   cell(r.nmi), cell(r.ari)]))
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")


def total_loss(rec, ggc, lwc, alpha, beta):
    """Weighted objective; works on plain numbers and on tensors alike."""
    tensorial = any(isinstance(x, nn.Tensor) for x in (rec, ggc, lwc))
    if not tensorial:
        return float(rec) + alpha * float(ggc) + beta * float(lwc)
    out = rec if isinstance(rec, nn.Tensor) else nn.Tensor(float(rec))
    if alpha != 0.0:
        out = add(out, mul(float(alpha), ggc))
    if beta != 0.0:
        out = add(out, mul(float(beta), lwc))
    return out


def build_model(dataset, config):
    """Model init for a resolved config; seeded from the run's master seed."""
    cfg = config.resolved()
    dims = [v.shape[1] for v in dataset.views]
    return init_model(dims, latent_dim=cfg.latent_dim, head_dim=cfg.head_dim,
                      hidden=cfg.hidden, seed=derive_seed(cfg.seed, "init"))


def _abort_diagnostics(feats, batch, rec, ggc, lwc):
    """Identify the first offending component/view of a non-finite loss."""
    for v, (feat, x) in enumerate(zip(feats, batch.view_data)):
        err = feat.recon.data - x
        if not np.isfinite(err).all() or not np.isfinite((err * err).sum()):
            return "rec", v
    for name, val in (("ggc", ggc), ("lwc", lwc)):
        if val is not None and not np.isfinite(val.data):
            return name, None
    if not np.isfinite(rec.data):
        return "rec", None
    return "total", None


def _epoch_pass(model, dataset, config, rng, params, opt, phase, epoch_index):
    """One epoch of updates; returns the summed loss components."""
    contrastive = phase == "train"
    sums = {"rec": 0.0, "ggc": 0.0, "lwc": 0.0, "total": 0.0}
    skipped_pairs_everywhere = True
    for bi, batch in enumerate(iter_epoch(dataset, config.batch_size, rng)):
        tape = Tape()
        feats = forward_views(model, batch, tape)
        rec = reconstruction_loss(feats, batch)
        ggc = lwc = None
        if contrastive and config.alpha > 0:
            hs = [f.contrast for f in feats]
            stacked = sum(h.data.shape[0] for h in hs)
            if stacked >= 3:
                graph = build_global_graph(hs, positions=batch.view_positions)
                pairs = select_pairs(graph, config.pos_percent,
                                     config.neg_percent)
                ggc = ggc_loss(graph, pairs, config.temperature,
                               config.include_positive_in_denominator)
            else:
                logger.warning("epoch %d batch %d: %d stacked features, "
                               "global term skipped", epoch_index, bi, stacked)
        if contrastive and config.beta > 0:
            hs = [f.contrast for f in feats]
            co = {(u, v): batch.co_available(u, v)
                  for u in range(len(hs)) for v in range(u + 1, len(hs))}
            if any(len(iu) >= 2 for iu in (p[0] for p in co.values())):
                skipped_pairs_everywhere = False
            lwc = lwc_total(hs, co, config.temperature, sigma=config.sigma,
                            normalize_weights=config.normalize_weights)
        loss = total_loss(rec, ggc if ggc is not None else 0.0,
                          lwc if lwc is not None else 0.0,
                          config.alpha if contrastive else 0.0,
                          config.beta if contrastive else 0.0)
        value = float(loss.data)
        if not math.isfinite(value):
            comp, view = _abort_diagnostics(feats, batch, rec, ggc, lwc)
            raise TrainingAborted(
                f"non-finite {comp} loss at epoch {epoch_index}, batch {bi}"
                + (f", view {view}" if view is not None else ""),
                epoch=epoch_index, batch=bi, view=view)
        grads = backward(tape, loss)
        adam_step(opt, params, grads)
        sums["rec"] += float(rec.data)
        sums["ggc"] += float(ggc.data) if ggc is not None else 0.0
        sums["lwc"] += float(lwc.data) if lwc is not None else 0.0
        sums["total"] += value
    if contrastive and config.beta > 0 and skipped_pairs_everywhere:
        logger.warning("epoch %d: no view pair had 2+ common samples; the "
                       "local weighted term was inert", epoch_index)
    return sums


def pretrain(model, dataset, config, history=None):
    """Reconstruction-only warm-up; appends per-epoch records to history."""
    cfg = config.resolved()
    params = model_parameters(model)
    opt = AdamState.for_params(params, learning_rate=cfg.learning_rate)
    rng = np.random.default_rng(derive_seed(cfg.seed, "pretrain"))
    for _ in range(cfg.pretrain_epochs):
        start = time.perf_counter()
        epoch = history.next_epoch() if history is not None else 0
        sums = _epoch_pass(model, dataset, cfg, rng, params, opt,
                           "pretrain", epoch)
        if history is not None:
            history.records.append(EpochRecord(
                epoch=epoch, phase="pretrain", rec=sums["rec"], ggc=0.0,
                lwc=0.0, total=sums["total"],
                seconds=time.perf_counter() - start))
    return model


def train(model, dataset, config, history=None):
    """Joint optimization of the full objective.

    Returns ``(model, history)``.  When ``eval_every`` is set (and the
    dataset is labeled), clustering metrics are recorded at the first,
    every k-th, and the final joint epoch.
    """
    cfg = config.resolved()
    history = history if history is not None else TrainHistory()
    params = model_parameters(model)
    opt = AdamState.for_params(params, learning_rate=cfg.learning_rate)
    rng = np.random.default_rng(derive_seed(cfg.seed, "train"))
    for e in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        epoch = history.next_epoch()
        sums = _epoch_pass(model, dataset, cfg, rng, params, opt, "train", e)
        record = EpochRecord(epoch=epoch, phase="train", rec=sums["rec"],
                             ggc=sums["ggc"], lwc=sums["lwc"],
                             total=sums["total"])
        checkpoint = (cfg.eval_every > 0
                      and (e == 1 or e == cfg.epochs or e % cfg.eval_every == 0))
        if checkpoint and dataset.labels is not None:
            fused = fuse_features(model, dataset, space=cfg.fuse_space)
            pred = kmeans(fused, dataset.n_classes, runs=cfg.kmeans_restarts,
                          seed=derive_seed(cfg.seed, "curve", e))
            record.acc = accuracy(pred, dataset.labels)
            record.nmi = nmi(pred, dataset.labels)
            record.ari = ari(pred, dataset.labels)
        record.seconds = time.perf_counter() - start
        history.records.append(record)
    return model, history


# ---------------------------------------------------------------------------
# inference and fusion
# ---------------------------------------------------------------------------

def infer_features(model, dataset, space="contrast", chunk=2048):
    """Per-view features of every available row, without gradient tracking."""
    if space not in ("contrast", "latent"):
        raise ConfigError("space must be 'contrast' or 'latent'")
    out = []
    for v, view in enumerate(model):
        rows = np.flatnonzero(dataset.mask[:, v] == 1)
        blocks = []
        for start in range(0, rows.size, chunk):
            x = dataset.views[v][rows[start:start + chunk]]
            z = mlp_forward(view.encoder, x)
            if space == "contrast":
                z = mlp_forward(view.head, z)
            blocks.append(z.data)
        width = view.head_dim if space == "contrast" else view.latent_dim
        out.append(np.concatenate(blocks, axis=0) if blocks
                   else np.zeros((0, width)))
    return out


def fuse_mean(view_features, mask):
    """Average each sample's features over its available views."""
    mask = np.asarray(mask)
    n, n_views = mask.shape
    if len(view_features) != n_views:
        raise ShapeError("feature list does not match the mask's view count")
    width = view_features[0].shape[1]
    acc = np.zeros((n, width))
    count = np.zeros(n)
    for v in range(n_views):
        rows = np.flatnonzero(mask[:, v] == 1)
        feats = np.asarray(view_features[v])
        if feats.shape[0] != rows.size:
            raise ShapeError(f"view {v}: {feats.shape[0]} feature rows for "
                             f"{rows.size} available samples")
        acc[rows] += feats
        count[rows] += 1
    if (count == 0).any():
        raise ShapeError("a sample has no available view")
    return acc / count[:, None]


def fuse_features(model, dataset, space="contrast"):
    return fuse_mean(infer_features(model, dataset, space=space), dataset.mask)


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------

def _plusplus_init(x, k, rng):
    """Standard distance-squared seeding."""
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0.0:
            centers[j] = x[rng.choice(n, p=d2 / total)]
        else:
            centers[j] = x[rng.integers(n)]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))
    return centers


def _center_distances(x, centers):
    d2 = ((x * x).sum(axis=1)[:, None] + (centers * centers).sum(axis=1)[None, :]
          - 2.0 * (x @ centers.T))
    return np.maximum(d2, 0.0)


def _lloyd(x, k, rng, max_iter):
    centers = _plusplus_init(x, k, rng)
    labels = None
    for _ in range(max_iter):
        d2 = _center_distances(x, centers)
        new_labels = d2.argmin(axis=1)
        assigned = d2[np.arange(x.shape[0]), new_labels]
        for empty in np.flatnonzero(np.bincount(new_labels, minlength=k) == 0):
            # documented rule: an empty cluster restarts at the point
            # farthest from its current centroid
            far = int(assigned.argmax())
            centers[empty] = x[far]
            new_labels[far] = empty
            assigned[far] = 0.0
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = x[labels == j]
            if members.shape[0]:
                centers[j] = members.mean(axis=0)
    d2 = _center_distances(x, centers)
    labels = d2.argmin(axis=1)
    inertia = float(d2[np.arange(x.shape[0]), labels].sum())
    return labels, inertia


def kmeans(features, n_clusters, runs=10, seed=0, max_iter=300):
    """Lloyd's algorithm with ++ seeding; best inertia over ``runs`` restarts.

    Deterministic for a given seed: restart r draws from child stream r of
    the seed, and ties in inertia keep the earlier restart.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError("features must be a matrix")
    n = x.shape[0]
    if not (2 <= n_clusters <= n):
        raise ConfigError(f"need 2 <= k <= n, got k={n_clusters}, n={n}")
    if runs < 1:
        raise ConfigError("runs must be positive")
    best_labels, best_inertia = None, np.inf
    for child in np.random.SeedSequence(int(seed)).spawn(runs):
        labels, inertia = _lloyd(x, n_clusters, np.random.default_rng(child),
                                 max_iter)
        if inertia < best_inertia:
            best_labels, best_inertia = labels, inertia
    return best_labels


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class ClusterReport:
    """Clustering quality over several k-means seeds on frozen features."""

    seeds: list
    accs: list
    nmis: list
    aris: list

    def _stat(self, values):
        arr = np.asarray(values, dtype=np.float64)
        return float(arr.mean()), float(arr.std())

    @property
    def acc(self):
        return self._stat(self.accs)

    @property
    def nmi(self):
        return self._stat(self.nmis)

    @property
    def ari(self):
        return self._stat(self.aris)

    def to_dict(self):
        acc, nmi_, ari_ = self.acc, self.nmi, self.ari
        return {
            "acc_mean": acc[0], "acc_std": acc[1],
            "nmi_mean": nmi_[0], "nmi_std": nmi_[1],
            "ari_mean": ari_[0], "ari_std": ari_[1],
            "runs": [{"seed": int(s), "acc": a, "nmi": m, "ari": r}
                     for s, a, m, r in zip(self.seeds, self.accs, self.nmis,
                                           self.aris)],
        }


def evaluate(model, dataset, config=None, seeds=None):
    """Fuse, cluster and score against the dataset labels."""
    cfg = (config if config is not None else TrainConfig()).resolved()
    if dataset.labels is None:
        raise ConfigError("evaluation requires a labeled dataset")
    k = dataset.n_classes
    if k is None or k < 2:
        raise ConfigError("dataset does not declare a usable class count")
    fused = fuse_features(model, dataset, space=cfg.fuse_space)
    if seeds is None:
        seeds = [derive_seed(cfg.seed, "eval", i) for i in range(cfg.eval_seeds)]
    report = ClusterReport(seeds=list(map(int, seeds)), accs=[], nmis=[],
                           aris=[])
    for s in seeds:
        pred = kmeans(fused, k, runs=cfg.kmeans_restarts, seed=s)
        report.accs.append(accuracy(pred, dataset.labels))
        report.nmis.append(nmi(pred, dataset.labels))
        report.aris.append(ari(pred, dataset.labels))
    return report
