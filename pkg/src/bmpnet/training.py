"""Batch sampling, loss terms, branch blocking, and the optimization loop.

Each training sample is a triplet: a reference image with its pair, a negative
sharing the object (different attribute) and a negative sharing the attribute
(different object). Hinge terms pull matching concept/visual features together
under Euclidean distance, auxiliary classifiers sharpen the primitive
features, and a reconstruction term ties the blocked concept features to their
naive counterparts. Branch blocking occasionally drops the whole attribute or
object side of the objective for one step to decouple the two.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import visual
from .concepts import ATTRIBUTE, OBJECT, features_batch, value_table
from .data import DatasetError, restore_rng, save_checkpoint
from .model import ModelState, resolve_dtype
from .tensor import (
    Tensor,
    backward,
    euclidean_distance,
    grouped_masked_softmax,
    log,
    matmul,
    mean_all,
    softplus,
    squared_l2,
    sub,
    take_per_row,
)

logger = logging.getLogger("bmpnet.training")

# Loss-weight presets (lambda_v, lambda_c, lambda_a, lambda_r) per benchmark;
# the shoe-benchmark set doubles as the generic default.
LAMBDA_PRESETS = {
    "ut-zappos": (10.0, 0.5, 1.0, 10.0),
    "mit-states": (20.0, 5.0, 10.0, 5.0),
}


class ConfigError(ValueError):
    """Invalid training configuration."""


class NonFiniteLossError(RuntimeError):
    """A loss term became NaN/Inf; carries the offending batch for dumping."""

    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TrainConfig:
    margin: float = 0.5
    tau: float = 0.05
    lambda_v: float = 10.0
    lambda_c: float = 0.5
    lambda_a: float = 1.0
    lambda_r: float = 10.0
    batch_size: int = 512
    lr: float = 3e-4
    epochs: int = 200
    seed: int = 0
    dim: int = 512
    dtype: str = "float32"
    blocking: bool = True
    residue: bool = True
    conditioned_residue: bool = False
    checkpoint_every: int = 0  # 0: only best + final checkpoints

    def validate(self):
        if self.margin < 0:
            raise ConfigError(f"margin must be >= 0, got {self.margin}")
        if not 0.0 <= self.tau < 0.5:
            raise ConfigError(f"tau must be in [0, 0.5), got {self.tau}")
        for name in ("lambda_v", "lambda_c", "lambda_a", "lambda_r"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.dim < 1:
            raise ConfigError(f"dim must be positive, got {self.dim}")
        if self.checkpoint_every < 0:
            raise ConfigError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")
        resolve_dtype(self.dtype)
        return self


class Adam:
    """Adaptive-moment update over the model's named parameters."""

    def __init__(self, named_params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.named_params = list(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named_params}

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in self.named_params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (self.lr * (m / b1c)) / (np.sqrt(v / b2c) + self.eps)
            p.data = p.data - update.astype(p.data.dtype)

    def load_state(self, state):
        hyper = state["hyper"]
        self.lr = hyper["lr"]
        self.beta1 = hyper["beta1"]
        self.beta2 = hyper["beta2"]
        self.eps = hyper["eps"]
        self.t = hyper["t"]
        for name, _ in self.named_params:
            self.m[name] = state["m"][name].copy()
            self.v[name] = state["v"][name].copy()


@dataclass
class TripletBatch:
    """Reference rows/pairs plus same-object and same-attribute negatives."""

    ref_rows: np.ndarray
    ref_pairs: np.ndarray  # (B, 2) int
    neg_attr_rows: np.ndarray
    neg_attr_pairs: np.ndarray
    neg_obj_rows: np.ndarray
    neg_obj_pairs: np.ndarray

    @property
    def size(self):
        return len(self.ref_rows)

    def to_payload(self):
        return {
            "ref_rows": self.ref_rows.tolist(),
            "ref_pairs": self.ref_pairs.tolist(),
            "neg_attr_rows": self.neg_attr_rows.tolist(),
            "neg_attr_pairs": self.neg_attr_pairs.tolist(),
            "neg_obj_rows": self.neg_obj_rows.tolist(),
            "neg_obj_pairs": self.neg_obj_pairs.tolist(),
        }


def sample_batch(universe, dataset, batch_size, rng):
    """Uniform references over seen train images with shared-primitive negatives.

    A reference whose pair has no same-object or same-attribute seen neighbor
    with train images cannot form a triplet; such draws are skipped (with a
    warning) and redrawn so the batch keeps its size whenever possible.
    """
    index = dataset.train_index()
    if not index.images:
        raise DatasetError("dataset has no train images to sample from")
    refs, neg_a, neg_o = [], [], []
    skipped = 0
    attempts = 0
    max_attempts = max(batch_size, 1) * 100
    while len(refs) < batch_size and attempts < max_attempts:
        attempts += 1
        img = index.images[rng.integers(len(index.images))]
        same_obj = index.same_object[img.pair]
        same_attr = index.same_attribute[img.pair]
        if not same_obj or not same_attr:
            skipped += 1
            continue
        na_pair = same_obj[rng.integers(len(same_obj))]
        na_row = int(index.pair_rows[na_pair][rng.integers(len(index.pair_rows[na_pair]))])
        no_pair = same_attr[rng.integers(len(same_attr))]
        no_row = int(index.pair_rows[no_pair][rng.integers(len(index.pair_rows[no_pair]))])
        refs.append((img.row, img.pair))
        neg_a.append((na_row, na_pair))
        neg_o.append((no_row, no_pair))
    if skipped:
        logger.warning("skipped %d reference draws without a valid negative", skipped)
    if not refs:
        raise DatasetError(
            "no reference image admits both a same-object and a same-attribute negative"
        )
    if len(refs) < batch_size:
        logger.warning("partial batch: %d of %d samples", len(refs), batch_size)
    return TripletBatch(
        ref_rows=np.array([r for r, _ in refs]),
        ref_pairs=np.array([p for _, p in refs]),
        neg_attr_rows=np.array([r for r, _ in neg_a]),
        neg_attr_pairs=np.array([p for _, p in neg_a]),
        neg_obj_rows=np.array([r for r, _ in neg_o]),
        neg_obj_pairs=np.array([p for _, p in neg_o]),
    )


def triplet_term(x_neg, x_pos, x_ref, margin):
    """softplus(margin - (d(ref, neg) - d(ref, pos))); strictly positive.

    Accepts single vectors (scalar out) or row-stacked batches (vector out).
    """
    gap = sub(
        euclidean_distance(x_ref, x_neg),
        euclidean_distance(x_ref, x_pos),
    )
    return softplus(-gap + float(margin))


def _hinge_parts(cf, vf, margin):
    """The four hinge means keyed by (anchor side, branch)."""
    return {
        "v_attr": mean_all(triplet_term(cf["neg_attr"], cf["attr"], vf["attr"], margin)),
        "v_obj": mean_all(triplet_term(cf["neg_obj"], cf["obj"], vf["obj"], margin)),
        "c_attr": mean_all(triplet_term(vf["neg_attr"], vf["attr"], cf["attr"], margin)),
        "c_obj": mean_all(triplet_term(vf["neg_obj"], vf["obj"], cf["obj"], margin)),
    }


def hinge_losses(concept_feats, visual_feats, margin):
    """Visual-anchored and concept-anchored hinge losses, batch-averaged.

    ``concept_feats`` holds blocked-MP features under keys attr / neg_attr /
    obj / neg_obj; ``visual_feats`` the matching visual features.
    """
    parts = _hinge_parts(concept_feats, visual_feats, margin)
    return parts["v_attr"] + parts["v_obj"], parts["c_attr"] + parts["c_obj"]


def _classifier_nll(features, weights, bias, labels):
    logits = matmul(features, weights) + bias
    probs = grouped_masked_softmax(logits, (logits.data.shape[-1],))
    picked = take_per_row(probs, np.asarray(labels, dtype=np.int64))
    return mean_all(log(picked)) * -1.0


def aux_loss(feat_attr, feat_obj, labels_attr, labels_obj, model):
    """Negative log-likelihood of the true primitives under the two classifiers."""
    return (
        _classifier_nll(feat_attr, model.cls_attr_w, model.cls_attr_b, labels_attr)
        + _classifier_nll(feat_obj, model.cls_obj_w, model.cls_obj_b, labels_obj)
    )


def reconstruction_loss(naive_attr, naive_obj, blocked_attr, blocked_obj):
    """Squared distance between naive and blocked concept features, averaged."""
    return (
        mean_all(squared_l2(sub(blocked_attr, naive_attr)))
        + mean_all(squared_l2(sub(blocked_obj, naive_obj)))
    )


def branch_block_draw(rng, tau):
    """Independent uniform draws per branch; a double block is redrawn."""
    if not 0.0 <= tau < 0.5:
        raise ConfigError(f"tau must be in [0, 0.5), got {tau}")
    while True:
        omega_attr, omega_obj = rng.uniform(size=2)
        block_attr = bool(omega_attr < tau)
        block_obj = bool(omega_obj < tau)
        if not (block_attr and block_obj):
            return block_attr, block_obj


@dataclass
class StepLosses:
    l_v: float
    l_c: float
    l_aux: float
    l_r: float
    total: float
    block_attr: bool
    block_obj: bool

    def as_dict(self):
        return {"L_v": self.l_v, "L_c": self.l_c, "L_aux": self.l_aux,
                "L_r": self.l_r, "total": self.total}


def _weighted_sum(pairs):
    total = None
    for weight, term in pairs:
        if term is None or weight == 0.0:
            continue
        piece = term * float(weight)
        total = piece if total is None else total + piece
    return total


def combined_loss(batch, dataset, model, config, noise, blocks):
    """Total objective for one batch with frozen noise and branch-block draws.

    Blocked-branch terms are skipped outright, which makes their gradients
    exactly zero. Naive message passing feeds only the reconstruction term and
    is skipped whenever that term cannot contribute (weight 0 or blocking
    disabled, where naive and blocked coincide).
    """
    block_attr, block_obj = blocks
    universe = model.universe
    np_dtype = resolve_dtype(model.dtype)
    n = batch.size

    a_ids = batch.ref_pairs[:, 0]
    o_ids = batch.ref_pairs[:, 1]

    vtable = value_table(model.concept)

    def concept_side(kind, ids, partners, blocked=True):
        masks = None
        if blocked and model.blocking:
            masks = universe.cross_block_masks(kind, ids, partners)
        return features_batch(kind, ids, model.concept, vtable, masks)

    cf = {
        "attr": concept_side(ATTRIBUTE, a_ids, o_ids),
        "neg_attr": concept_side(
            ATTRIBUTE, batch.neg_attr_pairs[:, 0], batch.neg_attr_pairs[:, 1]
        ),
        "obj": concept_side(OBJECT, o_ids, a_ids),
        "neg_obj": concept_side(
            OBJECT, batch.neg_obj_pairs[:, 1], batch.neg_obj_pairs[:, 0]
        ),
    }

    if noise is None:
        eps_ref = eps_na = eps_no = None
    else:
        eps_ref, eps_na, eps_no = noise[:n], noise[n : 2 * n], noise[2 * n :]

    def encode(rows, eps):
        raw = Tensor(np.ascontiguousarray(dataset.features[rows], dtype=np_dtype))
        return visual.encode_composite(
            raw, model.visual, visual.TRAIN, noise=eps, use_residue=model.use_residue
        )

    x_ref = encode(batch.ref_rows, eps_ref)

    l_v_parts, l_c_parts, l_aux_parts = [], [], []
    margin = config.margin
    if not block_attr:
        vf_attr = model.visual.head_attr(x_ref)
        vf_neg_attr = model.visual.head_attr(encode(batch.neg_attr_rows, eps_na))
        l_v_parts.append(mean_all(triplet_term(cf["neg_attr"], cf["attr"], vf_attr, margin)))
        l_c_parts.append(mean_all(triplet_term(vf_neg_attr, vf_attr, cf["attr"], margin)))
        l_aux_parts.append(_classifier_nll(cf["attr"], model.cls_attr_w, model.cls_attr_b, a_ids))
    if not block_obj:
        vf_obj = model.visual.head_obj(x_ref)
        vf_neg_obj = model.visual.head_obj(encode(batch.neg_obj_rows, eps_no))
        l_v_parts.append(mean_all(triplet_term(cf["neg_obj"], cf["obj"], vf_obj, margin)))
        l_c_parts.append(mean_all(triplet_term(vf_neg_obj, vf_obj, cf["obj"], margin)))
        l_aux_parts.append(_classifier_nll(cf["obj"], model.cls_obj_w, model.cls_obj_b, o_ids))

    def total_of(parts):
        if not parts:
            return None
        out = parts[0]
        for p in parts[1:]:
            out = out + p
        return out

    l_v = total_of(l_v_parts)
    l_c = total_of(l_c_parts)
    l_aux = total_of(l_aux_parts)

    l_r = None
    if config.lambda_r > 0 and model.blocking:
        naive_attr = concept_side(ATTRIBUTE, a_ids, o_ids, blocked=False)
        naive_obj = concept_side(OBJECT, o_ids, a_ids, blocked=False)
        l_r = reconstruction_loss(naive_attr, naive_obj, cf["attr"], cf["obj"])

    total = _weighted_sum([
        (config.lambda_v, l_v),
        (config.lambda_c, l_c),
        (config.lambda_a, l_aux),
        (config.lambda_r, l_r),
    ])
    if total is None:
        total = Tensor(np.zeros((), dtype=np_dtype))

    def value(term):
        return float(term.data) if term is not None else 0.0

    losses = StepLosses(
        l_v=value(l_v),
        l_c=value(l_c),
        l_aux=value(l_aux),
        l_r=value(l_r),
        total=float(total.data),
        block_attr=block_attr,
        block_obj=block_obj,
    )
    return total, losses


def draw_noise(rng, batch_size, dim, dtype):
    """One residue noise draw per image of the triplet batch, fixed order."""
    return rng.standard_normal((3 * batch_size, dim)).astype(resolve_dtype(dtype))


def combined_step(batch, dataset, model, config, rng, optimizer, blocks=None):
    """One optimization step; draws branch blocks and residue noise, updates.

    RNG consumption order is fixed (branch draw, then noise) so training is
    reproducible and resumable. Raises NonFiniteLossError with the offending
    batch attached if any loss value is NaN/Inf.
    """
    if blocks is None:
        blocks = branch_block_draw(rng, config.tau)
    noise = None
    if model.use_residue:
        noise = draw_noise(rng, batch.size, model.dim, model.dtype)
    total, losses = combined_loss(batch, dataset, model, config, noise, blocks)
    if not all(math.isfinite(v) for v in losses.as_dict().values()):
        raise NonFiniteLossError(
            f"non-finite loss: {losses.as_dict()}",
            {"losses": losses.as_dict(), "batch": batch.to_payload()},
        )
    optimizer.zero_grad()
    backward(total)
    optimizer.step()
    return losses


@dataclass
class EpochRecord:
    epoch: int
    l_v: float
    l_c: float
    l_aux: float
    l_r: float
    val_auc: float

    def as_json(self):
        return {"epoch": self.epoch, "L_v": self.l_v, "L_c": self.l_c,
                "L_aux": self.l_aux, "L_r": self.l_r, "val_auc": self.val_auc}


@dataclass
class TrainResult:
    best_model: ModelState
    final_model: ModelState
    history: list
    best_epoch: int
    best_val_auc: float


def train(dataset, config, out_dir=None, resume_from=None):
    """Run (or resume) the optimization loop and select the best-validation model.

    One epoch is ceil(train images / batch size) sampled batches followed by a
    validation sweep; the epoch with the highest validation AUC (top-1) wins.
    With ``out_dir`` set, writes metrics.jsonl plus best/final checkpoints
    (and per-epoch ones every ``checkpoint_every`` epochs). Resume restores
    parameters, optimizer slots, and the RNG stream bit-exactly, and tracks
    the best epoch from the resume point onward.
    """
    from .evaluation import evaluate  # deferred: evaluation imports no training code

    config.validate()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        from .data import CheckpointError, load_checkpoint

        bundle = load_checkpoint(resume_from)
        if bundle.model.dtype != config.dtype:
            raise CheckpointError(
                f"resume dtype {bundle.model.dtype} != config dtype {config.dtype}"
            )
        model = bundle.model
        optimizer = Adam(model.parameters(), lr=config.lr)
        if bundle.optimizer_state is not None:
            optimizer.load_state(bundle.optimizer_state)
        rng = restore_rng(bundle.rng_state)
        start_epoch = bundle.epoch
    else:
        rng = np.random.default_rng(config.seed)
        model = ModelState.init(
            universe=dataset.universe,
            d_in=dataset.feature_dim,
            dim=config.dim,
            rng=rng,
            dtype=config.dtype,
            blocking=config.blocking,
            use_residue=config.residue,
            conditioned_residue=config.conditioned_residue,
        )
        optimizer = Adam(model.parameters(), lr=config.lr)
        start_epoch = 0

    n_train = len(dataset.split_images("train"))
    steps_per_epoch = max(1, math.ceil(n_train / config.batch_size))

    metrics_path = out / "metrics.jsonl" if out is not None else None
    metrics_fh = open(metrics_path, "a") if metrics_path is not None else None

    history = []
    best_model = model.copy()
    best_epoch = start_epoch
    best_val_auc = -1.0

    def dump_diagnostics(err):
        if out is None:
            raise err
        dump_path = out / "bad_batch.json"
        dump_path.write_text(json.dumps(err.diagnostics, indent=2))
        raise NonFiniteLossError(f"{err} (batch dumped to {dump_path})", err.diagnostics)

    try:
        for epoch in range(start_epoch + 1, config.epochs + 1):
            sums = np.zeros(4)
            for _ in range(steps_per_epoch):
                batch = sample_batch(dataset.universe, dataset, config.batch_size, rng)
                try:
                    losses = combined_step(batch, dataset, model, config, rng, optimizer)
                except NonFiniteLossError as err:
                    dump_diagnostics(err)
                sums += (losses.l_v, losses.l_c, losses.l_aux, losses.l_r)
            means = sums / steps_per_epoch

            report, _ = evaluate(model, dataset, split="val", ks=(1,))
            val_auc = report["1"]["val"]["auc"] / 100.0
            record = EpochRecord(
                epoch=epoch, l_v=means[0], l_c=means[1], l_aux=means[2],
                l_r=means[3], val_auc=val_auc,
            )
            history.append(record)
            logger.info(
                "epoch %d: L_v %.4f L_c %.4f L_aux %.4f L_r %.4f val AUC %.4f",
                epoch, *means, val_auc,
            )
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(record.as_json(), sort_keys=True) + "\n")
                metrics_fh.flush()
            if val_auc > best_val_auc:
                best_val_auc = val_auc
                best_epoch = epoch
                best_model = model.copy()
            if out is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
                save_checkpoint(
                    out / f"epoch_{epoch:04d}.ckpt", model,
                    optimizer=optimizer, rng=rng,
                    train_config=asdict(config), epoch=epoch,
                )
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    if out is not None:
        save_checkpoint(
            out / "best.ckpt", best_model,
            train_config=asdict(config), epoch=best_epoch,
        )
        save_checkpoint(
            out / "final.ckpt", model,
            optimizer=optimizer, rng=rng,
            train_config=asdict(config), epoch=config.epochs,
        )
    return TrainResult(
        best_model=best_model,
        final_model=model,
        history=history,
        best_epoch=best_epoch,
        best_val_auc=best_val_auc,
    )
