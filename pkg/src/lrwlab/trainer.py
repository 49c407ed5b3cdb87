"""Training loops: ERM baseline, fixed-split reweighted training, and the
end-to-end min-max variant that jointly learns the train/validation split.

The reweighted (bilevel) loop alternates Q weighted classifier steps with one
meta step; the meta step differentiates the validation loss through a single
momentum-free lookahead update of a classifier copy, so only first-order
backward passes are ever needed. The end-to-end loop adds a splitter network
updated adversarially: it descends its correctness-prediction loss while
ascending the validation loss, regularized toward the target split ratio and
cross-split label balance.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .datagen import Dataset
from .hardness import SplitAssignment, carve_split, MarginRecord
from .models import (Mlp, MetaNet, SplitterNet, ParamSet, sgd_step,
                     meta_weights, meta_weights_taped)


class TrainError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    delta: float = 0.1
    q_inner: int = 5
    lr_splitter: float = 0.001   # beta_1
    lr_meta: float = 0.001       # beta_2
    lr_classifier: float = 0.1   # beta_3
    momentum: float = 0.9
    reg_ratio_weight: float = 1.0
    reg_label_weight: float = 1.0
    reg_sharpness: float = 1.0   # temper memberships inside the ratio penalty
    batch_train: int = 64
    batch_val: int = 64
    max_epochs: int = 40
    warm_start_epochs: int = 10
    early_stop: str = "off"      # "off" | "gap"
    seed: int = 0
    hidden_classifier: tuple = (32, 32)
    hidden_meta: tuple = (16,)
    hidden_splitter: tuple = (16,)
    activation: str = "relu"
    dropout: float = 0.0
    share_backbone: bool = False
    uniform_weights: bool = False
    erm_margin_epochs: int | None = None  # margin-pass budget; None = max_epochs

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if self.q_inner < 1:
            raise ValueError("q_inner must be >= 1")
        for name in ("lr_splitter", "lr_meta", "lr_classifier"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.early_stop not in ("off", "gap"):
            raise ValueError(f"early_stop must be 'off' or 'gap', got {self.early_stop!r}")


@dataclass
class LossBreakdown:
    epoch: int
    step: int
    weighted_train_loss: float
    val_loss: float
    split_loss: float
    omega_ratio: float
    omega_label: float

    CSV_HEADER = ["epoch", "step", "weighted_train_loss", "val_loss",
                  "split_loss", "omega_ratio", "omega_label"]

    def row(self):
        return [self.epoch, self.step, repr(self.weighted_train_loss),
                repr(self.val_loss), repr(self.split_loss),
                repr(self.omega_ratio), repr(self.omega_label)]


@dataclass
class TrainerState:
    classifier: ParamSet
    meta: ParamSet | None
    splitter: ParamSet | None
    epoch: int = 0
    ge: float = 0.0
    log: list = field(default_factory=list)


def _streams(seed):
    """Named, independent RNG streams so loop variants stay batch-aligned."""
    names = ["clf_init", "meta_init", "splitter_init", "train_batches",
             "val_batches", "meta_batches", "warm"]
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}


def build_classifier(d, cfg):
    return Mlp([d.features.shape[1], *cfg.hidden_classifier, d.n_classes], cfg.activation)


def build_meta(d, cfg, classifier=None):
    in_dim = cfg.hidden_classifier[-1] if cfg.share_backbone else d.features.shape[1]
    return MetaNet.build(in_dim, cfg.hidden_meta, cfg.activation)


def build_splitter(d, cfg):
    in_dim = cfg.hidden_classifier[-1] if cfg.share_backbone else d.features.shape[1]
    return SplitterNet.build(in_dim, d.n_classes, cfg.hidden_splitter, cfg.activation)


def _meta_input(d_or_x, cfg, clf_model=None, clf_params=None):
    x = d_or_x.features if isinstance(d_or_x, Dataset) else d_or_x
    if cfg.share_backbone:
        return clf_model.hidden_np(clf_params, x)
    return x


def _check_finite(value, where):
    if not np.isfinite(value):
        raise TrainError(f"non-finite loss at {where}")


def _erm_step(model, params, x, y, cfg, step_tag):
    with ad.Tape():
        pts = params.tensors()
        logits = model.forward(pts, ad.Tensor(x))
        loss = ad.cross_entropy(logits, y)
        _check_finite(loss.item(), step_tag)
        ad.backward(loss)
        grads = params.grads_flat(pts)
    sgd_step(params, grads, cfg.lr_classifier, cfg.momentum)
    return loss.item()


def train_erm(d, cfg, rngs=None, model=None, params=None, epochs=None,
              steps_per_epoch=None, log=None):
    """Unweighted cross-entropy minibatch SGD; deterministic per seed."""
    if len(d) == 0:
        raise TrainError("empty dataset")
    rngs = rngs or _streams(cfg.seed)
    model = model or build_classifier(d, cfg)
    params = params if params is not None else model.init(rngs["clf_init"])
    epochs = cfg.max_epochs if epochs is None else epochs
    steps = steps_per_epoch or max(1, len(d) // cfg.batch_train)
    rng = rngs["train_batches"]
    for epoch in range(epochs):
        for step in range(steps):
            idx = rng.integers(0, len(d), size=min(cfg.batch_train, len(d)))
            loss = _erm_step(model, params, d.features[idx], d.labels[idx], cfg,
                             f"erm epoch {epoch} step {step}")
            if log is not None:
                log.append(LossBreakdown(epoch, step, loss, float("nan"),
                                         float("nan"), 0.0, 0.0))
    return model, params


def _per_instance_grads(model, params, x, y):
    """Stack of flat per-instance cross-entropy gradients at `params`."""
    with ad.Tape():
        pts = params.tensors()
        logits = model.forward(pts, ad.Tensor(x))
        losses = ad.cross_entropy(logits, y, reduction="none")
        rows = []
        for i in range(len(y)):
            loss_i = ad.index_select(losses, np.array([i]))
            ad.backward(ad.tsum(loss_i))
            rows.append(params.grads_flat(pts))
    return np.vstack(rows)


def instance_weights(meta_model, meta_params, x, cfg):
    if cfg.uniform_weights:
        return np.ones(len(x))
    return meta_weights(meta_model, meta_params, x)


def lrw_inner_step(clf_model, clf_params, weights, x, y, cfg, step_tag):
    """One weighted SGD step; weights are detached constants here."""
    with ad.Tape():
        pts = clf_params.tensors()
        logits = clf_model.forward(pts, ad.Tensor(x))
        losses = ad.cross_entropy(logits, y, reduction="none")
        loss = ad.tmean(ad.mul(losses, ad.Tensor(weights)))
        _check_finite(loss.item(), step_tag)
        ad.backward(loss)
        grads = clf_params.grads_flat(pts)
    sgd_step(clf_params, grads, cfg.lr_classifier, cfg.momentum)
    return loss.item()


def lookahead_weight_gradient(per_instance_grads, weights, theta_flat,
                              val_grad_fn, beta3):
    """d(val loss)/d(weights) through theta_hat = theta - beta3 * mean_i w_i g_i.

    `val_grad_fn` maps a flat parameter vector to the flat gradient of the
    validation loss at that point. Returns (per-weight gradient, theta_hat).
    """
    m = len(weights)
    theta_hat = theta_flat - beta3 * (weights @ per_instance_grads) / m
    v = val_grad_fn(theta_hat)
    return -beta3 * (per_instance_grads @ v) / m, theta_hat


def meta_gradient(clf_model, clf_params, meta_model, meta_params,
                  train_x, train_y, val_x, val_y, cfg):
    """Gradient w.r.t. the weight net of the post-lookahead validation loss.

    The lookahead is a single momentum-free weighted step on a classifier
    copy; the weights (batch-renormalized to mean 1) stay differentiable in
    the weight net, so the chain rule reduces to one backward pass per train
    instance plus one over the weight net.
    """
    g_rows = _per_instance_grads(clf_model, clf_params, train_x, train_y)
    meta_x = _meta_input(train_x, cfg, clf_model, clf_params)
    w = meta_weights(meta_model, meta_params, meta_x)

    def val_grad(flat):
        p = clf_params.copy()
        p.flat[:] = flat
        with ad.Tape():
            pts = p.tensors()
            logits = clf_model.forward(pts, ad.Tensor(val_x))
            loss = ad.cross_entropy(logits, val_y)
            ad.backward(loss)
            return p.grads_flat(pts)

    dval_dw, _ = lookahead_weight_gradient(
        g_rows, w, clf_params.flat, val_grad, cfg.lr_classifier)

    with ad.Tape():
        pts = meta_params.tensors()
        w_t = meta_weights_taped(meta_model, pts, meta_x)
        pseudo = ad.tsum(ad.mul(w_t, ad.Tensor(dval_dw)))
        ad.backward(pseudo)
        return meta_params.grads_flat(pts)


def splitter_loss(split_model, split_params, clf_model, clf_params, x, y):
    """Binary CE between split probabilities and classifier correctness."""
    correct = clf_model.forward_np(clf_params, x).argmax(axis=1) == y
    p = split_model.probabilities_np(split_params, x, y)
    c = correct.astype(np.float64)
    return float(-np.mean(c * np.log(p) + (1.0 - c) * np.log1p(-p)))


def _sharpen(p, sharpness):
    """Tempered membership p^k / (p^k + (1-p)^k): sigmoid(k * logit(p)).

    sharpness 1 leaves p unchanged; large values approach the hard 0.5
    threshold so the realized-fraction penalty tracks the hard split count
    instead of the (much laxer) soft mass.
    """
    if sharpness == 1.0:
        return p
    logit = np.log(p) - np.log1p(-p)
    return _np_sigmoid(sharpness * logit)


def _np_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def splitter_regularizers(probs, labels, delta, n_classes=None, sharpness=1.0):
    """(ratio, label-balance) penalties on soft split memberships.

    ratio: KL between Bernoulli(realized validation fraction) and
    Bernoulli(delta), with memberships tempered by `sharpness`. label:
    summed KL from the label distribution within each soft side to the
    overall label distribution.
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.intp)
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise ValueError("split probabilities must lie strictly inside (0, 1)")
    c = n_classes or int(y.max()) + 1
    q = float(np.mean(1.0 - _sharpen(p, sharpness))) + 1e-12  # val fraction
    omega_ratio = q * np.log(q / delta) + (1.0 - q) * np.log((1.0 - q) / (1.0 - delta))
    overall = np.bincount(y, minlength=c) / len(y)
    omega_label = 0.0
    for side in (p, 1.0 - p):
        mass = side.sum()
        cond = np.array([side[y == k].sum() for k in range(c)]) / mass
        nz = cond > 0
        omega_label += float(np.sum(cond[nz] * np.log(cond[nz] / overall[nz])))
    return float(omega_ratio), float(omega_label)


def _regularizers_taped(p, labels, delta, n_classes, logits=None, sharpness=1.0):
    """Taped version of the split regularizers; p is a [n] probability tensor.

    When `logits` (the pre-sigmoid splitter outputs) are supplied, the ratio
    term uses memberships tempered by `sharpness`, matching the numpy path.
    """
    y = np.asarray(labels, dtype=np.intp)
    n = len(y)
    one = ad.Tensor(1.0)
    if logits is not None and sharpness != 1.0:
        p_ratio = ad.sigmoid(ad.mul(logits, ad.Tensor(float(sharpness))))
    else:
        p_ratio = p
    q = ad.add(ad.tmean(ad.add(one, -p_ratio)), ad.Tensor(1e-12))
    qc = ad.add(one, -q)
    omega_ratio = ad.add(
        ad.mul(q, ad.log(ad.mul(q, ad.Tensor(1.0 / delta)))),
        ad.mul(qc, ad.log(ad.mul(qc, ad.Tensor(1.0 / (1.0 - delta))))))
    overall = np.bincount(y, minlength=n_classes) / n
    omega_label = ad.Tensor(0.0)
    for side in (p, ad.add(one, -p)):
        mass_inv = ad.reciprocal(ad.tsum(side))
        for k in range(n_classes):
            mask = (y == k).astype(np.float64)
            if mask.sum() == 0:
                continue
            cond = ad.mul(ad.tsum(ad.mul(side, ad.Tensor(mask))), mass_inv)
            term = ad.mul(cond, ad.log(ad.mul(cond, ad.Tensor(1.0 / overall[k]))))
            omega_label = ad.add(omega_label, term)
    return omega_ratio, omega_label


def generate_split(split_model, split_params, d, cfg, clf_model=None, clf_params=None):
    """Hard 0.5-threshold split: probability > 0.5 means pseudotrain."""
    x = _split_input_features(d, cfg, clf_model, clf_params)
    p = split_model.probabilities_np(split_params, x, d.labels)
    train = np.flatnonzero(p > 0.5)
    val = np.flatnonzero(p <= 0.5)
    if len(train) == 0 or len(val) == 0:
        raise TrainError(
            f"splitter assigned all {len(d)} instances to one side "
            f"(train={len(train)}, val={len(val)})")
    return SplitAssignment(train, val, len(val) / len(d)), p


def _split_input_features(d, cfg, clf_model, clf_params):
    if cfg.share_backbone:
        return clf_model.hidden_np(clf_params, d.features)
    return d.features


def outer_step(state, cfg, d, split, val_idx, models, rngs):
    """One splitter step (ascend val loss, descend split loss + penalties)
    followed by one meta step through the lookahead."""
    clf_model, meta_model, split_model = models
    xv, yv = d.features[val_idx], d.labels[val_idx]
    split_x_batch = _split_input_features(d.subset(val_idx), cfg, clf_model, state.classifier)
    split_x_full = _split_input_features(d, cfg, clf_model, state.classifier)

    breakdown = None
    if cfg.lr_splitter > 0 and state.splitter is not None:
        # Detached per-instance classifier losses weight the soft val side.
        logits_v = clf_model.forward_np(state.classifier, xv)
        z = logits_v - logits_v.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        losses_v = lse - z[np.arange(len(yv)), yv]
        correct = (logits_v.argmax(axis=1) == yv).astype(np.float64)
        inputs_batch = split_model.inputs(split_x_batch, yv)
        inputs_full = split_model.inputs(split_x_full, d.labels)
        with ad.Tape():
            pts = state.splitter.tensors()
            s_batch = ad.reshape(split_model.backbone.forward(
                pts, ad.Tensor(inputs_batch)), (len(yv),))
            # -log sigmoid(s) = softplus(-s); -log(1-sigmoid(s)) = softplus(s)
            l_split = ad.tmean(ad.add(
                ad.mul(ad.Tensor(correct), ad.softplus(-s_batch)),
                ad.mul(ad.Tensor(1.0 - correct), ad.softplus(s_batch))))
            p_batch = ad.sigmoid(s_batch)
            soft_val_loss = ad.tmean(ad.mul(ad.add(ad.Tensor(1.0), -p_batch),
                                            ad.Tensor(losses_v)))
            s_full = ad.reshape(split_model.backbone.forward(
                pts, ad.Tensor(inputs_full)), (len(d),))
            p_full = ad.sigmoid(s_full)
            om_ratio, om_label = _regularizers_taped(
                p_full, d.labels, cfg.delta, d.n_classes,
                logits=s_full, sharpness=cfg.reg_sharpness)
            objective = ad.add(ad.add(l_split, -soft_val_loss),
                               ad.add(ad.mul(ad.Tensor(cfg.reg_ratio_weight), om_ratio),
                                      ad.mul(ad.Tensor(cfg.reg_label_weight), om_label)))
            _check_finite(objective.item(), f"splitter epoch {state.epoch}")
            ad.backward(objective)
            grads = state.splitter.grads_flat(pts)
        sgd_step(state.splitter, grads, cfg.lr_splitter, cfg.momentum)
        breakdown = (l_split.item(), om_ratio.item(), om_label.item())

    if cfg.lr_meta > 0 and not cfg.uniform_weights:
        train_idx = split.train_indices
        bidx = train_idx[rngs["meta_batches"].integers(0, len(train_idx),
                                                       size=min(cfg.batch_train, len(train_idx)))]
        grad_phi = meta_gradient(clf_model, state.classifier, meta_model, state.meta,
                                 d.features[bidx], d.labels[bidx], xv, yv, cfg)
        if not np.all(np.isfinite(grad_phi)):
            raise TrainError(f"non-finite meta gradient at epoch {state.epoch}")
        sgd_step(state.meta, grad_phi, cfg.lr_meta, cfg.momentum)
    return breakdown


def _onehot(y, c):
    out = np.zeros((len(y), c))
    out[np.arange(len(y)), y] = 1.0
    return out


def _mean_ce(model, params, x, y):
    logits = model.forward_np(params, x)
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(lse - z[np.arange(len(y)), y]))


def train_lrw(d, split, cfg, rngs=None):
    """Bilevel training on a fixed split: Q weighted inner steps per meta step.

    Validation instances never enter the weighted training gradient; an
    index-level audit enforces this every epoch.
    """
    if len(split.train_indices) == 0 or len(split.val_indices) == 0:
        raise TrainError("both split sides must be nonempty")
    rngs = rngs or _streams(cfg.seed)
    clf_model = build_classifier(d, cfg)
    meta_model = build_meta(d, cfg)
    clf = clf_model.init(rngs["clf_init"])
    meta = meta_model.init(rngs["meta_init"])
    state = TrainerState(clf, meta, None)

    train_idx = split.train_indices
    val_idx_all = split.val_indices
    val_set = frozenset(int(i) for i in val_idx_all)
    outer_rounds = max(1, len(val_idx_all) // cfg.batch_val)
    for epoch in range(cfg.max_epochs):
        state.epoch = epoch
        for b in range(outer_rounds):
            vidx = val_idx_all[rngs["val_batches"].integers(
                0, len(val_idx_all), size=min(cfg.batch_val, len(val_idx_all)))]
            if cfg.lr_meta > 0 and not cfg.uniform_weights:
                bidx = train_idx[rngs["meta_batches"].integers(
                    0, len(train_idx), size=min(cfg.batch_train, len(train_idx)))]
                grad_phi = meta_gradient(clf_model, clf, meta_model, meta,
                                         d.features[bidx], d.labels[bidx],
                                         d.features[vidx], d.labels[vidx], cfg)
                sgd_step(meta, grad_phi, cfg.lr_meta, cfg.momentum)
            for j in range(cfg.q_inner):
                tidx = train_idx[rngs["train_batches"].integers(
                    0, len(train_idx), size=min(cfg.batch_train, len(train_idx)))]
                assert val_set.isdisjoint(int(i) for i in tidx), \
                    "validation instance leaked into a training batch"
                w = instance_weights(meta_model, meta,
                                     _meta_input(d.features[tidx], cfg, clf_model, clf),
                                     cfg)
                wloss = lrw_inner_step(clf_model, clf, w, d.features[tidx],
                                       d.labels[tidx], cfg,
                                       f"lrw epoch {epoch} round {b} inner {j}")
            state.log.append(LossBreakdown(
                epoch, b, wloss,
                _mean_ce(clf_model, clf, d.features[vidx], d.labels[vidx]),
                float("nan"), 0.0, 0.0))
    return clf_model, meta_model, state


def train_lrwopt(d, cfg, rngs=None):
    """End-to-end min-max training; regenerates the hard split every epoch.

    Warm start: plain ERM epochs on the train side of a random delta split.
    Optional gap-based early stop compares each epoch's normalized
    (val - train) mean loss against the previously stored gap.
    """
    if int(np.floor(cfg.delta * len(d))) < 1:
        raise TrainError(f"dataset of {len(d)} too small for delta {cfg.delta}")
    rngs = rngs or _streams(cfg.seed)
    clf_model = build_classifier(d, cfg)
    meta_model = build_meta(d, cfg)
    split_model = build_splitter(d, cfg)
    clf = clf_model.init(rngs["clf_init"])
    meta = meta_model.init(rngs["meta_init"])
    splitter = split_model.init(rngs["splitter_init"])
    state = TrainerState(clf, meta, splitter)

    # Warm start on a random split.
    warm_records = [MarginRecord(i, 0.0) for i in range(len(d))]
    warm_split = carve_split(warm_records, "random", cfg.delta,
                             seed=int(rngs["warm"].integers(2 ** 31)))
    warm_cfg = replace(cfg, max_epochs=cfg.warm_start_epochs)
    if cfg.warm_start_epochs > 0:
        train_erm(d.subset(warm_split.train_indices), warm_cfg, rngs=rngs,
                  model=clf_model, params=clf, epochs=cfg.warm_start_epochs)

    # Calibrate the splitter head so the initial hard split realizes the
    # target ratio and is decisive: shift logits by their delta-quantile and
    # scale them to unit-order spread. A raw random head frequently puts every
    # instance on one side of the 0.5 threshold, and near-0.5 probabilities
    # make the whole split flip under the first few adversarial updates.
    x_split = _split_input_features(d, cfg, clf_model, clf)
    s = split_model.backbone.forward_np(
        splitter, split_model.inputs(x_split, d.labels))[:, 0]
    k = int(np.floor(cfg.delta * len(d)))
    t = np.sort(s)[k - 1]
    scale = 2.0 / max(np.std(s), 1e-8)
    splitter.views()[-1][:] -= t
    splitter.views()[-1][:] *= scale
    splitter.views()[-2][:] *= scale

    split = warm_split
    models = (clf_model, meta_model, split_model)
    for epoch in range(cfg.max_epochs):
        state.epoch = epoch
        split, _ = generate_split(split_model, splitter, d, cfg, clf_model, clf)
        val_idx_all = split.val_indices
        train_idx = split.train_indices
        val_set = frozenset(int(i) for i in val_idx_all)
        outer_rounds = max(1, len(val_idx_all) // cfg.batch_val)
        for b in range(outer_rounds):
            vidx = val_idx_all[rngs["val_batches"].integers(
                0, len(val_idx_all), size=min(cfg.batch_val, len(val_idx_all)))]
            breakdown = outer_step(state, cfg, d, split, vidx, models, rngs)
            for j in range(cfg.q_inner):
                tidx = train_idx[rngs["train_batches"].integers(
                    0, len(train_idx), size=min(cfg.batch_train, len(train_idx)))]
                assert val_set.isdisjoint(int(i) for i in tidx), \
                    "validation instance leaked into a training batch"
                w = instance_weights(meta_model, meta,
                                     _meta_input(d.features[tidx], cfg, clf_model, clf),
                                     cfg)
                wloss = lrw_inner_step(clf_model, clf, w, d.features[tidx],
                                       d.labels[tidx], cfg,
                                       f"lrwopt epoch {epoch} round {b} inner {j}")
            split_loss_v, om_r, om_l = breakdown if breakdown else (float("nan"), 0.0, 0.0)
            state.log.append(LossBreakdown(
                epoch, b, wloss,
                _mean_ce(clf_model, clf, d.features[vidx], d.labels[vidx]),
                split_loss_v, om_r, om_l))

        gap = (_mean_ce(clf_model, clf, d.features[val_idx_all], d.labels[val_idx_all])
               - _mean_ce(clf_model, clf, d.features[train_idx], d.labels[train_idx]))
        if cfg.early_stop == "gap" and epoch > 0 and gap < state.ge:
            state.ge = gap
            break
        state.ge = gap

    final_split, _ = generate_split(split_model, splitter, d, cfg, clf_model, clf)
    return clf_model, meta_model, split_model, state, final_split
