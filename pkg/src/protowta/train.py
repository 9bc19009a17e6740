"""Competitive cross-entropy training for all four WTA families.

Training is strictly sequential per-sample SGD; the visit order within
an epoch comes from one shuffle stream, so identical seeds and config
reproduce the run bit-for-bit. All four trainers share the same
initialization story: positive centers from per-class k-means (or
uniform-random draws over the data range), IP weights as the exact IP
form of those centers, and split variants derived from the base
parameters.

Inverse temperature: the IP families train with a fixed softmax (the
weights set their own scale); the ED families carry a trainable beta
because center magnitudes are pinned to the data.
"""

import csv
from dataclasses import dataclass, replace

import numpy as np

from . import models
from .numkernel import seeded_stream, stable_softmax

DEFAULT_LR_GRID = (1e-2, 1e-1, 1.0, 10.0, 100.0)
BETA_MIN = 1e-6

__all__ = [
    "TrainConfig",
    "EpochStats",
    "DivergenceError",
    "kmeans",
    "init_centers",
    "init_negative",
    "cce_target",
    "cce_loss",
    "lr_schedule",
    "train_ip_wta",
    "train_ed_wta",
    "train_pn_ip_wta",
    "train_pn_ed_wta",
    "cross_validate_lr",
    "evaluate_accuracy",
    "confusion_counts",
    "write_stats_csv",
    "TRAINERS",
]


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or parameter."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr0: float = 1.0
    lr_decay: float = 0.5
    neurons_per_class: int = 6
    init: str = "kmeans"
    beta0: float | str = "auto"
    noise_sigma: float = 0.01
    shuffle_seed: int = 0
    init_seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be > 0, got {self.lr0}")
        if not 0 < self.lr_decay <= 1:
            raise ValueError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.neurons_per_class < 1:
            raise ValueError("neurons_per_class must be >= 1")
        if self.init not in ("random", "kmeans"):
            raise ValueError(f"init must be 'random' or 'kmeans', got {self.init!r}")
        if self.beta0 != "auto" and float(self.beta0) <= 0:
            raise ValueError(f"beta0 must be > 0 or 'auto', got {self.beta0}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    loss: float
    train_acc: float
    mu: float
    beta: float


def write_stats_csv(stats, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "loss", "train_acc", "mu", "beta"])
        for s in stats:
            writer.writerow([s.epoch, repr(s.loss), repr(s.train_acc),
                             repr(s.mu), repr(s.beta)])


def lr_schedule(lr0, lr_decay, epoch):
    """mu at a given epoch: lr0 * lr_decay**epoch."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return lr0 * lr_decay ** epoch


def _sq_dists(points, centers, point_norms=None):
    if point_norms is None:
        point_norms = np.einsum("nd,nd->n", points, points)
    c_norms = np.einsum("kd,kd->k", centers, centers)
    d2 = point_norms[:, None] - 2.0 * (points @ centers.T) + c_norms[None, :]
    return np.maximum(d2, 0.0)


def kmeans(points, k, seed, max_iters=300, sse_trace=None):
    """Lloyd's algorithm with k-means++ seeding.

    Stops when the assignment stops changing (or after ``max_iters``).
    An emptied cluster is re-seeded from the point currently farthest
    from its own center, so within-cluster SSE never increases; pass a
    list as ``sse_trace`` to record the per-iteration SSE.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) == 0:
        raise ValueError("points must be a nonempty (n, d) array")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    n_distinct = len(np.unique(points, axis=0))
    if k > n_distinct:
        raise ValueError(f"k={k} exceeds {n_distinct} distinct points")

    rng = np.random.default_rng(seed)
    n = len(points)
    point_norms = np.einsum("nd,nd->n", points, points)

    # k-means++ seeding
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    best_d2 = _sq_dists(points, centers[:1], point_norms)[:, 0]
    for j in range(1, k):
        total = best_d2.sum()
        if total <= 0:
            # remaining mass is on duplicates; pick any point not yet chosen
            centers[j] = points[int(np.argmax(best_d2))]
        else:
            centers[j] = points[rng.choice(n, p=best_d2 / total)]
        best_d2 = np.minimum(
            best_d2, _sq_dists(points, centers[j:j + 1], point_norms)[:, 0])

    assign = None
    for _ in range(max_iters):
        d2 = _sq_dists(points, centers, point_norms)
        new_assign = np.argmin(d2, axis=1)
        own = d2[np.arange(n), new_assign]
        for j in range(k):
            if not (new_assign == j).any():
                far = int(np.argmax(own))
                centers[j] = points[far]
                new_assign[far] = j
                own[far] = 0.0
        if sse_trace is not None:
            sse_trace.append(float(own.sum()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            centers[j] = points[assign == j].mean(axis=0)
    return centers


def init_centers(data, config):
    """Initial positive centers plus the block neuron->class assignment.

    kmeans mode runs per-class k-means with k = neurons_per_class;
    random mode draws centers uniformly over the data's value range.
    """
    per_class = config.neurons_per_class
    assignment = models.NeuronAssignment.block(data.K, per_class)
    if config.init == "random":
        rng = seeded_stream(config.init_seed)
        lo = float(data.features.min()) if data.n else 0.0
        hi = float(data.features.max()) if data.n else 1.0
        centers = lo + rng.random((assignment.M, data.D)) * (hi - lo)
        return centers, assignment
    if data.labels is None:
        raise ValueError("kmeans init requires a labeled dataset")
    blocks = []
    for k in range(data.K):
        pts = data.features[data.labels == k]
        if len(pts) < per_class:
            raise ValueError(
                f"class {k} has {len(pts)} samples, need >= {per_class} "
                f"for kmeans init")
        blocks.append(kmeans(pts, per_class, np.random.default_rng(
            [config.init_seed, k])))
    return np.vstack(blocks), assignment


def init_negative(c_plus, noise_sigma, seed):
    """Negative prototypes: the positives plus small Gaussian noise."""
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    rng = np.random.default_rng(seed)
    return c_plus + noise_sigma * rng.standard_normal(c_plus.shape)


def cce_target(z, beta, label, assignment):
    """Target distribution: softmax competition among the true class only.

    Entries outside the true class's neurons are exactly zero.
    """
    if not 0 <= label < assignment.K:
        raise ValueError(f"label {label} out of range for K={assignment.K}")
    tau = np.zeros(assignment.M)
    idx = assignment.neurons_of(label)
    tau[idx] = stable_softmax(np.asarray(z, dtype=np.float64)[idx], beta)
    return tau


def cce_loss(y, tau):
    """Cross entropy -sum tau_j ln y_j, with ln clamped at y >= 1e-300."""
    y = np.asarray(y, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    active = tau > 0
    return float(-np.sum(tau[active]
                         * np.log(np.maximum(y[active], 1e-300))))


def _require_labels(data):
    if data.labels is None:
        raise ValueError("training requires a labeled dataset")


def _row_selectors(assignment):
    """Per-class row selectors for the split updates.

    Contiguous neuron blocks become slices so the hot per-sample updates
    run on views instead of fancy-indexed copies; the complement of a
    block is the pair of slices around it. Non-contiguous assignments
    fall back to index arrays.
    """
    own, other = [], []
    m = assignment.M
    for k in range(assignment.K):
        idx = assignment.neurons_of(k)
        start, stop = int(idx[0]), int(idx[-1]) + 1
        if stop - start == len(idx):
            own.append(slice(start, stop))
            parts = []
            if start > 0:
                parts.append(slice(0, start))
            if stop < m:
                parts.append(slice(stop, m))
            other.append(tuple(parts))
        else:
            own.append(idx)
            other.append((np.setdiff1d(np.arange(m), idx),))
    return own, other


def _restricted_softmax(z, beta, idx):
    e = np.exp(beta * z[idx] - np.max(beta * z[idx]))
    return e / e.sum()


def _auto_beta(z_abs_mean):
    if z_abs_mean == 0.0:
        return 1.0
    return max(1e-3, 1.0 / z_abs_mean)


def _base_ip_init(data, config):
    """IP weights equivalent to the initial centers: w=c, b=-||c||^2/2."""
    centers, assignment = init_centers(data, config)
    w = centers
    b = -0.5 * np.einsum("md,md->m", centers, centers)
    return w, b, assignment


def train_ip_wta(data, config, init_model=None):
    """Plain IP-WTA under competitive cross entropy (fixed softmax).

    Biases ride along as the weight on an implicit constant-1 input, so
    both receive the same per-sample update. ``init_model`` warm-starts
    from an existing IpWtaModel instead of the configured init.
    """
    _require_labels(data)
    if init_model is not None:
        w, b = init_model.weights.copy(), init_model.biases.copy()
        assignment = init_model.assignment
    else:
        w, b, assignment = _base_ip_init(data, config)
        w = w.copy()
    class_of = assignment.class_of
    own, _ = _row_selectors(assignment)

    X, labels = data.features, data.labels
    shuffle = seeded_stream(config.shuffle_seed)
    stats = []
    for epoch in range(config.epochs):
        mu = lr_schedule(config.lr0, config.lr_decay, epoch)
        order = shuffle.permutation(data.n)
        loss_sum = 0.0
        correct = 0
        for i in order:
            x = X[i]
            k = labels[i]
            z = w @ x + b
            if not np.isfinite(z).all():
                raise DivergenceError(
                    f"non-finite scores at epoch {epoch}, sample {int(i)}")
            y = stable_softmax(z, 1.0)
            tau = np.zeros(assignment.M)
            idx = own[k]
            tau[idx] = _restricted_softmax(z, 1.0, idx)
            loss = cce_loss(y, tau)
            correct += class_of[int(np.argmax(z))] == k
            g = y - tau
            w -= mu * np.outer(g, x)
            b -= mu * g
            loss_sum += loss
            if not np.isfinite(loss_sum):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, sample {int(i)}")
        stats.append(EpochStats(epoch, loss_sum / data.n, correct / data.n,
                                mu, 1.0))
    return models.IpWtaModel(w, b, assignment), stats


def train_ed_wta(data, config, init_model=None):
    """ED-WTA under competitive cross entropy with trainable beta.

    Centers train with zero ED biases. ``init_model`` (an EdWtaModel)
    overrides the configured initialization, which is how centers fitted
    from an IP network continue training after their biases are dropped.
    """
    _require_labels(data)
    if init_model is not None:
        centers = init_model.centers.copy()
        assignment = init_model.assignment
    else:
        centers, assignment = init_centers(data, config)
        centers = centers.copy()
    class_of = assignment.class_of
    own, _ = _row_selectors(assignment)

    X, labels = data.features, data.labels
    x_norms = np.einsum("nd,nd->n", X, X)

    if config.beta0 == "auto":
        head = min(256, data.n)
        z0 = models.ed_forward(
            models.EdWtaModel(centers, np.zeros(assignment.M), 1.0, assignment),
            X[:head])
        beta = _auto_beta(float(np.mean(np.abs(z0))))
    else:
        beta = float(config.beta0)

    shuffle = seeded_stream(config.shuffle_seed)
    stats = []
    for epoch in range(config.epochs):
        mu = lr_schedule(config.lr0, config.lr_decay, epoch)
        order = shuffle.permutation(data.n)
        c_norms = np.einsum("md,md->m", centers, centers)
        loss_sum = 0.0
        correct = 0
        for i in order:
            x = X[i]
            k = labels[i]
            cx = centers @ x
            sq = np.maximum(x_norms[i] - 2.0 * cx + c_norms, 0.0)
            z = -0.5 * sq
            if not np.isfinite(z).all():
                raise DivergenceError(
                    f"non-finite scores at epoch {epoch}, sample {int(i)}")
            y = stable_softmax(z, beta)
            tau = np.zeros(assignment.M)
            idx = own[k]
            tau[idx] = _restricted_softmax(z, beta, idx)
            loss = cce_loss(y, tau)
            correct += class_of[int(np.argmax(z))] == k

            g = y - tau
            coef = mu * beta * g
            # c <- c - coef (x - c) = (1 + coef) c - coef x
            scale = 1.0 + coef
            centers *= scale[:, None]
            centers -= np.outer(coef, x)
            c_norms = (scale ** 2 * c_norms
                       - 2.0 * coef * scale * cx
                       + coef ** 2 * x_norms[i])
            beta = max(BETA_MIN, beta + 0.5 * mu * float(g @ sq))

            loss_sum += loss
            if not np.isfinite(loss_sum) or not np.isfinite(beta):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, sample {int(i)}")
        stats.append(EpochStats(epoch, loss_sum / data.n, correct / data.n,
                                mu, beta))
    return (models.EdWtaModel(centers, np.zeros(assignment.M), beta,
                              assignment), stats)


def train_pn_ip_wta(data, config, init_model=None):
    """Split-weight IP-WTA: positive rows collect true-class updates,
    negative rows collect the repulsion from other classes.

    Per sample, the two updated row sets are disjoint by construction.
    ``init_model`` warm-starts from an existing PnIpWtaModel.
    """
    _require_labels(data)
    if init_model is not None:
        wp, bp = init_model.w_plus[:, :-1].copy(), init_model.w_plus[:, -1].copy()
        wm, bm = init_model.w_minus[:, :-1].copy(), init_model.w_minus[:, -1].copy()
        assignment = init_model.assignment
    else:
        w, b, assignment = _base_ip_init(data, config)
        wp = np.maximum(w, 0.0)
        wm = np.maximum(-w, 0.0)
        bp = np.maximum(b, 0.0)
        bm = np.maximum(-b, 0.0)
    class_of = assignment.class_of
    own, other = _row_selectors(assignment)

    X, labels = data.features, data.labels
    shuffle = seeded_stream(config.shuffle_seed)
    stats = []
    for epoch in range(config.epochs):
        mu = lr_schedule(config.lr0, config.lr_decay, epoch)
        order = shuffle.permutation(data.n)
        loss_sum = 0.0
        correct = 0
        for i in order:
            x = X[i]
            k = labels[i]
            z = (wp @ x + bp) - (wm @ x + bm)
            if not np.isfinite(z).all():
                raise DivergenceError(
                    f"non-finite scores at epoch {epoch}, sample {int(i)}")
            y = stable_softmax(z, 1.0)
            tau = np.zeros(assignment.M)
            idx = own[k]
            tau[idx] = _restricted_softmax(z, 1.0, idx)
            loss = cce_loss(y, tau)
            correct += class_of[int(np.argmax(z))] == k

            pos_coef = mu * (tau[idx] - y[idx])
            wp[idx] += np.outer(pos_coef, x)
            bp[idx] += pos_coef
            for oidx in other[k]:
                neg_coef = mu * y[oidx]
                wm[oidx] += np.outer(neg_coef, x)
                bm[oidx] += neg_coef

            loss_sum += loss
            if not np.isfinite(loss_sum):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, sample {int(i)}")
        stats.append(EpochStats(epoch, loss_sum / data.n, correct / data.n,
                                mu, 1.0))
    model = models.PnIpWtaModel(np.hstack([wp, bp[:, None]]),
                                np.hstack([wm, bm[:, None]]), assignment)
    return model, stats


def train_pn_ed_wta(data, config, init_model=None):
    """Paired-prototype ED-WTA trained exactly as in the switching scheme:
    per sample, positive centers of the true class move toward the input
    and negative centers of the other classes chase it, each with a
    nonnegative coefficient; beta follows its own gradient step.

    ``init_model`` warm-starts both center matrices from an existing
    PnEdWtaModel (the noise init is skipped).
    """
    _require_labels(data)
    if init_model is not None:
        c_plus = init_model.c_plus.copy()
        c_minus = init_model.c_minus.copy()
        assignment = init_model.assignment
    else:
        c_plus, assignment = init_centers(data, config)
        c_plus = c_plus.copy()
        c_minus = init_negative(c_plus, config.noise_sigma,
                                np.random.default_rng([config.init_seed, 1]))
    class_of = assignment.class_of
    own, other = _row_selectors(assignment)

    X, labels = data.features, data.labels
    x_norms = np.einsum("nd,nd->n", X, X)

    if config.beta0 == "auto":
        head = min(256, data.n)
        z0 = models.pn_ed_forward(
            models.PnEdWtaModel(c_plus, c_minus, 1.0, assignment), X[:head])
        beta = _auto_beta(float(np.mean(np.abs(z0))))
    else:
        beta = float(config.beta0)

    shuffle = seeded_stream(config.shuffle_seed)
    stats = []
    for epoch in range(config.epochs):
        mu = lr_schedule(config.lr0, config.lr_decay, epoch)
        order = shuffle.permutation(data.n)
        p_norms = np.einsum("md,md->m", c_plus, c_plus)
        m_norms = np.einsum("md,md->m", c_minus, c_minus)
        loss_sum = 0.0
        correct = 0
        for i in order:
            x = X[i]
            k = labels[i]
            px = c_plus @ x
            mx = c_minus @ x
            z = (px - mx) + 0.5 * (m_norms - p_norms)
            if not np.isfinite(z).all():
                raise DivergenceError(
                    f"non-finite scores at epoch {epoch}, sample {int(i)}")
            y = stable_softmax(z, beta)
            tau = np.zeros(assignment.M)
            idx = own[k]
            tau[idx] = _restricted_softmax(z, beta, idx)
            loss = cce_loss(y, tau)
            correct += class_of[int(np.argmax(z))] == k

            # c+ <- c+ + p (x - c+) on the true class's neurons
            p = mu * beta * (tau[idx] - y[idx])
            keep = 1.0 - p
            c_plus[idx] *= keep[:, None]
            c_plus[idx] += np.outer(p, x)
            p_norms[idx] = (keep ** 2 * p_norms[idx]
                            + 2.0 * p * keep * px[idx]
                            + p ** 2 * x_norms[i])
            # c- <- c- + q (x - c-) everywhere else
            for oidx in other[k]:
                q = mu * beta * y[oidx]
                keep = 1.0 - q
                c_minus[oidx] *= keep[:, None]
                c_minus[oidx] += np.outer(q, x)
                m_norms[oidx] = (keep ** 2 * m_norms[oidx]
                                 + 2.0 * q * keep * mx[oidx]
                                 + q ** 2 * x_norms[i])
            beta = max(BETA_MIN, beta - mu * float((y - tau) @ z))

            loss_sum += loss
            if not np.isfinite(loss_sum) or not np.isfinite(beta):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, sample {int(i)}")
        stats.append(EpochStats(epoch, loss_sum / data.n, correct / data.n,
                                mu, beta))
    return (models.PnEdWtaModel(c_plus, c_minus, beta, assignment), stats)


TRAINERS = {
    "ip": train_ip_wta,
    "ed": train_ed_wta,
    "pn_ip": train_pn_ip_wta,
    "pn_ed": train_pn_ed_wta,
}


def evaluate_accuracy(model, data):
    """Fraction of samples whose winning neuron's class matches the label."""
    if data.labels is None:
        raise ValueError("accuracy needs a labeled dataset")
    if data.n == 0:
        raise ValueError("empty dataset")
    pred = models.predict(models.scores(model, data.features),
                          model.assignment)
    return float(np.mean(pred == data.labels))


def confusion_counts(model, data):
    """K x K matrix: rows true class, columns predicted class."""
    if data.labels is None:
        raise ValueError("confusion counts need a labeled dataset")
    pred = models.predict(models.scores(model, data.features),
                          model.assignment)
    counts = np.zeros((data.K, data.K), dtype=np.int64)
    np.add.at(counts, (data.labels, pred), 1)
    return counts


def _stratified_folds(data, n_folds, seed):
    folds = [[] for _ in range(n_folds)]
    for k in range(data.K):
        idx = np.flatnonzero(data.labels == k)
        rng = np.random.default_rng([seed, 97, k])
        for pos, i in enumerate(rng.permutation(idx)):
            folds[pos % n_folds].append(int(i))
    folds = [np.sort(np.array(f, dtype=np.int64)) for f in folds]
    for f, val_idx in enumerate(folds):
        train_idx = np.setdiff1d(np.arange(data.n), val_idx)
        for part, name in ((val_idx, "validation"), (train_idx, "training")):
            present = np.unique(data.labels[part])
            if present.size != data.K:
                missing = sorted(set(range(data.K)) - set(present.tolist()))
                raise ValueError(
                    f"stratification failed: fold {f} {name} split missing "
                    f"classes {missing}")
    return folds


def cross_validate_lr(data, config, grid=None, family="pn_ed", n_folds=5):
    """Pick lr0 by stratified cross-validation over a candidate grid.

    Each candidate trains once per fold with the epoch budget already in
    ``config`` (pass a reduced one). A diverging fold scores zero. Ties
    go to the smaller learning rate.
    """
    _require_labels(data)
    grid = DEFAULT_LR_GRID if grid is None else tuple(grid)
    if not grid:
        raise ValueError("empty learning-rate grid")
    trainer = TRAINERS[family]
    folds = _stratified_folds(data, n_folds, config.shuffle_seed)
    all_idx = np.arange(data.n)

    results = {}
    for lr in sorted(grid):
        accs = []
        for val_idx in folds:
            train_idx = np.setdiff1d(all_idx, val_idx)
            cfg = replace(config, lr0=lr)
            try:
                model, _ = trainer(data.subset(train_idx), cfg)
                accs.append(evaluate_accuracy(model, data.subset(val_idx)))
            except DivergenceError:
                accs.append(0.0)
        results[lr] = float(np.mean(accs))

    best_lr = None
    best_acc = -1.0
    for lr in sorted(results):
        if results[lr] > best_acc:
            best_lr, best_acc = lr, results[lr]
    return best_lr, results
