"""WTA model families, forward passes, exact conversions, persistence.

Four families share a neuron->class assignment:

* ip:    z_j = w_j . x + b_j
* ed:    z_j = -1/2 (||x - c_j||^2 + d_j^2)
* pn_ip: z_j = (w_j+ - w_j-) . x  on the augmented input [x, 1]
* pn_ed: z_j = -1/2 (||x - c_j+||^2 - ||x - c_j-||^2)

The predicted class is the class of the highest-scoring neuron, ties
broken to the lowest neuron index. Scores under pn_ed collapse exactly
to an inner-product neuron, which is what the conversions exploit.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .numkernel import argmax_tiebreak

MODEL_FORMAT_VERSION = 1

__all__ = [
    "NeuronAssignment",
    "IpWtaModel",
    "EdWtaModel",
    "PnIpWtaModel",
    "PnEdWtaModel",
    "FixedPointResult",
    "ModelFormatError",
    "augment",
    "ip_forward",
    "ed_forward",
    "pn_ip_forward",
    "pn_ed_forward",
    "scores",
    "model_family",
    "predict",
    "ed_to_ip",
    "ip_to_ed",
    "natural_ed_fit",
    "strip_ed_biases",
    "pn_ed_collapse",
    "save_model",
    "load_model",
]


class ModelFormatError(ValueError):
    """Raised when a model file cannot be decoded."""


@dataclass(frozen=True, eq=False)
class NeuronAssignment:
    """Maps each of M output neurons to one of K classes.

    Every class must own at least one neuron.
    """

    class_of: np.ndarray
    K: int

    def __post_init__(self):
        class_of = np.asarray(self.class_of, dtype=np.int64)
        object.__setattr__(self, "class_of", class_of)
        if class_of.ndim != 1 or class_of.size < self.K:
            raise ValueError(f"need M >= K neurons, got M={class_of.size}, K={self.K}")
        present = np.unique(class_of)
        if present.min() < 0 or present.max() >= self.K:
            raise ValueError(f"neuron class out of range for K={self.K}")
        if present.size != self.K:
            missing = sorted(set(range(self.K)) - set(present.tolist()))
            raise ValueError(f"classes without neurons: {missing}")
        class_of.flags.writeable = False

    @property
    def M(self):
        return self.class_of.size

    def neurons_of(self, k):
        """Indices of the neurons assigned to class k."""
        return np.flatnonzero(self.class_of == k)

    @classmethod
    def block(cls, K, per_class):
        """Consecutive blocks: neurons [k*p, (k+1)*p) belong to class k."""
        return cls(np.repeat(np.arange(K), per_class), K)


def _as_matrix(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError(f"{name} contains non-finite entries")
    return a


def _check_rows(mat, assignment, name):
    if mat.shape[0] != assignment.M:
        raise ValueError(
            f"{name} has {mat.shape[0]} rows for {assignment.M} neurons")


@dataclass(frozen=True, eq=False)
class IpWtaModel:
    weights: np.ndarray
    biases: np.ndarray
    assignment: NeuronAssignment

    def __post_init__(self):
        w = _as_matrix(self.weights, "weights")
        b = np.asarray(self.biases, dtype=np.float64)
        if b.shape != (w.shape[0],) or not np.isfinite(b).all():
            raise ValueError("biases must be finite with one entry per neuron")
        _check_rows(w, self.assignment, "weights")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "biases", b)

    @property
    def D(self):
        return self.weights.shape[1]


@dataclass(frozen=True, eq=False)
class EdWtaModel:
    centers: np.ndarray
    ed_biases: np.ndarray
    beta: float
    assignment: NeuronAssignment

    def __post_init__(self):
        c = _as_matrix(self.centers, "centers")
        d = np.asarray(self.ed_biases, dtype=np.float64)
        if d.shape != (c.shape[0],) or not np.isfinite(d).all():
            raise ValueError("ed_biases must be finite with one entry per neuron")
        if (d < 0).any():
            raise ValueError("ed_biases must be nonnegative (only d^2 enters)")
        if self.beta <= 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        _check_rows(c, self.assignment, "centers")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "ed_biases", d)

    @property
    def D(self):
        return self.centers.shape[1]


@dataclass(frozen=True, eq=False)
class PnIpWtaModel:
    """Split-weight IP model on the augmented input [x, 1]."""

    w_plus: np.ndarray
    w_minus: np.ndarray
    assignment: NeuronAssignment

    def __post_init__(self):
        wp = _as_matrix(self.w_plus, "w_plus")
        wm = _as_matrix(self.w_minus, "w_minus")
        if wp.shape != wm.shape:
            raise ValueError(f"w_plus {wp.shape} vs w_minus {wm.shape}")
        _check_rows(wp, self.assignment, "w_plus")
        object.__setattr__(self, "w_plus", wp)
        object.__setattr__(self, "w_minus", wm)

    @property
    def D(self):
        """Feature dimension; weight rows carry one extra bias column."""
        return self.w_plus.shape[1] - 1


@dataclass(frozen=True, eq=False)
class PnEdWtaModel:
    c_plus: np.ndarray
    c_minus: np.ndarray
    beta: float
    assignment: NeuronAssignment

    def __post_init__(self):
        cp = _as_matrix(self.c_plus, "c_plus")
        cm = _as_matrix(self.c_minus, "c_minus")
        if cp.shape != cm.shape:
            raise ValueError(f"c_plus {cp.shape} vs c_minus {cm.shape}")
        if self.beta <= 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        _check_rows(cp, self.assignment, "c_plus")
        object.__setattr__(self, "c_plus", cp)
        object.__setattr__(self, "c_minus", cm)

    @property
    def D(self):
        return self.c_plus.shape[1]


@dataclass(frozen=True)
class FixedPointResult:
    """Converged (alpha, u) of the natural-ED fit plus its energy trace."""

    alpha: float
    u: np.ndarray
    energy_trace: list
    iterations: int
    converged: bool


def _check_dim(x, d):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != d:
        raise ValueError(f"input dimension {x.shape[-1]} != model dimension {d}")
    return x


def augment(x):
    """Append the constant 1 used to fold biases into weights."""
    x = np.asarray(x, dtype=np.float64)
    ones = np.ones(x.shape[:-1] + (1,))
    return np.concatenate([x, ones], axis=-1)


def ip_forward(model, x):
    """Scores z_j = w_j . x + b_j. Accepts a (D,) vector or (N, D) batch."""
    x = _check_dim(x, model.D)
    return x @ model.weights.T + model.biases


def ed_forward(model, x):
    """Scores z_j = -1/2 (||x - c_j||^2 + d_j^2).

    Negated halving turns the distance argmin into a score argmax, so
    the same winner rule serves both model families.
    """
    x = _check_dim(x, model.D)
    c_norms = np.einsum("md,md->m", model.centers, model.centers)
    x_norms = np.sum(x * x, axis=-1, keepdims=x.ndim > 1)
    sq = x_norms - 2.0 * (x @ model.centers.T) + c_norms
    return -0.5 * (sq + model.ed_biases ** 2)


def pn_ed_forward(model, x):
    """Scores z_j = -1/2 (||x - c_j+||^2 - ||x - c_j-||^2)."""
    x = _check_dim(x, model.D)
    p_norms = np.einsum("md,md->m", model.c_plus, model.c_plus)
    m_norms = np.einsum("md,md->m", model.c_minus, model.c_minus)
    return (x @ (model.c_plus - model.c_minus).T
            + 0.5 * (m_norms - p_norms))


def pn_ip_forward(model, x):
    """Scores z_j = (w_j+ - w_j-) . x on the augmented input [x, 1]."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.w_plus.shape[1]:
        raise ValueError(
            f"input dimension {x.shape[-1]} != augmented dimension "
            f"{model.w_plus.shape[1]}")
    return x @ (model.w_plus - model.w_minus).T


def scores(model, x):
    """Forward pass dispatched on the model family.

    For pn_ip models the raw features are augmented here, so every
    family accepts plain (D,) or (N, D) inputs.
    """
    if isinstance(model, IpWtaModel):
        return ip_forward(model, x)
    if isinstance(model, EdWtaModel):
        return ed_forward(model, x)
    if isinstance(model, PnIpWtaModel):
        return pn_ip_forward(model, augment(x))
    if isinstance(model, PnEdWtaModel):
        return pn_ed_forward(model, x)
    raise TypeError(f"not a WTA model: {type(model).__name__}")


def predict(z, assignment):
    """Class of the winning neuron; lowest index wins ties.

    Accepts a single score vector or an (N, M) batch.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != assignment.M:
        raise ValueError(f"{z.shape[-1]} scores for {assignment.M} neurons")
    if z.ndim == 1:
        return int(assignment.class_of[argmax_tiebreak(z)])
    if not np.isfinite(z).all():
        raise ValueError("non-finite scores")
    return assignment.class_of[np.argmax(z, axis=-1)]


def ed_to_ip(model):
    """Equivalent IP model: w_j = c_j, b_j = -1/2 (c_j.c_j + d_j^2).

    The winning neuron is preserved for every input because the scores
    differ only by the input-dependent constant -||x||^2/2.
    """
    w = model.centers.copy()
    b = -0.5 * (np.einsum("md,md->m", w, w) + model.ed_biases ** 2)
    return IpWtaModel(w, b, model.assignment)


def ip_to_ed(model, alpha=1.0, gamma=None):
    """Equivalent ED model c_j = alpha w_j, d_j = sqrt(2g - a^2||w||^2 - 2ab).

    Any alpha > 0 and gamma >= gamma0 = 1/2 max_j(a^2 ||w_j||^2 + 2 a b_j)
    preserves the winner; gamma defaults to gamma0, which makes at least
    one d_j exactly zero.
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    w_norms = np.einsum("md,md->m", model.weights, model.weights)
    radicand_base = alpha ** 2 * w_norms + 2.0 * alpha * model.biases
    gamma0 = 0.5 * float(np.max(radicand_base))
    if gamma is None:
        gamma = gamma0
    elif gamma < gamma0 - 1e-12:
        raise ValueError(f"gamma={gamma} below the minimum gamma0={gamma0}")
    radicand = np.maximum(2.0 * gamma - radicand_base, 0.0)
    return EdWtaModel(alpha * model.weights, np.sqrt(radicand), 1.0,
                      model.assignment)


def natural_ed_fit(model, data, tol=1e-10, max_iters=1000):
    """Fit c_j = alpha w_j + u minimizing summed distance to winning centers.

    Alternates exact block minimization (u-step then alpha-step) of
    E(alpha, u) = sum_x ||x - (alpha w_q(x) + u)||^2 from alpha = 0,
    where q(x) is the IP winner; the energy is recorded after every
    half-step and never increases. The returned ED model keeps the
    biases d_j^2 = 2 gamma - 2 alpha b_j - ||c_j||^2 with the smallest
    feasible gamma, which makes it winner-identical to the source
    (up to ED-score ties when alpha degenerates to <= 0).
    """
    z = ip_forward(model, data.features)
    q = np.argmax(z, axis=1)

    # all-x aggregates: E depends on the data only through these
    n = data.n
    counts = np.bincount(q, minlength=model.assignment.M).astype(np.float64)
    w_norms = np.einsum("md,md->m", model.weights, model.weights)
    sum_wq_norm = float(counts @ w_norms)  # sum_x ||w_q(x)||^2
    if sum_wq_norm == 0.0:
        raise ValueError("degenerate fit: every winning neuron has zero weight")
    sum_x_norm = float(np.einsum("nd,nd->", data.features, data.features))
    sum_x = data.features.sum(axis=0)
    sum_wq = counts @ model.weights  # sum_x w_q(x)
    sum_wq_dot_x = float(np.einsum("nd,nd->", data.features,
                                   model.weights[q]))

    def energy(alpha, u):
        return (sum_x_norm - 2.0 * alpha * sum_wq_dot_x - 2.0 * (u @ sum_x)
                + alpha ** 2 * sum_wq_norm + 2.0 * alpha * (u @ sum_wq)
                + n * (u @ u))

    alpha = 0.0
    u = np.zeros(model.D)
    trace = [energy(alpha, u)]
    iterations = 0
    converged = False
    for iterations in range(1, max_iters + 1):
        u_new = (sum_x - alpha * sum_wq) / n
        trace.append(energy(alpha, u_new))
        alpha_new = (sum_wq_dot_x - u_new @ sum_wq) / sum_wq_norm
        trace.append(energy(alpha_new, u_new))
        du = float(np.max(np.abs(u_new - u)))
        da = abs(alpha_new - alpha)
        alpha, u = alpha_new, u_new
        if da < tol and du < tol:
            converged = True
            break

    centers = alpha * model.weights + u
    c_norms = np.einsum("md,md->m", centers, centers)
    radicand_base = c_norms + 2.0 * alpha * model.biases
    gamma = 0.5 * float(np.max(radicand_base))
    d = np.sqrt(np.maximum(2.0 * gamma - radicand_base, 0.0))
    fitted = EdWtaModel(centers, d, 1.0, model.assignment)
    return FixedPointResult(alpha, u, trace, iterations, converged), fitted


def strip_ed_biases(model):
    """Copy with every d_j = 0. Breaks IP equivalence on purpose."""
    return EdWtaModel(model.centers.copy(), np.zeros(model.assignment.M),
                      model.beta, model.assignment)


def pn_ed_collapse(model):
    """Collapse the paired-prototype model to its exact IP form.

    w_j = c_j+ - c_j- and b_j = 1/2 (||c_j-||^2 - ||c_j+||^2), which
    makes ip_forward reproduce pn_ed_forward bit-for-bit up to float
    rounding, hence identical accuracy.
    """
    w = model.c_plus - model.c_minus
    b = 0.5 * (np.einsum("md,md->m", model.c_minus, model.c_minus)
               - np.einsum("md,md->m", model.c_plus, model.c_plus))
    return IpWtaModel(w, b, model.assignment)


_FAMILY_OF_TYPE = {
    IpWtaModel: "ip",
    EdWtaModel: "ed",
    PnIpWtaModel: "pn_ip",
    PnEdWtaModel: "pn_ed",
}


def model_family(model):
    return _FAMILY_OF_TYPE[type(model)]


def save_model(model, path):
    """Write a model as a self-describing JSON text document.

    Floats are serialized with full round-trip precision, so reloading
    reproduces every score bit-exactly.
    """
    family = model_family(model)
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "family": family,
        "M": model.assignment.M,
        "D": model.D,
        "K": model.assignment.K,
        "class_of": model.assignment.class_of.tolist(),
    }
    if family == "ip":
        doc["weights"] = model.weights.tolist()
        doc["biases"] = model.biases.tolist()
    elif family == "ed":
        doc["centers"] = model.centers.tolist()
        doc["ed_biases"] = model.ed_biases.tolist()
        doc["beta"] = model.beta
    elif family == "pn_ip":
        doc["w_plus"] = model.w_plus.tolist()
        doc["w_minus"] = model.w_minus.tolist()
    else:
        doc["c_plus"] = model.c_plus.tolist()
        doc["c_minus"] = model.c_minus.tolist()
        doc["beta"] = model.beta
    with open(path, "w") as f:
        json.dump(doc, f)
        f.write("\n")


def _matrix_field(doc, key, m, cols, path):
    mat = np.asarray(doc[key], dtype=np.float64)
    if mat.shape != (m, cols):
        raise ModelFormatError(
            f"{path}: {key} has shape {mat.shape}, expected {(m, cols)}")
    return mat


def load_model(path):
    """Load a model file written by save_model."""
    try:
        with open(path) as f:
            doc = json.load(f)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"{path}: not a valid model file: {exc}") from exc
    try:
        version = doc["format_version"]
        if version != MODEL_FORMAT_VERSION:
            raise ModelFormatError(
                f"{path}: format_version {version}, expected {MODEL_FORMAT_VERSION}")
        family = doc["family"]
        m, d, k = doc["M"], doc["D"], doc["K"]
        assignment = NeuronAssignment(np.asarray(doc["class_of"]), k)
        if assignment.M != m:
            raise ModelFormatError(f"{path}: class_of length != M")
        if family == "ip":
            return IpWtaModel(_matrix_field(doc, "weights", m, d, path),
                              np.asarray(doc["biases"], dtype=np.float64),
                              assignment)
        if family == "ed":
            return EdWtaModel(_matrix_field(doc, "centers", m, d, path),
                              np.asarray(doc["ed_biases"], dtype=np.float64),
                              float(doc["beta"]), assignment)
        if family == "pn_ip":
            return PnIpWtaModel(_matrix_field(doc, "w_plus", m, d + 1, path),
                                _matrix_field(doc, "w_minus", m, d + 1, path),
                                assignment)
        if family == "pn_ed":
            return PnEdWtaModel(_matrix_field(doc, "c_plus", m, d, path),
                                _matrix_field(doc, "c_minus", m, d, path),
                                float(doc["beta"]), assignment)
        raise ModelFormatError(f"{path}: unknown model family {family!r}")
    except KeyError as exc:
        raise ModelFormatError(f"{path}: missing field {exc}") from exc
    except ValueError as exc:
        raise ModelFormatError(f"{path}: {exc}") from exc
