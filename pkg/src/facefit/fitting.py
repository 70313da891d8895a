"""Analysis-by-synthesis coefficient fitting and a desk-scale training loop.

Both paths share the same objective and gradients; direct single-image
fitting is the primary execution path, so the whole loss suite is
exercised without full-scale dataset training. Learning-rate decay is
iteration-based here (the reference schedule decays per epoch, which has
no single-image equivalent; the interval is configurable).
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import morphable as mm
from .errors import DivergenceError, ParameterError
from .losses import LossWeights, total_loss
from .network import network_forward
from .tensor_ops import Tensor4

LOSS_TERMS = ("photometric", "perceptual", "landmark", "coefficients", "reflectance")


@dataclass
class FitConfig:
    max_iterations: int = 500
    learning_rate: float = 0.0004
    lr_decay_factor: float = 0.5
    lr_decay_interval: int = 200
    convergence_tolerance: float = 0.0
    moment_decays: tuple = (0.9, 0.999)
    epsilon: float = 1e-8
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ParameterError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 < self.lr_decay_factor <= 1:
            raise ParameterError(f"lr_decay_factor must be in (0, 1], got {self.lr_decay_factor}")
        if self.lr_decay_interval < 1:
            raise ParameterError(f"lr_decay_interval must be >= 1, got {self.lr_decay_interval}")
        if self.convergence_tolerance < 0:
            raise ParameterError("convergence_tolerance must be >= 0")
        if self.max_iterations < 0:
            raise ParameterError("max_iterations must be >= 0")


@dataclass
class TraceRecord:
    iteration: int
    total: float
    terms: dict          # term -> unweighted value
    gradient_norm: float
    learning_rate: float


@dataclass
class FitTrace:
    records: list = field(default_factory=list)

    def append(self, record):
        if self.records and record.iteration <= self.records[-1].iteration:
            raise ParameterError("trace iterations must increase strictly")
        values = [record.total, record.gradient_norm, record.learning_rate,
                  *record.terms.values()]
        if not all(math.isfinite(v) for v in values):
            raise DivergenceError(f"non-finite value at iteration {record.iteration}", trace=self)
        self.records.append(record)

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("iteration,total," + ",".join(LOSS_TERMS) + ",gradient_norm,learning_rate\n")
            for r in self.records:
                terms = ",".join(f"{r.terms.get(t, 0.0):.12g}" for t in LOSS_TERMS)
                fh.write(f"{r.iteration},{r.total:.12g},{terms},{r.gradient_norm:.12g},{r.learning_rate:.12g}\n")


def lr_schedule(iteration, config):
    """Step decay: base * factor^floor(iteration / interval)."""
    if iteration < 0:
        raise ParameterError(f"iteration must be >= 0, got {iteration}")
    return config.learning_rate * config.lr_decay_factor ** (iteration // config.lr_decay_interval)


class Adam:
    """First-order adaptive-moment optimizer with bias correction.

    Keeps one first/second moment pair per parameter key; the learning
    rate is supplied per step so schedules stay external.
    """

    def __init__(self, betas=(0.9, 0.999), epsilon=1e-8):
        self.beta1, self.beta2 = betas
        self.epsilon = epsilon
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads, lr):
        """Return updated copies of `params` (inputs are not mutated)."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        out = {}
        for key, value in params.items():
            g = grads[key]
            if key not in self.m:
                self.m[key] = np.zeros_like(value)
                self.v[key] = np.zeros_like(value)
            self.m[key] = self.beta1 * self.m[key] + (1.0 - self.beta1) * g
            self.v[key] = self.beta2 * self.v[key] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[key] / bc1
            v_hat = self.v[key] / bc2
            out[key] = value - lr * m_hat / (np.sqrt(v_hat) + self.epsilon)
        return out


def default_translation(basis, camera_model, fill=0.75):
    """Translation that frames the mean face: centered, depth chosen so the
    face's largest half-extent spans `fill` of the half image size."""
    verts = basis.mean_shape.reshape(-1, 3)
    extent = float(np.abs(verts[:, :2]).max())
    h, w = camera_model.image_size
    half = fill * min(h, w) / 2.0
    tz = camera_model.focal_length * extent / half
    # keep every vertex safely in front of the camera
    tz = max(tz, -float(verts[:, 2].min()) + 10.0)
    return np.array([0.0, 0.0, tz])


def initial_coefficients(basis, camera_model):
    """All zeros except unit-irradiance lighting and an in-frame translation."""
    co = mm.FaceCoefficients.zeros()
    co.delta[0] = 2.0 * math.sqrt(math.pi)
    co.translation[:] = default_translation(basis, camera_model)
    return co


def fit_coefficients(image, landmarks, mask, basis, camera_model, config=None,
                     init=None, embedder=None):
    """Adaptive-moment gradient descent on the 239-value coefficient vector.

    Stops at max_iterations or when the relative loss change stays below
    the tolerance for 10 consecutive iterations. Returns the final
    coefficients and the per-iteration trace.
    """
    cfg = config if config is not None else FitConfig()
    co = (init if init is not None else initial_coefficients(basis, camera_model)).copy()
    trace = FitTrace()
    if cfg.max_iterations == 0:
        return co, trace

    opt = Adam(betas=cfg.moment_decays, epsilon=cfg.epsilon)
    vec = co.to_vector()
    prev_total = None
    calm_streak = 0
    for it in range(cfg.max_iterations):
        co = mm.FaceCoefficients.from_vector(vec)
        result = total_loss(co, basis, camera_model, image, landmarks, mask,
                            cfg.loss_weights, embedder)
        gvec = result.gradient.to_vector()
        if not (math.isfinite(result.total) and np.all(np.isfinite(gvec))):
            raise DivergenceError(f"non-finite loss or gradient at iteration {it}", trace=trace)
        lr = lr_schedule(it, cfg)
        trace.append(TraceRecord(
            iteration=it,
            total=result.total,
            terms={t: result.breakdown[t]["unweighted"] for t in LOSS_TERMS},
            gradient_norm=float(np.linalg.norm(gvec)),
            learning_rate=lr,
        ))
        if prev_total is not None:
            rel = abs(result.total - prev_total) / max(abs(prev_total), 1e-30)
            calm_streak = calm_streak + 1 if rel < cfg.convergence_tolerance else 0
            if calm_streak >= 10:
                break
        prev_total = result.total
        vec = opt.step({"coeffs": vec}, {"coeffs": gvec}, lr)["coeffs"]
    return mm.FaceCoefficients.from_vector(vec), trace


def train_step(params, optimizer, batch, basis, camera_model, config):
    """One optimizer step on network parameters against the mean batch loss.

    batch is a nonempty list of (image (H,W,3), landmarks (68,2), SkinMask)
    tuples over same-sized images. Returns (updated params, batch loss).
    """
    if not batch:
        raise ParameterError("batch must be nonempty")
    images = np.stack([np.asarray(b[0], dtype=np.float64) for b in batch])
    if any(b[0].shape != batch[0][0].shape for b in batch):
        raise ParameterError("all batch images must share dimensions")
    net_input = Tensor4(images.transpose(0, 3, 1, 2))
    coeffs, back = network_forward(net_input, params)

    n = len(batch)
    losses = []
    coeff_grads = []
    for (image, landmarks, mask), co in zip(batch, coeffs):
        result = total_loss(co, basis, camera_model, image, landmarks, mask,
                            config.loss_weights)
        losses.append(result.total)
        coeff_grads.append(mm.CoefficientGradient.zeros().add_scaled(result.gradient, 1.0 / n))
    batch_loss = float(np.mean(losses))
    if not math.isfinite(batch_loss):
        raise DivergenceError("non-finite batch loss")

    _, param_grads = back(coeff_grads)
    if any(not np.all(np.isfinite(g)) for g in param_grads.values()):
        raise DivergenceError("non-finite parameter gradient")
    trainable = {k: v for k, v in params.items() if k in param_grads}
    lr = lr_schedule(optimizer.t, config)
    updated = optimizer.step(trainable, param_grads, lr)
    new_params = dict(params)
    new_params.update(updated)
    return new_params, batch_loss
