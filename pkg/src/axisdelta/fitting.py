"""Scale-vector fitting and the compression pipeline.

Per-layer vectors are fit by activation matching with an analytic gradient
and an AdamW-style optimizer; the axis (row vs col) is selected per layer by
end-to-end loss against cached teacher logits. A closed-form least-squares
solver doubles as an independent oracle: the layer loss is exactly quadratic
in the scale vector, so its solution is the global optimum.

Vectors are kept in FP32 throughout optimization and rounded to binary16
only when installed into the student (and at serialization).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .calibration import CalibCache, CalibConfig, TokenSource, build_cache
from .codec import (
    AxisScaleVector,
    PackedSignMask,
    broadcast_delta,
    scaled_sign_forward,
    sign_mask,
    unpack_signs,
)
from .model import (
    ToyModel,
    _trace_forward,
    backward_from_trace,
    forward,
    linear_layer_names,
)
from .tensor import matmul, to_half_array


class DivergenceError(ArithmeticError):
    """Optimization produced a non-finite loss."""


@dataclass
class FitConfig:
    lr: float = 1e-4
    epochs: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    cosine: bool = True
    # One calibration batch worth of rows per optimizer step; None means
    # full-cache batches.
    minibatch_rows: int | None = 64
    adam_eps: float = 1e-8

    def validate(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class E2EConfig:
    epochs: int = 1
    lr: float = 1e-4
    calib_batches: int = 150

    def validate(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be > 0")
        if self.epochs < 0 or self.calib_batches < 1:
            raise ValueError("bad end-to-end config")


@dataclass
class LayerFitResult:
    layer: str
    axis: str
    vector: AxisScaleVector
    train_curve: list[float]
    val_mse_row: float
    val_mse_col: float
    end_row: float
    end_col: float


# --- layer-level loss machinery ---------------------------------------------


def layer_mse(X, Y, base, signs, axis, v32) -> float:
    """(1/n) ||Y - Yhat||^2 with n = number of rows."""
    r = scaled_sign_forward(X, base, signs, axis, v32) - Y
    return float(np.sum(r.astype(np.float64) ** 2) / X.shape[0])


def scalar_mse(X, Y, base, signs, alpha) -> float:
    r = (matmul(X, base) + np.float32(alpha) * matmul(X, signs)) - Y
    return float(np.sum(r.astype(np.float64) ** 2) / X.shape[0])


def init_scale(delta: np.ndarray, axis: str) -> AxisScaleVector:
    """Mean-|delta| initialization along the chosen axis, rounded to FP16."""
    return AxisScaleVector(axis, to_half_array(init_scale32(delta, axis)))


def init_scale32(delta: np.ndarray, axis: str) -> np.ndarray:
    a = np.abs(np.asarray(delta, dtype=np.float32))
    return a.mean(axis=1 if axis == "row" else 0).astype(np.float32)


def vector_grad(X, Y, base, signs, axis, v32) -> tuple[float, np.ndarray]:
    """Analytic loss and d loss / d v for one minibatch.

    Row mode: dL/dv_i = (2/n) sum_n R[n,i] * (X @ B_i^T)[n].
    Col mode: dL/dv_j = (2/n) sum_i B[i,j] * (R^T X)[i,j].
    """
    n = X.shape[0]
    pred = scaled_sign_forward(X, base, signs, axis, v32)
    R = pred - Y
    loss = float(np.sum(R.astype(np.float64) ** 2) / n)
    if axis == "row":
        S = matmul(X, signs)
        g = (2.0 / n) * np.einsum("ni,ni->i", R, S)
    else:
        M = np.einsum("ni,nj->ij", R, X)
        g = (2.0 / n) * np.einsum("ij,ij->j", signs, M)
    return loss, g.astype(np.float32)


class _Adam:
    """Adam with decoupled weight decay and bias correction."""

    def __init__(self, shape, cfg_lr, beta1, beta2, eps, weight_decay):
        self.m = np.zeros(shape, dtype=np.float64)
        self.v = np.zeros(shape, dtype=np.float64)
        self.t = 0
        self.lr0 = cfg_lr
        self.b1, self.b2, self.eps, self.wd = beta1, beta2, eps, weight_decay

    def step(self, param: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        g = grad.astype(np.float64)
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mh = self.m / (1 - self.b1**self.t)
        vh = self.v / (1 - self.b2**self.t)
        p = param.astype(np.float64)
        p = p - lr * self.wd * p
        p = p - lr * mh / (np.sqrt(vh) + self.eps)
        return p.astype(np.float32)


def _cosine_lr(lr0: float, step: int, total: int, enabled: bool) -> float:
    if not enabled or total <= 1:
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / (total - 1)))


@dataclass
class FitOutcome:
    vector: AxisScaleVector  # rounded to FP16
    v32: np.ndarray  # final unrounded FP32 solution
    val_mse: float  # evaluated with the rounded vector
    train_curve: list[float]


def _minibatches(n_rows: int, mb: int | None):
    if mb is None or mb >= n_rows:
        yield slice(0, n_rows)
        return
    for lo in range(0, n_rows, mb):
        yield slice(lo, min(lo + mb, n_rows))


def fit_layer_vector(
    cache: CalibCache,
    base: np.ndarray,
    mask: PackedSignMask,
    axis: str,
    cfg: FitConfig,
    init: np.ndarray | None = None,
) -> FitOutcome:
    """Fit v by minimizing the layer MSE on the train shard.

    `init` is the FP32 starting vector (mean-|delta| in the pipeline);
    zeros when omitted. Validation MSE is computed on the held-out shard
    with the rounded final vector and no gradient.
    """
    cfg.validate()
    signs = unpack_signs(mask)
    length = mask.d_out if axis == "row" else mask.d_in
    v = (
        np.zeros(length, dtype=np.float32)
        if init is None
        else np.asarray(init, dtype=np.float32).copy()
    )
    slices = list(_minibatches(cache.X_train.shape[0], cfg.minibatch_rows))
    total = cfg.epochs * len(slices)
    adam = _Adam(v.shape, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    curve: list[float] = []
    step = 0
    for epoch in range(cfg.epochs):
        epoch_loss = 0.0
        for sl in slices:
            loss, g = vector_grad(
                cache.X_train[sl], cache.Y_train[sl], base, signs, axis, v
            )
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite layer loss at epoch {epoch}")
            lr = _cosine_lr(cfg.lr, step, total, cfg.cosine)
            v = adam.step(v, g, lr)
            epoch_loss += loss
            step += 1
        curve.append(epoch_loss / len(slices))
    vec = AxisScaleVector(axis, to_half_array(v))
    val = layer_mse(
        cache.X_val, cache.Y_val, base, signs, axis, vec.values.astype(np.float32)
    )
    return FitOutcome(vec, v, val, curve)


def fit_layer_scalar(
    cache: CalibCache,
    base: np.ndarray,
    mask: PackedSignMask,
    cfg: FitConfig,
    init: float = 0.0,
) -> tuple[float, float, list[float]]:
    """Single-scalar baseline fit. Returns (alpha, val MSE, train curve)."""
    cfg.validate()
    signs = unpack_signs(mask)
    alpha = np.float32(init)
    slices = list(_minibatches(cache.X_train.shape[0], cfg.minibatch_rows))
    total = cfg.epochs * len(slices)
    adam = _Adam((), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    curve: list[float] = []
    step = 0
    for epoch in range(cfg.epochs):
        epoch_loss = 0.0
        for sl in slices:
            X, Y = cache.X_train[sl], cache.Y_train[sl]
            n = X.shape[0]
            S = matmul(X, signs)
            R = (matmul(X, base) + alpha * S) - Y
            loss = float(np.sum(R.astype(np.float64) ** 2) / n)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite scalar loss at epoch {epoch}")
            g = np.float32((2.0 / n) * np.einsum("ni,ni->", R, S))
            lr = _cosine_lr(cfg.lr, step, total, cfg.cosine)
            alpha = np.float32(adam.step(np.float32(alpha), g, lr))
            epoch_loss += loss
            step += 1
        curve.append(epoch_loss / len(slices))
    val = scalar_mse(cache.X_val, cache.Y_val, base, signs, alpha)
    return float(alpha), val, curve


# --- closed-form oracle ------------------------------------------------------


def closed_form_v32(
    X, Y, base, signs, axis: str, ridge: float = 1e-8
) -> np.ndarray:
    """Exact least-squares solution for v (the layer loss is quadratic).

    Row mode decouples into independent per-output-unit scalar problems.
    Col mode solves the d_in x d_in normal equations, whose system matrix is
    the Hadamard product of the X and B Gram matrices.
    """
    R = (Y - matmul(X, base)).astype(np.float64)
    if axis == "row":
        S = matmul(X, signs).astype(np.float64)
        num = np.einsum("ni,ni->i", R, S)
        den = np.einsum("ni,ni->i", S, S)
        return (num / (den + ridge)).astype(np.float32)
    X64 = X.astype(np.float64)
    B64 = signs.astype(np.float64)
    A = (X64.T @ X64) * (B64.T @ B64)
    if ridge:
        A = A + ridge * np.eye(A.shape[0])
    c = np.einsum("ij,ij->j", B64, R.T @ X64)
    return np.linalg.solve(A, c).astype(np.float32)


def closed_form_oracle(
    cache: CalibCache, base, mask: PackedSignMask, axis: str, ridge: float = 1e-8
) -> AxisScaleVector:
    signs = unpack_signs(mask)
    v = closed_form_v32(cache.X_train, cache.Y_train, base, signs, axis, ridge)
    return AxisScaleVector(axis, to_half_array(v))


def closed_form_scalar(X, Y, base, signs, ridge: float = 1e-8) -> float:
    """Best single scalar: alpha = sum(R.S) / sum(S.S) pooled over all units."""
    R = (Y - matmul(X, base)).astype(np.float64)
    S = matmul(X, signs).astype(np.float64)
    return float(np.sum(R * S) / (np.sum(S * S) + ridge))


# --- end-to-end loss ---------------------------------------------------------


def batch_sq_loss(logits: np.ndarray, target: np.ndarray) -> float:
    return float(np.sum((logits.astype(np.float64) - target.astype(np.float64)) ** 2))


def end_loss(
    student: ToyModel,
    teacher_logits: list[np.ndarray],
    batches: list[np.ndarray],
) -> float:
    """Mean over batches of ||student logits - cached teacher logits||^2."""
    if len(teacher_logits) != len(batches):
        raise ValueError(
            f"batch misalignment: {len(teacher_logits)} cached logits for "
            f"{len(batches)} batches"
        )
    if not batches:
        raise ValueError("no validation batches")
    total = 0.0
    for target, tokens in zip(teacher_logits, batches):
        logits, _ = forward(student, tokens)
        total += batch_sq_loss(logits, target)
    return total / len(batches)


def cache_teacher_logits(teacher: ToyModel, batches) -> list[np.ndarray]:
    return [forward(teacher, b)[0] for b in batches]


# --- compressed student state ------------------------------------------------


@dataclass
class CompressedLayer:
    name: str
    base: np.ndarray
    mask: PackedSignMask
    signs: np.ndarray  # unpacked +/-1, kept for fast rebuilds
    axis: str
    v32: np.ndarray
    scalar: bool = False


class StudentState:
    """A student model plus the registry of its compressed layers."""

    def __init__(self, base_model: ToyModel):
        self.model = base_model.clone()
        self.layers: dict[str, CompressedLayer] = {}

    def materialize(self, name: str) -> None:
        cl = self.layers[name]
        self.model.params[name] = (
            cl.base + broadcast_delta(cl.signs, cl.axis, cl.v32)
        ).astype(np.float32)

    def install(self, cl: CompressedLayer, round_half: bool = True) -> None:
        if round_half:
            cl.v32 = to_half_array(cl.v32).astype(np.float32)
        self.layers[cl.name] = cl
        self.materialize(cl.name)


# --- per-layer compression ---------------------------------------------------


def compress_layer(
    teacher: ToyModel,
    state: StudentState,
    layer: str,
    fit_cfg: FitConfig,
    calib_cfg: CalibConfig,
    source,
    teacher_val_logits: list[np.ndarray],
    val_batches: list[np.ndarray],
    select_by: str = "end",
    scalar_baseline: bool = False,
) -> LayerFitResult:
    """Compress one layer in place in the student.

    Builds the cache against the current (partially compressed) student,
    fits both axis candidates from mean-|delta| inits, installs each in turn
    to measure end loss, and keeps the winner (ties go to row).
    """
    if select_by not in ("end", "layer"):
        raise ValueError(f"select_by must be end|layer, got {select_by!r}")
    cache = build_cache(teacher, state.model, layer, calib_cfg, source)
    base = state.model.params[layer].copy()
    delta = (teacher.params[layer] - base).astype(np.float32)
    mask = sign_mask(delta)
    signs = unpack_signs(mask)

    if scalar_baseline:
        # BitDelta-style: one scalar per matrix, one training epoch.
        cfg1 = replace(fit_cfg, epochs=1)
        alpha, val, curve = fit_layer_scalar(
            cache, base, mask, cfg1, init=float(np.abs(delta).mean())
        )
        v32 = np.full(mask.d_out, alpha, dtype=np.float32)
        state.install(
            CompressedLayer(layer, base, mask, signs, "row", v32, scalar=True)
        )
        end = end_loss(state.model, teacher_val_logits, val_batches)
        cl = state.layers[layer]
        return LayerFitResult(
            layer, "row", AxisScaleVector("row", to_half_array(cl.v32)),
            curve, val, val, end, end,
        )

    outcomes: dict[str, FitOutcome] = {}
    ends: dict[str, float] = {}
    for axis in ("row", "col"):
        out = fit_layer_vector(
            cache, base, mask, axis, fit_cfg, init=init_scale32(delta, axis)
        )
        outcomes[axis] = out
        state.install(
            CompressedLayer(layer, base, mask, signs, axis, out.v32.copy())
        )
        ends[axis] = end_loss(state.model, teacher_val_logits, val_batches)

    if select_by == "end":
        chosen = "row" if ends["row"] <= ends["col"] else "col"
    else:
        chosen = "row" if outcomes["row"].val_mse <= outcomes["col"].val_mse else "col"
    state.install(
        CompressedLayer(layer, base, mask, signs, chosen, outcomes[chosen].v32.copy())
    )
    cl = state.layers[layer]
    return LayerFitResult(
        layer,
        chosen,
        AxisScaleVector(chosen, to_half_array(cl.v32)),
        outcomes[chosen].train_curve,
        outcomes["row"].val_mse,
        outcomes["col"].val_mse,
        ends["row"],
        ends["col"],
    )


# --- end-to-end refinement ---------------------------------------------------


@dataclass
class E2EReport:
    initial_train_loss: float
    final_train_loss: float
    steps: int
    reverted: bool = False


def _axis_grad_from_dw(cl: CompressedLayer, dw: np.ndarray) -> np.ndarray:
    if cl.scalar:
        return np.full(
            cl.v32.shape, np.einsum("ij,ij->", dw, cl.signs), dtype=np.float32
        )
    if cl.axis == "row":
        return np.einsum("ij,ij->i", dw, cl.signs).astype(np.float32)
    return np.einsum("ij,ij->j", dw, cl.signs).astype(np.float32)


def _mean_end_loss(model, teacher_logits, batches) -> float:
    return end_loss(model, teacher_logits, batches)


def e2e_refine(
    state: StudentState,
    teacher: ToyModel,
    cfg: E2EConfig,
    batches: list[np.ndarray],
) -> E2EReport:
    """Jointly train all installed scale vectors on the logit-matching loss.

    Masks and base weights stay frozen; only vectors move, in FP32. If the
    sweep somehow ends worse than it started, the initial vectors are
    restored, so the final train loss never exceeds the initial one.
    """
    cfg.validate()
    teacher_logits = cache_teacher_logits(teacher, batches[: cfg.calib_batches])
    batches = list(batches[: cfg.calib_batches])
    names = sorted(state.layers)
    initial = {n: state.layers[n].v32.copy() for n in names}
    initial_loss = _mean_end_loss(state.model, teacher_logits, batches)
    if cfg.epochs == 0 or not names:
        return E2EReport(initial_loss, initial_loss, 0)

    adams = {
        n: _Adam(state.layers[n].v32.shape, cfg.lr, 0.9, 0.999, 1e-8, 0.0)
        for n in names
    }
    steps = 0
    total = cfg.epochs * len(batches)
    for epoch in range(cfg.epochs):
        for target, tokens in zip(teacher_logits, batches):
            logits, tr = _trace_forward(state.model, tokens)
            loss = batch_sq_loss(logits, target)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite end-to-end loss at epoch {epoch}")
            dlogits = (2.0 * (logits - target)).astype(np.float32)
            grads = backward_from_trace(state.model, tr, dlogits)
            for n in names:
                cl = state.layers[n]
                gv = _axis_grad_from_dw(cl, grads[n])
                if cl.scalar:
                    # One shared scalar: average the replicated gradient once.
                    g0 = gv[0]
                    new = adams[n].step(cl.v32[:1], np.array([g0]), cfg.lr)
                    cl.v32 = np.full(cl.v32.shape, new[0], dtype=np.float32)
                else:
                    cl.v32 = adams[n].step(cl.v32, gv, cfg.lr)
                state.materialize(n)
            steps += 1
    final_loss = _mean_end_loss(state.model, teacher_logits, batches)
    reverted = False
    if final_loss > initial_loss:
        for n in names:
            state.layers[n].v32 = initial[n]
            state.materialize(n)
        final_loss = initial_loss
        reverted = True
    # Final install rounds vectors to FP16, the artifact precision.
    for n in names:
        state.install(state.layers[n], round_half=True)
    return E2EReport(initial_loss, final_loss, steps, reverted)


# --- full pipeline -----------------------------------------------------------


@dataclass
class PipelineConfig:
    fit: FitConfig = field(default_factory=FitConfig)
    calib: CalibConfig = field(default_factory=CalibConfig)
    e2e: E2EConfig = field(default_factory=E2EConfig)
    select_by: str = "end"
    scalar_baseline: bool = False


@dataclass
class PipelineResult:
    layer_results: list[LayerFitResult]
    state: StudentState
    initial_end_loss: float
    final_end_loss: float
    e2e: E2EReport


def run_pipeline(
    base_model: ToyModel,
    finetuned: ToyModel,
    cfg: PipelineConfig,
    source=None,
) -> PipelineResult:
    """Compress every patchable layer in order, then refine end to end.

    `source` defaults to seeded random token batches; batch indices are laid
    out as [0, T) train, [T, T+E) validation, then the end-to-end set.
    """
    if base_model.spec.vocab != finetuned.spec.vocab or any(
        base_model.params[n].shape != finetuned.params[n].shape
        for n in linear_layer_names(base_model)
    ):
        raise ValueError("base and fine-tuned checkpoints are not shape-compatible")
    if source is None:
        source = TokenSource(base_model.spec.vocab, cfg.calib)
    T, E = cfg.calib.train_batches, cfg.calib.n_val
    val_batches = [source.batch(T + i) for i in range(E)]
    teacher_val_logits = cache_teacher_logits(finetuned, val_batches)

    state = StudentState(base_model)
    initial_end = end_loss(state.model, teacher_val_logits, val_batches)
    results = []
    for layer in linear_layer_names(base_model):
        results.append(
            compress_layer(
                finetuned,
                state,
                layer,
                cfg.fit,
                cfg.calib,
                source,
                teacher_val_logits,
                val_batches,
                select_by=cfg.select_by,
                scalar_baseline=cfg.scalar_baseline,
            )
        )
    e2e_batches = [
        source.batch(T + E + i) for i in range(cfg.e2e.calib_batches)
    ]
    e2e_report = e2e_refine(state, finetuned, cfg.e2e, e2e_batches)
    final_end = end_loss(state.model, teacher_val_logits, val_batches)
    return PipelineResult(results, state, initial_end, final_end, e2e_report)


def report_lines(result: PipelineResult) -> list[str]:
    """Line-oriented layer report consumed by the CLI inspect command."""
    lines = []
    for r in result.layer_results:
        lines.append(
            f"layer={r.layer} chosen={r.axis} "
            f"val_mse_row={r.val_mse_row:.8e} val_mse_col={r.val_mse_col:.8e} "
            f"end_row={r.end_row:.8e} end_col={r.end_col:.8e}"
        )
    lines.append(
        f"summary initial_end_loss={result.initial_end_loss:.8e} "
        f"final_end_loss={result.final_end_loss:.8e} "
        f"e2e_initial={result.e2e.initial_train_loss:.8e} "
        f"e2e_final={result.e2e.final_train_loss:.8e}"
    )
    return lines
