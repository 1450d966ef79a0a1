"""A deterministic desk-scale transformer with the seven patchable linear
projections per block (q/k/v/o and gate/up/down), tap points that capture
projection inputs/outputs, a synthetic fine-tune generator producing
controlled row/col-anisotropic deltas, and an analytic backward pass that
yields per-projection weight gradients.

Base weights (and synthetic delta scales) are snapped to a dyadic grid of
2^-12 so that finetuned = base + delta holds exactly in FP32: the delta
extracted downstream as W_f - W_b recovers the generator's delta bit for
bit, which keeps the lossless-patch invariant machine exact.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .tensor import DimensionError, Rng, matmul

GRID = np.float32(4096.0)  # 2^12; weight values are multiples of 1/GRID
RMS_EPS = np.float32(1e-5)

PROJ_SUBTYPES = (
    "attn.q_proj",
    "attn.k_proj",
    "attn.v_proj",
    "attn.o_proj",
    "mlp.gate_proj",
    "mlp.up_proj",
    "mlp.down_proj",
)


class ConfigurationError(ValueError):
    """Invalid model specification."""


class LookupError_(KeyError):
    """Unknown layer or tap name."""


@dataclass(frozen=True)
class ModelSpec:
    vocab: int = 256
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    n_layers: int = 2
    seed: int = 0

    def validate(self) -> None:
        for name in ("vocab", "d_model", "n_heads", "d_ff", "n_layers"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ConfigurationError(
                f"d_model ({self.d_model}) not divisible by n_heads ({self.n_heads})"
            )


@dataclass(frozen=True)
class TapPoint:
    layer: str
    mode: str  # "input" | "output"

    def __post_init__(self):
        if self.mode not in ("input", "output"):
            raise ValueError(f"tap mode must be input|output, got {self.mode!r}")


@dataclass
class ToyModel:
    spec: ModelSpec
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def clone(self) -> "ToyModel":
        return ToyModel(self.spec, {k: v.copy() for k, v in self.params.items()})


def linear_layer_names(model: ToyModel | ModelSpec) -> list[str]:
    """Canonical patchable projection names, layer-major, q/k/v/o/gate/up/down."""
    spec = model.spec if isinstance(model, ToyModel) else model
    return [
        f"blocks.{i}.{sub}" for i in range(spec.n_layers) for sub in PROJ_SUBTYPES
    ]


def _snap(w: np.ndarray) -> np.ndarray:
    return (np.round(w.astype(np.float32) * GRID) / GRID).astype(np.float32)


def init_base(spec: ModelSpec) -> ToyModel:
    """Seeded base model; weights ~ N(0, 1/d_model), snapped to the dyadic grid."""
    spec.validate()
    rng = Rng(spec.seed)
    scale = 1.0 / np.sqrt(spec.d_model)
    p: dict[str, np.ndarray] = {}
    p["embedding"] = _snap(rng.normal((spec.vocab, spec.d_model)) * scale)
    for i in range(spec.n_layers):
        for sub in ("attn.q_proj", "attn.k_proj", "attn.v_proj", "attn.o_proj"):
            p[f"blocks.{i}.{sub}"] = _snap(
                rng.normal((spec.d_model, spec.d_model)) * scale
            )
        p[f"blocks.{i}.mlp.gate_proj"] = _snap(
            rng.normal((spec.d_ff, spec.d_model)) * scale
        )
        p[f"blocks.{i}.mlp.up_proj"] = _snap(
            rng.normal((spec.d_ff, spec.d_model)) * scale
        )
        p[f"blocks.{i}.mlp.down_proj"] = _snap(
            rng.normal((spec.d_model, spec.d_ff)) * scale
        )
        p[f"blocks.{i}.attn_norm"] = np.ones(spec.d_model, dtype=np.float32)
        p[f"blocks.{i}.mlp_norm"] = np.ones(spec.d_model, dtype=np.float32)
    p["head"] = _snap(rng.normal((spec.vocab, spec.d_model)) * scale)
    return ToyModel(spec, p)


@dataclass(frozen=True)
class DeltaProfile:
    axis: str = "row"  # row | col | isotropic
    magnitude: float = 0.02
    seed: int = 1

    def __post_init__(self):
        if self.axis not in ("row", "col", "isotropic"):
            raise ValueError(f"unknown delta axis {self.axis!r}")
        if not self.magnitude > 0:
            raise ValueError("magnitude must be > 0")


@dataclass
class SynthFinetune:
    model: ToyModel
    # Per projection: (axis, true scale vector or scalar) as drawn by the generator.
    true_scales: dict[str, tuple[str, np.ndarray]]


def synth_finetune(base: ToyModel, profile: DeltaProfile) -> SynthFinetune:
    """Perturb every projection by s (x) sign-pattern with controlled anisotropy.

    Scales are log-uniform in [0.1*magnitude, magnitude], snapped to the
    dyadic grid (min one grid step) so deltas are exactly recoverable.
    Only the seven projection sub-types are touched.
    """
    rng = Rng(profile.seed)
    lo = 0.1 * profile.magnitude
    model = base.clone()
    true_scales: dict[str, tuple[str, np.ndarray]] = {}
    step = np.float32(1.0 / GRID)
    for name in linear_layer_names(base):
        w = model.params[name]
        d_out, d_in = w.shape
        if profile.axis == "row":
            s = lo * (10.0 ** rng.uniform((d_out,)))
        elif profile.axis == "col":
            s = lo * (10.0 ** rng.uniform((d_in,)))
        else:
            s = lo * (10.0 ** rng.uniform((1,)))
        s = np.maximum(_snap(s.astype(np.float32)), step)
        signs = np.where(rng.uniform((d_out, d_in)) < 0.5, -1.0, 1.0).astype(np.float32)
        if profile.axis == "row":
            delta = s[:, None] * signs
        elif profile.axis == "col":
            delta = s[None, :] * signs
        else:
            delta = s[0] * signs
        model.params[name] = (w + delta).astype(np.float32)
        true_scales[name] = (profile.axis, s)
    return SynthFinetune(model, true_scales)


def _rmsnorm(x: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # x: (n, d). Returns (normed, inverse rms per row).
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=1, keepdims=True) + RMS_EPS)
    inv = inv.astype(np.float32)
    return (x * inv) * g[None, :], inv


def _silu(x: np.ndarray) -> np.ndarray:
    return (x / (1.0 + np.exp(-x))).astype(np.float32)


def _softmax_causal(scores: np.ndarray) -> np.ndarray:
    # scores: (B, H, S, S); causal mask then row softmax.
    s = scores.shape[-1]
    mask = np.triu(np.ones((s, s), dtype=bool), k=1)
    scores = np.where(mask, -np.inf, scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores, dtype=np.float32)
    return e / e.sum(axis=-1, keepdims=True)


def _validate_tokens(spec: ModelSpec, tokens: np.ndarray) -> np.ndarray:
    t = np.asarray(tokens, dtype=np.int64)
    if t.ndim != 2:
        raise ValueError(f"tokens must be 2-D (batch, seq), got shape {t.shape}")
    if t.min(initial=0) < 0 or (t.size and t.max() >= spec.vocab):
        raise ValueError("token id out of range")
    return t


def _trace_forward(model: ToyModel, tokens: np.ndarray) -> tuple[np.ndarray, dict]:
    """Forward pass keeping every intermediate needed for backprop.

    All projection applications go through the fixed-order matmul; attention
    score/context products use einsum (deterministic sequential reductions).
    """
    spec = model.spec
    t = _validate_tokens(spec, tokens)
    B, S = t.shape
    H = spec.n_heads
    dh = spec.d_model // H
    p = model.params

    tr: dict = {"tokens": t, "B": B, "S": S, "blocks": []}
    h = p["embedding"][t.reshape(-1)].reshape(B * S, spec.d_model).copy()
    for i in range(spec.n_layers):
        blk: dict = {"h_in": h}
        a, inv_a = _rmsnorm(h, p[f"blocks.{i}.attn_norm"])
        blk["a"], blk["inv_a"] = a, inv_a
        q = matmul(a, p[f"blocks.{i}.attn.q_proj"])
        k = matmul(a, p[f"blocks.{i}.attn.k_proj"])
        v = matmul(a, p[f"blocks.{i}.attn.v_proj"])
        blk["q"], blk["k"], blk["v"] = q, k, v
        qh = q.reshape(B, S, H, dh).transpose(0, 2, 1, 3)
        kh = k.reshape(B, S, H, dh).transpose(0, 2, 1, 3)
        vh = v.reshape(B, S, H, dh).transpose(0, 2, 1, 3)
        scores = np.einsum("bhqd,bhkd->bhqk", qh, kh).astype(np.float32) / np.float32(
            np.sqrt(dh)
        )
        A = _softmax_causal(scores)
        ctx = np.einsum("bhqk,bhkd->bhqd", A, vh).astype(np.float32)
        blk["A"], blk["qh"], blk["kh"], blk["vh"] = A, qh, kh, vh
        ctx2 = ctx.transpose(0, 2, 1, 3).reshape(B * S, spec.d_model)
        blk["ctx"] = ctx2
        o = matmul(ctx2, p[f"blocks.{i}.attn.o_proj"])
        h = h + o
        blk["h_mid"] = h
        m, inv_m = _rmsnorm(h, p[f"blocks.{i}.mlp_norm"])
        blk["m"], blk["inv_m"] = m, inv_m
        g = matmul(m, p[f"blocks.{i}.mlp.gate_proj"])
        u = matmul(m, p[f"blocks.{i}.mlp.up_proj"])
        sg = _silu(g)
        f = sg * u
        blk["g"], blk["u"], blk["sg"], blk["f"] = g, u, sg, f
        dwn = matmul(f, p[f"blocks.{i}.mlp.down_proj"])
        h = h + dwn
        tr["blocks"].append(blk)
    logits = matmul(h, p["head"])
    tr["h_final"] = h
    return logits, tr


def forward(
    model: ToyModel, tokens, taps: tuple[TapPoint, ...] | list[TapPoint] = ()
) -> tuple[np.ndarray, dict[TapPoint, np.ndarray]]:
    """Run the model on a token batch; return flattened logits and tap captures.

    Logits have shape (batch*seq, vocab). Captures are value snapshots of the
    flattened activation entering (mode=input) or leaving (mode=output) the
    named projection.
    """
    names = set(linear_layer_names(model))
    for tp in taps:
        if tp.layer not in names:
            raise LookupError_(f"unknown tap layer {tp.layer!r}")
    logits, tr = _trace_forward(model, tokens)
    captures: dict[TapPoint, np.ndarray] = {}
    for tp in taps:
        i = int(tp.layer.split(".")[1])
        blk = tr["blocks"][i]
        sub = tp.layer.split(".", 2)[2]
        inputs = {
            "attn.q_proj": blk["a"],
            "attn.k_proj": blk["a"],
            "attn.v_proj": blk["a"],
            "attn.o_proj": blk["ctx"],
            "mlp.gate_proj": blk["m"],
            "mlp.up_proj": blk["m"],
            "mlp.down_proj": blk["f"],
        }
        if tp.mode == "input":
            captures[tp] = inputs[sub].copy()
        else:
            w = model.params[tp.layer]
            captures[tp] = matmul(inputs[sub], w)
    return logits, captures


def projection_grads(
    model: ToyModel, tokens, dlogits: np.ndarray
) -> dict[str, np.ndarray]:
    """Backprop dlogits (n, vocab) to dL/dW for every patchable projection."""
    _, tr = _trace_forward(model, tokens)
    return backward_from_trace(model, tr, dlogits)


def backward_from_trace(
    model: ToyModel, tr: dict, dlogits: np.ndarray
) -> dict[str, np.ndarray]:
    """Backward pass over a stored forward trace.

    Norm scales, embeddings and the head are treated as frozen; only their
    activation gradients are propagated.
    """
    spec = model.spec
    p = model.params
    B, S = tr["B"], tr["S"]
    H = spec.n_heads
    dh = spec.d_model // H
    inv_sqrt_dh = np.float32(1.0 / np.sqrt(dh))

    def mm(a, b):  # plain a @ b in float32 (gradient chain products)
        return (a @ b).astype(np.float32)

    grads: dict[str, np.ndarray] = {}
    dh_ = mm(dlogits.astype(np.float32), p["head"])  # d/d h_final
    for i in reversed(range(spec.n_layers)):
        blk = tr["blocks"][i]
        # MLP branch
        ddwn = dh_
        grads[f"blocks.{i}.mlp.down_proj"] = mm(ddwn.T, blk["f"])
        df = mm(ddwn, p[f"blocks.{i}.mlp.down_proj"])
        du = df * blk["sg"]
        sig = (1.0 / (1.0 + np.exp(-blk["g"]))).astype(np.float32)
        dg = df * blk["u"] * (sig * (1.0 + blk["g"] * (1.0 - sig)))
        grads[f"blocks.{i}.mlp.gate_proj"] = mm(dg.T, blk["m"])
        grads[f"blocks.{i}.mlp.up_proj"] = mm(du.T, blk["m"])
        dm = mm(dg, p[f"blocks.{i}.mlp.gate_proj"]) + mm(
            du, p[f"blocks.{i}.mlp.up_proj"]
        )
        # RMSNorm backward: m = (x*inv) * g_scale
        gsc = p[f"blocks.{i}.mlp_norm"]
        x = blk["h_mid"]
        inv = blk["inv_m"]
        dy = dm * gsc[None, :]
        dx = dy * inv - x * (
            np.sum(dy * x, axis=1, keepdims=True) * inv**3 / np.float32(x.shape[1])
        )
        dh_ = dh_ + dx.astype(np.float32)
        # Attention branch
        do = dh_
        grads[f"blocks.{i}.attn.o_proj"] = mm(do.T, blk["ctx"])
        dctx = mm(do, p[f"blocks.{i}.attn.o_proj"])
        dctx_h = dctx.reshape(B, S, H, dh).transpose(0, 2, 1, 3)
        A, vh, qh, kh = blk["A"], blk["vh"], blk["qh"], blk["kh"]
        dA = np.einsum("bhqd,bhkd->bhqk", dctx_h, vh).astype(np.float32)
        dvh = np.einsum("bhqk,bhqd->bhkd", A, dctx_h).astype(np.float32)
        dS = A * (dA - np.sum(dA * A, axis=-1, keepdims=True))
        dqh = np.einsum("bhqk,bhkd->bhqd", dS, kh).astype(np.float32) * inv_sqrt_dh
        dkh = np.einsum("bhqk,bhqd->bhkd", dS, qh).astype(np.float32) * inv_sqrt_dh
        dq = dqh.transpose(0, 2, 1, 3).reshape(B * S, spec.d_model)
        dk = dkh.transpose(0, 2, 1, 3).reshape(B * S, spec.d_model)
        dv = dvh.transpose(0, 2, 1, 3).reshape(B * S, spec.d_model)
        a = blk["a"]
        grads[f"blocks.{i}.attn.q_proj"] = mm(dq.T, a)
        grads[f"blocks.{i}.attn.k_proj"] = mm(dk.T, a)
        grads[f"blocks.{i}.attn.v_proj"] = mm(dv.T, a)
        da = (
            mm(dq, p[f"blocks.{i}.attn.q_proj"])
            + mm(dk, p[f"blocks.{i}.attn.k_proj"])
            + mm(dv, p[f"blocks.{i}.attn.v_proj"])
        )
        gsc = p[f"blocks.{i}.attn_norm"]
        x = blk["h_in"]
        inv = blk["inv_a"]
        dy = da * gsc[None, :]
        dx = dy * inv - x * (
            np.sum(dy * x, axis=1, keepdims=True) * inv**3 / np.float32(x.shape[1])
        )
        dh_ = dh_ + dx.astype(np.float32)
    return grads


# --- container bridging -----------------------------------------------------

SPEC_ENTRY = "__spec__"


def model_to_entries(model: ToyModel) -> dict[str, np.ndarray]:
    """Flatten a model into container entries (1-D params stored as 1 x n)."""
    s = model.spec
    entries = {
        SPEC_ENTRY: np.array(
            [[s.vocab, s.d_model, s.n_heads, s.d_ff, s.n_layers, s.seed]],
            dtype=np.float32,
        )
    }
    for name, w in model.params.items():
        entries[name] = w if w.ndim == 2 else w[None, :]
    return entries


def entries_to_model(entries: dict[str, np.ndarray]) -> ToyModel:
    if SPEC_ENTRY not in entries:
        raise ValueError(f"container missing {SPEC_ENTRY} entry")
    v = entries[SPEC_ENTRY].reshape(-1)
    spec = ModelSpec(*(int(x) for x in v[:6]))
    spec.validate()
    params: dict[str, np.ndarray] = {}
    for name, w in entries.items():
        if name == SPEC_ENTRY:
            continue
        if name.endswith("_norm"):
            params[name] = np.ascontiguousarray(w.reshape(-1), dtype=np.float32)
        else:
            params[name] = np.ascontiguousarray(w, dtype=np.float32)
    model = ToyModel(spec, params)
    missing = [n for n in linear_layer_names(model) if n not in params]
    if missing:
        raise ValueError(f"container missing projections: {missing[:3]}...")
    return model


def save_model(path, model: ToyModel) -> int:
    from .tensor import write_container

    return write_container(path, model_to_entries(model))


def load_model(path) -> ToyModel:
    from .tensor import read_container

    return entries_to_model(read_container(path))


def param_fingerprint(model: ToyModel) -> str:
    """Order-independent hash of all parameter payloads (mutation checks)."""
    import hashlib

    h = hashlib.sha256()
    for name in sorted(model.params):
        h.update(name.encode())
        h.update(model.params[name].astype("<f4").tobytes())
    return h.hexdigest()
