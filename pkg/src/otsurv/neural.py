"""Trainable components: genomic SELU encoders, pathology projection,
single-layer self-attention aggregators, and the hazard head.

All forward passes are built from tape ops so one backward sweep yields
exact gradients; the plain functions below wrap a throwaway tape for
callers that only need values.  Raw pathology features are constants
(frozen backbone); only the projection on top of them is trainable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape, Var
from .bags import (GenomicProfile, InstanceBag, load_tensor64, save_tensor64)
from .errors import DataError, FormatError, ParameterError, ShapeError

# Standard self-normalizing-network constants.
SELU_ALPHA = 1.6732632423543772
SELU_LAMBDA = 1.0507009873554805


@dataclass
class EncoderParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class AttentionParams:
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray


@dataclass
class ModelParams:
    """All trainable tensors, with deterministic naming for optimizer state."""

    proj_w: np.ndarray
    proj_b: np.ndarray
    encoders: list[EncoderParams]
    attn_p: AttentionParams
    attn_g: AttentionParams
    hazard_w: np.ndarray
    hazard_b: np.ndarray
    n_heads: int = 4
    seed: int = field(default=0)

    def tensors(self):
        """Yield (name, array) in a fixed order."""
        yield "proj.w", self.proj_w
        yield "proj.b", self.proj_b
        for j, enc in enumerate(self.encoders):
            yield f"enc.{j}.w1", enc.w1
            yield f"enc.{j}.b1", enc.b1
            yield f"enc.{j}.w2", enc.w2
            yield f"enc.{j}.b2", enc.b2
        for side, attn in (("attn_p", self.attn_p), ("attn_g", self.attn_g)):
            for key in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"):
                yield f"{side}.{key}", getattr(attn, key)
        yield "hazard.w", self.hazard_w
        yield "hazard.b", self.hazard_b

    def param_count(self) -> int:
        return sum(int(t.size) for _, t in self.tensors())

    @property
    def dim(self) -> int:
        return self.proj_w.shape[1]

    @property
    def n_bins(self) -> int:
        return self.hazard_w.shape[1]


def init_params(d_in: int, d: int, attr_dims: list[int], n_bins: int,
                n_heads: int = 4, seed: int = 0) -> ModelParams:
    """Seeded init: weights ~ N(0, 1/sqrt(fan_in)), biases zero."""
    if d % n_heads != 0:
        raise ParameterError(f"model dim {d} must be divisible by n_heads {n_heads}")
    rng = np.random.default_rng(seed)

    def linear(fan_in, fan_out):
        return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))

    def attention():
        return AttentionParams(
            wq=linear(d, d), bq=np.zeros(d), wk=linear(d, d), bk=np.zeros(d),
            wv=linear(d, d), bv=np.zeros(d), wo=linear(d, d), bo=np.zeros(d),
        )

    encoders = [EncoderParams(w1=linear(dj, d), b1=np.zeros(d),
                              w2=linear(d, d), b2=np.zeros(d))
                for dj in attr_dims]
    return ModelParams(
        proj_w=linear(d_in, d), proj_b=np.zeros(d),
        encoders=encoders,
        attn_p=attention(), attn_g=attention(),
        hazard_w=linear(2 * d, n_bins), hazard_b=np.zeros(n_bins),
        n_heads=n_heads, seed=seed,
    )


def wrap_params(tape: Tape, params: ModelParams) -> dict[str, Var]:
    """Wrap every tensor as a tape leaf; biases become (1, k) rows."""
    return {name: tape.leaf(np.atleast_2d(t)) for name, t in params.tensors()}


# ---------------------------------------------------------------------------
# Tape-level forward blocks


def project_t(tape: Tape, pv: dict[str, Var], raw: Var) -> Var:
    """Trainable linear map on top of frozen instance features."""
    return tape.add(tape.matmul(raw, pv["proj.w"]), pv["proj.b"])


def encode_genomic_t(tape: Tape, pv: dict[str, Var], profile: GenomicProfile) -> Var:
    """Per-category two-layer net (SELU after the first layer), stacked M_g x d."""
    rows = []
    for j, (_, attrs) in enumerate(profile.categories):
        x = tape.const(attrs[None, :])
        h = tape.selu(tape.add(tape.matmul(x, pv[f"enc.{j}.w1"]), pv[f"enc.{j}.b1"]),
                      SELU_ALPHA, SELU_LAMBDA)
        rows.append(tape.add(tape.matmul(h, pv[f"enc.{j}.w2"]), pv[f"enc.{j}.b2"]))
    return tape.concat_rows(rows)


def attention_pool_t(tape: Tape, pv: dict[str, Var], side: str, tokens: Var,
                     n_heads: int) -> Var:
    """Multi-head self-attention with a residual, then mean pooling."""
    d = tokens.value.shape[1]
    dh = d // n_heads
    q = tape.add(tape.matmul(tokens, pv[f"{side}.wq"]), pv[f"{side}.bq"])
    k = tape.add(tape.matmul(tokens, pv[f"{side}.wk"]), pv[f"{side}.bk"])
    v = tape.add(tape.matmul(tokens, pv[f"{side}.wv"]), pv[f"{side}.bv"])
    heads = []
    for h in range(n_heads):
        qh = tape.col_slice(q, h * dh, (h + 1) * dh)
        kh = tape.col_slice(k, h * dh, (h + 1) * dh)
        vh = tape.col_slice(v, h * dh, (h + 1) * dh)
        logits = tape.scale(tape.matmul(qh, tape.transpose(kh)), 1.0 / math.sqrt(dh))
        heads.append(tape.matmul(tape.softmax_rows(logits), vh))
    mixed = tape.add(tape.matmul(tape.concat_cols(heads), pv[f"{side}.wo"]),
                     pv[f"{side}.bo"])
    return tape.mean_rows(tape.add(tokens, mixed))


def dense_coattention_t(tape: Tape, queries: Var, keys: Var, values: Var,
                        scale: float) -> Var:
    """Differentiable softmax co-attention (the dense comparison arm)."""
    if scale <= 0:
        raise ParameterError(f"scale must be > 0, got {scale}")
    logits = tape.scale(tape.matmul(queries, tape.transpose(keys)), 1.0 / scale)
    return tape.matmul(tape.softmax_rows(logits), values)


def hazard_t(tape: Tape, pv: dict[str, Var], pooled_p: Var, pooled_g: Var) -> Var:
    """sigmoid(linear(concat)) over the discrete time bins; shape (1, T)."""
    joint = tape.concat_cols([pooled_p, pooled_g])
    return tape.sigmoid(tape.add(tape.matmul(joint, pv["hazard.w"]), pv["hazard.b"]))


# ---------------------------------------------------------------------------
# Plain-value wrappers


def encode_genomic(profile: GenomicProfile, params: ModelParams) -> InstanceBag:
    dims = profile.attr_dims()
    expected = [enc.w1.shape[0] for enc in params.encoders]
    if dims != expected:
        raise ShapeError(f"profile attr dims {dims} do not match encoders {expected}")
    tape = Tape()
    out = encode_genomic_t(tape, wrap_params(tape, params), profile)
    return InstanceBag(out.value, "genomic", profile.case_id)


def aggregate(bag: InstanceBag, params: ModelParams, side: str = "attn_p") -> np.ndarray:
    if bag.n_instances < 1:
        raise DataError("cannot aggregate an empty bag")
    if bag.dim != params.dim:
        raise ShapeError(f"bag dim {bag.dim} != model dim {params.dim}")
    tape = Tape()
    pooled = attention_pool_t(tape, wrap_params(tape, params), side,
                              tape.const(bag.features), params.n_heads)
    return pooled.value[0]


def hazard_forward(H_p: np.ndarray, H_g: np.ndarray, params: ModelParams) -> np.ndarray:
    tape = Tape()
    pv = wrap_params(tape, params)
    out = hazard_t(tape, pv, tape.const(np.atleast_2d(H_p)),
                   tape.const(np.atleast_2d(H_g)))
    return out.value[0]


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "AdamState":
        return cls(m={n: np.zeros_like(t) for n, t in params.tensors()},
                   v={n: np.zeros_like(t) for n, t in params.tensors()})


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 2e-4, betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8, weight_decay: float = 1e-5) -> None:
    """One Adam update in place; missing grads are treated as zero updates.

    Weight decay is the classic L2-in-gradient form.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name, tensor in params.tensors():
        if name not in grads:
            continue
        g = grads[name].reshape(tensor.shape)
        if weight_decay:
            g = g + weight_decay * tensor
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / (1 - b1**t)
        v_hat = state.v[name] / (1 - b2**t)
        tensor -= lr * m_hat / (np.sqrt(v_hat) + eps)


def extract_grads(pv: dict[str, Var]) -> dict[str, np.ndarray]:
    """Gradients accumulated on wrapped parameter leaves (zeros if untouched)."""
    return {name: (var.grad if var.grad is not None else np.zeros(var.value.shape))
            for name, var in pv.items()}


def accumulate(total: dict[str, np.ndarray], part: dict[str, np.ndarray]) -> None:
    for name, g in part.items():
        if name in total:
            total[name] = total[name] + g
        else:
            total[name] = g.copy()


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(params: ModelParams, out_dir, step: int = 0) -> Path:
    """JSON manifest plus one 64-bit tensor blob per parameter; bit-exact."""
    out = Path(out_dir)
    (out / "tensors").mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, tensor in params.tensors():
        fname = name.replace(".", "_") + ".bin"
        save_tensor64(tensor, out / "tensors" / fname)
        entries[name] = {"file": fname, "shape": list(tensor.shape)}
    doc = {
        "seed": params.seed,
        "step": step,
        "n_heads": params.n_heads,
        "n_encoders": len(params.encoders),
        "tensors": entries,
    }
    path = out / "checkpoint.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def load_checkpoint(ckpt_dir) -> tuple[ModelParams, int]:
    out = Path(ckpt_dir)
    path = out / "checkpoint.json"
    if not path.exists():
        raise FormatError(f"no checkpoint manifest at {path}")
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)

    def tensor(name):
        entry = doc["tensors"][name]
        arr = load_tensor64(out / "tensors" / entry["file"])
        return arr.reshape(entry["shape"])

    encoders = [EncoderParams(tensor(f"enc.{j}.w1"), tensor(f"enc.{j}.b1"),
                              tensor(f"enc.{j}.w2"), tensor(f"enc.{j}.b2"))
                for j in range(doc["n_encoders"])]
    attn = {side: AttentionParams(*[tensor(f"{side}.{k}")
                                    for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")])
            for side in ("attn_p", "attn_g")}
    params = ModelParams(
        proj_w=tensor("proj.w"), proj_b=tensor("proj.b"),
        encoders=encoders, attn_p=attn["attn_p"], attn_g=attn["attn_g"],
        hazard_w=tensor("hazard.w"), hazard_b=tensor("hazard.b"),
        n_heads=int(doc["n_heads"]), seed=int(doc["seed"]),
    )
    return params, int(doc["step"])
