"""Dense tensor primitives shared by every learnable module.

Tensors are ``torch.Tensor`` objects (float64 unless a model is explicitly
switched to float32).  This module adds the pieces the rest of the package
relies on and that torch does not give us directly:

* a linear layer whose output rows do not depend on how many rows are
  processed together (required for chunk-size independent rendering),
* a stable masked softmax and multi-head attention that return their weights,
* a key-sequential attention path whose result is bit-identical when masked
  keys are appended,
* reverse-mode ``backward`` with a usage check, a central-difference gradient
  checker, a FLOP counter and a binary parameter checkpoint format.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

DEFAULT_DTYPE = torch.float64

# MKL picks a different GEMM kernel for very short inputs, which changes the
# rounding of individual rows.  Padding to this many rows keeps every row
# bit-identical regardless of batch size.
_MIN_GEMM_ROWS = 16

CHECKPOINT_MAGIC = b"GNRTCKPT"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Rejected input: tensor shapes do not satisfy an operation's contract."""


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class GraphError(RuntimeError):
    """``backward`` was called on a tensor that is not part of a recorded graph."""


class NonDeterminismError(RuntimeError):
    """A function expected to be deterministic returned different results."""


def make_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen


def check_finite(t: torch.Tensor, where: str) -> torch.Tensor:
    if t.device.type == "meta":
        return t
    # a NaN or inf anywhere propagates into the sum, which is far cheaper than an elementwise test
    if not bool(torch.isfinite(t.detach().sum())):
        raise NonFiniteError(f"non-finite values produced by {where}")
    return t


# ---------------------------------------------------------------------------
# Layers


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Affine map on the last axis with batch-size independent rounding."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear expects last axis {weight.shape[1]}, got shape {tuple(x.shape)}")
    lead = x.shape[:-1]
    flat = x.reshape(-1, x.shape[-1])
    rows = flat.shape[0]
    if rows < _MIN_GEMM_ROWS and x.device.type != "meta":
        flat = torch.cat([flat, flat.new_zeros(_MIN_GEMM_ROWS - rows, flat.shape[1])])
        out = F.linear(flat, weight, bias)[:rows]
    else:
        out = F.linear(flat, weight, bias)
    return out.reshape(*lead, weight.shape[0])


class Linear(nn.Module):
    """Linear layer with Glorot-uniform weights and zero bias."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        bound = math.sqrt(6.0 / (in_features + out_features))
        w = torch.empty(out_features, in_features, dtype=DEFAULT_DTYPE)
        w.uniform_(-bound, bound, generator=generator)
        self.weight = nn.Parameter(w)
        self.bias = nn.Parameter(torch.zeros(out_features, dtype=DEFAULT_DTYPE)) if bias else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return linear(x, self.weight, self.bias)

    def zero_(self) -> "Linear":
        with torch.no_grad():
            self.weight.zero_()
            if self.bias is not None:
                self.bias.zero_()
        return self

    def identity_(self) -> "Linear":
        if self.in_features != self.out_features:
            raise ShapeError("identity init needs a square layer")
        with torch.no_grad():
            self.weight.copy_(torch.eye(self.in_features, dtype=self.weight.dtype))
            if self.bias is not None:
                self.bias.zero_()
        return self


class LayerNorm(nn.LayerNorm):
    """Normalize the last axis to zero mean and unit variance, then scale and shift."""

    def __init__(self, width: int, eps: float = 1e-5):
        super().__init__(width, eps=eps, dtype=DEFAULT_DTYPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.normalized_shape[0]:
            raise ShapeError(f"layernorm expects last axis {self.normalized_shape[0]}, got {tuple(x.shape)}")
        return super().forward(x)


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


class MLP(nn.Module):
    """Stack of linear layers with ReLU between them (none after the last)."""

    def __init__(self, widths: Sequence[int], generator: torch.Generator | None = None):
        super().__init__()
        if len(widths) < 2:
            raise ShapeError("an MLP needs at least input and output widths")
        self.layers = nn.ModuleList(
            Linear(a, b, generator=generator) for a, b in zip(widths[:-1], widths[1:])
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = relu(x)
        return x


class FeedForward(MLP):
    def __init__(self, width: int, hidden: int, generator: torch.Generator | None = None):
        super().__init__([width, hidden, width], generator=generator)

    def zero_output_(self) -> None:
        self.layers[-1].zero_()


def concat(tensors: Sequence[torch.Tensor], dim: int = -1) -> torch.Tensor:
    ref = tensors[0]
    nd = ref.dim()
    axis = dim % nd
    for t in tensors[1:]:
        if t.dim() != nd or any(t.shape[i] != ref.shape[i] for i in range(nd) if i != axis):
            raise ShapeError(f"cannot concatenate shapes {tuple(ref.shape)} and {tuple(t.shape)} on axis {dim}")
    return torch.cat(list(tensors), dim=dim)


def reshape(x: torch.Tensor, shape: Sequence[int]) -> torch.Tensor:
    shape = tuple(shape)
    if -1 not in shape and math.prod(shape) != x.numel():
        raise ShapeError(f"cannot reshape {tuple(x.shape)} to {shape}")
    return x.reshape(shape)


def permute(x: torch.Tensor, order: Sequence[int]) -> torch.Tensor:
    if sorted(order) != list(range(x.dim())):
        raise ShapeError(f"{order} is not a permutation of {x.dim()} axes")
    return x.permute(*order)


def inverse_permutation(order: Sequence[int]) -> list[int]:
    inv = [0] * len(order)
    for i, o in enumerate(order):
        inv[o] = i
    return inv


# ---------------------------------------------------------------------------
# Attention


def softmax(logits: torch.Tensor, dim: int = -1, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Max-shifted softmax.  Masked entries (mask False) get exactly zero weight;
    a row with every entry masked returns all zeros instead of NaN."""
    if mask is None:
        return torch.softmax(logits, dim=dim)
    mask = mask.expand_as(logits)
    live = mask.any(dim=dim, keepdim=True)
    # dead rows get finite logits so neither pass produces NaN, then are zeroed
    logits = logits.masked_fill(~mask & live, float("-inf")).masked_fill(~live, 0.0)
    return torch.softmax(logits, dim=dim) * live


def scaled_dot_product(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                       mask: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """softmax(q kᵀ / sqrt(d)) v over the last two axes; returns (output, weights)."""
    scores = torch.matmul(q * (1.0 / math.sqrt(q.shape[-1])), k.transpose(-1, -2))
    w = softmax(scores, dim=-1, mask=mask)
    return torch.matmul(w, v), w


def _sequential_keys(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                     mask: torch.Tensor | None) -> tuple[torch.Tensor, torch.Tensor]:
    """Sequential-key attention in projection layout: ``q`` (..., Lq, H, d),
    ``k``/``v`` (..., Lk, H, d), ``mask`` broadcastable to (..., Lq, Lk, H).
    Returns the output (..., Lq, H, d) and weights (..., Lq, Lk, H)."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = (q.unsqueeze(-3) * k.unsqueeze(-4)).sum(-1) * scale
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    peak = scores.amax(dim=-2, keepdim=True).detach()
    peak = torch.where(torch.isfinite(peak), peak, torch.zeros_like(peak))
    exps = torch.exp(scores - peak).unbind(-2)
    total = exps[0]
    for e in exps[1:]:
        total = total + e
    total = torch.where(total > 0, total, torch.ones_like(total))
    weights = [e / total for e in exps]
    values = v.unbind(-3)
    out = weights[0].unsqueeze(-1) * values[0].unsqueeze(-3)
    for w, val in zip(weights[1:], values[1:]):
        out = out + w.unsqueeze(-1) * val.unsqueeze(-3)
    return out, torch.stack(weights, dim=-2)


def sequential_key_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                             mask: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Same contract as :func:`scaled_dot_product` but reduces over keys one at
    a time.  Because masked keys contribute exact zeros to every running sum,
    appending masked (finite) keys leaves the output bit-identical.  Meant for
    the short view axis."""
    if mask is not None:
        mask = mask.movedim(-3, -1)
    out, w = _sequential_keys(q.transpose(-2, -3), k.transpose(-2, -3), v.transpose(-2, -3), mask)
    return out.transpose(-2, -3), w.movedim(-1, -3)


class MultiHeadAttention(nn.Module):
    """Multi-head attention with separate Q/K/V projections and an output projection.

    ``forward`` accepts any number of leading batch axes.  ``mask`` is boolean,
    True where attention is allowed, broadcastable to ``(*batch, Lq, Lk)``.
    Returns the projected output and the weights ``(*batch, heads, Lq, Lk)``.
    With ``need_weights=False`` the fused kernel computes the output and no
    weights are returned; an integer ``n`` also returns the weights of the
    first ``n`` query rows.
    """

    def __init__(self, width: int, heads: int, kv_width: int | None = None,
                 sequential_keys: bool = False, generator: torch.Generator | None = None):
        super().__init__()
        if width % heads:
            raise ShapeError(f"width {width} not divisible by {heads} heads")
        kv_width = width if kv_width is None else kv_width
        self.width = width
        self.heads = heads
        self.sequential_keys = sequential_keys
        self.q_proj = Linear(width, width, generator=generator)
        self.k_proj = Linear(kv_width, width, generator=generator)
        self.v_proj = Linear(kv_width, width, generator=generator)
        self.out_proj = Linear(width, width, generator=generator)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        *lead, length, _ = x.shape
        return x.reshape(*lead, length, self.heads, self.width // self.heads).transpose(-2, -3)

    def forward(self, query: torch.Tensor, key: torch.Tensor | None = None,
                value: torch.Tensor | None = None, mask: torch.Tensor | None = None,
                need_weights: bool | int = True) -> tuple[torch.Tensor, torch.Tensor | None]:
        key = query if key is None else key
        value = key if value is None else value
        if query.shape[-1] != self.width or key.shape[-1] != self.k_proj.in_features:
            raise ShapeError(f"attention width mismatch: query {tuple(query.shape)}, key {tuple(key.shape)}")
        if key.shape[:-1] != value.shape[:-1]:
            raise ShapeError(f"key {tuple(key.shape)} and value {tuple(value.shape)} disagree")
        if query.shape[:-2] != key.shape[:-2]:
            raise ShapeError(f"batch axes differ: {tuple(query.shape)} vs {tuple(key.shape)}")
        if self.sequential_keys:
            # stay in projection layout: no head transposes on the long view axis
            split = (self.heads, self.width // self.heads)
            q = self.q_proj(query).unflatten(-1, split)
            k = self.k_proj(key).unflatten(-1, split)
            v = self.v_proj(value).unflatten(-1, split)
            out, w = _sequential_keys(q, k, v, None if mask is None else mask.unsqueeze(-1))
            out = out.flatten(-2)
            w = None if need_weights is False else w.movedim(-1, -3)
            if w is not None and need_weights is not True:
                w = w[..., :int(need_weights), :]
            return check_finite(self.out_proj(out), "attention"), w
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        if mask is not None:
            mask = mask.unsqueeze(-3)  # broadcast over heads
        fused = need_weights is not True
        if fused and mask is not None and not bool(mask.any(-1).all()):
            fused = False  # rows with no allowed key must come out as zeros, not NaN
        if fused:
            out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
            w = None
            if need_weights is not False:
                rows = int(need_weights)
                m = None if mask is None else mask[..., :rows, :] if mask.shape[-2] > 1 else mask
                scores = torch.matmul(q[..., :rows, :] * (1.0 / math.sqrt(q.shape[-1])), k.transpose(-1, -2))
                w = softmax(scores, dim=-1, mask=m)
        else:
            out, w = scaled_dot_product(q, k, v, mask)
            if need_weights is False:
                w = None
            elif need_weights is not True:
                w = w[..., :int(need_weights), :]
        out = out.transpose(-2, -3)
        out = out.reshape(*out.shape[:-2], self.width)
        return check_finite(self.out_proj(out), "attention"), w


def attention(query: torch.Tensor, key: torch.Tensor, value: torch.Tensor, heads: int,
              generator: torch.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """One-shot attention with freshly initialized projections (mostly for tests)."""
    mha = MultiHeadAttention(query.shape[-1], heads, generator=generator).to(query.dtype)
    return mha(query, key, value)


# ---------------------------------------------------------------------------
# Differentiation


def backward(loss: torch.Tensor) -> None:
    """Accumulate d(loss)/d(param) into ``.grad`` of every reachable parameter."""
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
        raise GraphError("backward needs a scalar tensor")
    if not loss.requires_grad or loss.grad_fn is None:
        raise GraphError("tensor is not attached to a recorded computation")
    loss.backward()


@dataclass
class GradCheckReport:
    per_parameter: dict[str, float]
    max_rel_error: float
    mean_rel_error: float
    tolerance: float
    checked_entries: int
    worst: tuple[str, int, float, float] | None = None  # (name, index, analytic, numeric)
    kinks: int = 0  # entries re-measured with a smaller step because the stencil crossed a kink

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"grad_check {status}: max rel err {self.max_rel_error:.3e}, "
                f"mean {self.mean_rel_error:.3e} over {self.checked_entries} entries (tol {self.tolerance:g})")


def _named_tensors(params) -> list[tuple[str, torch.Tensor]]:
    if isinstance(params, nn.Module):
        return [(n, p) for n, p in params.named_parameters() if p.requires_grad]
    if isinstance(params, Mapping):
        return list(params.items())
    return [(f"p{i}", p) for i, p in enumerate(params)]


def grad_check(fn: Callable[[], torch.Tensor], params, tolerance: float = 1e-4, *,
               step: float = 1e-5, floor: float = 1e-6, scale_floor: float = 1e-6,
               entries_per_param: int | None = None, total_entries: int | None = None,
               seed: int = 0) -> GradCheckReport:
    """Compare autograd gradients with central differences.

    ``fn`` recomputes a scalar loss from the current values of ``params`` (a
    module, a name->tensor mapping or a sequence of leaf tensors).  The
    relative error of one entry is ``|a - n| / max(|a|, |n|, floor)``.  The
    floor never drops below the level at which ten times the central
    difference's rounding error (``eps * |loss| / step``) would fail the
    tolerance, nor below ``scale_floor`` times the largest analytic gradient,
    so exactly-zero gradients are not judged on rounding noise.

    When the forward and backward one-sided differences disagree by more
    than the observed error, the stencil straddles a non-smooth point (a
    ReLU kink); that entry is re-measured with a step 100x smaller.
    Entries can be subsampled per tensor or globally.
    """
    named = _named_tensors(params)
    with torch.no_grad():
        first = fn().detach().clone()
        second = fn().detach().clone()
    if not torch.equal(first, second):
        raise NonDeterminismError("loss function is not deterministic; fix its seeds before grad_check")
    eps = torch.finfo(first.dtype).eps
    floor = max(floor, 10 * eps * abs(first.item()) / (step * tolerance))

    for _, p in named:
        p.grad = None
    loss = fn()
    backward(loss)
    analytic = {n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)) for n, p in named}
    for _, p in named:
        p.grad = None
    largest = max((float(g.abs().max()) for g in analytic.values() if g.numel()), default=0.0)
    floor = max(floor, scale_floor * largest)
    f0 = first.item()

    rng = np.random.default_rng(seed)
    picks: list[tuple[str, torch.Tensor, int]] = []
    for n, p in named:
        idx = np.arange(p.numel())
        if entries_per_param is not None and p.numel() > entries_per_param:
            idx = np.sort(rng.choice(p.numel(), entries_per_param, replace=False))
        picks.extend((n, p, int(i)) for i in idx)
    if total_entries is not None and len(picks) > total_entries:
        chosen = np.sort(rng.choice(len(picks), total_entries, replace=False))
        picks = [picks[i] for i in chosen]

    errors: dict[str, list[float]] = {n: [] for n, _ in named}
    worst = None
    worst_err = -1.0
    kinks = 0

    def differences(flat, i, orig, h):
        flat[i] = orig + h
        f_plus = fn().item()
        flat[i] = orig - h
        f_minus = fn().item()
        flat[i] = orig
        return (f_plus - f_minus) / (2 * h), (f_plus - f0) / h, (f0 - f_minus) / h

    with torch.no_grad():
        for name, p, i in picks:
            flat = p.data.view(-1)
            orig = flat[i].item()
            a = analytic[name].view(-1)[i].item()
            numeric, fwd, bwd = differences(flat, i, orig, step)
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            if err >= tolerance and abs(fwd - bwd) > abs(a - numeric):
                kinks += 1
                numeric = differences(flat, i, orig, step / 100)[0]
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            errors[name].append(err)
            if err > worst_err:
                worst_err, worst = err, (name, i, a, numeric)

    per_param = {n: max(e) for n, e in errors.items() if e}
    flat_errs = [e for es in errors.values() for e in es]
    return GradCheckReport(
        per_parameter=per_param,
        max_rel_error=max(flat_errs) if flat_errs else 0.0,
        mean_rel_error=float(np.mean(flat_errs)) if flat_errs else 0.0,
        tolerance=tolerance,
        checked_entries=len(flat_errs),
        worst=worst,
        kinks=kinks,
    )


def count_flops(fn: Callable[[], object]) -> int:
    """Run ``fn`` under torch's operator-level FLOP counter (matmul-type ops,
    2 FLOPs per multiply-add).  Works on ``meta`` tensors, so large
    configurations can be counted without doing the arithmetic."""
    from torch.utils.flop_counter import FlopCounterMode

    with FlopCounterMode(display=False) as counter:
        fn()
    return int(counter.get_total_flops())


# ---------------------------------------------------------------------------
# Checkpoints
#
# Layout (little-endian): magic[8] | u32 version | u64 count | count records of
#   u32 name_len | name utf-8 | u32 rank | u64 extent * rank | f64 payload


def save_parameters(params, path: str | Path) -> None:
    named = _named_tensors(params)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(named)))
        for name, p in named:
            raw = name.encode("utf-8")
            arr = p.detach().cpu().numpy().astype("<f8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def read_parameters(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    version, count = struct.unpack_from("<IQ", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 8 + struct.calcsize("<IQ")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}Q", data, off)
        off += 8 * rank
        n = math.prod(shape)
        out[name] = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += 8 * n
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    return out


def load_parameters(module: nn.Module, path: str | Path) -> None:
    stored = read_parameters(path)
    own = dict(module.named_parameters())
    missing = set(own) - set(stored)
    extra = set(stored) - set(own)
    if missing or extra:
        raise ValueError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    with torch.no_grad():
        for name, p in own.items():
            arr = stored[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr).to(p.dtype))


def parameter_count(module: nn.Module | Iterable[torch.Tensor]) -> int:
    params = module.parameters() if isinstance(module, nn.Module) else module
    return sum(p.numel() for p in params)
