"""Selective state-space temporal encoder.

Each block: in-projection -> depthwise causal conv -> SiLU -> selective scan
(per-step ``delta``, ``B``, ``C`` from the input; fixed negative diagonal
``A``) -> SiLU gate -> out-projection, added back to the block input.  A
linear head (initialised to the identity) maps the residual stream to the
output embedding, which keeps the input's ``(N, M_max, F)`` shape.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as tF
from torch import nn

from . import _scan
from .trajio import N_FEATURES, TemporalTensor

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


def discretize_zoh(a_diag, b, delta: float, variant: str = "zoh"):
    """Discretize a diagonal continuous system over a step ``delta``.

    Returns ``(a_bar, b_bar)`` with ``a_bar = exp(delta * a)`` and, for the
    default zero-order hold, ``b_bar = (exp(delta*a) - 1) / (delta*a) * delta * b``
    (``delta * b`` in the ``delta*a -> 0`` limit).  ``variant="extra_delta"`` applies
    the extra ``delta`` factor of the double-counted form and ``"euler"`` uses
    ``delta * b``.
    """
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    a = np.asarray(a_diag, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    z = delta * a
    em1 = np.expm1(z)
    with np.errstate(divide="ignore", invalid="ignore"):
        phi = np.where(z == 0, 1.0, em1 / np.where(z == 0, 1.0, z))
    if variant == "zoh":
        b_bar = phi * delta * b
    elif variant == "extra_delta":
        b_bar = delta * phi * delta * delta * b
    elif variant == "euler":
        b_bar = delta * b
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return np.exp(z), b_bar


def selective_scan(u, delta, A, B, C, mask=None, variant: str = "zoh") -> np.ndarray:
    """Run the discretized recurrence on plain arrays (no gradients).

    ``h_t = exp(delta_t A) h_{t-1} + Bbar_t u_t`` and ``y_t = C_t . h_t`` per
    channel, with ``h_0 = 0``.  Accepts ``(L, D)`` / ``(L, S)`` inputs or the
    batched ``(N, L, D)`` / ``(N, L, S)`` layout.
    """
    u = np.asarray(u, dtype=np.float64)
    squeeze = u.ndim == 2
    if squeeze:
        u, delta, B, C = (np.asarray(x, dtype=np.float64)[None] for x in (u, delta, B, C))
        mask = None if mask is None else np.asarray(mask, bool)[None]
    delta, B, C = (np.ascontiguousarray(x, dtype=np.float64) for x in (delta, B, C))
    A = np.ascontiguousarray(A, dtype=np.float64)
    if mask is None:
        mask = np.ones(u.shape[:2], dtype=bool)
    _check_scan_inputs(u, delta, A, mask)
    y = _scan.scan_forward(np.ascontiguousarray(u), delta, B, C, A, np.ascontiguousarray(mask),
                           _scan.VARIANTS[variant], _scan.is_ladder(A))
    return y[0] if squeeze else y


def _check_scan_inputs(u, delta, A, mask):
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(delta))):
        raise ValueError("scan inputs contain NaN or Inf")
    if np.any(A >= 0):
        raise ValueError("state matrix diagonal must be strictly negative")
    if np.any(delta[mask] <= 0):
        raise ValueError("step sizes must be strictly positive")


class _SelectiveScan(torch.autograd.Function):
    @staticmethod
    def forward(ctx, u, delta, B, C, A, mask, variant, ladder):
        arrs = [t.detach().contiguous().numpy() for t in (u, delta, B, C, A)]
        m = mask.contiguous().numpy()
        _check_scan_inputs(arrs[0], arrs[1], arrs[4], m)
        y = _scan.scan_forward(*arrs, m, variant, ladder)
        ctx.save_for_backward(u, delta, B, C, A, mask)
        ctx.variant, ctx.ladder = variant, ladder
        return torch.from_numpy(y)

    @staticmethod
    def backward(ctx, gy):
        u, delta, B, C, A, mask = ctx.saved_tensors
        arrs = [t.detach().contiguous().numpy() for t in (u, delta, B, C, A)]
        du, ddelta, dB, dC = _scan.scan_backward(*arrs, mask.contiguous().numpy(),
                                                 gy.contiguous().numpy(), ctx.variant, ctx.ladder)
        return (torch.from_numpy(du), torch.from_numpy(ddelta), torch.from_numpy(dB),
                torch.from_numpy(dC), None, None, None, None)


@dataclass
class TLMConfig:
    n_state: int = 8
    d_inner: int = 8
    conv_width: int = 4
    n_blocks: int = 2
    variant: str = "zoh"
    dt_min: float = 1e-3
    dt_max: float = 1e-1
    bucket_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.variant not in _scan.VARIANTS:
            raise ValueError(f"unknown discretization variant {self.variant!r}")
        if min(self.n_state, self.d_inner, self.conv_width, self.n_blocks) < 1:
            raise ValueError("encoder sizes must be positive")


class MambaBlock(nn.Module):
    def __init__(self, d_model: int, cfg: TLMConfig, gen: torch.Generator):
        super().__init__()
        d, s = cfg.d_inner, cfg.n_state
        self.cfg = cfg
        self.in_proj = nn.Linear(d_model, d, dtype=torch.float64)
        self.gate_proj = nn.Linear(d_model, d, dtype=torch.float64)
        self.conv_weight = nn.Parameter(torch.empty(d, 1, cfg.conv_width, dtype=torch.float64))
        self.conv_bias = nn.Parameter(torch.zeros(d, dtype=torch.float64))
        self.delta_proj = nn.Linear(d, d, dtype=torch.float64)
        self.B_proj = nn.Linear(d, s, bias=False, dtype=torch.float64)
        self.C_proj = nn.Linear(d, s, bias=False, dtype=torch.float64)
        self.out_proj = nn.Linear(d, d_model, dtype=torch.float64)
        self.register_buffer("A", -torch.arange(1, s + 1, dtype=torch.float64))
        self._init(gen)

    def _init(self, gen):
        with torch.no_grad():
            for lin in (self.in_proj, self.gate_proj, self.delta_proj, self.B_proj, self.C_proj, self.out_proj):
                bound = 1.0 / math.sqrt(lin.in_features)
                lin.weight.uniform_(-bound, bound, generator=gen)
                if lin.bias is not None:
                    lin.bias.uniform_(-bound, bound, generator=gen)
            self.conv_weight.uniform_(-0.5, 0.5, generator=gen)
            self.out_proj.weight.mul_(0.1)
            self.out_proj.bias.zero_()
            # softplus(bias) spans [dt_min, dt_max] log-uniformly
            lo, hi = math.log(self.cfg.dt_min), math.log(self.cfg.dt_max)
            dt = torch.exp(torch.rand(self.cfg.d_inner, generator=gen, dtype=torch.float64) * (hi - lo) + lo)
            self.delta_proj.bias.copy_(dt + torch.log(-torch.expm1(-dt)))
            self.delta_proj.weight.mul_(0.1)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        w = self.cfg.conv_width
        z = self.in_proj(x)
        # depthwise causal convolution as a sum of shifted copies (much cheaper backward than conv1d)
        zp = tF.pad(z, (0, 0, w - 1, 0))
        L = z.shape[1]
        conv = self.conv_bias + sum(zp[:, k:k + L] * self.conv_weight[:, 0, k] for k in range(w))
        z = tF.silu(conv)
        delta = tF.softplus(self.delta_proj(z))
        y = _SelectiveScan.apply(z.contiguous(), delta.contiguous(), self.B_proj(z).contiguous(),
                                 self.C_proj(z).contiguous(), self.A, mask,
                                 _scan.VARIANTS[self.cfg.variant], _scan.is_ladder(self.A.numpy()))
        y = y * tF.silu(self.gate_proj(x))
        return x + self.out_proj(y)


class TemporalEncoder(nn.Module):
    """Stack of selective-SSM blocks with an identity-initialised linear head."""

    def __init__(self, cfg: TLMConfig | None = None, n_features: int = N_FEATURES):
        super().__init__()
        self.cfg = cfg or TLMConfig()
        self.n_features = n_features
        gen = torch.Generator().manual_seed(self.cfg.seed)
        self.blocks = nn.ModuleList(MambaBlock(n_features, self.cfg, gen) for _ in range(self.cfg.n_blocks))
        self.head = nn.Linear(n_features, n_features, dtype=torch.float64)
        with torch.no_grad():
            self.head.weight.copy_(torch.eye(n_features, dtype=torch.float64))
            self.head.bias.zero_()

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if x.ndim != 3 or x.shape[-1] != self.n_features or mask.shape != x.shape[:2]:
            raise ValueError(f"expected (N, M, {self.n_features}) input with (N, M) mask, got {tuple(x.shape)}")
        for blk in self.blocks:
            x = blk(x, mask)
        return self.head(x)

    @property
    def tail_margin(self) -> int:
        """Steps after the last observation beyond which every output row is identical."""
        return self.cfg.n_blocks * (self.cfg.conv_width - 1) + 1

    def forward_bucketed(self, values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Forward pass that skips the constant mean-padded tail.

        After the last observed step the input is constant, every layer is
        pointwise or causal, and masked scan steps pass their input through,
        so the output is constant beyond ``last + tail_margin``.  Rows are
        grouped by length, each group is run only that far and its last row
        is broadcast over the rest.
        """
        n, m, _ = values.shape
        obs = mask.numpy()
        last = np.where(obs.any(axis=1), m - np.argmax(obs[:, ::-1], axis=1), 0)
        order = np.argsort(last, kind="stable")
        out = [None] * n
        bs = self.cfg.bucket_size
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            span = int(min(m, last[idx].max() + self.tail_margin))
            it = torch.from_numpy(idx)
            part = self(values[it, :span], mask[it, :span])
            if span < m:
                part = torch.cat([part, part[:, -1:].expand(-1, m - span, -1)], dim=1)
            for j, i in enumerate(idx):
                out[i] = part[j]
        return torch.stack(out)

    def encode(self, tensor: TemporalTensor) -> np.ndarray:
        """Temporal embedding of a padded tensor, without gradients."""
        with torch.no_grad():
            e = self.forward_bucketed(torch.from_numpy(tensor.values), torch.from_numpy(tensor.mask))
        return e.numpy()

    def named_trainable(self) -> dict[str, torch.Tensor]:
        return {k: p for k, p in self.named_parameters() if p.requires_grad}

    def save(self, path) -> None:
        payload = {
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.cfg),
            "n_features": self.n_features,
            "tensors": {k: {"shape": list(v.shape), "data": v.detach().reshape(-1).tolist()}
                        for k, v in self.state_dict().items()},
        }
        with open(path, "w") as fh:
            json.dump(payload, fh)

    @classmethod
    def load(cls, path) -> "TemporalEncoder":
        with open(path) as fh:
            payload = json.load(fh)
        if payload.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
        enc = cls(TLMConfig(**payload["config"]), payload["n_features"])
        state = enc.state_dict()
        loaded = {}
        for k, ref in state.items():
            if k not in payload["tensors"]:
                raise ValueError(f"checkpoint missing tensor {k}")
            rec = payload["tensors"][k]
            if list(ref.shape) != rec["shape"]:
                raise ValueError(f"shape mismatch for {k}: checkpoint {rec['shape']} vs model {list(ref.shape)}")
            loaded[k] = torch.tensor(rec["data"], dtype=ref.dtype).reshape(ref.shape)
        extra = set(payload["tensors"]) - set(state)
        if extra:
            raise ValueError(f"unexpected tensors in checkpoint: {sorted(extra)}")
        enc.load_state_dict(loaded)
        return enc
