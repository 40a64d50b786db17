"""Toy vision-transformer stand-in whose attention and MLP linears run through the MX layer."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .. import mx_linear
from ..mx_linear import Axis, QuantizerMask, dequantize_matrix, quantize_matrix
from ..q_ema import EmaState, quantize_matrix_ema, update_ema
from ..rng import StreamKey
from .config import ModelConfig, QuantConfig


@dataclass
class QuantContext:
    """Shared by all quantized layers of a model: the stochastic-rounding seed and current step."""

    seed: int = 0
    step: int = 0


class _MxLinearFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, w, layer):
        y, tapes = mx_linear.forward(
            x.detach().double().numpy(),
            w.detach().double().numpy(),
            layer.mask,
            layer.lcfg,
            w_ema=None if layer.ema is None else layer.ema.w_ema,
            layer_id=layer.layer_id,
            step=layer.qctx.step,
        )
        ctx.tapes = tapes
        ctx.layer = layer
        ctx.dtype = x.dtype
        return torch.from_numpy(y).to(x.dtype)

    @staticmethod
    def backward(ctx, grad_y):
        layer = ctx.layer
        key = StreamKey(layer.qctx.seed, 0, ctx.tapes.step)
        gx, gw = mx_linear.backward(grad_y.double().numpy(), ctx.tapes, layer.lcfg, key)
        ctx.tapes = None
        return torch.from_numpy(gx).to(ctx.dtype), torch.from_numpy(gw).to(ctx.dtype), None


class MxLinear(nn.Module):
    """``y = Q1(x) Q2(W^T) + b`` with quantized backward; dense when every quantizer is off."""

    def __init__(self, in_features: int, out_features: int, quant: QuantConfig, qctx: QuantContext, layer_id: int):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self.weight = nn.Parameter(torch.empty(out_features, in_features))
        self.bias = nn.Parameter(torch.zeros(out_features))
        self.mask = quant.effective_mask
        self.lcfg = quant.linear_config()
        self.qctx = qctx
        self.layer_id = layer_id
        self.ema: EmaState | None = None
        self._ema_beta = quant.beta if quant.weight == "qema" else None

    @property
    def quantized(self) -> bool:
        return self.mask != QuantizerMask.all_off()

    def init_ema(self) -> None:
        if self._ema_beta is not None:
            self.ema = EmaState.init_from(self.weight.detach().double().numpy(), self._ema_beta)

    def update_ema(self) -> None:
        if self.ema is not None:
            update_ema(self.ema, self.weight.detach().double().numpy())

    def forward(self, x):
        if not self.quantized:
            return F.linear(x, self.weight, self.bias)
        shape = x.shape
        y = _MxLinearFn.apply(x.reshape(-1, shape[-1]), self.weight, self)
        return y.reshape(*shape[:-1], self.out_features) + self.bias

    def _q2(self):
        w_t = self.weight.detach().double().numpy().T
        if self.ema is not None:
            return quantize_matrix_ema(w_t, self.ema.w_ema.T, Axis.COL_GROUPS, self.lcfg.fmt)
        return quantize_matrix(w_t, Axis.COL_GROUPS, self.lcfg.scale_rule, fmt=self.lcfg.fmt)

    def quantized_weight(self) -> np.ndarray:
        """Forward weight ``Q2(W^T)^T`` as the next forward pass would see it (C x D)."""
        if not self.mask.q2:
            return self.weight.detach().double().numpy().copy()
        return dequantize_matrix(self._q2()).T.copy()

    def latent_weight(self) -> np.ndarray:
        """``w / S`` with ``S`` the element's Q2 block scale (C x D)."""
        qm = self._q2()
        s = np.repeat(qm.exponents.astype(np.int64).reshape(-1, self.out_features), 32, axis=0)[: self.in_features]
        return np.ldexp(self.weight.detach().double().numpy(), -s.T)

    def extra_repr(self):
        return f"in={self.in_features}, out={self.out_features}, mask={self.mask}, id={self.layer_id}"


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig, quant: QuantConfig, qctx: QuantContext, first_id: int):
        super().__init__()
        w = cfg.width
        self.heads = cfg.heads
        self.ln1 = nn.LayerNorm(w)
        self.qkv = MxLinear(w, 3 * w, quant, qctx, first_id)
        self.proj = MxLinear(w, w, quant, qctx, first_id + 1)
        self.ln2 = nn.LayerNorm(w)
        self.fc1 = MxLinear(w, cfg.mlp_ratio * w, quant, qctx, first_id + 2)
        self.fc2 = MxLinear(cfg.mlp_ratio * w, w, quant, qctx, first_id + 3)

    def forward(self, x):
        b, t, c = x.shape
        h = self.qkv(self.ln1(x)).reshape(b, t, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = h[0], h[1], h[2]
        att = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(c // self.heads), dim=-1)
        o = (att @ v).transpose(1, 2).reshape(b, t, c)
        x = x + self.proj(o)
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


class ToyTransformer(nn.Module):
    """Splits each input vector into ``tokens`` patches, embeds, runs ``depth`` blocks, mean-pools."""

    def __init__(self, cfg: ModelConfig, in_dim: int, classes: int, quant: QuantConfig, qctx: QuantContext):
        super().__init__()
        if in_dim % cfg.tokens:
            raise ValueError(f"input dim {in_dim} not divisible into {cfg.tokens} tokens")
        self.tokens = cfg.tokens
        self.embed = nn.Linear(in_dim // cfg.tokens, cfg.width)
        self.pos = nn.Parameter(torch.zeros(cfg.tokens, cfg.width))
        self.blocks = nn.ModuleList(Block(cfg, quant, qctx, 4 * i) for i in range(cfg.depth))
        self.ln_f = nn.LayerNorm(cfg.width)
        self.head = nn.Linear(cfg.width, classes)

    def forward(self, x, probe_block: int | None = None):
        """Logits; with ``probe_block`` set, also return that block's output."""
        h = self.embed(x.reshape(x.shape[0], self.tokens, -1)) + self.pos
        probe = None
        for i, blk in enumerate(self.blocks):
            h = blk(h)
            if probe_block is not None and i == probe_block % len(self.blocks):
                probe = h
        logits = self.head(self.ln_f(h).mean(dim=1))
        return logits if probe_block is None else (logits, probe)

    def quantized_layers(self) -> list[tuple[str, MxLinear]]:
        return [(n, m) for n, m in self.named_modules() if isinstance(m, MxLinear) and m.quantized]

    def mx_layers(self) -> list[tuple[str, MxLinear]]:
        return [(n, m) for n, m in self.named_modules() if isinstance(m, MxLinear)]


def build_model(cfg: ModelConfig, quant: QuantConfig, in_dim: int, classes: int, seed: int, qctx: QuantContext | None = None):
    cfg.validate()
    qctx = qctx or QuantContext(seed=seed)
    model = ToyTransformer(cfg, in_dim, classes, quant, qctx)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("weight") and p.ndim == 2:
                p.copy_(torch.randn(p.shape, generator=gen) * cfg.init_std)
            elif name == "pos":
                p.copy_(torch.randn(p.shape, generator=gen) * cfg.init_std)
            elif "ln" in name:
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            else:
                p.zero_()
    for _, layer in model.mx_layers():
        layer.init_ema()
    model.qctx = qctx
    return model
