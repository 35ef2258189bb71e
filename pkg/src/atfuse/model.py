"""Infrared/visible fusion network on the tensor core.

The pipeline per image pair: a shallow conv stem per modality lifts each
single-channel image to C feature maps; non-overlapping p x p patches become
tokens; fusion blocks exchange information between the two token grids with
cross-attention; a linear expansion plus depth-to-space puts tokens back on
the pixel grid, and a small residual conv stack with a sigmoid head emits the
fused image.

Each fusion block runs three attention stages:

* a discrepancy stage: visible tokens query the infrared tokens, and the
  block keeps ``V - softmax(QK^T/sqrt(d)) V``, i.e. the part of the infrared
  values the attention summary fails to explain, projected and added back to
  the query;
* two injection stages of plain cross-attention residual form, which fold
  the visible and then the infrared tokens back into the running fused grid.

The block output is ``third stage + discrepancy stage`` so both paths feed
the next block (or the reconstruction head) directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .images import GrayImage, ImagePair


@dataclass
class ModelConfig:
    """Architecture hyperparameters; everything the checkpoint must replay."""

    shallow_channels: int = 16
    patch_size: int = 4
    embed_dim: int = 32
    mlp_hidden: int = 64
    n_fusion_blocks: int = 1
    refine_blocks: int = 2
    seed: int = 0
    use_diim: bool = True
    use_aciim: bool = True

    def __post_init__(self):
        for name in ("shallow_channels", "patch_size", "embed_dim",
                     "mlp_hidden", "n_fusion_blocks", "refine_blocks"):
            if getattr(self, name) < 1:
                raise ValueError("%s must be positive, got %r" % (name, getattr(self, name)))


_BOOL_FIELDS = ("use_diim", "use_aciim")


def model_config_to_text(cfg: ModelConfig) -> str:
    lines = []
    for f in fields(ModelConfig):
        value = getattr(cfg, f.name)
        lines.append("%s = %s" % (f.name, str(value).lower() if f.name in _BOOL_FIELDS else value))
    return "\n".join(lines) + "\n"


def model_config_from_text(text: str) -> ModelConfig:
    known = {f.name for f in fields(ModelConfig)}
    kwargs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError("line %d: expected key = value, got %r" % (lineno, line))
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in known:
            raise ValueError("unknown model config key %r" % key)
        kwargs[key] = value.lower() == "true" if key in _BOOL_FIELDS else int(value)
    missing = sorted(known - set(kwargs))
    if missing:
        raise ValueError("model config missing keys: %s" % ", ".join(missing))
    return ModelConfig(**kwargs)


@dataclass
class TokenGrid:
    """Token matrix (one row per patch) plus the patch-grid geometry."""

    tokens: Tensor
    grid_h: int
    grid_w: int

    def __post_init__(self):
        if self.tokens.shape[0] != self.grid_h * self.grid_w:
            raise ValueError(
                "token count %d does not match %dx%d grid"
                % (self.tokens.shape[0], self.grid_h, self.grid_w))


@dataclass
class ConvBnParams:
    weight: Tensor
    bias: Tensor
    bn_gain: Tensor
    bn_shift: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray


@dataclass
class AttentionBlockParams:
    """Weights for one attention stage (projections, norm, and token MLP)."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln_gain: Tensor
    ln_shift: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor


@dataclass
class FusionBlockParams:
    diim: AttentionBlockParams | None
    aciim_vi: AttentionBlockParams | None
    aciim_ir: AttentionBlockParams | None


@dataclass
class RefineBlockParams:
    conv1_weight: Tensor
    conv1_bias: Tensor
    bn_gain: Tensor
    bn_shift: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    conv2_weight: Tensor
    conv2_bias: Tensor


@dataclass
class LinearParams:
    weight: Tensor
    bias: Tensor


def _uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    data = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return Tensor(data, requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)


def _init_conv_bn(rng: np.random.Generator, c_in: int, c_out: int) -> ConvBnParams:
    return ConvBnParams(
        weight=_uniform_fan_in(rng, (c_out, c_in, 3, 3), c_in * 9),
        bias=_zeros((c_out,)),
        bn_gain=_ones((c_out,)),
        bn_shift=_zeros((c_out,)),
        running_mean=np.zeros(c_out, dtype=np.float32),
        running_var=np.ones(c_out, dtype=np.float32),
    )


def _init_attention(rng: np.random.Generator, d: int, hidden: int) -> AttentionBlockParams:
    return AttentionBlockParams(
        wq=_uniform_fan_in(rng, (d, d), d), bq=_zeros((d,)),
        wk=_uniform_fan_in(rng, (d, d), d), bk=_zeros((d,)),
        wv=_uniform_fan_in(rng, (d, d), d), bv=_zeros((d,)),
        wo=_uniform_fan_in(rng, (d, d), d), bo=_zeros((d,)),
        ln_gain=_ones((d,)), ln_shift=_zeros((d,)),
        mlp_w1=_uniform_fan_in(rng, (d, hidden), d), mlp_b1=_zeros((hidden,)),
        mlp_w2=_uniform_fan_in(rng, (hidden, d), hidden), mlp_b2=_zeros((d,)),
    )


class AtfuseModel:
    """Parameter container plus the forward pass over one image pair."""

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        c, p, d = config.shallow_channels, config.patch_size, config.embed_dim
        token_dim = c * p * p

        self.extract_ir = _init_conv_bn(rng, 1, c)
        self.extract_vi = _init_conv_bn(rng, 1, c)
        self.embed_ir = LinearParams(_uniform_fan_in(rng, (token_dim, d), token_dim), _zeros((d,)))
        self.embed_vi = LinearParams(_uniform_fan_in(rng, (token_dim, d), token_dim), _zeros((d,)))
        self.blocks: list[FusionBlockParams] = []
        for _ in range(config.n_fusion_blocks):
            self.blocks.append(FusionBlockParams(
                diim=_init_attention(rng, d, config.mlp_hidden) if config.use_diim else None,
                aciim_vi=_init_attention(rng, d, config.mlp_hidden) if config.use_aciim else None,
                aciim_ir=_init_attention(rng, d, config.mlp_hidden) if config.use_aciim else None,
            ))
        self.up = LinearParams(_uniform_fan_in(rng, (d, token_dim), d), _zeros((token_dim,)))
        self.refine: list[RefineBlockParams] = []
        for _ in range(config.refine_blocks):
            cb = _init_conv_bn(rng, c, c)
            self.refine.append(RefineBlockParams(
                conv1_weight=cb.weight, conv1_bias=cb.bias,
                bn_gain=cb.bn_gain, bn_shift=cb.bn_shift,
                running_mean=cb.running_mean, running_var=cb.running_var,
                conv2_weight=_uniform_fan_in(rng, (c, c, 3, 3), c * 9),
                conv2_bias=_zeros((c,)),
            ))
        self.head = LinearParams(_uniform_fan_in(rng, (1, c, 3, 3), c * 9), _zeros((1,)))

    # -- parameter registry ------------------------------------------------

    def _attention_items(self, prefix: str, p: AttentionBlockParams):
        for f in fields(AttentionBlockParams):
            yield "%s.%s" % (prefix, f.name), getattr(p, f.name)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        items: list[tuple[str, Tensor]] = []
        for tag, cb in (("extract_ir", self.extract_ir), ("extract_vi", self.extract_vi)):
            items += [("%s.conv.weight" % tag, cb.weight), ("%s.conv.bias" % tag, cb.bias),
                      ("%s.bn.gain" % tag, cb.bn_gain), ("%s.bn.shift" % tag, cb.bn_shift)]
        for tag, lin in (("embed_ir", self.embed_ir), ("embed_vi", self.embed_vi)):
            items += [("%s.weight" % tag, lin.weight), ("%s.bias" % tag, lin.bias)]
        for k, block in enumerate(self.blocks):
            for tag, stage in (("diim", block.diim), ("aciim_vi", block.aciim_vi),
                               ("aciim_ir", block.aciim_ir)):
                if stage is not None:
                    items += list(self._attention_items("block%d.%s" % (k, tag), stage))
        items += [("up.weight", self.up.weight), ("up.bias", self.up.bias)]
        for k, rb in enumerate(self.refine):
            tag = "refine%d" % k
            items += [("%s.conv1.weight" % tag, rb.conv1_weight),
                      ("%s.conv1.bias" % tag, rb.conv1_bias),
                      ("%s.bn.gain" % tag, rb.bn_gain), ("%s.bn.shift" % tag, rb.bn_shift),
                      ("%s.conv2.weight" % tag, rb.conv2_weight),
                      ("%s.conv2.bias" % tag, rb.conv2_bias)]
        items += [("head.weight", self.head.weight), ("head.bias", self.head.bias)]
        return items

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        items = [("extract_ir.bn.running_mean", self.extract_ir.running_mean),
                 ("extract_ir.bn.running_var", self.extract_ir.running_var),
                 ("extract_vi.bn.running_mean", self.extract_vi.running_mean),
                 ("extract_vi.bn.running_var", self.extract_vi.running_var)]
        for k, rb in enumerate(self.refine):
            items += [("refine%d.bn.running_mean" % k, rb.running_mean),
                      ("refine%d.bn.running_var" % k, rb.running_var)]
        return items

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Every array the checkpoint must carry, parameters then buffers."""
        return [(n, p.data) for n, p in self.named_parameters()] + self.named_buffers()

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    # -- forward -------------------------------------------------------------

    def forward(self, ir: np.ndarray, vi: np.ndarray, train: bool = False,
                parts: dict | None = None) -> Tensor:
        """Fuse one registered pair of (H, W) arrays into an (H, W) tensor.

        ``parts``, when given, collects intermediate stage outputs and
        attention matrices for inspection; keys are stable.
        """
        ir = np.asarray(ir, dtype=np.float32)
        vi = np.asarray(vi, dtype=np.float32)
        if ir.shape != vi.shape or ir.ndim != 2:
            raise ValueError("expected two equal (H, W) arrays, got %s and %s"
                             % (ir.shape, vi.shape))
        p = self.config.patch_size
        if ir.shape[0] % p or ir.shape[1] % p:
            raise ValueError(
                "image %dx%d not divisible by patch size %d; pad or crop the inputs"
                % (ir.shape[0], ir.shape[1], p))

        f_ir = shallow_extract(Tensor(ir[None]), self.extract_ir, train=train)
        f_vi = shallow_extract(Tensor(vi[None]), self.extract_vi, train=train)
        t_ir = patch_embed(f_ir, self.embed_ir, p)
        t_vi = patch_embed(f_vi, self.embed_vi, p)
        fused = feature_fusion(t_ir, t_vi, self.blocks, parts=parts)
        return reconstruct(fused, self, train=train)


def shallow_extract(x: Tensor, params: ConvBnParams, train: bool = False) -> Tensor:
    """conv3x3 -> batch norm -> hardswish on a (C_in, H, W) image tensor."""
    y = ag.conv2d_3x3(x, params.weight, params.bias, padding=1)
    y = ag.batch_norm_2d(y, params.bn_gain, params.bn_shift,
                         params.running_mean, params.running_var, train=train)
    return ag.hardswish(y)


def patch_embed(feat: Tensor, proj: LinearParams, patch: int) -> TokenGrid:
    """Flatten non-overlapping patches of a (C, H, W) map and project them."""
    c, h, w = feat.shape
    if h % patch or w % patch:
        raise ValueError("H=%d, W=%d not divisible by p=%d" % (h, w, patch))
    tokens = ag.space_to_tokens(feat, patch)
    return TokenGrid(ag.linear(tokens, proj.weight, proj.bias), h // patch, w // patch)


def _project_qkv(q_src: TokenGrid, kv_src: TokenGrid, p: AttentionBlockParams):
    q = ag.linear(q_src.tokens, p.wq, p.bq)
    k = ag.linear(kv_src.tokens, p.wk, p.bk)
    v = ag.linear(kv_src.tokens, p.wv, p.bv)
    scale = 1.0 / math.sqrt(q.shape[1])
    attn = ag.softmax_rows(ag.matmul(q, ag.transpose(k)) * scale)
    cm = ag.matmul(attn, v)
    return q, v, attn, cm


def _mlp_residual(f_add: Tensor, p: AttentionBlockParams) -> Tensor:
    normed = ag.layer_norm(f_add, p.ln_gain, p.ln_shift)
    hidden = ag.hardswish(ag.linear(normed, p.mlp_w1, p.mlp_b1))
    return ag.linear(hidden, p.mlp_w2, p.mlp_b2) + f_add


def diim_forward(q_src: TokenGrid, kv_src: TokenGrid, params: AttentionBlockParams,
                 parts: dict | None = None, tag: str = "diim") -> TokenGrid:
    """Discrepancy stage: keep what attention failed to explain.

    The query grid attends over the key/value grid; the attended summary is
    subtracted from the raw values, projected, and added to the projected
    query. A layer-normed MLP with a second residual finishes the stage.
    """
    q, v, attn, cm = _project_qkv(q_src, kv_src, params)
    diff = v - cm
    f_add = ag.linear(diff, params.wo, params.bo) + q
    out = _mlp_residual(f_add, params)
    if parts is not None:
        parts["%s.attn" % tag] = attn
        parts["%s.discrepancy" % tag] = diff
        parts["%s.f_add" % tag] = f_add
        parts["%s.out" % tag] = out
    return TokenGrid(out, q_src.grid_h, q_src.grid_w)


def aciim_forward(kv_src: TokenGrid, q_src: TokenGrid, params: AttentionBlockParams,
                  parts: dict | None = None, tag: str = "aciim") -> TokenGrid:
    """Injection stage: plain cross-attention folded into the running grid."""
    q, _, attn, cm = _project_qkv(q_src, kv_src, params)
    f_add = ag.linear(cm, params.wo, params.bo) + q
    out = _mlp_residual(f_add, params)
    if parts is not None:
        parts["%s.attn" % tag] = attn
        parts["%s.f_add" % tag] = f_add
        parts["%s.out" % tag] = out
    return TokenGrid(out, q_src.grid_h, q_src.grid_w)


def feature_fusion(t_ir: TokenGrid, t_vi: TokenGrid, blocks: list[FusionBlockParams],
                   parts: dict | None = None) -> TokenGrid:
    """Run the fusion blocks; the running grid starts as the visible tokens.

    Per block: discrepancy stage queries with the running grid over infrared
    tokens; the two injection stages fold in visible then infrared tokens;
    the block returns ``injection output + discrepancy output``. Disabled
    stages pass the running grid through (no discrepancy) or return the
    discrepancy output alone (no injection).
    """
    running = t_vi
    for k, block in enumerate(blocks):
        prefix = "block%d" % k
        if block.diim is not None:
            z1 = diim_forward(running, t_ir, block.diim,
                              parts=parts, tag="%s.diim" % prefix)
        else:
            z1 = running
        if block.aciim_vi is not None:
            z2 = aciim_forward(t_vi, z1, block.aciim_vi,
                               parts=parts, tag="%s.aciim_vi" % prefix)
            z3 = aciim_forward(t_ir, z2, block.aciim_ir,
                               parts=parts, tag="%s.aciim_ir" % prefix)
            out = TokenGrid(z3.tokens + z1.tokens, z1.grid_h, z1.grid_w)
        else:
            out = z1
        if parts is not None:
            parts["%s.z1" % prefix] = z1.tokens
            parts["%s.out" % prefix] = out.tokens
        running = out
    return running


def reconstruct(grid: TokenGrid, model: AtfuseModel, train: bool = False) -> Tensor:
    """Tokens back to pixels: linear expansion, depth-to-space, conv refinement."""
    cfg = model.config
    c, p = cfg.shallow_channels, cfg.patch_size
    expanded = ag.linear(grid.tokens, model.up.weight, model.up.bias)
    feat = ag.tokens_to_space(expanded, grid.grid_h, grid.grid_w, p, c)
    for rb in model.refine:
        y = ag.conv2d_3x3(feat, rb.conv1_weight, rb.conv1_bias, padding=1)
        y = ag.batch_norm_2d(y, rb.bn_gain, rb.bn_shift,
                             rb.running_mean, rb.running_var, train=train)
        y = ag.hardswish(y)
        y = ag.conv2d_3x3(y, rb.conv2_weight, rb.conv2_bias, padding=1)
        feat = y + feat
    out = ag.conv2d_3x3(feat, model.head.weight, model.head.bias, padding=1)
    out = ag.sigmoid(out)
    return ag.reshape(out, out.shape[1:])


def fuse_images(model: AtfuseModel, pair: ImagePair, eval_mode: bool = True) -> GrayImage:
    """Fuse a registered pair; deterministic for fixed weights in eval mode."""
    out = model.forward(pair.ir.pixels, pair.vi.pixels, train=not eval_mode)
    return GrayImage(np.clip(out.data, 0.0, 1.0))
