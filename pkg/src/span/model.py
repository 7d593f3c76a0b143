"""SPAN backbone assembly: SAC-CAR stages, MIL and UNet heads, checkpoints.

The encoder alternates token condensation (rulebook sparse conv) with
contextual refinement (windowed attention pairs). SPAN-MIL reads the summed
per-stage global context tokens; SPAN-UNet decodes back to the input
coordinates through transposed rulebooks with skip connections.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import ops
from .attention import rulebook_from_coords
from .autodiff import ParamStore, Tape, Var
from .conv import ConvRulebook, ConvSpec, build_conv_rulebook, transpose_rulebook
from .errors import (
    BadMagic,
    ConfigError,
    MissingContext,
    RulebookMissing,
    TruncatedStream,
    VersionUnsupported,
)
from .losses import LossSpec, softmax
from .sparse import SparseMap

ABLATIONS = ("no_sac", "no_car", "no_shift", "no_ctx", "no_rpb")


@dataclass(frozen=True)
class StageSpec:
    """Geometry of one encoder stage: its conv and its refinement blocks."""

    out_dim: int
    kernel: int
    stride: int
    w_side: int
    num_heads: int
    car_pairs: int


@dataclass
class ModelConfig:
    input_dim: int
    stage_dims: tuple = (64, 128, 256)
    kernel: int = 2
    stride: int = 2
    w_side: int = 4
    num_heads: int = 4
    car_pairs: int = 1
    num_ctx: int = 1
    head: str = "mil"
    num_classes: int = 2
    skip_mode: str = "concat"
    use_rpb: bool = True
    use_shift: bool = True
    no_sac: bool = False
    no_car: bool = False
    loss: LossSpec = field(default_factory=LossSpec)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossSpec(**self.loss)
        self.stage_dims = tuple(int(d) for d in self.stage_dims)
        if self.head not in ("mil", "unet"):
            raise ConfigError(f"unknown head {self.head!r}")
        if self.skip_mode not in ("concat", "add", "none"):
            raise ConfigError(f"unknown skip mode {self.skip_mode!r}")
        if not self.no_car:
            if self.w_side < 2 or (self.use_shift and self.w_side % 2):
                raise ConfigError("w_side must be an even value >= 2 when CAR is on")
            for d in self.stage_dims:
                if d % self.num_heads:
                    raise ConfigError(f"stage width {d} not divisible by {self.num_heads} heads")

    @property
    def num_stages(self) -> int:
        return len(self.stage_dims)

    def stage_specs(self) -> list[StageSpec]:
        """Stage 0 is a coordinate-preserving 1x1 projection; later stages downsample."""
        w = 0 if self.no_car else self.w_side
        specs = []
        for l, d in enumerate(self.stage_dims):
            if l == 0 or self.no_sac:
                k = s = 1
            else:
                k, s = self.kernel, self.stride
            specs.append(StageSpec(d, k, s, w, self.num_heads, self.car_pairs))
        return specs

    def total_stride(self) -> int:
        out = 1
        for spec in self.stage_specs():
            out *= spec.stride
        return out

    def translation_period(self) -> int:
        """Smallest input translation under which every stage's windows shift
        by whole blocks (windows are anchored at the origin)."""
        period = self.total_stride()
        if not self.no_car:
            period *= self.w_side
        return period

    def with_ablation(self, name: str) -> "ModelConfig":
        if name == "no_sac":
            return replace(self, no_sac=True)
        if name == "no_car":
            return replace(self, no_car=True)
        if name == "no_shift":
            return replace(self, use_shift=False)
        if name == "no_ctx":
            return replace(self, num_ctx=0)
        if name == "no_rpb":
            return replace(self, use_rpb=False)
        raise ConfigError(f"unknown ablation {name!r}")

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["stage_dims"] = list(self.stage_dims)
        out["loss"] = {f.name: getattr(self.loss, f.name) for f in fields(self.loss)}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config keys {sorted(extra)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class EncoderOutput:
    """Per-stage maps, global-token rows, and the retained conv rulebooks."""

    input_coords: np.ndarray
    stage_maps: list[SparseMap]
    stage_globals: list[np.ndarray]
    stage_rulebooks: list[ConvRulebook]

    def stage_in_coords(self, l: int) -> np.ndarray:
        return self.input_coords if l == 0 else self.stage_maps[l - 1].coords


# ---------------------------------------------------------------------------
# Parameter registration (fixed declaration order -> stable checkpoints)
# ---------------------------------------------------------------------------

def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _register_linear(store, rng, name, d_out, d_in):
    store.add(f"{name}.w", _uniform(rng, (d_out, d_in), d_in))
    store.add(f"{name}.b", np.zeros(d_out))


def _register_conv(store, rng, name, kernel, d_out, d_in):
    ksq = kernel * kernel
    store.add(f"{name}.w", _uniform(rng, (ksq, d_out, d_in), ksq * d_in))
    store.add(f"{name}.b", np.zeros(d_out))


def _register_car(store, rng, prefix, d, heads, w_side, car_pairs):
    side = 2 * w_side - 1
    for p in range(car_pairs):
        for sub in ("a", "b"):
            base = f"{prefix}.car{p}.{sub}"
            store.add(f"{base}.norm1.scale", np.ones(d))
            store.add(f"{base}.norm1.shift", np.zeros(d))
            for proj in ("wq", "wk", "wv", "wo"):
                store.add(f"{base}.attn.{proj}", _uniform(rng, (d, d), d))
            for b in ("bq", "bk", "bv", "bo"):
                store.add(f"{base}.attn.{b}", np.zeros(d))
            store.add(f"{base}.attn.rpb", np.zeros((side, side, heads)))
            store.add(f"{base}.norm2.scale", np.ones(d))
            store.add(f"{base}.norm2.shift", np.zeros(d))
            store.add(f"{base}.ffn.w1", _uniform(rng, (4 * d, d), d))
            store.add(f"{base}.ffn.b1", np.zeros(4 * d))
            store.add(f"{base}.ffn.w2", _uniform(rng, (d, 4 * d), 4 * d))
            store.add(f"{base}.ffn.b2", np.zeros(d))


def decoder_widths(config: ModelConfig) -> list[tuple[int, int, int]]:
    """(car_width, conv_kernel, conv_out_dim) per decoder stage, in order."""
    dims = config.stage_dims
    specs = config.stage_specs()
    out = []
    width = dims[-1]
    num = len(dims)
    for l in range(1, num + 1):
        enc_idx = num - l
        target = dims[max(num - l - 1, 0)]
        out.append((width, specs[enc_idx].kernel, target))
        if l < num:
            if config.skip_mode == "concat":
                width = target + dims[num - l - 1]
            else:
                width = target
        else:
            width = target
    return out


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ParamStore:
    """Register every parameter tensor in fixed declaration order."""
    rng = np.random.default_rng(seed)
    store = ParamStore(dtype=dtype)
    dims = config.stage_dims
    if config.num_ctx > 0:
        # Nonzero init keeps the context row off LayerNorm's zero-variance
        # point, where curvature explodes and conditioning suffers.
        store.add("ctx_token", _uniform(rng, (config.num_ctx, dims[0]), dims[0]))
    d_prev = config.input_dim
    for l, spec in enumerate(config.stage_specs()):
        _register_conv(store, rng, f"enc{l}.conv", spec.kernel, spec.out_dim, d_prev)
        if spec.w_side > 0:
            _register_car(store, rng, f"enc{l}", spec.out_dim, spec.num_heads,
                          spec.w_side, spec.car_pairs)
        d_prev = spec.out_dim
    if config.head == "unet":
        w_side = 0 if config.no_car else config.w_side
        for l, (width, kernel, target) in enumerate(decoder_widths(config), start=1):
            if w_side > 0:
                _register_car(store, rng, f"dec{l}", width, config.num_heads,
                              w_side, config.car_pairs)
            _register_conv(store, rng, f"dec{l}.conv", kernel, target, width)
        _register_linear(store, rng, "head", config.num_classes, dims[0])
    else:
        _register_linear(store, rng, "head", config.num_classes, dims[-1])
    return store


# ---------------------------------------------------------------------------
# Forward passes (shared by training tape and the public pure functions)
# ---------------------------------------------------------------------------

@dataclass
class _StageState:
    feats: Var
    ctx: Var
    coords: np.ndarray
    in_coords: np.ndarray
    rulebook: ConvRulebook


def _car_stack(tape, store, config, prefix, feats, ctx, coords, width_heads=None):
    w_side = 0 if config.no_car else config.w_side
    if w_side == 0:
        return feats, ctx
    heads = config.num_heads
    num_ctx_rows = ctx.data.shape[0]
    n = feats.data.shape[0]
    h = ops.stack_rows(tape, feats, ctx)
    shifts = ("none", "half") if config.use_shift else ("none", "none")
    for p in range(config.car_pairs):
        for sub, shift in zip(("a", "b"), shifts):
            rb = rulebook_from_coords(coords, w_side, shift, num_ctx_rows)
            h = ops.car_sub_block(tape, store, h, coords, rb,
                                  f"{prefix}.car{p}.{sub}", heads, config.use_rpb)
    return ops.split_rows(tape, h, n)


def _encode(tape, store: ParamStore, config: ModelConfig, smap: SparseMap):
    dtype = store.dtype
    feats = Var(smap.features.astype(dtype, copy=True))
    ctx = Var(smap.context.astype(dtype, copy=True))
    coords = smap.coords
    d_prev = config.input_dim
    states = []
    for l, spec in enumerate(config.stage_specs()):
        cspec = ConvSpec(spec.kernel, spec.stride, 1, d_prev, spec.out_dim)
        rb = build_conv_rulebook(coords, cspec)
        feats, ctx = ops.sac(tape, store, feats, ctx, rb,
                             f"enc{l}.conv.w", f"enc{l}.conv.b")
        out_coords = rb.out_coords
        if l == 0 and config.num_ctx > 0:
            # The learnable global token enters as the context rows right
            # before the first refinement block.
            ctx = ops.param_var(tape, store, "ctx_token")
        feats, ctx = _car_stack(tape, store, config, f"enc{l}", feats, ctx, out_coords)
        states.append(_StageState(feats, ctx, out_coords, coords, rb))
        coords = out_coords
        d_prev = spec.out_dim
    return states


def encoder_forward(smap: SparseMap, config: ModelConfig, store: ParamStore) -> EncoderOutput:
    """Run the SAC-CAR encoder and package per-stage state."""
    states = _encode(None, store, config, smap)
    maps = [SparseMap(st.coords, st.feats.data.copy(), st.ctx.data.copy())
            for st in states]
    return EncoderOutput(
        input_coords=smap.coords,
        stage_maps=maps,
        stage_globals=[st.ctx.data.copy() for st in states],
        stage_rulebooks=[st.rulebook for st in states],
    )


def _mil_logits(tape, store, config, states) -> Var:
    dims = config.stage_dims
    if config.num_ctx > 0:
        padded = [ops.pad_cols(tape, st.ctx, dims[-1]) for st in states]
        h_cls = ops.sum_rows(tape, ops.add_all(tape, padded), keepdims=True)
    else:
        # Context-free ablation: mean-pool the final stage's patch features.
        h_cls = ops.mean_rows(tape, states[-1].feats, keepdims=True)
    return ops.linear(tape, store, h_cls, "head.w", "head.b")


def mil_head(enc: EncoderOutput, config: ModelConfig, store: ParamStore) -> np.ndarray:
    """Class probabilities from the summed per-stage global tokens.

    Stages with narrower widths are zero-padded up to the final width before
    the sum. Raises MissingContext when the encoder ran without context
    tokens; the num_ctx=0 configuration must aggregate via forward_mil's
    mean-pool fallback instead.
    """
    if not enc.stage_globals or enc.stage_globals[0].shape[0] == 0:
        raise MissingContext("encoder produced no global context tokens")
    d_last = config.stage_dims[-1]
    acc = np.zeros((enc.stage_globals[0].shape[0], d_last),
                   dtype=enc.stage_globals[-1].dtype)
    for g in enc.stage_globals:
        acc[:, : g.shape[1]] += g
    h_cls = acc.sum(axis=0)
    logits = h_cls @ store["head.w"].T.astype(h_cls.dtype, copy=False) + store["head.b"]
    return softmax(logits)


def forward_mil(smap: SparseMap, config: ModelConfig, store: ParamStore,
                tape: Tape | None = None):
    """End-to-end SPAN-MIL: returns (logits Var, probs ndarray)."""
    states = _encode(tape, store, config, smap)
    logits = _mil_logits(tape, store, config, states)
    return logits, softmax(logits.data.ravel())


def _decode(tape, store, config, states, input_coords):
    num = len(states)
    feats, ctx = states[-1].feats, states[-1].ctx
    coords = states[-1].coords
    for l in range(1, num + 1):
        enc = states[num - l]
        feats, ctx = _car_stack(tape, store, config, f"dec{l}", feats, ctx, coords)
        rb_t = transpose_rulebook(enc.rulebook, enc.in_coords)
        feats, ctx = ops.sac(tape, store, feats, ctx, rb_t,
                             f"dec{l}.conv.w", f"dec{l}.conv.b")
        coords = rb_t.out_coords
        if l < num:
            skip = states[num - l - 1]
            if config.skip_mode == "concat":
                feats = ops.concat_cols(tape, feats, skip.feats)
                ctx = ops.concat_cols(tape, ctx, skip.ctx)
            elif config.skip_mode == "add":
                feats = ops.add(tape, feats, skip.feats)
                ctx = ops.add(tape, ctx, skip.ctx)
    logits = ops.linear(tape, store, feats, "head.w", "head.b")
    return logits, coords


def unet_decode(enc: EncoderOutput, config: ModelConfig, store: ParamStore):
    """Per-patch logits at input resolution; coordinates restored bit-exactly.

    Each decoder stage refines, upsamples through the transposed encoder
    rulebook, then joins the mirrored encoder features per skip_mode.
    """
    if not enc.stage_rulebooks:
        raise RulebookMissing("encoder output carries no rulebooks")
    states = []
    for l, smap in enumerate(enc.stage_maps):
        states.append(_StageState(
            feats=Var(smap.features), ctx=Var(smap.context),
            coords=smap.coords, in_coords=enc.stage_in_coords(l),
            rulebook=enc.stage_rulebooks[l]))
    logits, coords = _decode(None, store, config, states, enc.input_coords)
    return coords, logits.data


def forward_unet(smap: SparseMap, config: ModelConfig, store: ParamStore,
                 tape: Tape | None = None):
    """End-to-end SPAN-UNet: returns (logits Var (N, s), output coords)."""
    states = _encode(tape, store, config, smap)
    logits, coords = _decode(tape, store, config, states, smap.coords)
    return logits, coords


# ---------------------------------------------------------------------------
# Checkpoints: magic, version, then named tensors in declaration order
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"SPNC"
CKPT_VERSION = 1


def save_checkpoint(path, store: ParamStore):
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(store.params))]
    for name, arr in store.params.items():
        enc = name.encode("utf-8")
        parts.append(struct.pack("<I", len(enc)))
        parts.append(enc)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(np.asarray(arr.shape, dtype="<u4").tobytes())
        parts.append(arr.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[:4] != CKPT_MAGIC:
        raise BadMagic("not a checkpoint file")
    if len(data) < 12:
        raise TruncatedStream("checkpoint header incomplete")
    version, count = struct.unpack("<II", data[4:12])
    if version != CKPT_VERSION:
        raise VersionUnsupported(f"checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        if off + 4 > len(data):
            raise TruncatedStream("truncated tensor name length")
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        if off + nlen + 4 > len(data):
            raise TruncatedStream("truncated tensor header")
        name = data[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        if off + 4 * ndim > len(data):
            raise TruncatedStream("truncated tensor shape")
        shape = tuple(np.frombuffer(data, dtype="<u4", count=ndim, offset=off))
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        if off + 4 * size > len(data):
            raise TruncatedStream(f"truncated data for {name!r}")
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=off)
        out[name] = arr.reshape(shape).copy()
        off += 4 * size
    if off != len(data):
        raise TruncatedStream(f"{len(data) - off} trailing bytes")
    return out
