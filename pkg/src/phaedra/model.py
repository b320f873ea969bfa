"""The tokenizer: encoder, variant-specific bottleneck, decoder.

All variants share one convolutional backbone. Everything that depends on
the variant (latent projection, quantizers and the 1x1 channel mixer that
feeds the decoder) lives under the ``bottleneck.`` parameter prefix, so two
variants built from the same config differ only inside that scope.

Variants:

``phaedra``
    morphology (8-channel FSQ) and amplitude (1-channel, 1024-level FSQ)
    streams quantized in parallel and recombined by a 1x1 mixer.
``fsq``
    a single 8-channel FSQ stream fed straight to the decoder.
``continuous``
    no quantization.
``codebook_ablation``
    the amplitude stream is replaced by a 5-channel ``[4,4,4,4,4]`` FSQ.
``residual_ablation``
    the amplitude stream quantizes a 1-channel projection first; the
    morphology stream quantizes what that coarse estimate leaves behind.
"""

from __future__ import annotations

import contextlib
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import AttnBlock, Conv2d, Downsample, GroupNorm, Module, ModuleList, ResBlock, Upsample
from .quantizers import (
    ABLATION_SPEC,
    AMPLITUDE_SPEC,
    FSQ,
    MORPHOLOGY_SPEC,
    FactorizationSpec,
    QuantizerSpec,
    TokenGrid,
    commitment_loss,
    fsq_dequantize,
    fsq_quantize,
    phaedra_factorize,
    straight_through,
)
from .tensor import Tensor

VARIANTS = ("phaedra", "fsq", "continuous", "codebook_ablation", "residual_ablation")


@dataclass
class ModelConfig:
    variant: str = "phaedra"
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 2)
    num_res_blocks: int = 2
    embed_dim: int = 8
    latent_channels: int | None = None
    input_resolution: int = 64
    in_channels: int = 1
    attention_threshold: int = 32
    groups: int = 8
    morph_levels: tuple[int, ...] = MORPHOLOGY_SPEC.levels
    morph_scale: float = MORPHOLOGY_SPEC.scale
    amp_levels: tuple[int, ...] = AMPLITUDE_SPEC.levels
    amp_scale: float = AMPLITUDE_SPEC.scale
    ablation_levels: tuple[int, ...] = ABLATION_SPEC.levels
    ablation_scale: float = ABLATION_SPEC.scale
    beta: float = 0.25
    seed: int = 0

    def __post_init__(self):
        self.channel_multipliers = tuple(int(m) for m in self.channel_multipliers)
        self.morph_levels = tuple(int(v) for v in self.morph_levels)
        self.amp_levels = tuple(int(v) for v in self.amp_levels)
        self.ablation_levels = tuple(int(v) for v in self.ablation_levels)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if not self.channel_multipliers:
            raise ValueError("channel_multipliers must not be empty")
        if self.input_resolution % self.downsample_factor:
            raise ValueError(
                f"input resolution {self.input_resolution} is not divisible by the "
                f"downsampling factor {self.downsample_factor}"
            )
        if len(self.morph_levels) != self.embed_dim:
            raise ValueError("morphology levels must have embed_dim entries")
        for m in self.channel_multipliers:
            if (self.base_channels * m) % self.groups:
                raise ValueError("every stage width must be divisible by the group count")

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def full_scale(cls, **kw) -> "ModelConfig":
        base = dict(base_channels=128, channel_multipliers=(2, 2, 4), input_resolution=128)
        base.update(kw)
        return cls(**base)

    @property
    def downsample_factor(self) -> int:
        return 2 ** (len(self.channel_multipliers) - 1)

    @property
    def latent_resolution(self) -> int:
        return self.input_resolution // self.downsample_factor

    @property
    def morph_spec(self) -> QuantizerSpec:
        return QuantizerSpec(self.morph_levels, self.morph_scale)

    @property
    def amp_spec(self) -> QuantizerSpec:
        if self.variant == "codebook_ablation":
            return QuantizerSpec(self.ablation_levels, self.ablation_scale)
        return QuantizerSpec(self.amp_levels, self.amp_scale)

    @property
    def stream_specs(self) -> dict[str, QuantizerSpec]:
        if self.variant == "continuous":
            return {}
        if self.variant == "fsq":
            return {"fsq": self.morph_spec}
        return {"morphology": self.morph_spec, "amplitude": self.amp_spec}

    @property
    def quantized_channels(self) -> int:
        """Width C_q of the encoder latent entering the factorization."""
        if self.variant in ("fsq", "residual_ablation"):
            return self.embed_dim
        if self.variant == "codebook_ablation":
            return self.embed_dim + len(self.ablation_levels)
        return self.embed_dim + len(self.amp_levels)

    @property
    def mixer_channels(self) -> int:
        """Input width of the channel mixer (the quantized or summed latent)."""
        if self.variant in ("fsq", "residual_ablation"):
            return self.embed_dim
        return self.quantized_channels

    @property
    def decoder_channels(self) -> int:
        """Width C'_q of the recombined latent handed to the decoder (default: decoder width)."""
        return self.latent_channels or self.base_channels * self.channel_multipliers[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in known})

    def with_variant(self, variant: str) -> "ModelConfig":
        return replace(self, variant=variant)


@dataclass
class TokenizedSample:
    tokens: dict[str, TokenGrid]
    latent_shape: tuple[int, int]
    variant: str
    reconstruction: np.ndarray | None = None

    @property
    def token_count(self) -> int:
        """Tokens per sample across all streams."""
        h, w = self.latent_shape
        return len(self.tokens) * h * w


@dataclass
class BottleneckOutput:
    decoder_input: Tensor
    streams: dict[str, tuple[Tensor, np.ndarray, TokenGrid | None]] = field(default_factory=dict)
    betas: dict[str, float] = field(default_factory=dict)


# ---------------------------------------------------------------- backbone


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        base, mults, g = cfg.base_channels, cfg.channel_multipliers, cfg.groups
        self.conv_in = Conv2d(rng, cfg.in_channels, base, 3)
        self.down = ModuleList()
        in_mult = (1,) + mults
        c = base
        for level, m in enumerate(mults):
            stage = Module()
            stage.blocks = ModuleList()
            c_out = base * m
            c = base * in_mult[level]
            for _ in range(cfg.num_res_blocks):
                stage.blocks.append(ResBlock(rng, c, c_out, g))
                c = c_out
            stage.downsample = Downsample(rng, c) if level != len(mults) - 1 else None
            self.down.append(stage)
        self.mid1 = ResBlock(rng, c, c, g)
        self.attn = AttnBlock(rng, c, g) if cfg.latent_resolution <= cfg.attention_threshold else None
        self.mid2 = ResBlock(rng, c, c, g)
        self.norm_out = GroupNorm(c, g)
        self.out_channels = c

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv_in(x)
        for stage in self.down:
            for block in stage.blocks:
                h = block(h)
            if stage.downsample is not None:
                h = stage.downsample(h)
        h = self.mid1(h)
        if self.attn is not None:
            h = self.attn(h)
        h = self.mid2(h)
        return T.silu(self.norm_out(h))


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        base, mults, g = cfg.base_channels, cfg.channel_multipliers, cfg.groups
        c = base * mults[-1]
        self.in_channels = cfg.decoder_channels
        self.conv_in = Conv2d(rng, cfg.decoder_channels, c, 3) if cfg.decoder_channels != c else None
        self.mid1 = ResBlock(rng, c, c, g)
        self.attn = AttnBlock(rng, c, g) if cfg.latent_resolution <= cfg.attention_threshold else None
        self.mid2 = ResBlock(rng, c, c, g)
        self.up = ModuleList()
        for level in reversed(range(len(mults))):
            stage = Module()
            stage.blocks = ModuleList()
            c_out = base * mults[level]
            for _ in range(cfg.num_res_blocks):
                stage.blocks.append(ResBlock(rng, c, c_out, g))
                c = c_out
            stage.upsample = Upsample(rng, c) if level != 0 else None
            self.up.append(stage)
        self.norm_out = GroupNorm(c, g)
        self.conv_out = Conv2d(rng, c, cfg.in_channels, 3)

    def forward(self, h: Tensor) -> Tensor:
        if self.conv_in is not None:
            h = self.conv_in(h)
        h = self.mid1(h)
        if self.attn is not None:
            h = self.attn(h)
        h = self.mid2(h)
        for stage in self.up:
            for block in stage.blocks:
                h = block(h)
            if stage.upsample is not None:
                h = stage.upsample(h)
        return self.conv_out(T.silu(self.norm_out(h)))


# ---------------------------------------------------------------- bottlenecks


class Bottleneck(Module):
    """Latent projection, quantization and recombination for one variant."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, enc_channels: int):
        super().__init__()
        self.cfg = cfg
        self.variant = cfg.variant
        self.proj = Conv2d(rng, enc_channels, cfg.quantized_channels, 3)
        self.quantizers = {name: FSQ(spec) for name, spec in cfg.stream_specs.items()}
        v = cfg.variant
        if v in ("phaedra", "codebook_ablation"):
            self.factorization = FactorizationSpec((cfg.embed_dim, cfg.amp_spec.dim))
        if v == "residual_ablation":
            self.amp_in = Conv2d(rng, cfg.embed_dim, 1, 1)
            self.amp_out = Conv2d(rng, 1, cfg.embed_dim, 1)
            self.residual_proj = Conv2d(rng, cfg.embed_dim, cfg.embed_dim, 1)
        self.mixer = Conv2d(rng, cfg.mixer_channels, cfg.decoder_channels, 1)
        self.betas = {"morphology": cfg.beta, "fsq": cfg.beta, "amplitude": 1.0}
        self._frozen: dict | None = None

    # quantize one stream; honours frozen offsets used by gradient checks
    def _stream(self, name: str, z: Tensor, mode: str, out: BottleneckOutput) -> Tensor:
        cont = self.quantizers[name].bound(z)
        if mode == "continuous":
            out.streams[name] = (cont, cont.data, None)
            return cont
        if self._frozen is not None and name in self._frozen:
            target, offset = self._frozen[name]
            forward_value = cont.data + offset
            tokens = None
        else:
            target, tokens = fsq_quantize(z, self.quantizers[name].spec)
            target = target.astype(cont.dtype, copy=False)
            forward_value = target
            if self._frozen is not None:
                self._frozen[name] = (target, target - cont.data)
        out.streams[name] = (cont, target, tokens)
        out.betas[name] = self.betas[name]
        return straight_through(cont, forward_value)

    def forward(self, h: Tensor, mode: str = "quantized") -> BottleneckOutput:
        """``mode`` is ``quantized`` or ``continuous`` (bounded latents, no rounding)."""
        z = self.proj(h)
        out = BottleneckOutput(decoder_input=None)
        v = self.variant
        if v == "continuous":
            out.decoder_input = self.mixer(z)
        elif v == "fsq":
            out.decoder_input = self.mixer(self._stream("fsq", z, mode, out))
        elif v in ("phaedra", "codebook_ablation"):
            z_mu, z_alpha = phaedra_factorize(z, self.factorization)
            q_mu = self._stream("morphology", z_mu, mode, out)
            q_alpha = self._stream("amplitude", z_alpha, mode, out)
            axis = z.ndim - 3
            out.decoder_input = self.mixer(T.concat([q_mu, q_alpha], axis=axis))
        else:
            q_alpha = self._stream("amplitude", self.amp_in(z), mode, out)
            coarse = self.amp_out(q_alpha)
            q_mu = self._stream("morphology", z - coarse, mode, out)
            out.decoder_input = self.mixer(coarse + self.residual_proj(q_mu))
        return out

    def from_values(self, values: dict[str, np.ndarray]) -> Tensor:
        """Decoder input built from dequantized stream values."""
        dt = self.mixer.weight.dtype
        q = {k: Tensor(np.asarray(a, dtype=dt)) for k, a in values.items()}
        v = self.variant
        if v == "fsq":
            return self.mixer(q["fsq"])
        if v in ("phaedra", "codebook_ablation"):
            axis = q["morphology"].ndim - 3
            return self.mixer(T.concat([q["morphology"], q["amplitude"]], axis=axis))
        if v == "residual_ablation":
            return self.mixer(self.amp_out(q["amplitude"]) + self.residual_proj(q["morphology"]))
        raise ValueError("the continuous variant has no token streams")


class Tokenizer(Module):
    """Encoder, bottleneck and decoder assembled for one variant."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        self.encoder = Encoder(cfg, rng)
        self.decoder = Decoder(cfg, rng)
        self.bottleneck = Bottleneck(cfg, rng, self.encoder.out_channels)

    @property
    def variant(self) -> str:
        return self.config.variant

    @property
    def stream_names(self) -> tuple[str, ...]:
        return tuple(self.config.stream_specs)

    @property
    def dtype(self):
        return self.bottleneck.mixer.weight.dtype

    def _input(self, x) -> Tensor:
        from .datagen import FieldTensor

        if isinstance(x, FieldTensor):
            if not x.normalized:
                raise ValueError("field must be normalized before tokenization")
            x = x.data
        arr = x.data if isinstance(x, Tensor) else np.asarray(x)
        if arr.ndim == 3:
            arr = arr[None]
        r = self.config.input_resolution
        if arr.ndim != 4 or arr.shape[1] != self.config.in_channels or arr.shape[2:] != (r, r):
            raise ValueError(
                f"expected input of shape N x {self.config.in_channels} x {r} x {r}, got {arr.shape}"
            )
        return Tensor(arr.astype(self.dtype, copy=False))

    @contextlib.contextmanager
    def frozen_quantization(self):
        """Hold quantization offsets fixed at their first-evaluated values.

        Inside the block the forward value of each stream is its continuous
        latent plus a constant offset and the commitment targets are
        constants, which makes the training loss a smooth function of the
        parameters whose gradient is exactly what the straight-through
        backward pass computes.
        """
        self.bottleneck._frozen = {}
        try:
            yield
        finally:
            self.bottleneck._frozen = None

    def forward_train(self, x) -> tuple[Tensor, dict[str, Tensor]]:
        xt = self._input(x)
        out = self.bottleneck(self.encoder(xt))
        x_hat = self.decoder(out.decoder_input)
        rec = T.mean(T.absolute(xt - x_hat))
        zero = Tensor(np.zeros((), dtype=self.dtype))
        terms = {"rec": rec, "commit_mu": zero, "commit_alpha": zero}
        for name, (cont, target, _) in out.streams.items():
            key = "commit_alpha" if name == "amplitude" else "commit_mu"
            terms[key] = commitment_loss(cont, target, out.betas[name])
        terms["total"] = terms["rec"] + terms["commit_mu"] + terms["commit_alpha"]
        return x_hat, terms

    def encode(self, x) -> TokenizedSample:
        xt = self._input(x)
        with T.no_grad():
            out = self.bottleneck(self.encoder(xt))
        h = self.config.latent_resolution
        tokens = {name: tok for name, (_, _, tok) in out.streams.items()}
        if xt.shape[0] == 1 and np.ndim(getattr(x, "data", x)) == 3:
            tokens = {k: TokenGrid(t.indices[0], t.vocab_size, t.spec) for k, t in tokens.items()}
        return TokenizedSample(tokens, (h, h), self.variant)

    def _check_tokens(self, sample: TokenizedSample) -> None:
        specs = self.config.stream_specs
        if set(sample.tokens) != set(specs):
            raise ValueError(f"token streams {sorted(sample.tokens)} do not match variant {self.variant}")
        for name, grid in sample.tokens.items():
            if grid.spec != specs[name]:
                raise ValueError(f"stream {name!r}: token spec {grid.spec} != model spec {specs[name]}")

    def decode_values(self, values: dict[str, np.ndarray]) -> np.ndarray:
        with T.no_grad():
            return self.decoder(self.bottleneck.from_values(values)).data

    def decode(self, sample: TokenizedSample) -> np.ndarray:
        self._check_tokens(sample)
        values = {k: fsq_dequantize(g, self.dtype) for k, g in sample.tokens.items()}
        return self.decode_values(values)

    def reconstruct(self, x) -> np.ndarray:
        """``decode(encode(x))``; for the continuous variant the plain autoencoder output."""
        if self.variant == "continuous":
            xt = self._input(x)
            with T.no_grad():
                return self.decoder(self.bottleneck(self.encoder(xt)).decoder_input).data
        return self.decode(self.encode(x))

    def reconstruct_pair(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Reconstructions from quantized and from bounded-but-unrounded latents."""
        xt = self._input(x)
        with T.no_grad():
            h = self.encoder(xt)
            quant = self.decoder(self.bottleneck(h, "quantized").decoder_input).data
            cont = self.decoder(self.bottleneck(h, "continuous").decoder_input).data
        return quant, cont

    def morphological_component(self, sample: TokenizedSample) -> np.ndarray:
        """Reconstruction with the amplitude stream's value set to exactly zero."""
        if "amplitude" not in sample.tokens:
            raise ValueError("variant has no amplitude stream")
        self._check_tokens(sample)
        values = {k: fsq_dequantize(g, self.dtype) for k, g in sample.tokens.items()}
        values["amplitude"] = np.zeros_like(values["amplitude"])
        return self.decode_values(values)


def build_model(cfg: ModelConfig) -> Tokenizer:
    return Tokenizer(cfg)


def forward_residual_variant(model: Tokenizer, x) -> tuple[Tensor, dict[str, Tensor]]:
    if model.variant != "residual_ablation":
        raise ValueError("model is not the residual ablation variant")
    return model.forward_train(x)


def tokens_to_list(model: Tokenizer, sample: TokenizedSample) -> list[TokenGrid]:
    return [sample.tokens[name] for name in model.stream_names]


def tokens_from_list(model: Tokenizer, grids: Sequence[TokenGrid]) -> TokenizedSample:
    names = model.stream_names
    if len(grids) != len(names):
        raise ValueError(f"expected {len(names)} token streams, got {len(grids)}")
    h = model.config.latent_resolution
    sample = TokenizedSample(dict(zip(names, grids)), (h, h), model.variant)
    model._check_tokens(sample)
    return sample
