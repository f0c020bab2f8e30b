"""Generator and critic networks.

Both networks share the same trunk:

* three dilated 3x3 convolutions at full frequency resolution,
* a frequency aggregation block (a convolution whose kernels span every
  frequency bin, a reshape of its responses into ``maps x bands`` and a 1x1
  re-mapping),
* ten dilated 3x3 convolutions over the aggregated bands, all but the first
  self-gated.

The generator mirrors the front end with transposed convolutions; the critic
ends with a 3x3 convolution and a band-collapsing output layer that yields one
score per frame. The critic runs two independent convolution groups (complex
view and root-magnitude view) that only meet in the output layer.
"""
from __future__ import annotations

import hashlib
import io
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from mp3restore.spectral import SIGNED_SQRT, ComplexSpectrogram

CHECKPOINT_FORMAT = "mp3restore-checkpoint"
CHECKPOINT_VERSION = 1

# keeps the 4th root differentiable at silent bins
ROOT_MAG_EPS = 1e-12


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    """Layer widths and dilations; defaults reproduce the published sizes."""

    n_bins: int = 1024
    front_maps: tuple = (18, 38, 38)
    front_dilations: tuple = (1, 2, 4)
    agg_filters: int = 4096
    agg_maps: int = 128
    remap_maps: int = 256
    gated_maps: int = 128
    dilations: tuple = (1, 2, 4, 8, 16, 1, 2, 4, 8, 16)
    noise_dim: int = 64
    stochastic: bool = True
    critic_maps: int = 256

    def __post_init__(self):
        if self.agg_filters % self.agg_maps:
            raise ModelError("agg_filters must be a multiple of agg_maps")
        if len(self.dilations) < 2:
            raise ModelError("need at least two band convolutions")
        for n in self.front_maps + (self.agg_filters, self.agg_maps, self.remap_maps,
                                    self.gated_maps, self.critic_maps):
            if n % 2:
                raise ModelError("the critic runs two groups; all widths must be even")

    @property
    def bands(self) -> int:
        return self.agg_filters // self.agg_maps

    @property
    def time_shrink(self) -> int:
        return 2 * sum(self.dilations)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        for k in ("front_maps", "front_dilations", "dilations"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def tiny_arch(n_bins: int = 1024, stochastic: bool = True, **overrides) -> ArchConfig:
    """A narrow configuration of the same layer graph for desk-scale runs."""
    cfg = ArchConfig(
        n_bins=n_bins,
        front_maps=(4, 4, 4),
        front_dilations=(1, 2, 4),
        agg_filters=64,
        agg_maps=8,
        remap_maps=16,
        gated_maps=8,
        dilations=(1, 2, 1, 2, 1, 2, 1, 2, 1, 2),
        noise_dim=8,
        stochastic=stochastic,
        critic_maps=16,
    )
    return replace(cfg, **overrides)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    in_maps: int
    out_maps: int
    kernel: tuple
    dilation: int
    padding: tuple
    nonlinearity: str = "PReLU"
    groups: int = 1
    gated: bool = False
    transposed: bool = False

    def __post_init__(self):
        if self.gated and self.out_maps % (2 * self.groups):
            raise ModelError(f"{self.name}: gated layer needs an even number of raw maps per group")


def generator_specs(arch: ArchConfig, train_mode: bool = True) -> list[LayerSpec]:
    """Layer list of the generator. Train mode uses no time padding."""
    specs = []
    maps = (2,) + tuple(arch.front_maps)
    for i, d in enumerate(arch.front_dilations):
        specs.append(LayerSpec(f"Conv{i + 1}", maps[i], maps[i + 1], (3, 3), d, (d, d)))
    specs.append(LayerSpec("Conv4", maps[-1], arch.agg_filters, (arch.n_bins, 1), 1, (0, 0)))
    specs.append(LayerSpec("ReMap", arch.agg_maps, arch.remap_maps, (1, 1), 1, (0, 0)))
    in_maps = arch.remap_maps
    for i, d in enumerate(arch.dilations):
        tp = 0 if train_mode else d
        if i == 0:
            specs.append(LayerSpec("Conv5", in_maps, arch.remap_maps, (3, 3), d, (d, tp)))
            in_maps = arch.remap_maps + (arch.noise_dim if arch.stochastic else 0)
        else:
            specs.append(LayerSpec(f"Conv{5 + i}", in_maps, 2 * arch.gated_maps, (3, 3), d, (d, tp),
                                   gated=True))
            in_maps = arch.gated_maps
    specs.append(LayerSpec("DeConv4", arch.agg_filters, maps[-1], (arch.n_bins, 1), 1, (0, 0),
                           transposed=True))
    for i in reversed(range(len(arch.front_dilations))):
        d = arch.front_dilations[i]
        specs.append(LayerSpec(f"DeConv{i + 1}", maps[i + 1], maps[i], (3, 3), d, (d, d),
                               transposed=True))
    return specs


def critic_specs(arch: ArchConfig) -> list[LayerSpec]:
    """Layer list of the critic: two groups everywhere except the output layer.

    The input carries 8 maps: candidate and MP3 in signed square-root complex
    form (group one), then their root-magnitudes plus two zero maps (group two).
    """
    specs = []
    maps = (8,) + tuple(arch.front_maps)
    for i, d in enumerate(arch.front_dilations):
        specs.append(LayerSpec(f"Conv{i + 1}", maps[i], maps[i + 1], (3, 3), d, (d, d), groups=2))
    specs.append(LayerSpec("Conv4", maps[-1], arch.agg_filters, (arch.n_bins, 1), 1, (0, 0), groups=2))
    specs.append(LayerSpec("ReMap", arch.agg_maps, arch.remap_maps, (1, 1), 1, (0, 0), groups=2))
    in_maps = arch.remap_maps
    for i, d in enumerate(arch.dilations):
        if i == 0:
            specs.append(LayerSpec("Conv5", in_maps, arch.remap_maps, (3, 3), d, (d, d), groups=2))
            in_maps = arch.remap_maps
        else:
            specs.append(LayerSpec(f"Conv{5 + i}", in_maps, 2 * arch.gated_maps, (3, 3), d, (d, d),
                                   groups=2, gated=True))
            in_maps = arch.gated_maps
    n = 5 + len(arch.dilations)
    specs.append(LayerSpec(f"Conv{n}", arch.gated_maps, arch.critic_maps, (3, 3), 1, (1, 1), groups=2))
    specs.append(LayerSpec(f"Conv{n + 1}", arch.critic_maps, 1, (arch.bands, 1), 1, (0, 0),
                           nonlinearity="none"))
    return specs


# ---------------------------------------------------------------------------
# building blocks


def prelu(x: torch.Tensor, slopes: torch.Tensor) -> torch.Tensor:
    """Parametric ReLU with one slope per channel (dim 1)."""
    slopes = torch.as_tensor(slopes, dtype=x.dtype)
    if slopes.ndim == 0:
        return torch.where(x > 0, x, slopes * x)
    shape = [1, -1] + [1] * (x.ndim - 2)
    return torch.where(x > 0, x, slopes.reshape(shape) * x)


def self_gate(h: torch.Tensor, slopes: torch.Tensor, groups: int = 1) -> torch.Tensor:
    """Split raw maps per group into (activation, gate) halves and combine them.

    Within each group the first half of the maps goes through the PReLU, the
    second half through a sigmoid; the result keeps the group layout.
    """
    b, c = h.shape[:2]
    if c % (2 * groups):
        raise ModelError(f"cannot self-gate {c} maps in {groups} groups")
    s = c // (2 * groups)
    hg = h.reshape(b, groups, 2, s, *h.shape[2:])
    act = hg[:, :, 0].reshape(b, groups * s, *h.shape[2:])
    gate = hg[:, :, 1].reshape(b, groups * s, *h.shape[2:])
    return prelu(act, slopes) * torch.sigmoid(gate)


def to_bands(x: torch.Tensor, maps: int, groups: int = 1) -> torch.Tensor:
    """Reshape ``(B, C, 1, T)`` responses into ``(B, maps, C // maps, T)``.

    Within a group of ``C/groups`` channels, channel ``c`` goes to
    ``(map = c mod m, band = c // m)`` with ``m = maps / groups``; the map index
    is offset by the group so the groups stay separate.
    """
    b, c, one, t = x.shape
    if one != 1:
        raise ModelError(f"expected a collapsed frequency axis, got {x.shape}")
    m = maps // groups
    bands = c // maps
    x = x.reshape(b, groups, bands, m, t).permute(0, 1, 3, 2, 4)
    return x.reshape(b, maps, bands, t)


def from_bands(x: torch.Tensor, groups: int = 1) -> torch.Tensor:
    """Exact inverse of :func:`to_bands`."""
    b, maps, bands, t = x.shape
    m = maps // groups
    x = x.reshape(b, groups, m, bands, t).permute(0, 1, 3, 2, 4)
    return x.reshape(b, maps * bands, 1, t)


class ConvLayer(nn.Module):
    """One table row: (transposed) convolution, then PReLU or self-gating."""

    def __init__(self, spec: LayerSpec, time_padding_mode: str = "zeros", fan_in: int | None = None):
        super().__init__()
        self.spec = spec
        self.time_padding_mode = time_padding_mode
        kh, kw = spec.kernel
        if spec.transposed:
            self.conv = nn.ConvTranspose2d(spec.in_maps, spec.out_maps, spec.kernel, padding=spec.padding,
                                           dilation=spec.dilation, groups=spec.groups)
        else:
            self.conv = nn.Conv2d(spec.in_maps, spec.out_maps, spec.kernel, dilation=spec.dilation,
                                  groups=spec.groups)
        self.fan_in = fan_in or (spec.in_maps // spec.groups) * kh * kw
        act_maps = spec.out_maps // 2 if spec.gated else spec.out_maps
        self.prelu = nn.PReLU(act_maps, init=0.25) if spec.nonlinearity == "PReLU" else None

    def forward(self, x, trace=None):
        if not self.spec.transposed:
            fp, tp = self.spec.padding
            if tp:
                mode = "circular" if self.time_padding_mode == "circular" else "constant"
                x = F.pad(x, (tp, tp, 0, 0), mode=mode)
            if fp:
                x = F.pad(x, (0, 0, fp, fp))
        h = self.conv(x)
        _record(trace, self.spec.name, h)
        if self.spec.gated:
            h = self_gate(h, self.prelu.weight, self.spec.groups)
            _record(trace, "SelfGating", h)
            return h
        if self.prelu is not None:
            return prelu(h, self.prelu.weight)
        return h


def gated_conv(x: torch.Tensor, layer: ConvLayer) -> torch.Tensor:
    if not layer.spec.gated:
        raise ModelError(f"{layer.spec.name} is not a self-gating layer")
    return layer(x)


def _record(trace, name, x):
    if trace is not None:
        trace.append((name, tuple(x.shape[1:])))


class FrequencyAggregation(nn.Module):
    """Full-height convolution, band reshape, 1x1 re-mapping."""

    def __init__(self, conv4: LayerSpec, remap: LayerSpec, n_bins: int, agg_maps: int):
        super().__init__()
        self.n_bins = n_bins
        self.agg_maps = agg_maps
        self.groups = conv4.groups
        self.conv4 = ConvLayer(conv4)
        self.remap = ConvLayer(remap)

    def forward(self, x, trace=None):
        if x.shape[2] != self.n_bins:
            raise ModelError(f"frequency aggregation expects {self.n_bins} bins, got {x.shape[2]}")
        h = self.conv4(x, trace)
        h = to_bands(h, self.agg_maps, self.groups)
        _record(trace, "Reshape1", h)
        return self.remap(h, trace)


def frequency_aggregate(x: torch.Tensor, block: FrequencyAggregation) -> torch.Tensor:
    return block(x)


class Generator(nn.Module):
    def __init__(self, arch: ArchConfig = ArchConfig()):
        super().__init__()
        self.arch = arch
        train = generator_specs(arch, train_mode=True)
        infer = generator_specs(arch, train_mode=False)
        self.specs_train, self.specs_infer = train, infer
        by = {s.name: s for s in train}
        nf = len(arch.front_dilations)
        self.front = nn.ModuleList(ConvLayer(by[f"Conv{i + 1}"]) for i in range(nf))
        self.aggregate = FrequencyAggregation(by["Conv4"], by["ReMap"], arch.n_bins, arch.agg_maps)
        self.band_convs = nn.ModuleList(ConvLayer(by[f"Conv{5 + i}"]) for i in range(len(arch.dilations)))
        self.deconv4 = ConvLayer(by["DeConv4"], fan_in=arch.agg_filters)
        self.back = nn.ModuleList(ConvLayer(by[f"DeConv{i + 1}"]) for i in reversed(range(nf)))

    @property
    def stochastic(self) -> bool:
        return self.arch.stochastic

    def forward(self, y, z=None, train_mode: bool = True, trace=None):
        arch = self.arch
        if y.ndim == 3:
            y = y.unsqueeze(0)
        if z is not None and not arch.stochastic:
            raise ModelError("deterministic generator does not take a noise input")
        if z is None and arch.stochastic:
            raise ModelError("stochastic generator needs a noise input z")
        if train_mode and y.shape[-1] <= arch.time_shrink:
            raise ModelError(f"train mode needs more than {arch.time_shrink} frames, got {y.shape[-1]}")
        _record(trace, "Input", y)
        h = y
        for layer in self.front:
            h = layer(h, trace)
        h = self.aggregate(h, trace)
        for i, layer in enumerate(self.band_convs):
            if not train_mode:
                h = F.pad(h, (layer.spec.dilation,) * 2)
            h = layer(h, trace)
            if i == 0 and arch.stochastic:
                z = torch.as_tensor(z, dtype=h.dtype)
                if z.ndim == 1:
                    z = z.unsqueeze(0).expand(h.shape[0], -1)
                if z.shape != (h.shape[0], arch.noise_dim):
                    raise ModelError(f"noise must be ({h.shape[0]}, {arch.noise_dim}), got {tuple(z.shape)}")
                tiled = z[:, :, None, None].expand(-1, -1, h.shape[2], h.shape[3])
                h = torch.cat([h, tiled], dim=1)
                _record(trace, "NoiseConcat", h)
        h = from_bands(h)
        _record(trace, "Reshape2", h)
        h = self.deconv4(h, trace)
        for layer in self.back:
            h = layer(h, trace)
        _record(trace, "Output", h)
        return h


def root_magnitude_view(s: torch.Tensor) -> torch.Tensor:
    """Square root of ``|h|`` computed from signed square-root components.

    With ``s = sign(a) sqrt|a|`` we have ``sqrt|h| = (s_re^4 + s_im^4)^(1/4)``.
    """
    return (s[:, 0:1] ** 4 + s[:, 1:2] ** 4 + ROOT_MAG_EPS) ** 0.25


class Critic(nn.Module):
    def __init__(self, arch: ArchConfig = ArchConfig(), time_padding_mode: str = "zeros"):
        super().__init__()
        self.arch = arch
        specs = critic_specs(arch)
        self.specs = specs
        by = {s.name: s for s in specs}
        nf = len(arch.front_dilations)
        self.front = nn.ModuleList(ConvLayer(by[f"Conv{i + 1}"], time_padding_mode) for i in range(nf))
        self.aggregate = FrequencyAggregation(by["Conv4"], by["ReMap"], arch.n_bins, arch.agg_maps)
        self.band_convs = nn.ModuleList(
            ConvLayer(by[f"Conv{5 + i}"], time_padding_mode) for i in range(len(arch.dilations)))
        n = 5 + len(arch.dilations)
        self.head = ConvLayer(by[f"Conv{n}"], time_padding_mode)
        self.out = ConvLayer(by[f"Conv{n + 1}"])

    def assemble_input(self, candidate, mp3):
        zeros = torch.zeros_like(candidate)
        return torch.cat([candidate, mp3, root_magnitude_view(candidate), root_magnitude_view(mp3), zeros],
                         dim=1)

    def forward(self, candidate, mp3, trace=None):
        """Per-frame scores of shape ``(B, T)``."""
        if candidate.ndim == 3:
            candidate, mp3 = candidate.unsqueeze(0), mp3.unsqueeze(0)
        if candidate.shape != mp3.shape:
            raise ModelError(f"candidate {tuple(candidate.shape)} and mp3 {tuple(mp3.shape)} differ")
        h = self.assemble_input(candidate, mp3)
        _record(trace, "Input", h)
        for layer in self.front:
            h = layer(h, trace)
        h = self.aggregate(h, trace)
        for i, layer in enumerate(self.band_convs):
            out = layer(h, trace)
            if i > 1:
                out = out + h  # residual between consecutive gated outputs
            h = out
        h = self.head(h, trace)
        h = self.out(h, trace)
        return h[:, 0, 0, :]


def _as_tensor_checked(s):
    if isinstance(s, ComplexSpectrogram):
        if s.scaling != SIGNED_SQRT:
            raise ModelError("networks operate on signed_sqrt-scaled spectrograms")
        return torch.as_tensor(s.data)
    return s


def generator_forward(G: Generator, y, z=None, train_mode: bool = True):
    y = _as_tensor_checked(y)
    return G(y.to(next(G.parameters()).dtype), z, train_mode=train_mode)


def critic_forward(D: Critic, candidate, mp3):
    candidate, mp3 = _as_tensor_checked(candidate), _as_tensor_checked(mp3)
    dtype = next(D.parameters()).dtype
    return D(candidate.to(dtype), mp3.to(dtype))


def he_init(model: nn.Module, seed: int) -> nn.Module:
    """Fan-in scaled normal weights, zero biases, PReLU slopes 0.25."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, ConvLayer):
                w = module.conv.weight
                std = (2.0 / module.fan_in) ** 0.5
                w.copy_(torch.randn(w.shape, generator=gen, dtype=w.dtype) * std)
                module.conv.bias.zero_()
                if module.prelu is not None:
                    module.prelu.weight.fill_(0.25)
    return model


def build_models(arch: ArchConfig, seed: int, dtype=torch.float32) -> tuple[Generator, Critic]:
    G = he_init(Generator(arch), seed).to(dtype)
    D = he_init(Critic(arch), seed + 1).to(dtype)
    return G, D


# ---------------------------------------------------------------------------
# layer tables


def _size(shape) -> str:
    return " x ".join(str(s) for s in shape)


def output_sizes(specs: list[LayerSpec], arch: ArchConfig, role: str, n_frames: int) -> list[tuple]:
    """Analytic (row name, output shape) pairs, including reshape/gating rows."""
    rows = []
    t = n_frames
    f = arch.n_bins
    c = 8 if role == "critic" else 2
    rows.append(("Input", (c, f, t)))
    for s in specs:
        kh, kw = s.kernel
        if s.transposed:
            if s.name == "DeConv4":
                rows.append(("Reshape2", (arch.agg_filters, 1, t)))
                f = arch.n_bins
            rows.append((s.name, (s.out_maps, f, t)))
            continue
        f = f + 2 * s.padding[0] - s.dilation * (kh - 1)
        t = t + 2 * s.padding[1] - s.dilation * (kw - 1)
        rows.append((s.name, (s.out_maps, f, t)))
        if s.name == "Conv4":
            f = arch.bands
            rows.append(("Reshape1", (arch.agg_maps, f, t)))
        if s.name == "Conv5" and role == "generator" and arch.stochastic:
            rows.append(("NoiseConcat", (arch.remap_maps + arch.noise_dim, f, t)))
        if s.gated:
            rows.append(("SelfGating", (s.out_maps // 2, f, t)))
    if role == "generator":
        rows.append(("Output", rows[-1][1]))
    return rows


def layer_table(arch: ArchConfig, role: str, n_frames: int, train_mode: bool = True) -> str:
    """Text rendering of the layer list; stable, suitable for golden comparison."""
    if role == "generator":
        specs = generator_specs(arch, train_mode)
    elif role == "critic":
        specs = critic_specs(arch)
    else:
        raise ModelError(f"unknown role {role!r}")
    by = {s.name: s for s in specs}
    header = "layer | in | out | kernel | dilation | padding | nonlinearity | groups | output"
    lines = [f"# {role} T={n_frames} {'train' if train_mode else 'padded'}", header]
    for name, shape in output_sizes(specs, arch, role, n_frames):
        s = by.get(name)
        if s is None:
            lines.append(f"{name} | - | - | - | - | - | - | - | {_size(shape)}")
            continue
        lines.append(" | ".join([
            name, str(s.in_maps), str(s.out_maps), f"{s.kernel[0]}x{s.kernel[1]}", str(s.dilation),
            f"{s.padding[0]},{s.padding[1]}", s.nonlinearity, str(s.groups), _size(shape),
        ]))
    return "\n".join(lines) + "\n"


def golden_path(name: str) -> Path:
    return Path(__file__).parent / "golden" / name


# ---------------------------------------------------------------------------
# checkpoints


def state_digest(*modules: nn.Module) -> str:
    h = hashlib.sha256()
    for m in modules:
        for k, v in m.state_dict().items():
            h.update(k.encode())
            h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


@dataclass
class Checkpoint:
    arch: ArchConfig
    generator: dict
    critic: dict | None = None
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, G: Generator, D: Critic | None = None, **extra) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": G.arch.to_dict(),
        "tables": {
            "generator": layer_table(G.arch, "generator", G.arch.time_shrink + 1),
            "critic": layer_table(G.arch, "critic", 1),
        },
        "generator": G.state_dict(),
        "critic": D.state_dict() if D is not None else None,
        "id": state_digest(G),
        **extra,
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path, with_critic: bool = True):
    """Load ``(G, D, payload)``; refuses files whose layer tables disagree with the code."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ModelError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    arch = ArchConfig.from_dict(payload["arch"])
    expected = {
        "generator": layer_table(arch, "generator", arch.time_shrink + 1),
        "critic": layer_table(arch, "critic", 1),
    }
    if payload["tables"] != expected:
        raise ModelError(f"{path}: layer table mismatch, refusing to load weights")
    dtype = next(iter(payload["generator"].values())).dtype
    G = Generator(arch).to(dtype)
    G.load_state_dict(payload["generator"])
    D = None
    if with_critic and payload.get("critic") is not None:
        D = Critic(arch).to(dtype)
        D.load_state_dict(payload["critic"])
    return G, D, payload
