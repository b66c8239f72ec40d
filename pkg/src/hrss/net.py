"""High-resolution multi-branch backbone built from DVSS blocks.

Stem (two stride-2 3x3 convs) -> bottleneck stage -> stages 2..4, each adding
one branch at half the resolution of the previous lowest one.  Every module
runs its branches' blocks and then exchanges features across branches.

Normalization outside the blocks is a channel LayerNorm (no running
statistics), and the classification head follows the incremental
bottleneck/downsample aggregation used by HRNet classifiers.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from . import nn
from .blocks import ABLATIONS, BlockConfig, DVSSBlock, apply_ablation
from .functional import conv2d, global_avg_pool, layernorm2d, linear, relu, upsample_nearest
from .sscan import DEFAULT_CHUNK
from .tensor import Tensor

STRIDE = 32


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "S"
    channels: tuple[int, ...] = (32, 64, 128, 256)
    blocks: tuple[int, ...] = (2, 2, 2, 2)
    modules: tuple[int, ...] = (1, 1, 4, 2)
    ssm_ratio: tuple[int, ...] = (2, 2, 2, 2)
    mlp_ratio: tuple[int, ...] = (2, 2, 2, 2)
    height: int = 256
    width: int = 192
    state_dim: int = 1
    dcn_groups: int = 4
    multidw_groups: int = 4
    use_dcn: bool = True
    use_multidw: bool = True
    multidw_in_ffn: bool = False
    multidw_uniform: bool = False
    chunk: int = DEFAULT_CHUNK
    stem_channels: int = 64
    stage1_width: int = 64
    head_channels: tuple[int, ...] = (32, 64, 128, 256)
    head_features: int = 2048
    num_classes: int = 1000

    def __post_init__(self):
        for name in ("channels", "blocks", "modules", "ssm_ratio", "mlp_ratio", "head_channels"):
            value = tuple(int(v) for v in getattr(self, name))
            if len(value) != 4:
                raise ValueError(f"{name} needs 4 entries, got {len(value)}")
            object.__setattr__(self, name, value)

    def block_config(self, branch: int) -> BlockConfig:
        return BlockConfig(
            channels=self.channels[branch],
            ssm_ratio=self.ssm_ratio[branch],
            mlp_ratio=self.mlp_ratio[branch],
            state_dim=self.state_dim,
            dcn_groups=self.dcn_groups,
            multidw_groups=self.multidw_groups,
            use_dcn=self.use_dcn,
            use_multidw=self.use_multidw,
            multidw_in_ffn=self.multidw_in_ffn,
            multidw_uniform=self.multidw_uniform,
            chunk=self.chunk,
        ).validate()

    def branch_resolution(self, branch: int, height: int | None = None, width: int | None = None):
        h = self.height if height is None else height
        w = self.width if width is None else width
        return h // 2 ** (branch + 2), w // 2 ** (branch + 2)

    def with_ablation(self, name: str) -> "ModelConfig":
        b = apply_ablation(self.block_config(0), name)
        return replace(self, use_dcn=b.use_dcn, use_multidw=b.use_multidw,
                       multidw_in_ffn=b.multidw_in_ffn, multidw_uniform=b.multidw_uniform)

    # -- structured config file
    def to_dict(self) -> dict:
        d = asdict(self)
        return {
            "variant": d["variant"],
            "topology": {k: list(d[k]) for k in ("channels", "blocks", "modules", "ssm_ratio", "mlp_ratio")},
            "block": {k: d[k] for k in ("state_dim", "dcn_groups", "multidw_groups", "use_dcn", "use_multidw",
                                        "multidw_in_ffn", "multidw_uniform", "chunk")},
            "input": {"height": d["height"], "width": d["width"]},
            "stem": {"stem_channels": d["stem_channels"], "stage1_width": d["stage1_width"]},
            "head": {"head_channels": list(d["head_channels"]), "head_features": d["head_features"],
                     "num_classes": d["num_classes"]},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        flat: dict = {}
        base = preset(data["variant"]) if data.get("variant") in PRESETS else cls()
        for key, value in data.items():
            if isinstance(value, dict):
                flat.update(value)
            else:
                flat[key] = value
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(flat) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return replace(base, **flat)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def loads(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "ModelConfig":
        return cls.loads(Path(path).read_text())


PRESETS = {
    "S": ModelConfig(variant="S", channels=(32, 64, 128, 256)),
    "B": ModelConfig(variant="B", channels=(80, 160, 320, 640)),
}


def preset(variant: str) -> ModelConfig:
    try:
        return PRESETS[variant]
    except KeyError:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(PRESETS)}") from None


# ---------------------------------------------------------------------------
# layers


class ConvNorm(nn.Module):
    """Bias-free conv, channel LayerNorm, optional ReLU."""

    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1, act: bool = True, norm: bool = True, rng=None):
        self.cin, self.cout, self.k, self.stride, self.act = cin, cout, k, stride, act
        self.w = nn.fan_in(rng, (cout, cin, k, k), cin * k * k, gain=2 ** 0.5)
        self.norm = norm
        if norm:
            self.g = nn.ones(rng, (cout,))
            self.b = nn.zeros(rng, (cout,))

    def forward(self, x: Tensor) -> Tensor:
        y = conv2d(x, self.w, stride=self.stride, pad=self.k // 2)
        if self.norm:
            y = layernorm2d(y, self.g, self.b)
        return relu(y) if self.act else y

    def macs(self, h: int, w: int) -> int:
        return self.cout * self.cin * self.k * self.k * (h // self.stride) * (w // self.stride)


class Stem(nn.Module):
    def __init__(self, channels: int = 64, rng=None):
        self.conv1 = ConvNorm(3, channels, 3, 2, rng=rng)
        self.conv2 = ConvNorm(channels, channels, 3, 2, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        if c != 3:
            raise ValueError(f"stem expects 3 input channels, got {c}")
        if h % STRIDE or w % STRIDE:
            raise ValueError(f"input height and width must be multiples of {STRIDE}, got {h}x{w}")
        return self.conv2(self.conv1(x))

    def macs(self, h: int, w: int) -> int:
        return self.conv1.macs(h, w) + self.conv2.macs(h // 2, w // 2)


class Bottleneck(nn.Module):
    """1x1 reduce -> 3x3 -> 1x1 expand (x4), residual, ReLU."""

    expansion = 4

    def __init__(self, cin: int, planes: int, rng=None):
        cout = planes * self.expansion
        self.conv1 = ConvNorm(cin, planes, 1, rng=rng)
        self.conv2 = ConvNorm(planes, planes, 3, rng=rng)
        self.conv3 = ConvNorm(planes, cout, 1, act=False, rng=rng)
        self.down = ConvNorm(cin, cout, 1, act=False, rng=rng) if cin != cout else None

    def forward(self, x: Tensor) -> Tensor:
        res = x if self.down is None else self.down(x)
        return relu(self.conv3(self.conv2(self.conv1(x))) + res)

    def macs(self, h: int, w: int) -> int:
        total = self.conv1.macs(h, w) + self.conv2.macs(h, w) + self.conv3.macs(h, w)
        return total + (self.down.macs(h, w) if self.down is not None else 0)


class Stage1(nn.Module):
    def __init__(self, cin: int, width: int, num_blocks: int, rng=None):
        self.blocks = [Bottleneck(cin if i == 0 else width * Bottleneck.expansion, width, rng=rng)
                       for i in range(num_blocks)]
        self.out_channels = width * Bottleneck.expansion

    def forward(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return x

    def macs(self, h: int, w: int) -> int:
        return sum(b.macs(h, w) for b in self.blocks)


class Transition(nn.Module):
    """Adjust existing branches' channels; spawn a half-resolution branch from
    the lowest-resolution one."""

    def __init__(self, prev: tuple[int, ...], nxt: tuple[int, ...], rng=None):
        self.prev, self.nxt = tuple(prev), tuple(nxt)
        self.adjust = [ConvNorm(prev[i], nxt[i], 3, rng=rng) if prev[i] != nxt[i] else None
                       for i in range(len(prev))]
        self.spawn = ConvNorm(prev[-1], nxt[-1], 3, 2, rng=rng)

    def forward(self, xs: list[Tensor]) -> list[Tensor]:
        out = [x if conv is None else conv(x) for x, conv in zip(xs, self.adjust)]
        out.append(self.spawn(xs[-1]))
        return out

    def macs(self, sizes: list[tuple[int, int]]) -> int:
        total = sum(conv.macs(*hw) for conv, hw in zip(self.adjust, sizes) if conv is not None)
        return total + self.spawn.macs(*sizes[-1])


class DownStep(nn.Module):
    """Stride-2 3x3 depthwise conv + norm, then 1x1 conv + norm (+ ReLU)."""

    def __init__(self, cin: int, cout: int, act: bool, norm: bool = True, rng=None):
        self.dw = ConvNormDW(cin, 2, norm=norm, rng=rng)
        self.pw = ConvNorm(cin, cout, 1, act=act, norm=norm, rng=rng)
        self.stride = 2

    def forward(self, x: Tensor) -> Tensor:
        return self.pw(self.dw(x))

    def macs(self, h: int, w: int) -> int:
        return self.dw.macs(h, w) + self.pw.macs(h // 2, w // 2)


class ConvNormDW(nn.Module):
    def __init__(self, channels: int, stride: int = 1, norm: bool = True, rng=None):
        self.channels, self.stride, self.norm = channels, stride, norm
        self.w = nn.fan_in(rng, (channels, 1, 3, 3), 9)
        if norm:
            self.g = nn.ones(rng, (channels,))
            self.b = nn.zeros(rng, (channels,))

    def forward(self, x: Tensor) -> Tensor:
        y = conv2d(x, self.w, stride=self.stride, pad=1, groups=self.channels)
        return layernorm2d(y, self.g, self.b) if self.norm else y

    def macs(self, h: int, w: int) -> int:
        return self.channels * 9 * (h // self.stride) * (w // self.stride)


class Fuse(nn.Module):
    """Output branch i = sum_j resample_{j->i}(x_j).

    Up (j > i): 1x1 conv + norm, nearest upsample.  Down (j < i): i - j
    stride-2 steps (depthwise 3x3 then pointwise), ReLU between steps and none
    after the last.  Identity for j = i.
    """

    def __init__(self, channels: tuple[int, ...], norm: bool = True, rng=None):
        self.channels = tuple(channels)
        nb = len(channels)
        self.paths: list[list] = []
        for i in range(nb):
            row = []
            for j in range(nb):
                if j == i:
                    row.append(None)
                elif j > i:
                    row.append([ConvNorm(channels[j], channels[i], 1, act=False, norm=norm, rng=rng)])
                else:
                    steps = [DownStep(channels[j], channels[j], act=True, norm=norm, rng=rng)
                             for _ in range(i - j - 1)]
                    steps.append(DownStep(channels[j], channels[i], act=False, norm=norm, rng=rng))
                    row.append(steps)
            self.paths.append(row)

    def children(self):
        for i, row in enumerate(self.paths):
            for j, steps in enumerate(row):
                for s, conv in enumerate(steps or ()):
                    yield f"paths.{i}.{j}.{s}", conv

    def resample(self, x: Tensor, i: int, j: int) -> Tensor:
        steps = self.paths[i][j]
        if steps is None:
            return x
        for conv in steps:
            x = conv(x)
        return upsample_nearest(x, 2 ** (j - i)) if j > i else x

    def forward(self, xs: list[Tensor]) -> list[Tensor]:
        if len(xs) != len(self.channels):
            raise ValueError(f"fuse expects {len(self.channels)} branches, got {len(xs)}")
        if len(xs) == 1:
            return list(xs)
        out = []
        for i in range(len(xs)):
            acc = None
            for j, x in enumerate(xs):
                y = self.resample(x, i, j)
                acc = y if acc is None else acc + y
            out.append(acc)
        return out

    def macs(self, sizes: list[tuple[int, int]]) -> int:
        total = 0
        for i, row in enumerate(self.paths):
            for j, steps in enumerate(row):
                if steps is None:
                    continue
                h, w = sizes[j]
                for conv in steps:
                    total += conv.macs(h, w)
                    h, w = h // conv.stride, w // conv.stride
        return total


def fuse(xs: list[Tensor], layer: Fuse) -> list[Tensor]:
    return layer(xs)


class HRModule(nn.Module):
    def __init__(self, cfg: ModelConfig, num_branches: int, num_blocks: int, rng=None):
        self.branches = [[DVSSBlock(cfg.block_config(b), rng=rng) for _ in range(num_blocks)]
                         for b in range(num_branches)]
        self.fuse = Fuse(cfg.channels[:num_branches], rng=rng) if num_branches > 1 else None

    def forward(self, xs: list[Tensor]) -> list[Tensor]:
        out = []
        for x, blocks in zip(xs, self.branches):
            for blk in blocks:
                x = blk(x)
            out.append(x)
        return out if self.fuse is None else self.fuse(out)

    def macs(self, sizes: list[tuple[int, int]]) -> int:
        total = sum(block_macs(blk, *hw) for blocks, hw in zip(self.branches, sizes) for blk in blocks)
        return total + (self.fuse.macs(sizes) if self.fuse is not None else 0)


class HRVMamba(nn.Module):
    """Backbone returning the four branch feature maps, high to low resolution."""

    def __init__(self, cfg: ModelConfig, rng=None):
        self.cfg = cfg
        self.stem = Stem(cfg.stem_channels, rng=rng)
        self.stage1 = Stage1(cfg.stem_channels, cfg.stage1_width, cfg.blocks[0], rng=rng)
        self.transitions = []
        self.stages = []
        prev = (self.stage1.out_channels,)
        for s in range(1, 4):
            nxt = cfg.channels[: s + 1]
            self.transitions.append(Transition(prev, nxt, rng=rng))
            self.stages.append([HRModule(cfg, s + 1, cfg.blocks[s], rng=rng) for _ in range(cfg.modules[s])])
            prev = nxt

    def forward(self, x: Tensor) -> list[Tensor]:
        xs = [self.stage1(self.stem(x))]
        for trans, modules in zip(self.transitions, self.stages):
            xs = trans(xs)
            for mod in modules:
                xs = mod(xs)
        return xs

    def stage_outputs(self, x: Tensor) -> list[list[Tensor]]:
        """Branch features after stage 1 and after each later stage."""
        xs = [self.stage1(self.stem(x))]
        seen = [xs]
        for trans, modules in zip(self.transitions, self.stages):
            xs = trans(xs)
            for mod in modules:
                xs = mod(xs)
            seen.append(xs)
        return seen

    def macs(self, h: int, w: int) -> int:
        total = self.stem.macs(h, w) + self.stage1.macs(h // 4, w // 4)
        for s, (trans, modules) in enumerate(zip(self.transitions, self.stages), start=1):
            prev_sizes = [(h // 2 ** (b + 2), w // 2 ** (b + 2)) for b in range(s)]
            total += trans.macs(prev_sizes)
            sizes = [(h // 2 ** (b + 2), w // 2 ** (b + 2)) for b in range(s + 1)]
            total += sum(m.macs(sizes) for m in modules)
        return total


class ClassificationHead(nn.Module):
    """Per-branch bottleneck, then stride-2 downsample-and-add from high to low
    resolution, 1x1 expansion, global pool, linear classifier."""

    def __init__(self, cfg: ModelConfig, rng=None):
        hc = cfg.head_channels
        self.incre = [Bottleneck(cfg.channels[i], hc[i], rng=rng) for i in range(4)]
        wide = [c * Bottleneck.expansion for c in hc]
        self.downsamp = [ConvNorm(wide[i], wide[i + 1], 3, 2, rng=rng) for i in range(3)]
        self.final = ConvNorm(wide[-1], cfg.head_features, 1, rng=rng)
        self.fc_w = nn.fan_in(rng, (cfg.head_features, cfg.num_classes), cfg.head_features)
        self.fc_b = nn.zeros(rng, (cfg.num_classes,))

    def forward(self, xs: list[Tensor]) -> Tensor:
        y = self.incre[0](xs[0])
        for i in range(3):
            y = self.incre[i + 1](xs[i + 1]) + self.downsamp[i](y)
        y = global_avg_pool(self.final(y))
        return linear(y, self.fc_w, self.fc_b)

    def macs(self, sizes: list[tuple[int, int]]) -> int:
        total = sum(b.macs(*hw) for b, hw in zip(self.incre, sizes))
        total += sum(d.macs(*hw) for d, hw in zip(self.downsamp, sizes[:3]))
        total += self.final.macs(*sizes[3])
        return total + self.fc_w.shape[0] * self.fc_w.shape[1]


class HRVMambaClassifier(nn.Module):
    def __init__(self, cfg: ModelConfig, rng=None):
        self.cfg = cfg
        self.backbone = HRVMamba(cfg, rng=rng)
        self.head = ClassificationHead(cfg, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.backbone(x))

    def macs(self, h: int, w: int) -> int:
        sizes = [(h // 2 ** (b + 2), w // 2 ** (b + 2)) for b in range(4)]
        return self.backbone.macs(h, w) + self.head.macs(sizes)


def forward(x: Tensor, model: HRVMamba) -> list[Tensor]:
    return model(x)


def classify(branches: list[Tensor], head: ClassificationHead) -> Tensor:
    return head(branches)


# ---------------------------------------------------------------------------
# accounting


def block_macs(blk: DVSSBlock, h: int, w: int) -> int:
    """Multiply-accumulates of one block on an h x w map.

    Counted: every linear/conv contraction, the scan (2 per token, channel and state
    across recurrence and readout) and deformable sampling (4 bilinear taps + 1
    modulation per point).  Normalization and activations are not counted.
    """
    cfg = blk.cfg
    l = h * w
    c, d, n = cfg.channels, cfg.inner, cfg.state_dim
    mixer = blk.mixer
    total = l * c * 2 * d + l * d * c                    # in/out projections
    if cfg.use_dcn:
        gk = cfg.dcn_groups * 9
        total += l * d * 9 + l * d * 3 * gk              # offset predictor
        total += l * d * 9 * 5                           # sampling
    else:
        total += l * d * 9
    for p in mixer.scans:
        total += l * d * 2 * n + 2 * l * d * p.rank     # B, C and low-rank delta projections
        total += 2 * l * d * n
    if blk.mdw is not None:
        total += l * sum(cfg.channels // cfg.multidw_groups * k * k for k in blk.mdw.kernel_sizes)
    hid = cfg.hidden
    total += 2 * l * c * hid
    if blk.ffn.mdw is not None:
        total += l * sum(hid // cfg.multidw_groups * k * k for k in blk.ffn.mdw.kernel_sizes)
    return total


def count_params(cfg: ModelConfig, classifier: bool = True) -> int:
    model = HRVMambaClassifier(cfg) if classifier else HRVMamba(cfg)
    return model.num_parameters()


def count_flops(cfg: ModelConfig, height: int | None = None, width: int | None = None,
                classifier: bool = True) -> int:
    """Multiply-accumulate count of a forward pass at ``height x width``."""
    h = cfg.height if height is None else height
    w = cfg.width if width is None else width
    if h % STRIDE or w % STRIDE:
        raise ValueError(f"input height and width must be multiples of {STRIDE}, got {h}x{w}")
    model = HRVMambaClassifier(cfg) if classifier else HRVMamba(cfg)
    return model.macs(h, w)


__all__ = [
    "ABLATIONS", "ModelConfig", "PRESETS", "preset", "HRVMamba", "HRVMambaClassifier", "ClassificationHead",
    "Stem", "Stage1", "Bottleneck", "Transition", "Fuse", "HRModule", "ConvNorm", "count_params", "count_flops",
    "block_macs", "forward", "classify", "fuse",
]
