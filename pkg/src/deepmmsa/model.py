"""Multimodal survival network: 3D-ResNet image branch, clinical MLP, BN fusion, sigmoid head."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import RunningStats, Tensor

STAGE_PLANS = {
    18: ("basic", (2, 2, 2, 2)),
    34: ("basic", (3, 4, 6, 3)),
    50: ("bottleneck", (3, 4, 6, 3)),
    101: ("bottleneck", (3, 4, 23, 3)),
}
EXPANSION = {"basic": 1, "bottleneck": 4}

# The depth axis is only halved by the stem and stage 2; in-plane axes at every step.
STEM_KERNEL = (3, 7, 7)
STEM_STRIDE = (2, 2, 2)
STEM_PADDING = (1, 3, 3)
STAGE_STRIDES = ((1, 1, 1), (2, 2, 2), (1, 2, 2), (1, 2, 2))
MIN_INPUT_SHAPE = (4, 8, 8)

CLINICAL_HIDDEN = (64, 32)
CLINICAL_FEATURES = 27
HEAD_HIDDEN = 32


@dataclass(frozen=True)
class ModelConfig:
    resnet_depth: int = 18
    use_image: bool = True
    use_clinical: bool = True
    image_proj_dim: int = 25
    clinical_dim: int = 27
    head_hidden: bool = True
    lam: float = 1e-5
    base_channels: int = 64
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.resnet_depth not in STAGE_PLANS:
            raise ValueError(f"resnet_depth must be one of {sorted(STAGE_PLANS)}, got {self.resnet_depth}")
        if not (self.use_image or self.use_clinical):
            raise ValueError("at least one of use_image / use_clinical must be enabled")
        for name in ("image_proj_dim", "clinical_dim", "base_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")

    @property
    def fused_dim(self) -> int:
        return self.image_proj_dim * self.use_image + CLINICAL_FEATURES * self.use_clinical

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- building blocks


class Module:
    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, RunningStats]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, RunningStats):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _param(values, name: str) -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


class Conv3d(Module):
    def __init__(self, rng, in_ch: int, out_ch: int, kernel, stride=1, padding=0, bias: bool = False):
        kernel = (kernel,) * 3 if isinstance(kernel, int) else tuple(kernel)
        fan_in = in_ch * int(np.prod(kernel))
        self.weight = _param(_he_uniform(rng, (out_ch, in_ch) + kernel, fan_in), "weight")
        self.bias = _param(np.zeros(out_ch), "bias") if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv3d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, rng, in_features: int, out_features: int):
        self.weight = _param(_he_uniform(rng, (out_features, in_features), in_features), "weight")
        self.bias = _param(np.zeros(out_features), "bias")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class BatchNorm(Module):
    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        self.gamma = _param(np.ones(num_features), "gamma")
        self.beta = _param(np.zeros(num_features), "beta")
        self.running = RunningStats.fresh(num_features, ad.get_default_dtype(), momentum)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.batch_norm(x, self.gamma, self.beta, self.eps, self.training, self.running)


class BasicBlock(Module):
    """Two 3x3x3 convolutions with a residual connection."""

    expansion = 1

    def __init__(self, rng, in_ch: int, planes: int, stride=1, eps: float = 1e-5):
        self.conv1 = Conv3d(rng, in_ch, planes, 3, stride, 1)
        self.bn1 = BatchNorm(planes, eps)
        self.conv2 = Conv3d(rng, planes, planes, 3, 1, 1)
        self.bn2 = BatchNorm(planes, eps)
        self.shortcut = _projection(rng, in_ch, planes, stride, eps)

    def residual(self, x: Tensor) -> Tensor:
        out = ad.relu(self.bn1(self.conv1(x)))
        return self.bn2(self.conv2(out))

    def __call__(self, x: Tensor) -> Tensor:
        return residual_block_forward(self, x)


class Bottleneck(Module):
    """1x1x1 reduce, 3x3x3, 1x1x1 expand (x4) with a residual connection."""

    expansion = 4

    def __init__(self, rng, in_ch: int, planes: int, stride=1, eps: float = 1e-5):
        out_ch = planes * self.expansion
        self.conv1 = Conv3d(rng, in_ch, planes, 1)
        self.bn1 = BatchNorm(planes, eps)
        self.conv2 = Conv3d(rng, planes, planes, 3, stride, 1)
        self.bn2 = BatchNorm(planes, eps)
        self.conv3 = Conv3d(rng, planes, out_ch, 1)
        self.bn3 = BatchNorm(out_ch, eps)
        self.shortcut = _projection(rng, in_ch, out_ch, stride, eps)

    def residual(self, x: Tensor) -> Tensor:
        out = ad.relu(self.bn1(self.conv1(x)))
        out = ad.relu(self.bn2(self.conv2(out)))
        return self.bn3(self.conv3(out))

    def __call__(self, x: Tensor) -> Tensor:
        return residual_block_forward(self, x)


class Projection(Module):
    """Strided 1x1x1 convolution + BN used when a block changes shape."""

    def __init__(self, rng, in_ch: int, out_ch: int, stride, eps: float):
        self.conv = Conv3d(rng, in_ch, out_ch, 1, stride, 0)
        self.bn = BatchNorm(out_ch, eps)

    def __call__(self, x: Tensor) -> Tensor:
        return self.bn(self.conv(x))


def _projection(rng, in_ch, out_ch, stride, eps) -> Optional[Projection]:
    stride = (stride,) * 3 if isinstance(stride, int) else tuple(stride)
    if in_ch == out_ch and stride == (1, 1, 1):
        return None
    return Projection(rng, in_ch, out_ch, stride, eps)


def residual_block_forward(block, x: Tensor) -> Tensor:
    """``relu(F(x) + shortcut(x))``; the shortcut is the identity unless the block projects."""
    f = block.residual(x)
    sc = x if block.shortcut is None else block.shortcut(x)
    if f.shape != sc.shape:
        raise ValueError(f"residual path {f.shape} and shortcut {sc.shape} disagree; "
                         "the block needs a projection shortcut")
    return ad.relu(ad.add(f, sc))


# ---------------------------------------------------------------- branches


class ImageBranch(Module):
    """3D-ResNet feature extractor ending in a linear projection to ``image_proj_dim``."""

    def __init__(self, config: ModelConfig, rng):
        kind, counts = STAGE_PLANS[config.resnet_depth]
        block_cls = BasicBlock if kind == "basic" else Bottleneck
        base, eps = config.base_channels, config.bn_eps
        self.stem = Conv3d(rng, 1, base, STEM_KERNEL, STEM_STRIDE, STEM_PADDING)
        self.stem_bn = BatchNorm(base, eps)
        self.blocks: list = []
        in_ch = base
        for stage, (count, stride) in enumerate(zip(counts, STAGE_STRIDES)):
            planes = base * 2 ** stage
            for i in range(count):
                self.blocks.append(block_cls(rng, in_ch, planes, stride if i == 0 else 1, eps))
                in_ch = planes * block_cls.expansion
        self.feature_channels = in_ch
        self.proj = Linear(rng, in_ch, config.image_proj_dim)

    def features(self, volume: Tensor) -> Tensor:
        if volume.ndim != 5 or volume.shape[1] != 1:
            raise ValueError(f"image branch expects [N,1,D,H,W], got {volume.shape}")
        if any(n < m for n, m in zip(volume.shape[2:], MIN_INPUT_SHAPE)):
            raise ValueError(f"volume {volume.shape[2:]} is too small for the stride plan; "
                             f"minimum (D,H,W) is {MIN_INPUT_SHAPE}")
        out = ad.relu(self.stem_bn(self.stem(volume)))
        for block in self.blocks:
            out = block(out)
        return out

    def __call__(self, volume: Tensor) -> Tensor:
        return self.proj(ad.global_avg_pool3d(self.features(volume)))


class ClinicalBranch(Module):
    """Two hidden ReLU layers, then a linear map to 27 features."""

    def __init__(self, config: ModelConfig, rng):
        self.clinical_dim = config.clinical_dim
        h1, h2 = CLINICAL_HIDDEN
        self.fc1 = Linear(rng, config.clinical_dim, h1)
        self.fc2 = Linear(rng, h1, h2)
        self.out = Linear(rng, h2, CLINICAL_FEATURES)

    def __call__(self, clinical: Tensor) -> Tensor:
        if clinical.ndim != 2 or clinical.shape[1] != self.clinical_dim:
            raise ValueError(f"clinical input must be [N,{self.clinical_dim}], got {clinical.shape}")
        return self.out(ad.relu(self.fc2(ad.relu(self.fc1(clinical)))))


class Fusion(Module):
    """Batch-normalize each modality separately, then concatenate along features."""

    def __init__(self, config: ModelConfig):
        self.image_bn = BatchNorm(config.image_proj_dim, config.bn_eps) if config.use_image else None
        self.clinical_bn = BatchNorm(CLINICAL_FEATURES, config.bn_eps) if config.use_clinical else None

    def __call__(self, image_feats: Optional[Tensor], clinical_feats: Optional[Tensor]) -> Tensor:
        parts = []
        if self.image_bn is not None:
            parts.append(self.image_bn(image_feats))
        if self.clinical_bn is not None:
            parts.append(self.clinical_bn(clinical_feats))
        return parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)


class SurvivalHead(Module):
    def __init__(self, config: ModelConfig, rng):
        self.in_features = config.fused_dim
        if config.head_hidden:
            self.hidden = Linear(rng, config.fused_dim, HEAD_HIDDEN)
            self.out = Linear(rng, HEAD_HIDDEN, 1)
        else:
            self.hidden = None
            self.out = Linear(rng, config.fused_dim, 1)

    def __call__(self, fused: Tensor) -> Tensor:
        if fused.ndim != 2 or fused.shape[1] != self.in_features:
            raise ValueError(f"head expects [N,{self.in_features}], got {fused.shape}")
        h = fused if self.hidden is None else ad.relu(self.hidden(fused))
        logit = self.out(h)
        return ad.sigmoid(ad.reshape(logit, (logit.shape[0],)))


class DeepMMSA(Module):
    """The full network. Both branches always exist; disabled ones are skipped in forward."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.image = ImageBranch(config, rng)
        self.clinical = ClinicalBranch(config, rng)
        self.fusion = Fusion(config)
        self.head = SurvivalHead(config, rng)

    def __call__(self, volume: Optional[Tensor], clinical: Optional[Tensor]) -> Tensor:
        img = self.image(volume) if self.config.use_image else None
        cli = self.clinical(clinical) if self.config.use_clinical else None
        return self.head(self.fusion(img, cli))

    def active_parameters(self) -> list[tuple[str, Tensor]]:
        skip = []
        if not self.config.use_image:
            skip.append("image.")
        if not self.config.use_clinical:
            skip.append("clinical.")
        return [(n, p) for n, p in self.named_parameters() if not n.startswith(tuple(skip))] if skip \
            else list(self.named_parameters())

    def penalized_parameters(self) -> list[Tensor]:
        """Convolution kernels and linear weight matrices of the active branches."""
        return [p for n, p in self.active_parameters() if n.endswith(".weight")]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    # ---- state exchange (checkpoints, best-epoch snapshots)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {n: p.data.copy() for n, p in self.named_parameters()}
        for n, rs in self.named_buffers():
            state[f"{n}.mean"] = rs.mean.copy()
            state[f"{n}.var"] = rs.var.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = {n: p.data.shape for n, p in self.named_parameters()}
        for n, rs in self.named_buffers():
            expected[f"{n}.mean"] = rs.mean.shape
            expected[f"{n}.var"] = rs.var.shape
        missing = sorted(set(expected) - set(state))
        extra = sorted(set(state) - set(expected))
        wrong = sorted(n for n in set(expected) & set(state) if tuple(np.shape(state[n])) != tuple(expected[n]))
        if missing or extra or wrong:
            parts = []
            if missing:
                parts.append(f"missing tensors: {', '.join(missing[:8])}")
            if extra:
                parts.append(f"unexpected tensors: {', '.join(extra[:8])}")
            if wrong:
                parts.append("shape mismatch: " + ", ".join(
                    f"{n} {tuple(np.shape(state[n]))} != {expected[n]}" for n in wrong[:8]))
            raise ValueError("checkpoint does not match the architecture; " + "; ".join(parts))
        for n, p in self.named_parameters():
            p.data[...] = state[n]
        for n, rs in self.named_buffers():
            rs.mean = np.array(state[f"{n}.mean"], dtype=rs.mean.dtype)
            rs.var = np.array(state[f"{n}.var"], dtype=rs.var.dtype)


def build_model(config: ModelConfig, seed: int = 0) -> DeepMMSA:
    return DeepMMSA(config, seed)


def save_model(model: DeepMMSA, path, extra_meta: dict | None = None):
    meta = {"architecture": model.config.to_dict(), "seed": model.seed}
    meta.update(extra_meta or {})
    return ad.save_checkpoint(path, model.state_dict(), meta)


def load_model(path) -> tuple[DeepMMSA, dict]:
    state, meta = ad.load_checkpoint(path)
    if "architecture" not in meta:
        raise ad.CheckpointError(f"{path}: checkpoint carries no architecture description")
    model = DeepMMSA(ModelConfig(**meta["architecture"]), meta.get("seed", 0))
    model.load_state_dict(state)
    return model, meta
