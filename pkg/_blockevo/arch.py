"""
Dense block architectures: the particle codec, widening/deepening, and the derived channel and parameter counts.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, Sequence, Tuple

import numpy as np

from _blockevo.utils import InvariantViolation, UserError, describe

DEFAULT_GROWTH_CAP = 512


class ArchError(UserError):
    pass


class AllLayersDisabled(ArchError):
    pass


class LengthMismatch(ArchError):
    pass


class TooManyLayers(ArchError):
    pass


class CapExceeded(ArchError):
    pass


class SpatialUnderflow(ArchError):
    pass


class InvalidBlock(ArchError):
    pass


@dataclass(frozen=True)
class CodecConfig:
    max_layers: int = 16
    disable_sentinel: int = 7
    growth_min: int = 1
    growth_max: int = 32

    def __post_init__(self) -> None:
        if self.max_layers < 1:
            raise InvariantViolation("codec.max_layers", "must be >= 1")
        if self.growth_min < 1:
            raise InvariantViolation("codec.growth_min", "must be >= 1")
        if self.growth_min > self.growth_max:
            raise InvariantViolation("codec.growth_max", "must be >= growth_min")
        if not self.growth_min <= self.disable_sentinel <= self.growth_max:
            raise InvariantViolation(
                "codec.disable_sentinel",
                f"must lie in [{self.growth_min}, {self.growth_max}] to be reachable by decoding",
            )

    @property
    def bounds(self) -> Tuple[float, float]:
        return float(self.growth_min), float(self.growth_max)


@dataclass(frozen=True)
class BlockSpec:
    growth_rates: Tuple[int, ...]

    def __post_init__(self) -> None:
        rates = tuple(int(g) for g in self.growth_rates)
        if not rates:
            raise InvalidBlock("a block needs at least one layer")
        if any(g < 1 for g in rates):
            raise InvalidBlock(f"growth rates must be >= 1, got {list(rates)}")
        object.__setattr__(self, "growth_rates", rates)

    @property
    def num_layers(self) -> int:
        return len(self.growth_rates)

    def to_dict(self) -> Dict[str, Any]:
        return {"growth_rates": list(self.growth_rates)}

    @classmethod
    def from_dict(cls, document: Dict[str, Any]) -> "BlockSpec":
        try:
            return cls(tuple(document["growth_rates"]))
        except (KeyError, TypeError):
            raise InvalidBlock("block document must contain a 'growth_rates' list")


@dataclass(frozen=True)
class StemSpec:
    kernel_size: int = 3
    out_channels: int = 16

    def __post_init__(self) -> None:
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise InvariantViolation("stem.kernel_size", "must be a positive odd integer")
        if self.out_channels < 1:
            raise InvariantViolation("stem.out_channels", "must be >= 1")

    def to_dict(self) -> Dict[str, Any]:
        return {"kernel_size": self.kernel_size, "out_channels": self.out_channels}


@dataclass(frozen=True)
class NetworkSpec:
    """
    A deployable network: stem conv, `deepen` copies of the widened block joined by transitions (1x1 conv, 2x2 average
    pool), then global average pool and a linear classifier.

    Build instances with build_network, which checks the spatial budget.
    """

    stem: StemSpec
    block: BlockSpec
    widen: int
    deepen: int
    input_shape: Tuple[int, int, int]
    num_classes: int
    growth_cap: int = field(default=DEFAULT_GROWTH_CAP, compare=False)

    @property
    def widened_block(self) -> BlockSpec:
        return widen_block(self.block, self.widen, cap=self.growth_cap)

    @property
    def blocks(self) -> Tuple[BlockSpec, ...]:
        return (self.widened_block,) * self.deepen

    @property
    def num_transitions(self) -> int:
        return self.deepen - 1

    def spatial_sizes(self) -> Tuple[Tuple[int, int], ...]:
        """Spatial size seen by each block, in order."""
        _, h, w = self.input_shape
        sizes = [(h, w)]
        for _ in range(self.num_transitions):
            h, w = sizes[-1]
            sizes.append(((h + 1) // 2, (w + 1) // 2))
        return tuple(sizes)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "stem": self.stem.to_dict(),
            "widen": self.widen,
            "deepen": self.deepen,
            "block": self.block.to_dict(),
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
        }

    @classmethod
    def from_dict(cls, document: Dict[str, Any], growth_cap: int = DEFAULT_GROWTH_CAP) -> "NetworkSpec":
        try:
            return build_network(
                BlockSpec.from_dict(document["block"]),
                widen=int(document["widen"]),
                deepen=int(document["deepen"]),
                input_shape=tuple(document["input_shape"]),
                num_classes=int(document["num_classes"]),
                stem=StemSpec(**document.get("stem", {})),
                growth_cap=growth_cap,
            )
        except (KeyError, TypeError) as e:
            raise InvalidBlock(f"malformed network document: {describe(e)}")


def _round_half_away(values: np.ndarray) -> np.ndarray:
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def decode_block(position: Sequence[float], codec: CodecConfig) -> BlockSpec:
    position = np.asarray(position, dtype=np.float64)
    if position.shape != (codec.max_layers,):
        raise LengthMismatch(
            f"position has {position.size} dimensions, codec expects {codec.max_layers}"
        )

    rounded = _round_half_away(np.clip(position, codec.growth_min, codec.growth_max)).astype(np.int64)
    enabled = rounded[rounded != codec.disable_sentinel]
    if enabled.size == 0:
        raise AllLayersDisabled("every layer of the position decodes to the disable sentinel")

    return BlockSpec(tuple(int(g) for g in enabled))


def canonical_position(block: BlockSpec, codec: CodecConfig) -> np.ndarray:
    if block.num_layers > codec.max_layers:
        raise TooManyLayers(
            f"block has {block.num_layers} layers, codec allows at most {codec.max_layers}"
        )
    for g in block.growth_rates:
        if g == codec.disable_sentinel or not codec.growth_min <= g <= codec.growth_max:
            raise InvalidBlock(f"growth rate {g} is not encodable under {codec}")

    position = np.full(codec.max_layers, float(codec.disable_sentinel))
    position[: block.num_layers] = block.growth_rates
    return position


def widen_block(block: BlockSpec, factor: int, cap: int = DEFAULT_GROWTH_CAP) -> BlockSpec:
    if factor < 1:
        raise InvalidBlock(f"widening factor must be >= 1, got {factor}")
    widened = tuple(g * factor for g in block.growth_rates)
    if max(widened) > cap:
        raise CapExceeded(f"widening by {factor} gives growth rate {max(widened)} > cap {cap}")
    return BlockSpec(widened)


def build_network(
    block: BlockSpec,
    widen: int,
    deepen: int,
    input_shape: Sequence[int],
    num_classes: int,
    stem: StemSpec = StemSpec(),
    growth_cap: int = DEFAULT_GROWTH_CAP,
) -> NetworkSpec:
    if deepen < 1:
        raise InvalidBlock(f"deepening factor must be >= 1, got {deepen}")
    if num_classes < 2:
        raise InvalidBlock(f"a classifier needs at least 2 classes, got {num_classes}")
    input_shape = tuple(int(d) for d in input_shape)
    if len(input_shape) != 3 or min(input_shape) < 1:
        raise InvalidBlock(f"input shape must be (channels, height, width), got {input_shape}")

    # Raises CapExceeded before anything else is built.
    widen_block(block, widen, cap=growth_cap)

    _, h, w = input_shape
    for t in range(deepen - 1):
        if h < 2 or w < 2:
            raise SpatialUnderflow(
                f"transition {t} would pool a {h}x{w} feature map; input {input_shape[1:]} "
                f"cannot be deepened {deepen} times"
            )
        h, w = (h + 1) // 2, (w + 1) // 2

    return NetworkSpec(
        stem=stem,
        block=block,
        widen=widen,
        deepen=deepen,
        input_shape=input_shape,
        num_classes=num_classes,
        growth_cap=growth_cap,
    )


def count_channels(block: BlockSpec, input_channels: int) -> int:
    return input_channels + sum(block.growth_rates)


def count_parameters(spec: NetworkSpec) -> int:
    image_channels = spec.input_shape[0]
    k = spec.stem.kernel_size
    channels = spec.stem.out_channels
    total = k * k * image_channels * channels + channels

    for index, block in enumerate(spec.blocks):
        c_in = channels
        for g in block.growth_rates:
            total += 3 * 3 * c_in * g + g
            c_in += g
        channels = c_in
        if index < spec.num_transitions:
            total += channels * channels + channels

    total += channels * spec.num_classes + spec.num_classes
    return total
