import hashlib
from enum import Enum
from typing import Literal

from pydantic import BaseModel, field_validator, model_validator

from src.core.tensor import conv_output_size


class Activation(str, Enum):
    HARD_SIGMOID = "hard_sigmoid"
    RELU = "relu"


class LayerKind(str, Enum):
    CONV = "conv"
    LINEAR = "linear"


class LayerSpec(BaseModel):
    kind: LayerKind
    out: int  # channels for conv, features for linear
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    pool: bool = False
    pool_window: int = 2
    activation: Activation = Activation.HARD_SIGMOID

    @field_validator("out", "kernel", "stride", "pool_window")
    @classmethod
    def positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError("layer sizes must be positive")
        return value


class NetworkSpec(BaseModel):
    """Layered CRNN: a conv/pool stack followed by linear layers.

    Layer i reads the state of layer i-1 (layer 0 reads the input x) and owns
    the state it writes. `upsilon` lists layers that receive intermediate
    learning signals; the output layer never does.
    """

    input_shape: tuple[int, int, int]
    layers: list[LayerSpec]
    upsilon: list[int] = []
    use_bias: bool = True

    @field_validator("upsilon", mode="before")
    @classmethod
    def split_upsilon(cls, value: str | list[int] | None) -> list[int]:
        if value is None or value == "":
            return []
        if isinstance(value, str):
            return [int(item) for item in value.split(",") if item.strip()]
        return list(value)

    @model_validator(mode="after")
    def check_chain(self) -> "NetworkSpec":
        if not self.layers:
            raise ValueError("network needs at least one layer")
        if self.layers[-1].kind != LayerKind.LINEAR:
            raise ValueError("the output layer must be linear")
        seen_linear = False
        channels, height, width = self.input_shape
        for index, layer in enumerate(self.layers):
            if layer.kind == LayerKind.LINEAR:
                seen_linear = True
                continue
            if seen_linear:
                raise ValueError(f"layer {index}: conv layers cannot follow linear layers")
            height = conv_output_size(height, layer.kernel, layer.stride, layer.padding)
            width = conv_output_size(width, layer.kernel, layer.stride, layer.padding)
            if height < 1 or width < 1:
                raise ValueError(f"layer {index}: conv output collapses to {height}x{width}")
            if layer.pool:
                if height % layer.pool_window or width % layer.pool_window:
                    raise ValueError(
                        f"layer {index}: {height}x{width} map is not divisible by pool window {layer.pool_window}"
                    )
                height //= layer.pool_window
                width //= layer.pool_window
            channels = layer.out
        output = len(self.layers) - 1
        for index in self.upsilon:
            if not 0 <= index < output:
                raise ValueError(f"upsilon entry {index} must lie in [0, {output})")
        if len(set(self.upsilon)) != len(self.upsilon):
            raise ValueError("upsilon entries must be unique")
        return self

    @property
    def n_conv(self) -> int:
        return sum(1 for layer in self.layers if layer.kind == LayerKind.CONV)

    @property
    def n_linear(self) -> int:
        return len(self.layers) - self.n_conv

    @property
    def n_total(self) -> int:
        return len(self.layers)

    @property
    def output_index(self) -> int:
        return len(self.layers) - 1

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out

    def state_shape(self, index: int) -> tuple[int, ...]:
        """Per-sample shape of layer `index`'s state (after pooling)."""
        return self.shapes()[index][1]

    def conv_shape(self, index: int) -> tuple[int, ...]:
        """Per-sample shape of layer `index`'s drive before pooling."""
        return self.shapes()[index][0]

    def input_size(self, index: int) -> int:
        shape = self.input_shape if index == 0 else self.state_shape(index - 1)
        size = 1
        for dim in shape:
            size *= dim
        return size

    def shapes(self) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        channels, height, width = self.input_shape
        result: list[tuple[tuple[int, ...], tuple[int, ...]]] = []
        for layer in self.layers:
            if layer.kind == LayerKind.LINEAR:
                result.append(((layer.out,), (layer.out,)))
                continue
            height = conv_output_size(height, layer.kernel, layer.stride, layer.padding)
            width = conv_output_size(width, layer.kernel, layer.stride, layer.padding)
            pre_pool = (layer.out, height, width)
            if layer.pool:
                height //= layer.pool_window
                width //= layer.pool_window
            channels = layer.out
            result.append((pre_pool, (channels, height, width)))
        return result

    def weight_shape(self, index: int) -> tuple[int, ...]:
        layer = self.layers[index]
        if layer.kind == LayerKind.CONV:
            in_channels = self.input_shape[0] if index == 0 else self.state_shape(index - 1)[0]
            return (layer.out, in_channels, layer.kernel, layer.kernel)
        return (layer.out, self.input_size(index))

    def fan_in(self, index: int) -> int:
        shape = self.weight_shape(index)
        fan = 1
        for dim in shape[1:]:
            fan *= dim
        return fan

    def flat_size(self, index: int) -> int:
        size = 1
        for dim in self.state_shape(index):
            size *= dim
        return size

    def kd_size(self, index: int) -> int:
        """Length of the logit view used for distillation (channels for conv layers)."""
        return self.state_shape(index)[0]

    def digest(self) -> str:
        return hashlib.sha256(self.model_dump_json().encode("utf-8")).hexdigest()

    def num_parameters(self) -> int:
        total = 0
        for index, layer in enumerate(self.layers):
            weight = 1
            for dim in self.weight_shape(index):
                weight *= dim
            total += weight + (layer.out if self.use_bias else 0)
        return total

    @classmethod
    def from_architecture(
        cls,
        architecture: str,
        input_shape: tuple[int, int, int],
        upsilon: list[int] | None = None,
        conv_activation: Activation | str = Activation.HARD_SIGMOID,
        linear_activation: Activation | str = Activation.HARD_SIGMOID,
        use_bias: bool = True,
    ) -> "NetworkSpec":
        """Build a spec from table notation, e.g. ``conv3-16,maxpool,fc-10``."""
        layers: list[LayerSpec] = []
        for raw in architecture.split(","):
            token = raw.strip().lower()
            if not token:
                continue
            if token == "maxpool":
                if not layers or layers[-1].kind != LayerKind.CONV or layers[-1].pool:
                    raise ValueError("maxpool must follow an unpooled conv layer")
                layers[-1].pool = True
            elif token.startswith("conv"):
                kernel, _, out = token[4:].partition("-")
                size = int(kernel)
                layers.append(
                    LayerSpec(
                        kind=LayerKind.CONV,
                        out=int(out),
                        kernel=size,
                        padding=size // 2,
                        activation=Activation(conv_activation),
                    )
                )
            elif token.startswith("fc-"):
                layers.append(
                    LayerSpec(
                        kind=LayerKind.LINEAR,
                        out=int(token[3:]),
                        activation=Activation(linear_activation),
                    )
                )
            else:
                raise ValueError(f"unknown architecture token '{raw.strip()}'")
        return cls(input_shape=input_shape, layers=layers, upsilon=upsilon or [], use_bias=use_bias)


class FeedForwardSpec(BaseModel):
    """Reference network for distillation targets.

    `taps` maps a student layer index to the teacher layer whose globally
    average-pooled output is exported as that layer's logits.
    """

    input_shape: tuple[int, int, int]
    layers: list[LayerSpec]
    taps: dict[int, int] = {}
    activation: Literal["relu"] = "relu"

    @model_validator(mode="after")
    def check_taps(self) -> "FeedForwardSpec":
        NetworkSpec(input_shape=self.input_shape, layers=self.layers)
        for student, teacher in self.taps.items():
            if not 0 <= teacher < len(self.layers) - 1:
                raise ValueError(f"tap {student}->{teacher} must point at a hidden layer")
        return self

    def as_network(self) -> NetworkSpec:
        return NetworkSpec(input_shape=self.input_shape, layers=self.layers)
