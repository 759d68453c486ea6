import copy
import logging
from enum import Enum
from typing import Any, Dict, Iterable, List, NamedTuple, Optional, Tuple

import numpy as np

from sepprune.core.errors import InvalidArgumentError

log = logging.getLogger("root")

# Name of the graph input; layers list it among their inputs to consume the mixture waveform.
MIXTURE = "mixture"


class LayerKind(Enum):
    CONV1D = "conv1d"
    CONV_TRANSPOSE1D = "conv_transpose1d"
    POINTWISE_CONV = "pointwise_conv"
    CHANNEL_NORM = "channel_norm"
    PRELU = "prelu"
    RELU = "relu"
    SIGMOID = "sigmoid"
    ADD_JUNCTION = "add_junction"
    SPLIT_MASKS = "split_masks"
    ELEMENTWISE_MUL = "elementwise_mul"


class Component(Enum):
    """
    The three stages of a separation network. The enum order is the tie-breaking order used when ranking
    components by cost.
    """

    ENCODER = "encoder"
    SEPARATOR = "separator"
    DECODER = "decoder"


CONV_KINDS = (LayerKind.CONV1D, LayerKind.POINTWISE_CONV, LayerKind.CONV_TRANSPOSE1D)


class LayerSpec(NamedTuple):
    """
    One layer of a ModelGraph. Every layer has a single "in" port and a single "out" port; layers consuming more
    than one input (residual adds, mask multiplication, the shared decoder) require all inputs to carry the same
    channel count.

    `speaker` is only meaningful for split_masks layers: whose slice of the mask head output they take.
    """

    name: str
    kind: LayerKind
    component: Component
    in_channels: int
    out_channels: int
    inputs: Tuple[str, ...]
    kernel: int = 1
    stride: int = 1
    dilation: int = 1
    padding: int = 0
    groups: int = 1
    bias: bool = False
    prunable: bool = False
    speaker: Optional[int] = None

    @property
    def is_depthwise(self) -> bool:
        return self.groups > 1 and self.groups == self.in_channels == self.out_channels

    def parameter_shapes(self) -> Dict[str, Tuple[int, ...]]:
        if self.kind in (LayerKind.CONV1D, LayerKind.POINTWISE_CONV):
            shapes = {"weight": (self.out_channels, self.in_channels // self.groups, self.kernel)}
        elif self.kind == LayerKind.CONV_TRANSPOSE1D:
            shapes = {"weight": (self.in_channels, self.out_channels, self.kernel)}
        elif self.kind == LayerKind.CHANNEL_NORM:
            return {"gain": (self.out_channels,), "bias": (self.out_channels,)}
        elif self.kind == LayerKind.PRELU:
            return {"slope": (self.out_channels,)}
        else:
            return {}
        if self.bias:
            shapes["bias"] = (self.out_channels,)
        return shapes

    def describe(self) -> Dict[str, Any]:
        description = self._asdict()
        description["kind"] = self.kind.value
        description["component"] = self.component.value
        description["inputs"] = list(self.inputs)
        return description

    @staticmethod
    def from_description(description: Dict[str, Any]) -> "LayerSpec":
        fields = dict(description)
        fields["kind"] = LayerKind(fields["kind"])
        fields["component"] = Component(fields["component"])
        fields["inputs"] = tuple(fields["inputs"])
        return LayerSpec(**fields)


class PortRef(NamedTuple):
    """
    A (layer, port) pair whose channel axis belongs to a dependency group. A tiled port carries `tiles` consecutive
    copies of the group's channel axis (the mask head emits one copy per speaker).
    """

    layer: str
    port: str
    tiles: int = 1

    def __str__(self) -> str:
        suffix = "x{}".format(self.tiles) if self.tiles > 1 else ""
        return "{}.{}{}".format(self.layer, self.port, suffix)


class DependencyGroup(NamedTuple):
    """
    A set of ports whose channel axes must be pruned identically. `mask_sites` are the layers whose outputs are
    multiplied by the group's mask during masked forward passes.
    """

    group_id: int
    label: str
    size: int
    ports: Tuple[PortRef, ...]
    mask_sites: Tuple[str, ...]

    def ports_of(self, layer: str) -> List[PortRef]:
        return [port for port in self.ports if port.layer == layer]

    def describe(self) -> Dict[str, Any]:
        return {
            "group_id": self.group_id,
            "label": self.label,
            "size": self.size,
            "ports": [list(port) for port in self.ports],
            "mask_sites": list(self.mask_sites),
        }

    @staticmethod
    def from_description(description: Dict[str, Any]) -> "DependencyGroup":
        return DependencyGroup(
            description["group_id"],
            description["label"],
            description["size"],
            tuple(PortRef(*port) for port in description["ports"]),
            tuple(description["mask_sites"]),
        )


class ModelGraph(object):
    """
    An ordered list of layers, their dependency groups and their named parameters ("<layer>.<param>").

    Layers are listed in topological order: a layer may only consume the mixture or layers listed before it.
    Structure is fixed after construction; only the parameter arrays change, in place, during training.
    """

    def __init__(
        self,
        layers: Iterable[LayerSpec],
        dependency_groups: Iterable[DependencyGroup],
        parameters: Dict[str, np.ndarray],
        config: Optional[Dict[str, Any]] = None,
    ) -> None:
        self._layers = tuple(layers)
        self._by_name = {layer.name: layer for layer in self._layers}
        self._groups = tuple(dependency_groups)
        self.parameters = parameters
        self.config = dict(config) if config else {}
        self._validate()
        self._port_groups = {}  # type: Dict[Tuple[str, str], Tuple[DependencyGroup, PortRef]]
        for group in self._groups:
            for port in group.ports:
                self._port_groups[(port.layer, port.port)] = (group, port)

    @property
    def layers(self) -> Tuple[LayerSpec, ...]:
        return self._layers

    @property
    def dependency_groups(self) -> Tuple[DependencyGroup, ...]:
        return self._groups

    @property
    def prunable_groups(self) -> Tuple[DependencyGroup, ...]:
        return self._groups

    @property
    def edges(self) -> List[Tuple[str, str]]:
        return [(source, layer.name) for layer in self._layers for source in layer.inputs if source != MIXTURE]

    @property
    def output_layer(self) -> LayerSpec:
        return self._layers[-1]

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.parameters.values())).dtype

    def layer(self, name: str) -> LayerSpec:
        if name not in self._by_name:
            raise InvalidArgumentError("No layer named '{}'".format(name))
        return self._by_name[name]

    def group(self, group_id: int) -> DependencyGroup:
        for group in self._groups:
            if group.group_id == group_id:
                return group
        raise InvalidArgumentError("No dependency group {}".format(group_id))

    def group_of(self, layer: str, port: str) -> Optional[Tuple[DependencyGroup, PortRef]]:
        return self._port_groups.get((layer, port))

    def layer_parameters(self, layer: str) -> Dict[str, np.ndarray]:
        prefix = layer + "."
        return {name[len(prefix) :]: value for name, value in self.parameters.items() if name.startswith(prefix)}

    def parameter_count(self) -> int:
        return int(sum(value.size for value in self.parameters.values()))

    def copy(self) -> "ModelGraph":
        return ModelGraph(
            self._layers, self._groups, {name: value.copy() for name, value in self.parameters.items()}, self.config
        )

    def astype(self, dtype: Any) -> "ModelGraph":
        return ModelGraph(
            self._layers,
            self._groups,
            {name: value.astype(dtype) for name, value in self.parameters.items()},
            self.config,
        )

    def describe(self) -> Dict[str, Any]:
        return {
            "layers": [layer.describe() for layer in self._layers],
            "dependency_groups": [group.describe() for group in self._groups],
            "config": copy.deepcopy(self.config),
        }

    @staticmethod
    def from_description(description: Dict[str, Any], parameters: Dict[str, np.ndarray]) -> "ModelGraph":
        return ModelGraph(
            [LayerSpec.from_description(layer) for layer in description["layers"]],
            [DependencyGroup.from_description(group) for group in description["dependency_groups"]],
            parameters,
            description.get("config"),
        )

    def _validate(self) -> None:
        if not self._layers:
            raise InvalidArgumentError("A model needs at least one layer")
        if len(self._by_name) != len(self._layers):
            raise InvalidArgumentError("Layer names must be unique")

        seen = {MIXTURE: 1}  # type: Dict[str, int]
        for layer in self._layers:
            if not layer.inputs:
                raise InvalidArgumentError("Layer '{}' has no wired inputs".format(layer.name))
            for source in layer.inputs:
                if source not in seen:
                    raise InvalidArgumentError(
                        "Layer '{}' consumes '{}' which is not defined before it".format(layer.name, source)
                    )
                if seen[source] != layer.in_channels:
                    raise InvalidArgumentError(
                        "Edge {} -> {} carries {} channels but the consumer expects {}".format(
                            source, layer.name, seen[source], layer.in_channels
                        )
                    )
            seen[layer.name] = layer.out_channels
            for param, shape in layer.parameter_shapes().items():
                key = "{}.{}".format(layer.name, param)
                if key not in self.parameters:
                    raise InvalidArgumentError("Missing parameter '{}'".format(key))
                if self.parameters[key].shape != shape:
                    raise InvalidArgumentError(
                        "Parameter '{}' has shape {}, expected {}".format(key, self.parameters[key].shape, shape)
                    )

        claimed = set()
        for group in self._groups:
            if group.size < 1:
                raise InvalidArgumentError("Dependency group {} is empty".format(group.group_id))
            for port in group.ports:
                layer = self.layer(port.layer)
                key = (port.layer, port.port)
                if key in claimed:
                    raise InvalidArgumentError("Port {} belongs to more than one dependency group".format(port))
                claimed.add(key)
                channels = layer.in_channels if port.port == "in" else layer.out_channels
                if channels != group.size * port.tiles:
                    raise InvalidArgumentError(
                        "Port {} has {} channels, group {} expects {}".format(
                            port, channels, group.group_id, group.size * port.tiles
                        )
                    )
            for site in group.mask_sites:
                if not any(port.layer == site and port.port == "out" for port in group.ports):
                    raise InvalidArgumentError("Mask site '{}' is not an output port of its group".format(site))

        in_groups = {layer for layer, _ in claimed}
        for layer in self._layers:
            if layer.prunable != (layer.name in in_groups):
                raise InvalidArgumentError("Layer '{}' has an inconsistent prunable flag".format(layer.name))

    def __repr__(self) -> str:
        return "<ModelGraph layers={} groups={} params={}>".format(
            len(self._layers), len(self._groups), self.parameter_count()
        )
