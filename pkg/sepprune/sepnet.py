"""
A small encoder -> masking separator -> decoder network for 1-D waveforms, described as a ModelGraph, and the
interpreter that runs any such graph forward.
"""
import logging
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np

import sepprune.core.functional as F
from sepprune.core.autodiff import ArrayLike, TensorNode, as_node
from sepprune.core.errors import InvalidArgumentError
from sepprune.core.models import (
    MIXTURE,
    Component,
    DependencyGroup,
    LayerKind,
    LayerSpec,
    ModelGraph,
    PortRef,
)

log = logging.getLogger("root")

RESIDUAL_GROUP = 0
PRELU_INIT = 0.25


def build_toy_sepnet(
    encoder_channels: int = 64,
    blocks: int = 4,
    block_channels: int = 128,
    kernel: int = 3,
    speakers: int = 2,
    encoder_kernel: int = 16,
    encoder_stride: int = 8,
    seed: int = 0,
) -> ModelGraph:
    """
    Builds the separation backbone:

        encoder    conv1d 1 -> E (strided, no padding), relu
        separator  R residual blocks (pointwise E -> H, depthwise dilated conv, channel_norm, prelu,
                   pointwise H -> E, residual add), then a pointwise mask head E -> C*E with sigmoid,
                   one E-channel mask per speaker, multiplied into the encoder features
        decoder    conv_transpose1d E -> 1, weights shared by all speakers

    Dependency groups: one for the residual chain (every E-channel port), one per block for its H channels.
    """
    dims = {
        "encoder_channels": encoder_channels,
        "blocks": blocks,
        "block_channels": block_channels,
        "kernel": kernel,
        "speakers": speakers,
        "encoder_kernel": encoder_kernel,
        "encoder_stride": encoder_stride,
    }
    for key, value in dims.items():
        if not isinstance(value, (int, np.integer)) or value < 1:
            raise InvalidArgumentError("{} must be a positive integer, got {!r}".format(key, value))
    if kernel % 2 == 0:
        raise InvalidArgumentError("Separator kernel must be odd to keep the block length fixed, got {}".format(kernel))

    E, H, C = encoder_channels, block_channels, speakers
    layers = []  # type: List[LayerSpec]
    residual_ports = []  # type: List[PortRef]
    residual_sites = []  # type: List[str]
    groups = []  # type: List[DependencyGroup]

    layers.append(
        LayerSpec(
            "encoder",
            LayerKind.CONV1D,
            Component.ENCODER,
            1,
            E,
            (MIXTURE,),
            kernel=encoder_kernel,
            stride=encoder_stride,
            bias=True,
        )
    )
    layers.append(LayerSpec("encoder_relu", LayerKind.RELU, Component.ENCODER, E, E, ("encoder",)))
    residual_ports += [PortRef("encoder", "out"), PortRef("encoder_relu", "in"), PortRef("encoder_relu", "out")]
    residual_sites.append("encoder_relu")

    stream = "encoder_relu"
    for r in range(blocks):
        prefix = "block{}_".format(r)
        dilation = 2 ** r
        sep = Component.SEPARATOR
        layers += [
            LayerSpec(prefix + "pw1", LayerKind.POINTWISE_CONV, sep, E, H, (stream,), bias=True),
            LayerSpec(
                prefix + "dw",
                LayerKind.CONV1D,
                sep,
                H,
                H,
                (prefix + "pw1",),
                kernel=kernel,
                dilation=dilation,
                padding=dilation * (kernel - 1) // 2,
                groups=H,
                bias=True,
            ),
            LayerSpec(prefix + "norm", LayerKind.CHANNEL_NORM, sep, H, H, (prefix + "dw",)),
            LayerSpec(prefix + "prelu", LayerKind.PRELU, sep, H, H, (prefix + "norm",)),
            LayerSpec(prefix + "pw2", LayerKind.POINTWISE_CONV, sep, H, E, (prefix + "prelu",), bias=True),
            LayerSpec(prefix + "add", LayerKind.ADD_JUNCTION, sep, E, E, (stream, prefix + "pw2")),
        ]
        residual_ports += [
            PortRef(prefix + "pw1", "in"),
            PortRef(prefix + "pw2", "out"),
            PortRef(prefix + "add", "in"),
            PortRef(prefix + "add", "out"),
        ]
        residual_sites.append(prefix + "pw2")
        internal_ports = [PortRef(prefix + "pw1", "out")]
        for name in ("dw", "norm", "prelu"):
            internal_ports += [PortRef(prefix + name, "in"), PortRef(prefix + name, "out")]
        internal_ports.append(PortRef(prefix + "pw2", "in"))
        groups.append(DependencyGroup(r + 1, prefix + "internal", H, tuple(internal_ports), (prefix + "prelu",)))
        stream = prefix + "add"

    layers.append(LayerSpec("mask_head", LayerKind.POINTWISE_CONV, Component.SEPARATOR, E, C * E, (stream,), bias=True))
    layers.append(LayerSpec("mask_sigmoid", LayerKind.SIGMOID, Component.SEPARATOR, C * E, C * E, ("mask_head",)))
    residual_ports += [
        PortRef("mask_head", "in"),
        PortRef("mask_head", "out", C),
        PortRef("mask_sigmoid", "in", C),
        PortRef("mask_sigmoid", "out", C),
    ]
    applied = []
    for i in range(C):
        split, apply = "split{}".format(i), "apply{}".format(i)
        layers.append(
            LayerSpec(split, LayerKind.SPLIT_MASKS, Component.SEPARATOR, C * E, E, ("mask_sigmoid",), speaker=i)
        )
        layers.append(LayerSpec(apply, LayerKind.ELEMENTWISE_MUL, Component.SEPARATOR, E, E, (split, "encoder_relu")))
        residual_ports += [
            PortRef(split, "in", C),
            PortRef(split, "out"),
            PortRef(apply, "in"),
            PortRef(apply, "out"),
        ]
        applied.append(apply)

    layers.append(
        LayerSpec(
            "decoder",
            LayerKind.CONV_TRANSPOSE1D,
            Component.DECODER,
            E,
            1,
            tuple(applied),
            kernel=encoder_kernel,
            stride=encoder_stride,
            bias=True,
        )
    )
    residual_ports.append(PortRef("decoder", "in"))
    groups.insert(0, DependencyGroup(RESIDUAL_GROUP, "residual", E, tuple(residual_ports), tuple(residual_sites)))

    in_groups = {port.layer for group in groups for port in group.ports}
    layers = [layer._replace(prunable=layer.name in in_groups) for layer in layers]
    parameters = init_parameters(layers, np.random.default_rng(seed))
    log.debug("Built separation network with E={}, H={}, R={}, K={}, C={}".format(E, H, blocks, kernel, C))
    return ModelGraph(layers, groups, parameters, dims)


def init_parameters(layers: Sequence[LayerSpec], rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """
    Fresh 32-bit parameters for `layers`: convolution weights and biases uniform in +-1/sqrt(fan_in), unit norm
    gains, zero norm biases and 0.25 PReLU slopes.
    """
    parameters = {}  # type: Dict[str, np.ndarray]
    for layer in layers:
        shapes = layer.parameter_shapes()
        if layer.kind in (LayerKind.CONV1D, LayerKind.POINTWISE_CONV):
            fan_in = (layer.in_channels // layer.groups) * layer.kernel
        elif layer.kind == LayerKind.CONV_TRANSPOSE1D:
            fan_in = layer.out_channels * layer.kernel
        else:
            fan_in = 0
        for param, shape in shapes.items():
            key = "{}.{}".format(layer.name, param)
            if fan_in:
                bound = 1.0 / np.sqrt(fan_in)
                parameters[key] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
            elif param == "gain":
                parameters[key] = np.ones(shape, dtype=np.float32)
            elif param == "slope":
                parameters[key] = np.full(shape, PRELU_INIT, dtype=np.float32)
            else:
                parameters[key] = np.zeros(shape, dtype=np.float32)
    return parameters


def reinitialize(model: ModelGraph, seed: int) -> ModelGraph:
    """Same structure as `model`, freshly initialized weights."""
    return ModelGraph(
        model.layers, model.dependency_groups, init_parameters(model.layers, np.random.default_rng(seed)), model.config
    )


def _apply_layer(layer: LayerSpec, x: TensorNode, params: Mapping[str, TensorNode]) -> TensorNode:
    def param(name: str) -> Optional[TensorNode]:
        return params.get("{}.{}".format(layer.name, name))

    if layer.kind in (LayerKind.CONV1D, LayerKind.POINTWISE_CONV):
        return F.conv1d(
            x,
            param("weight"),
            param("bias"),
            stride=layer.stride,
            dilation=layer.dilation,
            groups=layer.groups,
            padding=layer.padding,
        )
    if layer.kind == LayerKind.CONV_TRANSPOSE1D:
        return F.conv_transpose1d(x, param("weight"), param("bias"), stride=layer.stride, padding=layer.padding)
    if layer.kind == LayerKind.CHANNEL_NORM:
        return F.channel_norm(x, param("gain"), param("bias"))
    if layer.kind == LayerKind.PRELU:
        return F.prelu(x, param("slope"))
    if layer.kind == LayerKind.RELU:
        return F.relu(x)
    if layer.kind == LayerKind.SIGMOID:
        return F.sigmoid(x)
    if layer.kind == LayerKind.SPLIT_MASKS:
        return F.slice_channels(x, layer.speaker * layer.out_channels, (layer.speaker + 1) * layer.out_channels)
    raise InvalidArgumentError("Layer kind {} is not a single-input layer".format(layer.kind.value))


def check_masks(model: ModelGraph, masks: Mapping[int, Any]) -> None:
    expected = {group.group_id: group.size for group in model.dependency_groups}
    if set(masks) != set(expected):
        raise InvalidArgumentError(
            "Masks cover groups {} but the model has groups {}".format(sorted(masks), sorted(expected))
        )
    for group_id, mask in masks.items():
        shape = as_node(mask).shape
        if shape != (expected[group_id],):
            raise InvalidArgumentError(
                "Mask for group {} has shape {}, expected ({},)".format(group_id, shape, expected[group_id])
            )


def constant_parameters(model: ModelGraph) -> Dict[str, TensorNode]:
    return {name: TensorNode(value, name=name) for name, value in model.parameters.items()}


def trainable_parameters(model: ModelGraph) -> Dict[str, TensorNode]:
    """Gradient-tracking nodes that share storage with the model's arrays, so optimizer steps update the model."""
    return {name: TensorNode(value, requires_grad=True, name=name) for name, value in model.parameters.items()}


def forward(
    model: ModelGraph,
    mixture: ArrayLike,
    masks: Optional[Mapping[int, ArrayLike]] = None,
    params: Optional[Mapping[str, TensorNode]] = None,
) -> TensorNode:
    """
    Runs `model` on a [B, 1, T] mixture and returns the [B, C, T] source estimates.

    :param masks: optional per-group channel masks, group_id -> [size]; each is multiplied into the outputs of its
        group's mask sites
    :param params: parameter nodes to use instead of the model's own (constant) arrays
    """
    mixture = as_node(mixture)
    if mixture.ndim != 3 or mixture.shape[1] != 1:
        raise InvalidArgumentError("Expected a [B, 1, T] mixture, got shape {}".format(mixture.shape))
    length = mixture.shape[2]
    if mixture.dtype != model.dtype and not mixture.requires_grad:
        mixture = TensorNode(mixture.values.astype(model.dtype))
    if params is None:
        params = constant_parameters(model)

    site_masks = {}  # type: Dict[str, TensorNode]
    if masks is not None:
        check_masks(model, masks)
        for group in model.dependency_groups:
            for site in group.mask_sites:
                site_masks[site] = as_node(masks[group.group_id])

    outputs = {MIXTURE: mixture}  # type: Dict[str, TensorNode]
    for layer in model.layers:
        inputs = [outputs[source] for source in layer.inputs]
        if layer.kind == LayerKind.ADD_JUNCTION:
            out = inputs[0]
            for other in inputs[1:]:
                out = F.add(out, other)
        elif layer.kind == LayerKind.ELEMENTWISE_MUL:
            out = inputs[0]
            for other in inputs[1:]:
                out = F.mul(out, other)
        elif len(inputs) == 1:
            out = _apply_layer(layer, inputs[0], params)
        else:
            # Shared-weight layers run once per input; results are stacked along the channel axis.
            out = F.concat_channels([_apply_layer(layer, x, params) for x in inputs])
        if layer.name in site_masks:
            out = F.mul(out, site_masks[layer.name])
        outputs[layer.name] = out

    return F.fit_length(outputs[model.output_layer.name], length)
