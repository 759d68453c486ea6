"""
Structural channel pruning: turns finalized binary masks into a smaller ModelGraph by slicing the channel axes of
every parameter array, plus the random and L1-magnitude baseline mask generators.

Slicing keeps the original channel order. Running the pruned model gives the same outputs as running the full
model with the masks applied (bit-for-bit in 64-bit mode).
"""
import logging
from typing import Any, Dict, List, Mapping, NamedTuple, Optional, Tuple, Union

import numpy as np

from sepprune.core.errors import InvalidArgumentError
from sepprune.core.models import MIXTURE, CONV_KINDS, DependencyGroup, LayerKind, LayerSpec, ModelGraph
from sepprune.mask_learning import MaskSet

log = logging.getLogger("root")

# A keep fraction applied to every group, or an explicit kept-channel count per group id.
KeepSpec = Union[float, Mapping[int, int]]
BinaryMasks = Mapping[int, np.ndarray]


class LayerSlice(NamedTuple):
    """Kept input and output channel indices of one layer; None leaves that axis untouched."""

    kept_in: Optional[Tuple[int, ...]]
    kept_out: Optional[Tuple[int, ...]]


class PruneBlueprint(object):
    """
    Kept channel indices per dependency group, and the per-layer index lists derived from them by following
    the group's ports. A tiled port keeps every copy of the group's channel axis.
    """

    def __init__(self, kept: Mapping[int, List[int]], layers: Mapping[str, LayerSlice]) -> None:
        self.kept = {group_id: tuple(int(i) for i in indices) for group_id, indices in kept.items()}
        self.layers = dict(layers)

    def kept_counts(self) -> Dict[int, int]:
        return {group_id: len(indices) for group_id, indices in self.kept.items()}

    def is_identity(self, model: ModelGraph) -> bool:
        return all(len(self.kept[group.group_id]) == group.size for group in model.dependency_groups)

    def check(self, model: ModelGraph) -> None:
        """Raises InvalidArgumentError unless the blueprint is consistent with `model`."""
        sizes = {group.group_id: group.size for group in model.dependency_groups}
        if set(self.kept) != set(sizes):
            raise InvalidArgumentError(
                "Blueprint covers groups {} but the model has {}".format(sorted(self.kept), sorted(sizes))
            )
        for group_id, indices in self.kept.items():
            _check_indices(indices, sizes[group_id], "group {}".format(group_id))

        for layer in model.layers:
            if layer.name not in self.layers:
                raise InvalidArgumentError("Blueprint has no entry for layer '{}'".format(layer.name))
            sliced = self.layers[layer.name]
            if sliced.kept_in is not None:
                _check_indices(sliced.kept_in, layer.in_channels, "layer '{}' input".format(layer.name))
            if sliced.kept_out is not None:
                _check_indices(sliced.kept_out, layer.out_channels, "layer '{}' output".format(layer.name))
            for source in layer.inputs:
                produced = None if source == MIXTURE else self.layers[source].kept_out
                if produced != sliced.kept_in:
                    raise InvalidArgumentError(
                        "Edge {} -> {} keeps different channels on each side".format(source, layer.name)
                    )

    def describe(self) -> Dict[str, Any]:
        return {
            "kept": {str(group_id): list(indices) for group_id, indices in self.kept.items()},
            "layers": {
                name: {
                    "kept_in": None if sliced.kept_in is None else list(sliced.kept_in),
                    "kept_out": None if sliced.kept_out is None else list(sliced.kept_out),
                }
                for name, sliced in self.layers.items()
            },
        }

    @staticmethod
    def from_description(description: Dict[str, Any]) -> "PruneBlueprint":
        def indices(values: Optional[List[int]]) -> Optional[Tuple[int, ...]]:
            return None if values is None else tuple(values)

        return PruneBlueprint(
            {int(group_id): kept for group_id, kept in description["kept"].items()},
            {
                name: LayerSlice(indices(sliced["kept_in"]), indices(sliced["kept_out"]))
                for name, sliced in description["layers"].items()
            },
        )

    def __repr__(self) -> str:
        return "<PruneBlueprint kept={}>".format(self.kept_counts())


def _check_indices(indices: Tuple[int, ...], bound: int, what: str) -> None:
    if not indices:
        raise InvalidArgumentError("No channels kept for {}".format(what))
    array = np.asarray(indices)
    if np.any(np.diff(array) <= 0):
        raise InvalidArgumentError("Kept channels of {} are not strictly increasing".format(what))
    if array[0] < 0 or array[-1] >= bound:
        raise InvalidArgumentError("Kept channels of {} fall outside [0, {})".format(what, bound))


def _as_binary(masks: Union[MaskSet, BinaryMasks]) -> Dict[int, np.ndarray]:
    if isinstance(masks, MaskSet):
        return masks.binary_masks()
    return {group_id: np.asarray(mask) for group_id, mask in masks.items()}


def _tiled(kept: Tuple[int, ...], size: int, tiles: int) -> Tuple[int, ...]:
    return tuple(t * size + k for t in range(tiles) for k in kept)


def blueprint_from_masks(model: ModelGraph, masks: Union[MaskSet, BinaryMasks]) -> PruneBlueprint:
    """Kept channels are those whose mask entry is non-zero."""
    binary = _as_binary(masks)
    groups = {group.group_id: group for group in model.dependency_groups}
    if set(binary) != set(groups):
        raise InvalidArgumentError(
            "Masks cover groups {} but the model has groups {}".format(sorted(binary), sorted(groups))
        )

    kept = {}  # type: Dict[int, Tuple[int, ...]]
    for group_id, group in groups.items():
        mask = binary[group_id]
        if mask.shape != (group.size,):
            raise InvalidArgumentError(
                "Mask for group {} has shape {}, expected ({},)".format(group_id, mask.shape, group.size)
            )
        kept[group_id] = tuple(int(i) for i in np.flatnonzero(mask))
        if not kept[group_id]:
            raise InvalidArgumentError("Mask for group {} keeps no channels".format(group_id))

    layers = {}  # type: Dict[str, LayerSlice]
    for layer in model.layers:
        ports = {}  # type: Dict[str, Optional[Tuple[int, ...]]]
        for port in ("in", "out"):
            found = model.group_of(layer.name, port)
            if found is None:
                ports[port] = None
            else:
                group, ref = found
                ports[port] = _tiled(kept[group.group_id], group.size, ref.tiles)
        layers[layer.name] = LayerSlice(ports["in"], ports["out"])

    blueprint = PruneBlueprint(kept, layers)
    blueprint.check(model)
    return blueprint


def _slice_layer(layer: LayerSpec, sliced: LayerSlice, params: Dict[str, np.ndarray]) -> Tuple[LayerSpec, Dict]:
    kept_in = None if sliced.kept_in is None else list(sliced.kept_in)
    kept_out = None if sliced.kept_out is None else list(sliced.kept_out)
    in_channels = layer.in_channels if kept_in is None else len(kept_in)
    out_channels = layer.out_channels if kept_out is None else len(kept_out)
    groups = layer.groups
    new_params = {}

    for name, value in params.items():
        if name == "weight" and layer.kind in (LayerKind.CONV1D, LayerKind.POINTWISE_CONV):
            if layer.is_depthwise:
                if kept_in != kept_out:
                    raise InvalidArgumentError("Depthwise layer '{}' must keep matching channels".format(layer.name))
                value = value if kept_out is None else value[kept_out]
                groups = out_channels
            else:
                if layer.groups != 1 and (kept_in is not None or kept_out is not None):
                    raise InvalidArgumentError("Cannot prune grouped convolution '{}'".format(layer.name))
                value = value if kept_out is None else value[kept_out]
                value = value if kept_in is None else value[:, kept_in]
        elif name == "weight" and layer.kind == LayerKind.CONV_TRANSPOSE1D:
            value = value if kept_in is None else value[kept_in]
            value = value if kept_out is None else value[:, kept_out]
        elif kept_out is not None:
            value = value[kept_out]
        new_params[name] = np.ascontiguousarray(value)

    return layer._replace(in_channels=in_channels, out_channels=out_channels, groups=groups), new_params


def apply_prune(model: ModelGraph, blueprint: PruneBlueprint) -> ModelGraph:
    """A new, smaller ModelGraph whose parameters are exact sub-slices of the model's."""
    blueprint.check(model)
    layers = []  # type: List[LayerSpec]
    parameters = {}  # type: Dict[str, np.ndarray]
    for layer in model.layers:
        new_layer, params = _slice_layer(layer, blueprint.layers[layer.name], model.layer_parameters(layer.name))
        layers.append(new_layer)
        for name, value in params.items():
            parameters["{}.{}".format(layer.name, name)] = value

    groups = [group._replace(size=len(blueprint.kept[group.group_id])) for group in model.dependency_groups]
    config = dict(model.config)
    config["kept_channels"] = {str(group_id): count for group_id, count in blueprint.kept_counts().items()}
    pruned = ModelGraph(layers, groups, parameters, config)
    log.info(
        "Pruned model from {} to {} parameters (kept {})".format(
            model.parameter_count(), pruned.parameter_count(), blueprint.kept_counts()
        )
    )
    return pruned


def prune(model: ModelGraph, masks: Union[MaskSet, BinaryMasks]) -> Tuple[ModelGraph, PruneBlueprint]:
    blueprint = blueprint_from_masks(model, masks)
    return apply_prune(model, blueprint), blueprint


def keep_counts(model: ModelGraph, keep: KeepSpec) -> Dict[int, int]:
    """Resolves a keep fraction or explicit counts into a kept-channel count for every group."""
    groups = model.dependency_groups
    if isinstance(keep, Mapping):
        counts = {int(group_id): int(count) for group_id, count in keep.items()}
        expected = {group.group_id for group in groups}
        if set(counts) != expected:
            raise InvalidArgumentError(
                "Keep counts cover groups {} but the model has {}".format(sorted(counts), sorted(expected))
            )
    else:
        if not 0.0 < keep <= 1.0:
            raise InvalidArgumentError("Keep fraction must lie in (0, 1], got {}".format(keep))
        counts = {group.group_id: int(round(keep * group.size)) for group in groups}
    for group in groups:
        count = counts[group.group_id]
        if count < 1:
            raise InvalidArgumentError("Group {} would keep {} channels".format(group.group_id, count))
        if count > group.size:
            raise InvalidArgumentError(
                "Group {} has {} channels, cannot keep {}".format(group.group_id, group.size, count)
            )
    return counts


def _mask_from_indices(size: int, kept: np.ndarray) -> np.ndarray:
    mask = np.zeros(size, dtype=np.float32)
    mask[kept] = 1.0
    return mask


def random_mask(model: ModelGraph, keep: KeepSpec, seed: int = 0) -> Dict[int, np.ndarray]:
    """Uniformly random kept subsets of the requested sizes, one random stream per call."""
    counts = keep_counts(model, keep)
    rng = np.random.default_rng(seed)
    masks = {}
    for group in model.dependency_groups:
        kept = np.sort(rng.choice(group.size, size=counts[group.group_id], replace=False))
        masks[group.group_id] = _mask_from_indices(group.size, kept)
    return masks


def channel_importance(model: ModelGraph, group_id: int) -> np.ndarray:
    """
    L1 norm of the weights producing each channel of a group: every convolution with an output port in the
    group contributes the absolute sum of its output filter, tiled copies added together.
    """
    group = model.group(group_id)
    norms = np.zeros(group.size, dtype=np.float64)
    for port in group.ports:
        if port.port != "out":
            continue
        layer = model.layer(port.layer)
        if layer.kind not in CONV_KINDS:
            continue
        weight = model.parameters["{}.weight".format(layer.name)].astype(np.float64)
        if layer.kind == LayerKind.CONV_TRANSPOSE1D:
            weight = np.moveaxis(weight, 1, 0)
        filters = np.abs(weight).reshape(layer.out_channels, -1).sum(axis=1)
        norms += filters.reshape(port.tiles, group.size).sum(axis=0)
    return norms


def magnitude_mask(model: ModelGraph, keep: KeepSpec) -> Dict[int, np.ndarray]:
    """Keeps the channels with the largest producer L1 norm; equal norms keep the lower index."""
    counts = keep_counts(model, keep)
    masks = {}
    for group in model.dependency_groups:
        norms = channel_importance(model, group.group_id)
        order = np.lexsort((np.arange(group.size), -norms))
        kept = np.sort(order[: counts[group.group_id]])
        masks[group.group_id] = _mask_from_indices(group.size, kept)
    return masks


def all_ones(model: ModelGraph) -> Dict[int, np.ndarray]:
    return {group.group_id: np.ones(group.size, dtype=np.float32) for group in model.dependency_groups}


def _group_label_counts(model: ModelGraph, counts: Mapping[int, int]) -> Tuple[int, List[int]]:
    residual = None
    internal = []
    for group in model.dependency_groups:
        if group.label.endswith("_internal"):
            internal.append(counts[group.group_id])
        else:
            residual = counts[group.group_id]
    if residual is None:
        raise InvalidArgumentError("Model has no residual-chain group")
    return residual, internal


def predicted_counts(
    model: ModelGraph, counts: Mapping[int, int], input_length: Optional[int] = None
) -> Tuple[int, Optional[int]]:
    """
    Closed-form parameter count (and, given an input length, MAC count) of the separation network built by
    build_toy_sepnet once every group keeps `counts` channels.
    """
    config = model.config
    for key in ("encoder_kernel", "encoder_stride", "kernel", "speakers"):
        if key not in config:
            raise InvalidArgumentError("Model config lacks '{}', counts cannot be predicted".format(key))
    ek, stride, k, c = config["encoder_kernel"], config["encoder_stride"], config["kernel"], config["speakers"]
    e, hidden = _group_label_counts(model, counts)

    params = e * ek + e
    params += sum(h * (e + 1) + h * (k + 1) + 3 * h + e * (h + 1) for h in hidden)
    params += c * e * e + c * e
    params += e * ek + 1
    if input_length is None:
        return params, None

    frames = (input_length - ek) // stride + 1
    macs = e * ek * frames + e * frames
    macs += sum((h * e + h * k + 4 * h + h + e * h + e) * frames for h in hidden)
    macs += c * e * e * frames + c * e * frames
    macs += c * e * frames
    macs += c * e * ek * frames
    return params, macs


def predicted_parameter_count(model: ModelGraph, counts: Mapping[int, int]) -> int:
    return predicted_counts(model, counts)[0]


def group_summary(model: ModelGraph, masks: Union[MaskSet, BinaryMasks]) -> List[Dict[str, Any]]:
    """Per-group kept/total channel counts, for reports."""
    binary = _as_binary(masks)
    rows = []
    for group in model.dependency_groups:  # type: DependencyGroup
        kept = int(np.count_nonzero(binary[group.group_id]))
        rows.append({"group": group.group_id, "label": group.label, "size": group.size, "kept": kept})
    return rows
