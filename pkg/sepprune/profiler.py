"""
Structural cost analysis: exact parameter and multiply-accumulate (MAC) counts per layer and per component.

Counting convention:
    conv1d / pointwise      params Cout*(Cin/groups)*K (+Cout bias), MACs Cout*(Cin/groups)*K*Lout
    conv_transpose1d        params Cin*Cout*K (+Cout bias), MACs Cin*Cout*K*Lin for every input it is applied to
    channel_norm            params 2C, MACs 4*C*L
    prelu                   params C (one slope per channel), MACs C*L
    relu, sigmoid, add, mul MACs = number of output elements
    split_masks             free
Mask multiplications only exist while masks are being learned and are not counted.
"""
import json
import logging
import time
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np
from pandas import DataFrame

import sepprune.core.functional as F
from sepprune.core.autodiff import Tape
from sepprune.core.errors import InvalidArgumentError
from sepprune.core.models import MIXTURE, Component, LayerKind, LayerSpec, ModelGraph
from sepprune.sepnet import forward, trainable_parameters

log = logging.getLogger("root")

MAC_NOTE = (
    "Counts follow this repository's MAC convention (see sepprune.profiler) and are not comparable to "
    "externally reported GMac figures."
)
TIMING_MODES = ("forward", "forward_backward")
WARMUP_RUNS = 10


class LayerCost(NamedTuple):
    name: str
    kind: str
    component: Component
    params: int
    macs: int


class ProfileReport(object):
    """Per-layer costs with per-component sums, totals and ratios, all exact integers."""

    def __init__(self, rows: Sequence[LayerCost], input_length: int) -> None:
        self.rows = list(rows)
        self.input_length = input_length
        self.component_params = {component: 0 for component in Component}  # type: Dict[Component, int]
        self.component_macs = {component: 0 for component in Component}  # type: Dict[Component, int]
        for row in self.rows:
            self.component_params[row.component] += row.params
            self.component_macs[row.component] += row.macs
        self.total_params = sum(row.params for row in self.rows)
        self.total_macs = sum(row.macs for row in self.rows)

    def params_ratio(self, component: Component) -> float:
        return self.component_params[component] / self.total_params if self.total_params else 0.0

    def macs_ratio(self, component: Component) -> float:
        return self.component_macs[component] / self.total_macs if self.total_macs else 0.0

    def row(self, name: str) -> LayerCost:
        for row in self.rows:
            if row.name == name:
                return row
        raise InvalidArgumentError("No layer '{}' in profile".format(name))

    def summary(self, name: str = "model") -> Dict[str, str]:
        return table1_row(
            name,
            self.total_params,
            self.total_macs,
            self.component_params[Component.SEPARATOR],
            self.component_macs[Component.SEPARATOR],
        )

    def to_frame(self) -> DataFrame:
        records = [_row_record(row) for row in self.rows]
        for component in Component:
            records.append(
                {
                    "name": component.value,
                    "kind": "component",
                    "component": component.value,
                    "params": self.component_params[component],
                    "macs": self.component_macs[component],
                }
            )
        records.append(
            {"name": "total", "kind": "total", "component": "", "params": self.total_params, "macs": self.total_macs}
        )
        return DataFrame.from_records(records, columns=["name", "kind", "component", "params", "macs"])

    def to_dict(self) -> Dict:
        return {
            "input_length": self.input_length,
            "layers": [_row_record(row) for row in self.rows],
            "components": {
                component.value: {
                    "params": self.component_params[component],
                    "macs": self.component_macs[component],
                    "params_ratio": self.params_ratio(component),
                    "macs_ratio": self.macs_ratio(component),
                }
                for component in Component
            },
            "total": {"params": self.total_params, "macs": self.total_macs},
            "summary": self.summary(),
            "note": MAC_NOTE,
        }

    def to_csv(self, path: str) -> None:
        self.to_frame().to_csv(path, index=False)

    def to_json(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)


def _row_record(row: LayerCost) -> Dict:
    return {
        "name": row.name,
        "kind": row.kind,
        "component": row.component.value,
        "params": row.params,
        "macs": row.macs,
    }


def _format_ratio(part: float, whole: float) -> str:
    return "{:.2f}%".format(100.0 * part / whole) if whole else "n/a"


def table1_row(name: str, total_params: float, total_macs: float, sm_params: float, sm_macs: float) -> Dict[str, str]:
    """A cost summary row in millions of parameters and GMac, with the separator (SM) shares."""
    return {
        "Model": name,
        "Total Params": "{:.2f} M".format(total_params / 1e6),
        "Total MACs": "{:.2f} GMac".format(total_macs / 1e9),
        "Params of the SM": "{:.2f} M".format(sm_params / 1e6),
        "MACs of the SM": "{:.2f} GMac".format(sm_macs / 1e9),
        "Params ratio": _format_ratio(sm_params, total_params),
        "MACs ratio": _format_ratio(sm_macs, total_macs),
    }


def layer_lengths(layers: Sequence[LayerSpec], input_length: int) -> Dict[str, int]:
    """Time length of every layer's output (per input, for layers applied to several inputs)."""
    if input_length < 1:
        raise InvalidArgumentError("Input length must be positive, got {}".format(input_length))
    lengths = {MIXTURE: input_length}
    for layer in layers:
        length = lengths[layer.inputs[0]]
        if layer.kind in (LayerKind.CONV1D, LayerKind.POINTWISE_CONV):
            length = (length + 2 * layer.padding - layer.dilation * (layer.kernel - 1) - 1) // layer.stride + 1
        elif layer.kind == LayerKind.CONV_TRANSPOSE1D:
            length = (length - 1) * layer.stride - 2 * layer.padding + layer.kernel
        if length < 1:
            raise InvalidArgumentError(
                "Input length {} is too short: layer '{}' would produce {} samples".format(
                    input_length, layer.name, length
                )
            )
        lengths[layer.name] = length
    return lengths


def layer_cost(layer: LayerSpec, in_length: int, out_length: int) -> LayerCost:
    params = int(sum(int(np.prod(shape)) for shape in layer.parameter_shapes().values()))
    applications = len(layer.inputs)
    elements = layer.out_channels * out_length
    if layer.kind in (LayerKind.CONV1D, LayerKind.POINTWISE_CONV):
        macs = layer.out_channels * (layer.in_channels // layer.groups) * layer.kernel * out_length * applications
    elif layer.kind == LayerKind.CONV_TRANSPOSE1D:
        macs = layer.in_channels * (layer.out_channels // layer.groups) * layer.kernel * in_length * applications
    elif layer.kind == LayerKind.CHANNEL_NORM:
        macs = 4 * elements
    elif layer.kind == LayerKind.SPLIT_MASKS:
        macs = 0
    else:
        macs = elements
    return LayerCost(layer.name, layer.kind.value, layer.component, params, int(macs))


def profile_layers(layers: Sequence[LayerSpec], input_length: int) -> ProfileReport:
    lengths = layer_lengths(layers, input_length)
    rows = [layer_cost(layer, lengths[layer.inputs[0]], lengths[layer.name]) for layer in layers]
    return ProfileReport(rows, input_length)


def profile(model: ModelGraph, input_length_samples: int) -> ProfileReport:
    report = profile_layers(model.layers, input_length_samples)
    log.debug(
        "Profiled {} layers: {} params, {} MACs at {} samples".format(
            len(report.rows), report.total_params, report.total_macs, input_length_samples
        )
    )
    return report


def heaviest_component(report: ProfileReport) -> Component:
    order = list(Component)
    return min(
        Component,
        key=lambda c: (-report.component_macs[c], -report.component_params[c], order.index(c)),
    )


def timing_harness(
    model: ModelGraph,
    input_length: int,
    runs: int = 1000,
    mode: str = "forward",
    warmup: int = WARMUP_RUNS,
    seed: int = 0,
) -> float:
    """
    Mean wall-clock milliseconds of one forward (inference) or forward plus backward (training) pass over a
    fixed random input, after `warmup` untimed runs.
    """
    if runs < 1:
        raise InvalidArgumentError("runs must be >= 1, got {}".format(runs))
    if mode not in TIMING_MODES:
        raise InvalidArgumentError("Unknown timing mode '{}', expected one of {}".format(mode, TIMING_MODES))
    mixture = np.random.default_rng(seed).standard_normal((1, 1, input_length)).astype(model.dtype)

    if mode == "forward":

        def step() -> None:
            forward(model, mixture)

    else:
        params = trainable_parameters(model)

        def step() -> None:
            with Tape() as tape:
                estimate = forward(model, mixture, params=params)
                tape.backward(F.mean(F.square(estimate)))
            for param in params.values():
                param.zero_grad()

    for _ in range(warmup):
        step()
    timings = []  # type: List[float]
    for _ in range(runs):
        start = time.perf_counter()
        step()
        timings.append(time.perf_counter() - start)
    mean_ms = 1000.0 * float(np.mean(timings))
    log.info("Mean {} time over {} runs: {:.3f} ms".format(mode, runs, mean_ms))
    return mean_ms


def speedup(original_ms: float, pruned_ms: float) -> Optional[float]:
    if pruned_ms <= 0:
        return None
    return original_ms / pruned_ms
