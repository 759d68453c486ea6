from unittest import TestCase, main

import numpy as np

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


def tiny_layers(prunable=True):
    strided = {"kernel": 4, "stride": 2, "prunable": prunable}
    return [
        LayerSpec("enc", LayerKind.CONV1D, Component.ENCODER, 1, 2, (MIXTURE,), **strided),
        LayerSpec("act", LayerKind.RELU, Component.SEPARATOR, 2, 2, ("enc",), prunable=prunable),
        LayerSpec("dec", LayerKind.CONV_TRANSPOSE1D, Component.DECODER, 2, 1, ("act",), bias=True, **strided),
    ]


def tiny_group(ports=None, sites=("act",)):
    if ports is None:
        ports = (PortRef("enc", "out"), PortRef("act", "in"), PortRef("act", "out"), PortRef("dec", "in"))
    return DependencyGroup(0, "hidden", 2, tuple(ports), tuple(sites))


def tiny_parameters():
    return {
        "enc.weight": np.ones((2, 1, 4), dtype=np.float32),
        "dec.weight": np.ones((2, 1, 4), dtype=np.float32),
        "dec.bias": np.zeros((1,), dtype=np.float32),
    }


class TestLayerSpec(TestCase):
    def test_parameter_shapes(self):
        depthwise = LayerSpec("dw", LayerKind.CONV1D, Component.SEPARATOR, 8, 8, ("x",), kernel=3, groups=8, bias=True)
        self.assertTrue(depthwise.is_depthwise)
        self.assertEqual(depthwise.parameter_shapes(), {"weight": (8, 1, 3), "bias": (8,)})
        norm = LayerSpec("n", LayerKind.CHANNEL_NORM, Component.SEPARATOR, 8, 8, ("x",))
        self.assertEqual(norm.parameter_shapes(), {"gain": (8,), "bias": (8,)})
        self.assertEqual(LayerSpec("r", LayerKind.RELU, Component.ENCODER, 8, 8, ("x",)).parameter_shapes(), {})

    def test_transpose_weight_is_input_major(self):
        layer = tiny_layers()[2]
        self.assertEqual(layer.parameter_shapes()["weight"], (2, 1, 4))

    def test_describe_round_trip(self):
        layer = LayerSpec("split1", LayerKind.SPLIT_MASKS, Component.SEPARATOR, 8, 4, ("m",), speaker=1)
        self.assertEqual(LayerSpec.from_description(layer.describe()), layer)


class TestPortsAndGroups(TestCase):
    def test_port_str(self):
        self.assertEqual(str(PortRef("head", "out", 2)), "head.outx2")
        self.assertEqual(str(PortRef("head", "in")), "head.in")

    def test_group_round_trip(self):
        group = tiny_group()
        self.assertEqual(DependencyGroup.from_description(group.describe()), group)
        self.assertEqual(group.ports_of("act"), [PortRef("act", "in"), PortRef("act", "out")])


class TestModelGraph(TestCase):
    def setUp(self):
        self.model = ModelGraph(tiny_layers(), [tiny_group()], tiny_parameters(), {"note": 1})

    def test_accessors(self):
        self.assertEqual(self.model.parameter_count(), 8 + 8 + 1)
        self.assertEqual(self.model.output_layer.name, "dec")
        self.assertEqual(self.model.edges, [("enc", "act"), ("act", "dec")])
        self.assertEqual(self.model.dtype, np.float32)
        group, port = self.model.group_of("act", "out")
        self.assertEqual(group.group_id, 0)
        self.assertEqual(port, PortRef("act", "out"))
        self.assertIsNone(self.model.group_of("dec", "out"))
        self.assertEqual(set(self.model.layer_parameters("dec")), {"weight", "bias"})

    def test_unknown_names(self):
        with self.assertRaises(InvalidArgumentError):
            self.model.layer("nope")
        with self.assertRaises(InvalidArgumentError):
            self.model.group(7)

    def test_copy_is_independent(self):
        clone = self.model.copy()
        clone.parameters["enc.weight"][:] = 5.0
        self.assertEqual(float(self.model.parameters["enc.weight"][0, 0, 0]), 1.0)

    def test_astype(self):
        self.assertEqual(self.model.astype(np.float64).dtype, np.float64)

    def test_describe_round_trip(self):
        rebuilt = ModelGraph.from_description(self.model.describe(), tiny_parameters())
        self.assertEqual(rebuilt.layers, self.model.layers)
        self.assertEqual(rebuilt.dependency_groups, self.model.dependency_groups)
        self.assertEqual(rebuilt.config, {"note": 1})

    def test_rejects_edge_channel_mismatch(self):
        layers = tiny_layers()
        layers[1] = layers[1]._replace(in_channels=3, out_channels=3)
        with self.assertRaises(InvalidArgumentError):
            ModelGraph(layers, [tiny_group()], tiny_parameters())

    def test_rejects_forward_reference(self):
        layers = tiny_layers()
        layers[0] = layers[0]._replace(inputs=("act",))
        with self.assertRaises(InvalidArgumentError):
            ModelGraph(layers, [tiny_group()], tiny_parameters())

    def test_rejects_missing_parameter(self):
        parameters = tiny_parameters()
        del parameters["dec.bias"]
        with self.assertRaises(InvalidArgumentError):
            ModelGraph(tiny_layers(), [tiny_group()], parameters)

    def test_rejects_port_in_two_groups(self):
        second = DependencyGroup(1, "again", 2, (PortRef("act", "out"),), ())
        with self.assertRaises(InvalidArgumentError):
            ModelGraph(tiny_layers(), [tiny_group(), second], tiny_parameters())

    def test_rejects_mask_site_outside_group(self):
        with self.assertRaises(InvalidArgumentError):
            ModelGraph(tiny_layers(), [tiny_group(sites=("dec",))], tiny_parameters())

    def test_rejects_inconsistent_prunable_flag(self):
        with self.assertRaises(InvalidArgumentError):
            ModelGraph(tiny_layers(prunable=False), [tiny_group()], tiny_parameters())


if __name__ == "__main__":
    main()
