import pytest

from sgquant import models
from sgquant.nn import buildModel


def test_registered_architectures_build():
    for arch in models.ARCHITECTURES:
        model = buildModel(arch, (3, 16, 16), 8)
        assert model.layers[-1]['outFeatures'] == 8


def test_tiny_layers():
    kinds = [layer['type'] for layer in models.architectureLayers('tiny')]
    assert kinds == ['conv2d', 'pact', 'maxpool', 'flatten', 'dense']


def test_overrides():
    layers = models.architectureLayers('default', channels=(4, 4), hidden=0)
    assert [layer['outChannels'] for layer in layers if layer['type'] == 'conv2d'] == [4, 4]
    assert sum(layer['type'] == 'dense' for layer in layers) == 1


@pytest.mark.parametrize("kwargs", [dict(arch='resnet'), dict(channels=(0,)), dict(channels=()), dict(hidden=-1)])
def test_invalid_architectures(kwargs):
    with pytest.raises(ValueError):
        models.architectureLayers(**kwargs)


def test_describe_parse_round_trip():
    layers = models.architectureLayers('small')
    text = models.describeLayers(layers)
    assert text.startswith("conv2d:8:3:1:1,pact,maxpool:2")
    assert text.endswith("dense:32,pact,dense:None")
    assert models.parseLayers(text) == layers


@pytest.mark.parametrize("text", ["conv2d:8", "softmax", "pact:2", "dense:x"])
def test_parse_rejects_bad_layers(text):
    with pytest.raises(ValueError):
        models.parseLayers(text)
