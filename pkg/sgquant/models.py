"""Registry of built-in classifier architectures."""

# Each entry: conv channel widths (3x3 conv, pad 1 -> PACT -> 2x2 max-pool per
# stage) and the hidden dense width before the classifier layer
ARCHITECTURES = {
    'default': {
        "channels": (16, 32, 64),
        "hidden": 128,
    },
    'small': {
        "channels": (8, 16),
        "hidden": 32,
    },
    'tiny': {
        "channels": (4,),
        "hidden": 0,
    },
}


def architectureLayers(arch='default', channels=None, hidden=None):
    """Expand a named architecture into its layer list.

    The final dense layer has ``outFeatures`` None, resolved to the number of
    classes when the model is built.

    :param str arch: Key of ARCHITECTURES
    :param tuple channels: Override conv channel widths
    :param int hidden: Override hidden dense width (0 for none)

    :return: Layer descriptors
    :rtype: list(dict)
    """
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture '{arch}', choose from {sorted(ARCHITECTURES)}")
    entry = ARCHITECTURES[arch]
    channels = entry["channels"] if channels is None else tuple(channels)
    hidden = entry["hidden"] if hidden is None else hidden
    if not channels or any(int(c) < 1 for c in channels):
        raise ValueError(f"conv channel widths must be positive, got {channels}")
    if hidden < 0:
        raise ValueError(f"hidden width must be non-negative, got {hidden}")

    layers = []
    for ch in channels:
        layers.append({'type': 'conv2d', 'outChannels': int(ch), 'kernel': 3, 'stride': 1, 'padding': 1})
        layers.append({'type': 'pact'})
        layers.append({'type': 'maxpool', 'window': 2})
    layers.append({'type': 'flatten'})
    if hidden:
        layers.append({'type': 'dense', 'outFeatures': int(hidden)})
        layers.append({'type': 'pact'})
    layers.append({'type': 'dense', 'outFeatures': None})
    return layers


def describeLayers(layers):
    """Compact text form of a layer list, e.g. 'conv2d:16:3:1:1,pact,maxpool:2'."""
    parts = []
    for layer in layers:
        kind = layer['type']
        if kind == 'conv2d':
            parts.append(f"conv2d:{layer['outChannels']}:{layer['kernel']}:{layer['stride']}:{layer['padding']}")
        elif kind == 'maxpool':
            parts.append(f"maxpool:{layer['window']}")
        elif kind == 'dense':
            parts.append(f"dense:{layer['outFeatures']}")
        else:
            parts.append(kind)
    return ",".join(parts)


def parseLayers(text):
    """Inverse of :func:`describeLayers`."""
    layers = []
    for part in text.split(","):
        fields = part.split(":")
        kind = fields[0]
        try:
            if kind == 'conv2d':
                out, kernel, stride, padding = (int(f) for f in fields[1:])
                layers.append({'type': 'conv2d', 'outChannels': out, 'kernel': kernel,
                               'stride': stride, 'padding': padding})
            elif kind == 'maxpool':
                layers.append({'type': 'maxpool', 'window': int(fields[1])})
            elif kind == 'dense':
                out = None if fields[1] == 'None' else int(fields[1])
                layers.append({'type': 'dense', 'outFeatures': out})
            elif kind in ('pact', 'flatten') and len(fields) == 1:
                layers.append({'type': kind})
            else:
                raise ValueError(f"unknown layer '{part}'")
        except (IndexError, ValueError) as e:
            raise ValueError(f"cannot parse layer '{part}': {e}") from None
    return layers
