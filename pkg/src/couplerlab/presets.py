"""Bundled device configurations."""

from __future__ import annotations

import json
from importlib import resources

from .device import DeviceSpec, device_from_dict


def stack8_document() -> dict:
    """Raw config document for the bundled two-layer eight-qubit device."""
    text = resources.files("couplerlab.configs").joinpath("stack8.json").read_text()
    return json.loads(text)


def stack8() -> DeviceSpec:
    """Representative two-chip device: 8 qubits on two layers (2x2 per chip),
    planar couplers within each chip, and vertical couplers on the carrier
    layer between aligned qubit pairs. Parameters are typical published
    values, not a reconstruction of any particular physical sample.
    """
    return device_from_dict(stack8_document())
