"""Single-shot multibox machinery: auxiliary layers, prediction heads, trimming.

The single-shot net predicts straight from a ladder of feature maps: the top
backbone taps, a chain of stride-2 auxiliary convs named ``extra1..extraK``
grown on the deepest tap, and a final global-max-pool source named ``pool``.
Each source carries a small 3x3 head emitting, per default box, class logits
over background + C classes and 4 box deltas.

Trimming removes top auxiliary layers: any aux conv above a removed one loses
its input and goes too, while ``pool`` survives by re-binding to the topmost
remaining layer.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from uridet.nets.layers import Conv2d, collect_params
from uridet.priors import DefaultBoxSpec, FeatureMapSpec


class InvalidTrimError(ValueError):
    pass


@dataclass(frozen=True)
class SsdHeadConfig:
    """Prediction sources: backbone taps, aux conv channels, optional pool."""

    base_taps: tuple = ("c2", "c3")
    aux_channels: tuple = (32, 32, 32, 32)
    use_pool_source: bool = True
    ratios: tuple = (1.0, 2.0, 0.5)

    def __post_init__(self):
        object.__setattr__(self, "base_taps", tuple(self.base_taps))
        object.__setattr__(self, "aux_channels", tuple(int(c) for c in self.aux_channels))
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if not self.sources:
            raise ValueError("head has no prediction sources")

    @property
    def aux_names(self) -> tuple:
        return tuple(f"extra{i + 1}" for i in range(len(self.aux_channels)))

    @property
    def sources(self) -> tuple:
        out = self.base_taps + self.aux_names
        if self.use_pool_source:
            out = out + ("pool",)
        return out

    @property
    def boxes_per_cell(self) -> int:
        return len(self.ratios) + 1


def trim_ssd(head: SsdHeadConfig, removed) -> SsdHeadConfig:
    """Drop auxiliary prediction sources (and any that lose their input)."""
    removed = set(removed)
    allowed = set(head.aux_names) | ({"pool"} if head.use_pool_source else set())
    bad = removed - allowed
    if bad:
        raise InvalidTrimError(
            f"cannot trim non-auxiliary layer(s) {sorted(bad)}; "
            f"auxiliary layers are {sorted(allowed)}"
        )
    kept = []
    for name, c in zip(head.aux_names, head.aux_channels):
        if name in removed:
            break  # layers above lose their input
        kept.append(c)
    return replace(
        head,
        aux_channels=tuple(kept),
        use_pool_source=head.use_pool_source and "pool" not in removed,
    )


def source_specs(head: SsdHeadConfig, backbone_specs: dict, input_size: int):
    """FeatureMapSpec for every prediction source, in source order."""
    specs = []
    for tap in head.base_taps:
        specs.append(backbone_specs[tap])
    prev = specs[-1]
    for name, c in zip(head.aux_names, head.aux_channels):
        h = (prev.height - 1) // 2 + 1
        w = (prev.width - 1) // 2 + 1
        specs.append(FeatureMapSpec(name, prev.stride * 2, h, w, c))
        prev = specs[-1]
    if head.use_pool_source:
        specs.append(FeatureMapSpec("pool", int(input_size), 1, 1, prev.channels))
    return specs


def default_box_spec(head: SsdHeadConfig, backbone_specs, input_size, s_min, s_max):
    specs = tuple(source_specs(head, backbone_specs, input_size))
    return DefaultBoxSpec(
        s_min=s_min,
        s_max=s_max,
        maps=specs,
        ratios_per_map=tuple(head.ratios for _ in specs),
    )


class AuxChain:
    """Stride-2 3x3 convs stacked on the deepest backbone tap."""

    def __init__(self, in_channels, head: SsdHeadConfig, rng):
        self.convs = []
        cin = in_channels
        for name, cout in zip(head.aux_names, head.aux_channels):
            self.convs.append(
                Conv2d(f"ssd.{name}", cin, cout, ksize=3, stride=2, pad=1, rng=rng, relu=True)
            )
            cin = cout
        self.names = head.aux_names

    def params(self):
        return collect_params(*self.convs)

    def forward(self, top):
        out = {}
        x = top
        for name, conv in zip(self.names, self.convs):
            x = conv.forward(x)
            out[name] = x
        return out

    def backward(self, grads: dict):
        """Propagate per-layer output grads down the chain; returns d(top)."""
        dx = None
        for name, conv in zip(reversed(self.names), reversed(self.convs)):
            g = grads.get(name)
            if g is not None:
                dx = g if dx is None else dx + g
            if dx is None:
                continue
            dx = conv.backward(dx)
        return dx


class GlobalMaxPool:
    def __init__(self):
        self._shape = None
        self._arg = None

    def params(self):
        return {}

    def forward(self, x):
        self._shape = x.shape
        c = x.shape[0]
        flat = x.reshape(c, -1)
        self._arg = np.argmax(flat, axis=1)
        return flat[np.arange(c), self._arg].reshape(c, 1, 1)

    def backward(self, dy):
        c = self._shape[0]
        dx = np.zeros((c, self._shape[1] * self._shape[2]))
        dx[np.arange(c), self._arg] = dy.reshape(c)
        return dx.reshape(self._shape)


class MultiboxHead:
    """Per-source 3x3 conv heads, flattened in default-box order."""

    def __init__(self, head: SsdHeadConfig, source_channels: dict, num_classes, rng):
        self.head = head
        self.num_classes = num_classes
        self.fields = num_classes + 1 + 4
        self.convs = {}
        for name in head.sources:
            cout = head.boxes_per_cell * self.fields
            self.convs[name] = Conv2d(
                f"multibox.{name}", source_channels[name], cout, ksize=3, pad=1, rng=rng
            )
        self._shapes = None

    def params(self):
        return collect_params(*self.convs.values())

    def forward(self, sources: dict):
        """``{source: (C, H, W)}`` -> (logits ``(N, C+1)``, deltas ``(N, 4)``).

        N runs over sources in order, cells row-major, box slot within cell;
        index-aligned with the default boxes generated from the same specs.
        """
        logits = []
        deltas = []
        self._shapes = {}
        for name in self.head.sources:
            raw = self.convs[name].forward(sources[name])
            _, h, w = raw.shape
            self._shapes[name] = (h, w)
            per_box = raw.transpose(1, 2, 0).reshape(-1, self.fields)
            logits.append(per_box[:, : self.num_classes + 1])
            deltas.append(per_box[:, self.num_classes + 1 :])
        return np.concatenate(logits, axis=0), np.concatenate(deltas, axis=0)

    def backward(self, dlogits, ddeltas):
        out = {}
        offset = 0
        for name in self.head.sources:
            h, w = self._shapes[name]
            n = h * w * self.head.boxes_per_cell
            block = np.zeros((n, self.fields))
            block[:, : self.num_classes + 1] = dlogits[offset : offset + n]
            block[:, self.num_classes + 1 :] = ddeltas[offset : offset + n]
            raw = block.reshape(h, w, -1).transpose(2, 0, 1)
            out[name] = self.convs[name].backward(np.ascontiguousarray(raw))
            offset += n
        return out
