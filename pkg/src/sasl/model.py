"""Declarative plain and residual CNNs with stable filter identifiers.

A :class:`NetworkSpec` is the immutable architecture. A :class:`Model` holds
the weights of one instance of it. Every prunable unit (a conv layer, a block
branch conv, a projection shortcut, or a hidden fully-connected layer) carries
the original channel indices of its surviving filters (``out_ids``) and of the
input channels it still reads (``in_ids``). Pruning slices those arrays and
the weights together, so a :class:`FilterId` never changes meaning.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .autodiff import (
    BatchNormState,
    DimensionError,
    Parameter,
    Tensor,
    align_add,
    avgpool2d,
    batchnorm,
    conv2d,
    conv_output_size,
    flatten,
    global_avgpool,
    linear,
    load_snapshot,
    no_grad,
    relu,
    save_snapshot,
)

SPARSITY_THRESHOLD = 1e-2


class ConstructionError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class DisconnectionError(RuntimeError):
    """Raised when removing filters would cut every path from input to logits."""


@dataclass(frozen=True, order=True)
class FilterId:
    layer_index: int
    channel_index: int

    def __str__(self) -> str:
        return f"{self.layer_index}:{self.channel_index}"


# ---------------------------------------------------------------------------
# declarative spec


@dataclass(frozen=True)
class ConvLayer:
    channels: int
    pool_after: bool = False
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    kind: str = "conv"


@dataclass(frozen=True)
class ResidualBlock:
    channels: int
    stride: int = 1
    projection: bool = False
    kernel: int = 3
    kind: str = "residual"


@dataclass(frozen=True)
class HiddenLinear:
    features: int
    kind: str = "linear"


_LAYER_TYPES = {"conv": ConvLayer, "residual": ResidualBlock, "linear": HiddenLinear}


@dataclass(frozen=True)
class UnitInfo:
    """Static description of one prunable unit."""

    layer_index: int
    kind: str  # "conv" or "linear"
    role: str  # conv | branch1 | branch2 | shortcut | fc
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    padding: int
    out_hw: tuple[int, int]
    group: int = 1  # input features per input channel (linear units after flatten)
    block: Optional[int] = None


@dataclass(frozen=True)
class NetworkSpec:
    family: str
    input_shape: tuple[int, int, int]
    class_count: int
    layers: tuple = ()
    head: str = "flatten"  # "flatten" or "gap"

    def __post_init__(self):
        self.units()  # shape propagation must succeed up front

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "input_shape": list(self.input_shape),
            "class_count": self.class_count,
            "head": self.head,
            "layers": [asdict(layer) for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        layers = tuple(_LAYER_TYPES[ld["kind"]](**ld) for ld in d["layers"])
        return cls(d["family"], tuple(d["input_shape"]), int(d["class_count"]), layers, d.get("head", "flatten"))

    def units(self) -> list[UnitInfo]:
        """Prunable units in layer-major order, with propagated shapes."""
        c, h, w = self.input_shape
        if min(c, h, w) < 1 or self.class_count < 1:
            raise ConstructionError("input shape and class count must be positive")
        if not any(layer.kind in ("conv", "residual") for layer in self.layers):
            raise ConstructionError("network needs at least one convolutional layer")
        out: list[UnitInfo] = []
        block = 0
        flat = False
        group = 1
        for layer in self.layers:
            idx = len(out)
            if layer.kind == "conv":
                if flat:
                    raise ConstructionError("conv layer after a fully-connected layer")
                if layer.channels < 1:
                    raise ConstructionError("conv channels must be >= 1")
                ho, wo = _conv_hw(h, w, layer.kernel, layer.stride, layer.padding)
                out.append(UnitInfo(idx, "conv", "conv", c, layer.channels, layer.kernel,
                                    layer.stride, layer.padding, (ho, wo)))
                c, h, w = layer.channels, ho, wo
                if layer.pool_after:
                    h, w = h // 2, w // 2
                    if h < 1 or w < 1:
                        raise ConstructionError("pooling drives the feature map below 1x1")
            elif layer.kind == "residual":
                if flat:
                    raise ConstructionError("residual block after a fully-connected layer")
                if layer.channels < 1:
                    raise ConstructionError("block channels must be >= 1")
                k, pad = layer.kernel, layer.kernel // 2
                ho, wo = _conv_hw(h, w, k, layer.stride, pad)
                needs_proj = layer.channels != c or layer.stride != 1
                if needs_proj and not layer.projection:
                    raise ConstructionError(
                        f"block {block}: {c}->{layer.channels} channels (stride {layer.stride}) "
                        "requires a declared projection shortcut")
                out.append(UnitInfo(idx, "conv", "branch1", c, layer.channels, k, layer.stride, pad,
                                    (ho, wo), block=block))
                out.append(UnitInfo(idx + 1, "conv", "branch2", layer.channels, layer.channels, k, 1, pad,
                                    (ho, wo), block=block))
                if layer.projection:
                    pho, pwo = _conv_hw(h, w, 1, layer.stride, 0)
                    if (pho, pwo) != (ho, wo):
                        raise ConstructionError(f"block {block}: shortcut and branch spatial sizes differ")
                    out.append(UnitInfo(idx + 2, "conv", "shortcut", c, layer.channels, 1, layer.stride, 0,
                                        (ho, wo), block=block))
                c, h, w = layer.channels, ho, wo
                block += 1
            elif layer.kind == "linear":
                if layer.features < 1:
                    raise ConstructionError("hidden features must be >= 1")
                if not flat:
                    flat = True
                    group = h * w if self.head == "flatten" else 1
                out.append(UnitInfo(idx, "linear", "fc", c, layer.features, 1, 1, 0, (1, 1), group=group))
                c, group = layer.features, 1
            else:  # pragma: no cover - guarded by _LAYER_TYPES
                raise ConstructionError(f"unknown layer kind {layer.kind!r}")
        return out

    def head_group(self) -> int:
        """Features per channel entering the classifier."""
        if any(layer.kind == "linear" for layer in self.layers):
            return 1
        _, h, w = self.final_map()
        return h * w if self.head == "flatten" else 1

    def final_map(self) -> tuple[int, int, int]:
        """(channels, H, W) of the last convolutional feature map."""
        c, h, w = self.input_shape
        for layer in self.layers:
            if layer.kind == "conv":
                h, w = _conv_hw(h, w, layer.kernel, layer.stride, layer.padding)
                c = layer.channels
                if layer.pool_after:
                    h, w = h // 2, w // 2
            elif layer.kind == "residual":
                h, w = _conv_hw(h, w, layer.kernel, layer.stride, layer.kernel // 2)
                c = layer.channels
        return c, h, w


def _conv_hw(h: int, w: int, k: int, stride: int, padding: int) -> tuple[int, int]:
    try:
        return conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding)
    except DimensionError as exc:
        raise ConstructionError(str(exc)) from exc


def build_plain_cnn(depth_config: Sequence, input_shape, class_count: int,
                    hidden: Sequence[int] = ()) -> NetworkSpec:
    """VGG-style stack of conv/BN/ReLU layers ending in a linear classifier.

    ``depth_config`` entries are ``(channels, pool_after)`` pairs or bare ints.
    """
    if not depth_config:
        raise ConstructionError("depth_config must contain at least one conv layer")
    layers = []
    for entry in depth_config:
        ch, pool = (entry, False) if isinstance(entry, int) else (int(entry[0]), bool(entry[1]))
        layers.append(ConvLayer(ch, pool_after=pool))
    layers.extend(HiddenLinear(int(f)) for f in hidden)
    return NetworkSpec("plain", tuple(int(v) for v in input_shape), int(class_count), tuple(layers), "flatten")


def build_residual_cnn(stage_config: Sequence, input_shape, class_count: int) -> NetworkSpec:
    """Residual CNN: a stem conv followed by stages of basic blocks.

    ``stage_config`` entries are ``(channels, blocks, stride, projection)``;
    the last two are optional (stride 1, no projection). Only the first block
    of a stage is strided and carries the projection.
    """
    if not stage_config:
        raise ConstructionError("stage_config must contain at least one stage")
    defaults = (None, None, 1, False)
    stages = [tuple(s) + defaults[len(s):] for s in stage_config]
    layers: list = [ConvLayer(int(stages[0][0]))]
    for channels, blocks, stride, projection in stages:
        if blocks < 1:
            raise ConstructionError("each stage needs at least one block")
        for b in range(blocks):
            layers.append(ResidualBlock(int(channels), stride=int(stride) if b == 0 else 1,
                                        projection=bool(projection) and b == 0))
    return NetworkSpec("residual", tuple(int(v) for v in input_shape), int(class_count), tuple(layers), "gap")


# ---------------------------------------------------------------------------
# runtime model


@dataclass
class Unit:
    info: UnitInfo
    weight: Parameter
    bn: BatchNormState
    out_ids: np.ndarray
    in_ids: np.ndarray

    @property
    def layer_index(self) -> int:
        return self.info.layer_index

    def forward(self, x: Tensor, training: bool) -> Tensor:
        i = self.info
        if i.kind == "conv":
            z = conv2d(x, self.weight.tensor, stride=i.stride, padding=i.padding)
        else:
            z = linear(x, self.weight.tensor, group=i.group)
        return batchnorm(z, self.bn, training)

    def filter_ids(self) -> list[FilterId]:
        return [FilterId(self.info.layer_index, int(c)) for c in self.out_ids]

    def select(self, out_pos: np.ndarray, in_pos: np.ndarray) -> "Unit":
        w = self.weight
        if self.info.kind == "linear" and self.info.group > 1:
            g = self.info.group
            cols = (in_pos[:, None] * g + np.arange(g)[None, :]).reshape(-1)
        else:
            cols = in_pos
        w = w.select(out_pos, axis=0).select(cols, axis=1)
        return Unit(self.info, w, self.bn.select(out_pos), self.out_ids[out_pos].copy(),
                    self.in_ids[in_pos].copy())


@dataclass
class Classifier:
    weight: Parameter
    bias: Parameter
    in_ids: np.ndarray
    group: int

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight.tensor, self.bias.tensor, group=self.group)


@dataclass
class BlockView:
    """Runtime view of one residual block."""

    index: int
    branch1: Unit
    branch2: Unit
    shortcut: Optional[Unit]
    channels: int

    @property
    def eliminated(self) -> bool:
        """True when every branch-output filter is gone: the block is its shortcut path."""
        return len(self.branch2.out_ids) == 0

    @property
    def alignment_mask(self) -> np.ndarray:
        """Per stream channel: True where the branch supplies a real feature map,
        False where it is presented as all-zero at the addition."""
        mask = np.zeros(self.channels, dtype=bool)
        mask[self.branch2.out_ids] = True
        return mask


@dataclass
class Flow:
    """Channel ids reaching each unit's input / leaving its output."""

    unit_in: dict[int, np.ndarray] = field(default_factory=dict)
    unit_out: dict[int, np.ndarray] = field(default_factory=dict)
    classifier_in: np.ndarray = None  # type: ignore[assignment]


class Model:
    def __init__(self, spec: NetworkSpec, units: dict[int, Unit], classifier: Classifier):
        self.spec = spec
        self.units = units
        self.classifier = classifier
        self._infos = spec.units()

    # -- construction -----------------------------------------------------

    @classmethod
    def init(cls, spec: NetworkSpec, seed: int = 0, gamma_init: float = 1.0) -> "Model":
        """He-initialized weights; BN gamma = ``gamma_init``, beta = 0."""
        rng = np.random.default_rng(seed)
        units: dict[int, Unit] = {}
        for info in spec.units():
            if info.kind == "conv":
                fan_in = info.in_channels * info.kernel ** 2
                w = rng.standard_normal((info.out_channels, info.in_channels, info.kernel, info.kernel))
            else:
                fan_in = info.in_channels * info.group
                w = rng.standard_normal((info.out_channels, fan_in))
            w *= np.sqrt(2.0 / fan_in)
            units[info.layer_index] = Unit(
                info,
                Parameter.of(w),
                BatchNormState.create(info.out_channels, gamma_init=gamma_init),
                np.arange(info.out_channels),
                np.arange(info.in_channels),
            )
        c, _, _ = spec.final_map()
        hidden = [i for i in spec.units() if i.kind == "linear"]
        feat = hidden[-1].out_channels if hidden else c
        group = spec.head_group()
        bound = 1.0 / np.sqrt(feat * group)
        classifier = Classifier(
            Parameter.of(rng.uniform(-bound, bound, (spec.class_count, feat * group))),
            Parameter.of(rng.uniform(-bound, bound, spec.class_count)),
            np.arange(feat),
            group,
        )
        return cls(spec, units, classifier)

    def copy(self) -> "Model":
        units = {k: u.select(np.arange(len(u.out_ids)), np.arange(len(u.in_ids))) for k, u in self.units.items()}
        cl = self.classifier
        classifier = Classifier(cl.weight.select(np.arange(cl.weight.data.shape[0])),
                                cl.bias.select(np.arange(cl.bias.data.shape[0])), cl.in_ids.copy(), cl.group)
        return Model(self.spec, units, classifier)

    # -- structure --------------------------------------------------------

    def unit_list(self) -> list[Unit]:
        return [self.units[i.layer_index] for i in self._infos]

    def blocks(self) -> list[BlockView]:
        views = []
        for info in self._infos:
            if info.role == "branch1":
                u1 = self.units[info.layer_index]
                u2 = self.units[info.layer_index + 1]
                sc = self.units.get(info.layer_index + 2)
                if sc is not None and sc.info.role != "shortcut":
                    sc = None
                views.append(BlockView(info.block, u1, u2, sc, u2.info.out_channels))
        return views

    def filters(self) -> list[FilterId]:
        return [f for u in self.unit_list() for f in u.filter_ids()]

    def gamma_of(self, fid: FilterId) -> float:
        u = self.units[fid.layer_index]
        pos = _positions(u.out_ids, [fid.channel_index])
        return float(u.bn.gamma.data[pos[0]])

    def parameters(self) -> list[Parameter]:
        """Parameters reachable from the logits."""
        skip: set[int] = set()
        for b in self.blocks():
            if b.eliminated:
                skip.update({b.branch1.layer_index, b.branch2.layer_index})
        params: list[Parameter] = []
        for u in self.unit_list():
            if u.layer_index in skip:
                continue
            params.extend([u.weight, u.bn.gamma, u.bn.beta])
        params.extend([self.classifier.weight, self.classifier.bias])
        return params

    def zero_grad(self) -> None:
        for u in self.unit_list():
            for p in (u.weight, u.bn.gamma, u.bn.beta):
                p.zero_grad()
        self.classifier.weight.zero_grad()
        self.classifier.bias.zero_grad()

    # -- evaluation -------------------------------------------------------

    def forward(self, x, training: bool = False) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.data.ndim != 4 or tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise DimensionError(f"model expects [N, {', '.join(map(str, self.spec.input_shape))}] input, "
                                 f"got {x.shape}")
        ids = np.arange(self.spec.input_shape[0])
        flat = False
        idx = 0
        block = 0
        blocks = self.blocks()
        for layer in self.spec.layers:
            if layer.kind == "conv":
                u = self.units[idx]
                _check_ids(u, ids)
                x, ids = relu(u.forward(x, training)), u.out_ids
                if layer.pool_after:
                    x = avgpool2d(x, 2)
                idx += 1
            elif layer.kind == "residual":
                b = blocks[block]
                x, ids = _block_forward(b, x, ids, training)
                idx += 3 if b.shortcut is not None else 2
                block += 1
            else:
                if not flat:
                    x = self._to_features(x)
                    flat = True
                u = self.units[idx]
                _check_ids(u, ids)
                x, ids = relu(u.forward(x, training)), u.out_ids
                idx += 1
        if not flat:
            x = self._to_features(x)
        if not np.array_equal(ids, self.classifier.in_ids):
            raise DimensionError("classifier input channels do not match the incoming feature channels")
        return self.classifier.forward(x)

    def _to_features(self, x: Tensor) -> Tensor:
        return flatten(x) if self.spec.head == "flatten" else global_avgpool(x)

    def predict_logits(self, x, batch_size: int = 256) -> np.ndarray:
        with no_grad():
            return np.concatenate([self.forward(x[s:s + batch_size], training=False).data
                                   for s in range(0, len(x), batch_size)], axis=0)

    # -- channel flow -----------------------------------------------------

    def flow(self, keep: Callable[[Unit], np.ndarray], input_dependent: bool = False) -> Flow:
        """Propagate live channel ids through the network.

        ``keep(unit)`` marks which of the unit's filters are alive. A residual
        stream channel is alive when any contributor to it is alive. With
        ``input_dependent`` a filter only counts if it reads a live channel.
        """
        f = Flow()
        ids = np.arange(self.spec.input_shape[0])

        def through(u: Unit, ids_in: np.ndarray) -> np.ndarray:
            live_in = np.intersect1d(ids_in, u.in_ids)
            f.unit_in[u.layer_index] = live_in
            out = u.out_ids[np.asarray(keep(u), dtype=bool)]
            if input_dependent and len(live_in) == 0:
                out = out[:0]
            f.unit_out[u.layer_index] = out
            return out

        blocks = {b.index: b for b in self.blocks()}
        for info in self._infos:
            if info.role in ("conv", "fc"):
                ids = through(self.units[info.layer_index], ids)
            elif info.role == "branch1":
                b = blocks[info.block]
                h = through(b.branch1, ids)
                br = through(b.branch2, h)
                sc = through(b.shortcut, ids) if b.shortcut is not None else ids
                ids = np.union1d(sc, br)
        f.classifier_in = np.intersect1d(ids, self.classifier.in_ids)
        return f

    def keep_all(self, u: Unit) -> np.ndarray:
        return np.ones(len(u.out_ids), dtype=bool)

    def keep_active(self, u: Unit, threshold: float = SPARSITY_THRESHOLD) -> np.ndarray:
        return np.abs(u.bn.gamma.data) >= threshold

    def is_connected(self, removed: Iterable[FilterId] = ()) -> bool:
        keep = _keep_except(removed)
        return len(self.flow(keep, input_dependent=True).classifier_in) > 0


def _keep_except(removed: Iterable[FilterId]) -> Callable[[Unit], np.ndarray]:
    by_layer: dict[int, list[int]] = {}
    for fid in removed:
        by_layer.setdefault(fid.layer_index, []).append(fid.channel_index)

    def keep(u: Unit) -> np.ndarray:
        gone = by_layer.get(u.layer_index)
        if not gone:
            return np.ones(len(u.out_ids), dtype=bool)
        return ~np.isin(u.out_ids, gone)

    return keep


def _positions(ids: np.ndarray, wanted) -> np.ndarray:
    wanted = np.asarray(wanted, dtype=int)
    pos = np.searchsorted(ids, wanted)
    if np.any(pos >= len(ids)) or np.any(ids[np.minimum(pos, len(ids) - 1)] != wanted):
        raise KeyError(f"channel ids {wanted.tolist()} not all present")
    return pos


def _check_ids(u: Unit, ids: np.ndarray) -> None:
    if not np.array_equal(u.in_ids, ids):
        raise DimensionError(f"unit {u.layer_index}: expected input channels {u.in_ids.tolist()}, "
                             f"got {ids.tolist()}")


def _block_forward(b: BlockView, x: Tensor, ids: np.ndarray, training: bool):
    if b.shortcut is not None:
        _check_ids(b.shortcut, ids)
        s, s_ids = b.shortcut.forward(x, training), b.shortcut.out_ids
    else:
        s, s_ids = x, ids
    if b.eliminated:
        return relu(s), s_ids
    _check_ids(b.branch1, ids)
    h = relu(b.branch1.forward(x, training))
    _check_ids(b.branch2, b.branch1.out_ids)
    r = b.branch2.forward(h, training)
    r_ids = b.branch2.out_ids
    out_ids = np.union1d(s_ids, r_ids)
    out = align_add(s, np.searchsorted(out_ids, s_ids), r, np.searchsorted(out_ids, r_ids), len(out_ids))
    return relu(out), out_ids


# ---------------------------------------------------------------------------
# filters, FLOPs, parameters


@dataclass(frozen=True)
class LayerMeta:
    kind: str
    role: str
    kernel: int
    out_hw: tuple[int, int]
    block: Optional[int]


def list_filters(model: Union[Model, NetworkSpec]) -> list[tuple[FilterId, LayerMeta]]:
    """Every prunable filter, ordered layer-major then channel-minor."""
    if isinstance(model, NetworkSpec):
        return [(FilterId(i.layer_index, c), LayerMeta(i.kind, i.role, i.kernel, i.out_hw, i.block))
                for i in model.units() for c in range(i.out_channels)]
    out = []
    for u in model.unit_list():
        i = u.info
        meta = LayerMeta(i.kind, i.role, i.kernel, i.out_hw, i.block)
        out.extend((fid, meta) for fid in u.filter_ids())
    return out


def unit_flops(info: UnitInfo, n_in: int, n_out: int) -> int:
    if info.kind == "conv":
        ho, wo = info.out_hw
        return 2 * info.kernel * info.kernel * n_in * n_out * ho * wo
    return 2 * n_in * info.group * n_out


def count_flops(model: Model, active_only: bool = False, threshold: float = SPARSITY_THRESHOLD) -> int:
    """Multiply-add FLOPs (2 per MAC) of one forward pass on one sample.

    Conv and linear layers only. With ``active_only`` channels whose BN scale
    is below ``threshold`` are treated as absent on both sides of each layer.
    """
    keep = (lambda u: model.keep_active(u, threshold)) if active_only else model.keep_all
    return _flow_flops(model, model.flow(keep))


def flops_without(model: Model, removed: Iterable[FilterId]) -> int:
    """FLOPs the model would have after rebuilding without ``removed``."""
    return _flow_flops(model, model.flow(_keep_except(removed)))


def _flow_flops(model: Model, f: Flow) -> int:
    total = 0
    for u in model.unit_list():
        total += unit_flops(u.info, len(f.unit_in[u.layer_index]), len(f.unit_out[u.layer_index]))
    total += 2 * len(f.classifier_in) * model.classifier.group * model.spec.class_count
    return int(total)


def count_params(model: Model, active_only: bool = False, threshold: float = SPARSITY_THRESHOLD) -> int:
    keep = (lambda u: model.keep_active(u, threshold)) if active_only else model.keep_all
    f = model.flow(keep)
    total = 0
    for u in model.unit_list():
        n_in, n_out = len(f.unit_in[u.layer_index]), len(f.unit_out[u.layer_index])
        per = u.info.kernel ** 2 if u.info.kind == "conv" else u.info.group
        total += per * n_in * n_out + 2 * n_out
    k = model.spec.class_count
    total += len(f.classifier_in) * model.classifier.group * k + k
    return int(total)


# ---------------------------------------------------------------------------
# pruning primitives


def mask_filters(model: Model, filters: Iterable[FilterId]) -> Model:
    """Copy of ``model`` with (gamma, beta) of ``filters`` set to zero."""
    out = model.copy()
    for fid in filters:
        u = out.units[fid.layer_index]
        pos = _positions(u.out_ids, [fid.channel_index])
        u.bn.gamma.data[pos] = 0.0
        u.bn.beta.data[pos] = 0.0
    return out


def rebuild(model: Model, removed: Iterable[FilterId] = (), check_connected: bool = True) -> Model:
    """Compact copy of ``model`` without ``removed`` filters.

    Input channels that no longer carry any live contributor are dropped
    from every consumer; residual additions realign through channel ids.
    """
    removed = list(removed)
    for fid in removed:
        if fid.layer_index not in model.units:
            raise KeyError(f"unknown filter {fid}")
        _positions(model.units[fid.layer_index].out_ids, [fid.channel_index])
    if check_connected and not model.is_connected(removed):
        raise DisconnectionError("removing these filters disconnects the input from the logits")
    f = model.flow(_keep_except(removed))
    units = {}
    for u in model.unit_list():
        out_pos = np.searchsorted(u.out_ids, f.unit_out[u.layer_index])
        in_pos = np.searchsorted(u.in_ids, f.unit_in[u.layer_index])
        units[u.layer_index] = u.select(out_pos, in_pos)
    cl = model.classifier
    in_pos = np.searchsorted(cl.in_ids, f.classifier_in)
    g = cl.group
    cols = (in_pos[:, None] * g + np.arange(g)[None, :]).reshape(-1)
    classifier = Classifier(cl.weight.select(cols, axis=1), cl.bias.select(np.arange(len(cl.bias.data))),
                            cl.in_ids[in_pos].copy(), g)
    return Model(model.spec, units, classifier)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: Model, directory) -> None:
    """Write ``structure.json`` (spec + surviving channel ids) and ``params.npz``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    structure = {
        "spec": model.spec.to_dict(),
        "units": {str(u.layer_index): {"out_ids": u.out_ids.tolist(), "in_ids": u.in_ids.tolist()}
                  for u in model.unit_list()},
        "classifier_in_ids": model.classifier.in_ids.tolist(),
    }
    (d / "structure.json").write_text(json.dumps(structure, indent=1, sort_keys=True))
    arrays: dict[str, np.ndarray] = {}
    for u in model.unit_list():
        p = f"unit{u.layer_index}."
        arrays[p + "weight"] = u.weight.data
        arrays[p + "weight.velocity"] = u.weight.velocity
        for name in ("gamma", "beta"):
            par = getattr(u.bn, name)
            arrays[p + name] = par.data
            arrays[p + name + ".velocity"] = par.velocity
        arrays[p + "running_mean"] = u.bn.running_mean
        arrays[p + "running_var"] = u.bn.running_var
    for name in ("weight", "bias"):
        par = getattr(model.classifier, name)
        arrays["classifier." + name] = par.data
        arrays["classifier." + name + ".velocity"] = par.velocity
    save_snapshot(d / "params.npz", arrays)


def load_checkpoint(directory, expected_spec: Optional[NetworkSpec] = None) -> Model:
    d = Path(directory)
    try:
        structure = json.loads((d / "structure.json").read_text())
        arrays = load_snapshot(d / "params.npz")
    except FileNotFoundError as exc:
        raise CheckpointError(f"incomplete checkpoint at {d}: {exc.filename}") from exc
    spec = NetworkSpec.from_dict(structure["spec"])
    if expected_spec is not None and spec != expected_spec:
        raise CheckpointError("checkpoint network spec does not match the expected spec")
    skeleton = Model.init(spec, seed=0)
    units = {}
    used = set()

    def take(name: str, shape) -> np.ndarray:
        if name not in arrays:
            raise CheckpointError(f"checkpoint is missing array {name!r}")
        a = arrays[name]
        if a.shape != tuple(shape):
            raise CheckpointError(f"array {name!r} has shape {a.shape}, expected {tuple(shape)}")
        used.add(name)
        return a

    for u in skeleton.unit_list():
        entry = structure["units"].get(str(u.layer_index))
        if entry is None:
            raise CheckpointError(f"checkpoint has no entry for unit {u.layer_index}")
        out_ids = np.asarray(entry["out_ids"], dtype=int)
        in_ids = np.asarray(entry["in_ids"], dtype=int)
        i = u.info
        if i.kind == "conv":
            wshape = (len(out_ids), len(in_ids), i.kernel, i.kernel)
        else:
            wshape = (len(out_ids), len(in_ids) * i.group)
        p = f"unit{u.layer_index}."
        weight = Parameter(Tensor(take(p + "weight", wshape)), velocity=take(p + "weight.velocity", wshape))
        c = (len(out_ids),)
        bn = BatchNormState(
            gamma=Parameter(Tensor(take(p + "gamma", c)), take(p + "gamma.velocity", c), weight_decay_enabled=False),
            beta=Parameter(Tensor(take(p + "beta", c)), take(p + "beta.velocity", c), weight_decay_enabled=False),
            running_mean=take(p + "running_mean", c),
            running_var=take(p + "running_var", c),
        )
        units[u.layer_index] = Unit(i, weight, bn, out_ids, in_ids)
    cin = np.asarray(structure["classifier_in_ids"], dtype=int)
    g = skeleton.classifier.group
    k = spec.class_count
    classifier = Classifier(
        Parameter(Tensor(take("classifier.weight", (k, len(cin) * g))), take("classifier.weight.velocity", (k, len(cin) * g))),
        Parameter(Tensor(take("classifier.bias", (k,))), take("classifier.bias.velocity", (k,))),
        cin, g)
    extra = set(arrays) - used
    if extra:
        raise CheckpointError(f"checkpoint has unexpected arrays: {sorted(extra)}")
    return Model(spec, units, classifier)
