"""Single-hourglass network assembly and execution.

The network is one flat LayerNode graph: a real 7x7 stride-2 stem conv, three
stem blocks (64 -> 128 -> 128 -> channels) with a max-pool after the first,
a recursive hourglass (per level: a skip block, pool, down block, recurse or
bottom block, up block, nearest upsample, elementwise sum), one post block,
and a real 1x1 head conv producing the output maps. With binarization on,
only the first stem conv and the head conv(s) stay real; everything else runs
through bn -> sign -> conv with -1-valued padding.

Execution is a topological walk with a tape for the manual backward pass.
Binarized convs run either as fake-quantized dense float convs (training and
oracle checks) or as bit-packed XNOR-popcount convs (inference).
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import ops
from .bintensor import (
    BitPlaneTensor,
    QuantizationPolicy,
    ShapeError,
    quantize_weights,
    unpack_bits,
)
from .blocks import BlockSpec, LayerNode, build_block, toposort, with_prefix

STEM_WIDTHS = (64, 128, 128)  # first conv out, block1 out, block2 out; block3 -> channels


@dataclass(frozen=True)
class NetworkSpec:
    block_variant: str = "hpm"
    channels: int = 256
    hg_depth: int = 4
    input_resolution: tuple[int, int] = (256, 256)
    head: str = "heatmaps"  # or "segmentation"
    head_maps: int = 16  # landmarks K or classes C
    binarize: bool = True
    relu_after_conv: bool = False

    @property
    def output_resolution(self) -> tuple[int, int]:
        return (self.input_resolution[0] // 4, self.input_resolution[1] // 4)

    def validate(self):
        div = 2 ** (self.hg_depth + 2)
        h, w = self.input_resolution
        if h % div or w % div:
            raise ShapeError(
                f"input resolution {h}x{w} must be divisible by {div} for depth {self.hg_depth}"
            )
        if self.hg_depth < 1:
            raise ShapeError("hourglass depth must be >= 1")
        if self.head not in ("heatmaps", "segmentation"):
            raise ValueError(f"unknown head {self.head!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_resolution"] = list(self.input_resolution)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        d = dict(d)
        d["input_resolution"] = tuple(d["input_resolution"])
        return cls(**d)


@dataclass
class ForwardTrace:
    shapes: dict[str, tuple[int, ...]] = field(default_factory=dict)
    sign_ratios: dict[str, float] = field(default_factory=dict)


class _Assembler:
    def __init__(self):
        self.nodes: list[LayerNode] = []

    def add(self, node: LayerNode) -> str:
        self.nodes.append(node)
        return node.id

    def simple(self, nid: str, kind: str, src: str, channels: int, **kw) -> str:
        return self.add(LayerNode(nid, kind, (src,), in_channels=channels,
                                  out_channels=channels, **kw))

    def conv(self, nid: str, src: str, k: int, cin: int, cout: int, stride: int = 1,
             binarized: bool = False) -> str:
        return self.add(
            LayerNode(nid, "conv", (src,), kernel=(k, k), stride=(stride, stride),
                      padding=(k // 2, k // 2), in_channels=cin, out_channels=cout,
                      binarized=binarized)
        )

    def block(self, prefix: str, block: BlockSpec, src: str) -> str:
        mapping = {}
        result = None
        for node in with_prefix(block.nodes, prefix):
            bare = node.id[len(prefix):]
            if bare == "input":
                mapping[node.id] = src
                continue
            if bare == "output":
                result = mapping[node.preds[0]]
                continue
            node = LayerNode(
                node.id, node.kind, tuple(mapping.get(p, p) for p in node.preds),
                kernel=node.kernel, stride=node.stride, padding=node.padding,
                in_channels=node.in_channels, out_channels=node.out_channels,
                binarized=node.binarized,
            )
            mapping[node.id] = node.id
            self.add(node)
        assert result is not None
        return result


def assemble_graph(spec: NetworkSpec) -> list[LayerNode]:
    """Build the full network node list (topologically ordered)."""
    spec.validate()
    a = _Assembler()
    c = spec.channels

    def blk(prefix: str, cin: int, cout: int, src: str) -> str:
        b = build_block(spec.block_variant, cin, cout, binarize=spec.binarize,
                        relu_after_conv=spec.relu_after_conv)
        return a.block(prefix, b, src)

    a.add(LayerNode("input", "input", (), out_channels=3))
    cur = a.conv("stem.conv1", "input", 7, 3, STEM_WIDTHS[0], stride=2)
    cur = a.simple("stem.bn1", "bn", cur, STEM_WIDTHS[0])
    cur = a.simple("stem.relu1", "relu", cur, STEM_WIDTHS[0])
    cur = blk("stem.b1.", STEM_WIDTHS[0], STEM_WIDTHS[1], cur)
    cur = a.simple("stem.pool", "maxpool", cur, STEM_WIDTHS[1])
    cur = blk("stem.b2.", STEM_WIDTHS[1], STEM_WIDTHS[2], cur)
    cur = blk("stem.b3.", STEM_WIDTHS[2], c, cur)

    def hourglass(prefix: str, level: int, src: str) -> str:
        up1 = blk(f"{prefix}up1.", c, c, src)
        pooled = a.simple(f"{prefix}pool", "maxpool", src, c)
        low1 = blk(f"{prefix}low1.", c, c, pooled)
        if level > 1:
            low2 = hourglass(f"{prefix}d{level - 1}.", level - 1, low1)
        else:
            low2 = blk(f"{prefix}low2.", c, c, low1)
        low3 = blk(f"{prefix}low3.", c, c, low2)
        up2 = a.simple(f"{prefix}up2", "upsample", low3, c)
        return a.add(LayerNode(f"{prefix}join", "add", (up1, up2),
                               in_channels=c, out_channels=c))

    cur = hourglass(f"hg{spec.hg_depth}.", spec.hg_depth, cur)
    cur = blk("post.b.", c, c, cur)
    cur = a.simple("head.bn", "bn", cur, c)
    cur = a.simple("head.relu", "relu", cur, c)
    cur = a.conv("head.conv", cur, 1, c, spec.head_maps)
    a.add(LayerNode("output", "output", (cur,), in_channels=spec.head_maps,
                    out_channels=spec.head_maps))
    return toposort(tuple(a.nodes))


def infer_shapes(nodes: list[LayerNode], input_shape: tuple[int, int, int, int]) -> dict[str, tuple]:
    """Analytic output shape per node from ConvParams composition."""
    shapes: dict[str, tuple] = {}
    for n in nodes:
        if n.kind == "input":
            shapes[n.id] = input_shape
            continue
        pn, pc, ph, pw = shapes[n.preds[0]]
        if n.kind == "conv":
            p = ops.ConvParams(n.kernel, n.stride, n.padding, n.in_channels, n.out_channels)
            oh, ow = p.out_size(ph, pw)
            shapes[n.id] = (pn, n.out_channels, oh, ow)
        elif n.kind in ("maxpool", "avgpool"):
            shapes[n.id] = (pn, pc, ph // 2, pw // 2)
        elif n.kind == "upsample":
            shapes[n.id] = (pn, pc, ph * 2, pw * 2)
        elif n.kind == "concat":
            shapes[n.id] = (pn, sum(shapes[p][1] for p in n.preds), ph, pw)
        else:
            shapes[n.id] = (pn, pc, ph, pw)
    return shapes


class Network:
    """Executable network: graph + parameters.

    weights maps conv node id -> latent float32 array (absent for models
    loaded in packed form); packed maps binarized conv id -> BitPlaneTensor.
    """

    def __init__(self, spec: NetworkSpec, nodes: list[LayerNode],
                 policy: QuantizationPolicy = QuantizationPolicy()):
        self.spec = spec
        self.nodes = nodes
        self.by_id = {n.id: n for n in nodes}
        self.policy = policy
        self.weights: dict[str, np.ndarray] = {}
        self.bn: dict[str, ops.BatchNormParams] = {}
        self.packed: dict[str, BitPlaneTensor] = {}
        for n in nodes:
            if n.kind == "bn":
                self.bn[n.id] = ops.BatchNormParams.identity(n.out_channels)

    # -- parameter plumbing -------------------------------------------------

    def conv_nodes(self) -> list[LayerNode]:
        return [n for n in self.nodes if n.kind == "conv"]

    def init_weights(self, seed: int = 0):
        rng = np.random.default_rng(seed)
        for n in self.conv_nodes():
            fan_in = n.kernel[0] * n.kernel[1] * n.in_channels
            std = np.sqrt(2.0 / fan_in)
            self.weights[n.id] = rng.normal(0.0, std, size=(
                n.out_channels, n.in_channels, *n.kernel)).astype(np.float32)
        self.packed.clear()

    def repack(self):
        """Quantize and bit-pack every binarized conv from its latent weights."""
        for n in self.conv_nodes():
            if n.binarized:
                self.packed[n.id] = quantize_weights(self.weights[n.id], self.policy)

    def binary_weight_parts(self, n: LayerNode) -> tuple[np.ndarray, np.ndarray]:
        """(sign weights, alphas) for a binarized conv, from latent weights
        when present, else from the packed form."""
        if n.id in self.weights:
            b = quantize_weights(self.weights[n.id], self.policy)
        else:
            b = self.packed[n.id]
        return unpack_bits(b), b.alphas

    def effective_weight(self, n: LayerNode) -> np.ndarray:
        """alpha * sign(w) for a binarized conv, real weights otherwise."""
        if not n.binarized:
            return self.weights[n.id]
        signs, alphas = self.binary_weight_parts(n)
        return signs * alphas[:, None, None, None]

    # -- execution ------------------------------------------------------------

    def forward(self, x: np.ndarray, mode: str = "eval", use_packed: bool = False,
                want_trace: bool = False, keep_tape: bool = False):
        """Run the graph. Returns output, or (output, trace) with want_trace.

        mode "train" uses batch statistics in bn and records a tape for
        backward(); "eval" uses running statistics. use_packed routes
        binarized convs through the XNOR-popcount kernel.
        """
        values: dict[str, np.ndarray] = {}
        tape: list[tuple[LayerNode, dict]] = []
        trace = ForwardTrace() if want_trace else None
        out = None
        for node in self.nodes:
            if node.kind == "input":
                values[node.id] = x.astype(np.float32, copy=False)
            elif node.kind == "output":
                out = values[node.preds[0]]
                values[node.id] = out
            else:
                v = values[node.preds[0]]
                cache: dict = {}
                if node.kind == "conv":
                    p = ops.ConvParams(node.kernel, node.stride, node.padding,
                                       node.in_channels, node.out_channels)
                    if node.binarized:
                        if use_packed:
                            if node.id not in self.packed:
                                self.repack()
                            y = ops.conv2d_binary(v, self.packed[node.id], p)
                        else:
                            # convolve the bare +-1 signs so the accumulation
                            # is exact integers (bit-identical to the packed
                            # path), then scale once per output channel
                            signs, alphas = self.binary_weight_parts(node)
                            y = ops.conv2d_dense(v, signs, p, pad_value=-1.0)
                            y = y * alphas[None, :, None, None]
                            if keep_tape:
                                cache = {"x": v, "w_signs": signs, "p": p,
                                         "alphas": alphas, "pad": -1.0}
                    else:
                        w = self.weights[node.id]
                        y = ops.conv2d_dense(v, w, p)
                        if keep_tape:
                            cache = {"x": v, "w_eff": w, "p": p, "pad": 0.0}
                elif node.kind == "bn":
                    y, bn_cache = ops.batchnorm(v, self.bn[node.id], mode)
                    if keep_tape:
                        cache = {"bn_cache": bn_cache}
                elif node.kind == "sign":
                    y = ops.sign_act(v)
                    if keep_tape:
                        cache = {"x": v}
                    if trace is not None:
                        trace.sign_ratios[node.id] = float((y > 0).mean())
                elif node.kind == "relu":
                    y = ops.relu(v)
                    if keep_tape:
                        cache = {"x": v}
                elif node.kind == "maxpool":
                    y = ops.maxpool2d(v)
                    if keep_tape:
                        cache = {"x": v}
                elif node.kind == "avgpool":
                    y = ops.avgpool2d(v)
                    if keep_tape:
                        cache = {"x": v}
                elif node.kind == "upsample":
                    y = ops.upsample_nearest(v)
                elif node.kind == "concat":
                    y = ops.concat_channels([values[p] for p in node.preds])
                    if keep_tape:
                        cache = {"splits": [values[p].shape[1] for p in node.preds]}
                elif node.kind == "add":
                    y = ops.add(values[node.preds[0]], values[node.preds[1]])
                else:
                    raise ValueError(f"unknown node kind {node.kind!r}")
                values[node.id] = y
                if keep_tape:
                    tape.append((node, cache))
            if trace is not None:
                trace.shapes[node.id] = tuple(values[node.id].shape)
        if keep_tape:
            self._tape = tape
            self._values = values
        if want_trace:
            return out, trace
        return out

    def backward(self, grad_out: np.ndarray) -> dict[str, np.ndarray]:
        """Backpropagate through the last keep_tape forward.

        Returns gradients keyed by conv node id (latent weights, straight-
        through through sign with the alpha scale), plus "<bn id>.gamma" and
        "<bn id>.beta" for batch-norm parameters.
        """
        if not hasattr(self, "_tape"):
            raise RuntimeError("backward requires a forward(..., keep_tape=True) first")
        gvals: dict[str, np.ndarray] = {}
        grads: dict[str, np.ndarray] = {}
        out_node = next(n for n in self.nodes if n.kind == "output")
        gvals[out_node.preds[0]] = grad_out

        def accum(nid: str, g: np.ndarray):
            if nid in gvals:
                gvals[nid] = gvals[nid] + g
            else:
                gvals[nid] = g

        for node, cache in reversed(self._tape):
            gy = gvals.get(node.id)
            if gy is None:
                continue
            if node.kind == "conv":
                if node.binarized:
                    # y = alpha (.) conv(x, sign(w)): fold alpha into the
                    # upstream gradient, then straight-through to the latents
                    geff = gy * cache["alphas"][None, :, None, None]
                    gx, gw_signs = ops.conv2d_dense_backward(
                        cache["x"], cache["w_signs"], cache["p"], geff, cache["pad"])
                    mask = (np.abs(self.weights[node.id]) <= 1.0)
                    grads[node.id] = (gw_signs * mask).astype(np.float32)
                else:
                    gx, gw = ops.conv2d_dense_backward(
                        cache["x"], cache["w_eff"], cache["p"], gy, cache["pad"])
                    grads[node.id] = gw.astype(np.float32)
                accum(node.preds[0], gx)
            elif node.kind == "bn":
                if cache["bn_cache"] is None:
                    accum(node.preds[0], ops.batchnorm_eval_backward(gy, self.bn[node.id]))
                else:
                    gx, dgamma, dbeta = ops.batchnorm_backward(gy, cache["bn_cache"])
                    grads[f"{node.id}.gamma"] = dgamma
                    grads[f"{node.id}.beta"] = dbeta
                    accum(node.preds[0], gx)
            elif node.kind == "sign":
                accum(node.preds[0], ops.sign_act_backward(cache["x"], gy))
            elif node.kind == "relu":
                accum(node.preds[0], ops.relu_backward(cache["x"], gy))
            elif node.kind == "maxpool":
                accum(node.preds[0], ops.maxpool2d_backward(cache["x"], gy))
            elif node.kind == "avgpool":
                accum(node.preds[0], ops.avgpool2d_backward(cache["x"], gy))
            elif node.kind == "upsample":
                accum(node.preds[0], ops.upsample_nearest_backward(gy))
            elif node.kind == "concat":
                ofs = 0
                for pid, width in zip(node.preds, cache["splits"]):
                    accum(pid, gy[:, ofs:ofs + width])
                    ofs += width
            elif node.kind == "add":
                accum(node.preds[0], gy)
                accum(node.preds[1], gy)
        return grads


def build_network(spec: NetworkSpec, seed: int = 0,
                  policy: QuantizationPolicy = QuantizationPolicy()) -> Network:
    net = Network(spec, assemble_graph(spec), policy)
    net.init_weights(seed)
    return net


def block_network(block: BlockSpec, seed: int = 0,
                  policy: QuantizationPolicy = QuantizationPolicy()) -> Network:
    """Wrap a standalone block graph in an executable Network (spec-less)."""
    net = Network(None, toposort(block.nodes), policy)
    net.init_weights(seed)
    return net


# ---------------------------------------------------------------------------
# accounting

def count_network_params(spec: NetworkSpec, include_bn: bool = True) -> int:
    """Total learnable parameters: conv weights (no biases) and, by default,
    gamma/beta per batch-norm channel."""
    nodes = assemble_graph(spec)
    total = sum(n.conv_weight_count() for n in nodes)
    if include_bn:
        total += sum(2 * n.out_channels for n in nodes if n.kind == "bn")
    return total


def real_binary_split(spec: NetworkSpec) -> tuple[int, int]:
    """(real conv weights, binarized conv weights) for the network."""
    nodes = assemble_graph(spec)
    real = sum(n.conv_weight_count() for n in nodes if n.kind == "conv" and not n.binarized)
    binary = sum(n.conv_weight_count() for n in nodes if n.kind == "conv" and n.binarized)
    return real, binary


def packed_weight_bytes(spec: NetworkSpec) -> tuple[int, int]:
    """(packed word bytes for binarized convs, alpha count) from the graph."""
    from .bintensor import words_per_filter

    nodes = assemble_graph(spec)
    word_bytes = 0
    alpha_count = 0
    for n in nodes:
        if n.kind == "conv" and n.binarized:
            per_filter = words_per_filter(n.in_channels * n.kernel[0] * n.kernel[1]) * 8
            word_bytes += n.out_channels * per_filter
            alpha_count += n.out_channels
    return word_bytes, alpha_count


def memory_footprint(spec: NetworkSpec, packed: bool) -> int:
    """Bytes to hold the conv weights: 4 per real weight, plus packed words
    and 4 per alpha when packed. Batch-norm floats are identical in both
    forms and are accounted separately by the compression report."""
    real, binary = real_binary_split(spec)
    if not packed:
        return 4 * (real + binary)
    word_bytes, alpha_count = packed_weight_bytes(spec)
    return 4 * real + word_bytes + 4 * alpha_count
