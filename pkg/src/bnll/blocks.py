"""Residual block zoo: graph builders and structural analyzers.

Each block variant is a small DAG of LayerNodes with a single input and a
single output. Convolutions are pre-activated (batch norm, then sign for the
binary case or relu for the real case, then conv). Five variants:

  bottleneck  1x1 (c -> c/2), 3x3, 1x1 back to c, identity skip
  wider       bottleneck with the thin 3x3 widened to c channels
  multiscale  two branches (same-scale 1x1+3x3; pooled 3x3 and decomposed
              5x5), concatenated to c/2 and projected back with a 1x1
  ms_no_1x1   multiscale with every 1x1 conv removed and the 3x3 widths
              rescaled so the concat restores c directly
  hpm         hierarchical cascade of three 3x3 convs (c/2, c/4, c/4) whose
              outputs concatenate to c; every conv is one hop from the output

When in_channels != out_channels the identity skip becomes a 1x1 projection
fed from the block's first pre-activation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .bintensor import ShapeError

VARIANTS = ("bottleneck", "wider", "multiscale", "ms_no_1x1", "hpm")

CONV_KINDS = ("conv",)
POOL_KINDS = ("maxpool", "avgpool")


@dataclass(frozen=True)
class LayerNode:
    id: str
    kind: str  # conv|bn|sign|relu|maxpool|avgpool|upsample|concat|add|input|output
    preds: tuple[str, ...] = ()
    kernel: tuple[int, int] = (0, 0)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    in_channels: int = 0
    out_channels: int = 0
    binarized: bool = False  # meaningful for conv nodes

    def conv_weight_count(self) -> int:
        if self.kind != "conv":
            return 0
        kh, kw = self.kernel
        return kh * kw * self.in_channels * self.out_channels


@dataclass(frozen=True)
class BlockSpec:
    variant: str
    in_channels: int
    out_channels: int
    nodes: tuple[LayerNode, ...]
    has_skip: bool = True
    notes: dict = field(default_factory=dict, compare=False)

    def node(self, node_id: str) -> LayerNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def conv_nodes(self) -> list[LayerNode]:
        return [n for n in self.nodes if n.kind == "conv"]


class _GraphBuilder:
    """Accumulates LayerNodes; tracks per-node channel counts."""

    def __init__(self, in_channels: int, act: str):
        self.nodes: list[LayerNode] = []
        self.channels: dict[str, int] = {}
        self.act = act
        self.add_node("input", "input", (), out_channels=in_channels)

    def add_node(self, node_id: str, kind: str, preds: tuple[str, ...], **kw) -> str:
        if any(n.id == node_id for n in self.nodes):
            raise ValueError(f"duplicate node id {node_id}")
        out = kw.pop("out_channels", None)
        if out is None:
            out = self.channels[preds[0]]
        node = LayerNode(node_id, kind, preds, out_channels=out, **kw)
        self.nodes.append(node)
        self.channels[node_id] = out
        return node_id

    def preact(self, name: str, src: str) -> str:
        """bn + activation in front of a conv; returns the activation's id."""
        c = self.channels[src]
        bn = self.add_node(f"{name}_bn", "bn", (src,), in_channels=c)
        return self.add_node(f"{name}_act", self.act, (bn,), in_channels=c)

    def conv(self, name: str, src: str, k: int, cout: int, binarized: bool) -> str:
        cin = self.channels[src]
        return self.add_node(
            name,
            "conv",
            (src,),
            kernel=(k, k),
            padding=(k // 2, k // 2),
            in_channels=cin,
            out_channels=cout,
            binarized=binarized,
        )

    def preact_conv(self, name: str, src: str, k: int, cout: int, binarized: bool,
                    relu_after: bool = False) -> str:
        a = self.preact(name, src)
        c = self.conv(name, a, k, cout, binarized)
        if relu_after:
            c = self.add_node(f"{name}_post_relu", "relu", (c,), in_channels=cout)
        return c


def _finish(gb: _GraphBuilder, variant: str, cin: int, cout: int,
            body_out: str, first_act: str, binarize: bool) -> BlockSpec:
    if gb.channels[body_out] != cout:
        raise ShapeError(
            f"{variant} body produces {gb.channels[body_out]} channels, wants {cout}"
        )
    if cin == cout:
        skip = "input"
    else:
        # projection rides the shared first pre-activation
        skip = gb.conv("skip_proj", first_act, 1, cout, binarize)
    out = gb.add_node("sum", "add", (body_out, skip), in_channels=cout)
    gb.add_node("output", "output", (out,), in_channels=cout)
    spec = BlockSpec(variant, cin, cout, tuple(gb.nodes))
    validate_block(spec)
    return spec


def build_block(variant: str, in_channels: int, out_channels: int | None = None,
                binarize: bool = True, relu_after_conv: bool = False) -> BlockSpec:
    if variant not in VARIANTS:
        raise ValueError(f"unknown block variant {variant!r}; choose from {VARIANTS}")
    cout = in_channels if out_channels is None else out_channels
    builder = _BUILDERS[variant]
    return builder(in_channels, cout, binarize, relu_after_conv)


def _build_bottleneck(cin: int, cout: int, binarize: bool, relu_after: bool) -> BlockSpec:
    if cout % 2:
        raise ShapeError(f"bottleneck needs even channels, got {cout}")
    mid = cout // 2
    gb = _GraphBuilder(cin, "sign" if binarize else "relu")
    a1 = gb.preact("pre1", "input")
    c1 = gb.conv("conv1", a1, 1, mid, binarize)
    if relu_after:
        c1 = gb.add_node("conv1_post_relu", "relu", (c1,), in_channels=mid)
    c2 = gb.preact_conv("conv2", c1, 3, mid, binarize, relu_after)
    c3 = gb.preact_conv("conv3", c2, 1, cout, binarize, relu_after)
    return _finish(gb, "bottleneck", cin, cout, c3, a1, binarize)


def _build_wider(cin: int, cout: int, binarize: bool, relu_after: bool) -> BlockSpec:
    gb = _GraphBuilder(cin, "sign" if binarize else "relu")
    a1 = gb.preact("pre1", "input")
    c1 = gb.conv("conv1", a1, 1, cout, binarize)
    if relu_after:
        c1 = gb.add_node("conv1_post_relu", "relu", (c1,), in_channels=cout)
    c2 = gb.preact_conv("conv2", c1, 3, cout, binarize, relu_after)
    c3 = gb.preact_conv("conv3", c2, 1, cout, binarize, relu_after)
    return _finish(gb, "wider", cin, cout, c3, a1, binarize)


def _build_multiscale(cin: int, cout: int, binarize: bool, relu_after: bool) -> BlockSpec:
    if cout % 8:
        raise ShapeError(f"multiscale needs channels divisible by 8, got {cout}")
    q = cout // 8
    gb = _GraphBuilder(cin, "sign" if binarize else "relu")
    # same-scale branch: 1x1 projection down, then 3x3
    a1 = gb.preact("pre_l1", "input")
    l1 = gb.conv("conv_l1", a1, 1, 2 * q, binarize)
    if relu_after:
        l1 = gb.add_node("conv_l1_post_relu", "relu", (l1,), in_channels=2 * q)
    l2 = gb.preact_conv("conv_l2", l1, 3, 2 * q, binarize, relu_after)
    # pooled branch: 3x3 next to a 5x5 decomposed into two 3x3
    pool = gb.add_node("pool", "maxpool", ("input",), in_channels=cin)
    ap = gb.preact("pre_r", pool)
    r1 = gb.conv("conv_r1", ap, 3, q, binarize)
    r2a = gb.conv("conv_r2a", ap, 3, q, binarize)
    if relu_after:
        r1 = gb.add_node("conv_r1_post_relu", "relu", (r1,), in_channels=q)
        r2a = gb.add_node("conv_r2a_post_relu", "relu", (r2a,), in_channels=q)
    r2b = gb.preact_conv("conv_r2b", r2a, 3, q, binarize, relu_after)
    rc = gb.add_node("concat_r", "concat", (r1, r2b), out_channels=2 * q)
    up = gb.add_node("up", "upsample", (rc,), in_channels=2 * q)
    merged = gb.add_node("concat_main", "concat", (l2, up), out_channels=4 * q)
    proj = gb.preact_conv("conv_f", merged, 1, cout, binarize, relu_after)
    return _finish(gb, "multiscale", cin, cout, proj, a1, binarize)


def _build_ms_no_1x1(cin: int, cout: int, binarize: bool, relu_after: bool) -> BlockSpec:
    if cout % 4:
        raise ShapeError(f"ms_no_1x1 needs channels divisible by 4, got {cout}")
    q = cout // 4
    gb = _GraphBuilder(cin, "sign" if binarize else "relu")
    a1 = gb.preact("pre_l", "input")
    left = gb.conv("conv_l", a1, 3, 2 * q, binarize)
    if relu_after:
        left = gb.add_node("conv_l_post_relu", "relu", (left,), in_channels=2 * q)
    pool = gb.add_node("pool", "maxpool", ("input",), in_channels=cin)
    ap = gb.preact("pre_r", pool)
    r1 = gb.conv("conv_r1", ap, 3, q, binarize)
    r2a = gb.conv("conv_r2a", ap, 3, q, binarize)
    if relu_after:
        r1 = gb.add_node("conv_r1_post_relu", "relu", (r1,), in_channels=q)
        r2a = gb.add_node("conv_r2a_post_relu", "relu", (r2a,), in_channels=q)
    r2b = gb.preact_conv("conv_r2b", r2a, 3, q, binarize, relu_after)
    rc = gb.add_node("concat_r", "concat", (r1, r2b), out_channels=2 * q)
    up = gb.add_node("up", "upsample", (rc,), in_channels=2 * q)
    merged = gb.add_node("concat_main", "concat", (left, up), out_channels=cout)
    return _finish(gb, "ms_no_1x1", cin, cout, merged, a1, binarize)


def _build_hpm(cin: int, cout: int, binarize: bool, relu_after: bool) -> BlockSpec:
    if cout % 4:
        raise ShapeError(f"hpm needs channels divisible by 4, got {cout}")
    gb = _GraphBuilder(cin, "sign" if binarize else "relu")
    a1 = gb.preact("pre1", "input")
    c1 = gb.conv("conv1", a1, 3, cout // 2, binarize)
    if relu_after:
        c1 = gb.add_node("conv1_post_relu", "relu", (c1,), in_channels=cout // 2)
    c2 = gb.preact_conv("conv2", c1, 3, cout // 4, binarize, relu_after)
    c3 = gb.preact_conv("conv3", c2, 3, cout // 4, binarize, relu_after)
    cat = gb.add_node("concat", "concat", (c1, c2, c3), out_channels=cout)
    return _finish(gb, "hpm", cin, cout, cat, a1, binarize)


_BUILDERS = {
    "bottleneck": _build_bottleneck,
    "wider": _build_wider,
    "multiscale": _build_multiscale,
    "ms_no_1x1": _build_ms_no_1x1,
    "hpm": _build_hpm,
}


def build_bottleneck(c: int, **kw) -> BlockSpec:
    return build_block("bottleneck", c, c, **kw)


def build_wider(c: int, **kw) -> BlockSpec:
    return build_block("wider", c, c, **kw)


def build_multiscale(c: int, **kw) -> BlockSpec:
    return build_block("multiscale", c, c, **kw)


def build_ms_no_1x1(c: int, **kw) -> BlockSpec:
    return build_block("ms_no_1x1", c, c, **kw)


def build_hpm(c: int, **kw) -> BlockSpec:
    return build_block("hpm", c, c, **kw)


# ---------------------------------------------------------------------------
# validation

def toposort(nodes: tuple[LayerNode, ...]) -> list[LayerNode]:
    by_id = {n.id: n for n in nodes}
    seen: dict[str, int] = {}
    order: list[LayerNode] = []

    def visit(nid: str):
        state = seen.get(nid, 0)
        if state == 1:
            raise ShapeError(f"cycle through node {nid}")
        if state == 2:
            return
        seen[nid] = 1
        for p in by_id[nid].preds:
            visit(p)
        seen[nid] = 2
        order.append(by_id[nid])

    for n in nodes:
        visit(n.id)
    return order


def validate_block(b: BlockSpec):
    ids = [n.id for n in b.nodes]
    if len(set(ids)) != len(ids):
        raise ShapeError("duplicate node ids")
    inputs = [n for n in b.nodes if n.kind == "input"]
    outputs = [n for n in b.nodes if n.kind == "output"]
    if len(inputs) != 1 or len(outputs) != 1:
        raise ShapeError("block must have exactly one input and one output node")
    toposort(b.nodes)
    by_id = {n.id: n for n in b.nodes}
    for n in b.nodes:
        if n.kind == "concat":
            total = sum(by_id[p].out_channels for p in n.preds)
            if total != n.out_channels:
                raise ShapeError(f"concat {n.id}: parts sum to {total}, node says {n.out_channels}")
        elif n.kind == "add":
            cs = {by_id[p].out_channels for p in n.preds}
            if len(cs) != 1:
                raise ShapeError(f"add {n.id}: channel mismatch {cs}")
        elif n.kind == "conv":
            if by_id[n.preds[0]].out_channels != n.in_channels:
                raise ShapeError(f"conv {n.id}: input channels disagree")
            if n.binarized:
                act = by_id[n.preds[0]]
                if act.kind != "sign" or by_id[act.preds[0]].kind != "bn":
                    raise ShapeError(f"binarized conv {n.id} lacks bn+sign pre-activation")
    if outputs[0].out_channels != b.out_channels:
        raise ShapeError("output channel count disagrees with block spec")


# ---------------------------------------------------------------------------
# analyzers

def count_params(b: BlockSpec, include_bn: bool = False) -> int:
    """Conv weight count (no biases); optionally + 2 per batch-norm channel."""
    total = sum(n.conv_weight_count() for n in b.nodes)
    if include_bn:
        total += sum(2 * n.out_channels for n in b.nodes if n.kind == "bn")
    return total


def conv_path_lengths(b: BlockSpec) -> dict[str, int]:
    """For each conv node, the fewest conv layers on any route to the block
    output, counting the node itself."""
    by_id = {n.id: n for n in b.nodes}
    succs: dict[str, list[str]] = {n.id: [] for n in b.nodes}
    for n in b.nodes:
        for p in n.preds:
            succs[p].append(n.id)
    after: dict[str, int] = {}
    for n in reversed(toposort(b.nodes)):
        if n.kind == "output":
            after[n.id] = 0
            continue
        costs = [after[s] + (1 if by_id[s].kind == "conv" else 0) for s in succs[n.id]]
        after[n.id] = min(costs) if costs else 0
    return {n.id: 1 + after[n.id] for n in b.nodes if n.kind == "conv"}


def shortest_conv_path(b: BlockSpec) -> int:
    """Worst case over convs of the shortest conv-distance to the output.

    The hpm block scores 1: every conv reaches the output through concat and
    sum alone.
    """
    lengths = conv_path_lengths(b)
    return max(lengths.values()) if lengths else 0


def receptive_field(b: BlockSpec) -> int:
    """Maximum effective receptive field over input-to-output paths."""
    by_id = {n.id: n for n in b.nodes}
    succs: dict[str, list[str]] = {n.id: [] for n in b.nodes}
    for n in b.nodes:
        for p in n.preds:
            succs[p].append(n.id)
    best = 1.0

    def walk(nid: str, rf: float, jump: float):
        nonlocal best
        node = by_id[nid]
        if node.kind == "conv":
            rf += (node.kernel[0] - 1) * jump
        elif node.kind in POOL_KINDS:
            rf += jump
            jump *= 2.0
        elif node.kind == "upsample":
            jump /= 2.0
        if node.kind == "output":
            best = max(best, rf)
            return
        for s in succs[nid]:
            walk(s, rf, jump)

    walk("input", 1.0, 1.0)
    return int(round(best))


def count_1x1_convs(b: BlockSpec) -> int:
    return sum(1 for n in b.conv_nodes() if n.kernel == (1, 1))


def export_text(b: BlockSpec) -> str:
    """One node per line: id, kind, params, predecessors. Stable for diffing."""
    lines = [f"# {b.variant} {b.in_channels}->{b.out_channels}"]
    for n in toposort(b.nodes):
        parts = [n.id, n.kind]
        if n.kind == "conv":
            parts.append(
                f"k={n.kernel[0]}x{n.kernel[1]} s={n.stride[0]} p={n.padding[0]} "
                f"c={n.in_channels}->{n.out_channels} {'bin' if n.binarized else 'real'}"
            )
        elif n.kind == "bn":
            parts.append(f"c={n.out_channels}")
        elif n.kind in ("concat", "add"):
            parts.append(f"c={n.out_channels}")
        parts.append("<- " + ",".join(n.preds) if n.preds else "")
        lines.append("  ".join(p for p in parts if p))
    return "\n".join(lines) + "\n"


def with_prefix(nodes: tuple[LayerNode, ...], prefix: str) -> list[LayerNode]:
    """Copy nodes with ids (and pred references) prefixed for network stitching."""
    out = []
    for n in nodes:
        out.append(
            replace(n, id=f"{prefix}{n.id}", preds=tuple(f"{prefix}{p}" for p in n.preds))
        )
    return out
