"""Channel pruning driven by near-zero BN running variance.

A channel whose running variance sits below the BN epsilon produces an
output that is constant in practice, equal to its shift beta after
normalization. Such a channel can be removed exactly: the constant it fed
downstream is folded into the consumer as a bias correction. The correction
for a conv consumer is the kernel sum of the consumer's input slice times
the activated constant; when the consumer has no bias but is followed by a
BN, the equivalent shift lands on that BN's beta instead; an affine consumer
corrects its bias with its single weight per output unit.

A depthwise consumer cannot absorb the constant (it has no cross-channel
mixing), so its channel is removed as well and the constant, convolved with
the removed depthwise kernel and passed through the depthwise's own BN and
activation, cascades into the next consumer.

Candidates that feed an add junction are skipped: the junction's other arm
still carries the channel, so removal is not output-preserving. Candidates
whose producer is a depthwise conv (removal would have to cascade upstream)
or an affine (output units are out of scope) are skipped too, as is a BN
whose output is the network output, and a layer whose channels are all
candidates at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import forward_graph
from .graph import ModelGraph, copy_graph, count_macs, param_count
from .quantization import quantize

_PASS_THROUGH = ("relu", "relu6", "global_avg_pool", "quant_point")


@dataclass
class PruneCandidate:
    layer: str
    channel: int
    running_var: float
    beta: float
    act_of_beta: float


@dataclass
class PruneEntry:
    layer: str
    channel: int
    kind: str
    running_var: float
    beta: float
    u_norm: float
    cascade: list = field(default_factory=list)


@dataclass
class PruneSkip:
    layer: str
    channel: int
    reason: str
    running_var: float
    beta: float


@dataclass
class PruneReport:
    entries: list
    skips: list
    params_before: int
    params_after: int
    macs_before: int
    macs_after: int
    weights_removed: int

    @property
    def removed(self):
        by_layer = {}
        for e in self.entries:
            by_layer.setdefault(e.layer, []).append(e.channel)
        return by_layer

    @property
    def percent_removed(self):
        if self.params_before == 0:
            return 0.0
        return 100.0 * self.weights_removed / self.params_before

    def to_csv(self, path):
        lines = ["layer,channel,kind,Vt,beta,U_norm"]
        for e in self.entries:
            lines.append(f"{e.layer},{e.channel},{e.kind},{e.running_var!r},{e.beta!r},{e.u_norm!r}")
        for s in self.skips:
            lines.append(f"{s.layer},{s.channel},{s.reason},{s.running_var!r},{s.beta!r},")
        Path(path).write_text("\n".join(lines) + "\n")

    def summary(self):
        mac_delta = self.macs_before - self.macs_after
        return (
            f"pruned {len(self.entries)} channels, skipped {len(self.skips)} candidates; "
            f"weights {self.params_before} -> {self.params_after} "
            f"({self.percent_removed:.2f}% removed); "
            f"MACs {self.macs_before} -> {self.macs_after} (-{mac_delta})"
        )


def _activate_const(value, kind):
    if kind == "relu":
        return max(value, 0.0), value <= 0.0
    if kind == "relu6":
        return min(max(value, 0.0), 6.0), value <= 0.0
    return value, False


def _chain_const(graph, chain, value, quantize_act_of_beta, dtype):
    """Push a per-channel constant through pass-through layers.

    Returns (value, clipped_to_zero_by_relu)."""
    clipped = False
    for idx in chain:
        layer = graph.layers[idx]
        if layer.kind in ("relu", "relu6"):
            value, was_clipped = _activate_const(value, layer.kind)
            clipped = clipped or was_clipped
        elif layer.kind == "quant_point":
            point = layer.params
            if (quantize_act_of_beta and point.enabled and point.cfg.initialized
                    and point.cfg.M_up > point.cfg.m):
                value = float(quantize(np.asarray([value], dtype=dtype), point.cfg)[0])
        # global_avg_pool passes a constant unchanged
    return value, clipped


def _walk_chain(graph, start):
    """Indices of pass-through layers from start onward, then the consumer
    index (None when the chain falls off the end of the graph)."""
    chain = []
    j = start
    while j < len(graph.layers) and graph.layers[j].kind in _PASS_THROUGH:
        chain.append(j)
        j += 1
    return chain, (j if j < len(graph.layers) else None)


def _junction_refs(graph):
    refs = set()
    for layer in graph.layers:
        if layer.kind == "add_junction":
            refs.update(layer.params)
    return refs


@dataclass
class _Hop:
    """One depthwise layer the constant cascades through, with its BN."""

    dw_index: int
    bn_index: int | None
    chain: list


@dataclass
class _Plan:
    hops: list
    consumer_index: int
    mode: str  # bias | beta | materialize
    beta_bn_index: int | None
    first_chain: list


def _resolve_plan(graph, bn_index):
    """Work out how pruning BN channels at bn_index lands downstream.

    Returns a _Plan or a skip-reason string."""
    bn_layer = graph.layers[bn_index]
    producer = graph.layers[bn_index - 1]
    if producer.kind == "depthwise_conv":
        return "depthwise-producer"
    if producer.kind == "affine":
        return "affine-producer"

    junction_refs = _junction_refs(graph)
    carrying = {producer.name, bn_layer.name}
    hops = []
    first_chain = None
    current_hop = None

    cursor = bn_index + 1
    while True:
        chain, consumer_idx = _walk_chain(graph, cursor)
        carrying.update(graph.layers[i].name for i in chain)
        if current_hop is None:
            first_chain = chain
        else:
            current_hop.chain = chain
        if consumer_idx is None:
            return "network-output"
        consumer = graph.layers[consumer_idx]
        if consumer.kind == "add_junction":
            return "residual"
        if carrying & junction_refs:
            return "residual"
        if consumer.kind in ("conv", "affine"):
            if consumer.params.bias is not None:
                mode, beta_bn = "bias", None
            elif (consumer_idx + 1 < len(graph.layers)
                  and graph.layers[consumer_idx + 1].kind == "bn"):
                mode, beta_bn = "beta", consumer_idx + 1
            else:
                mode, beta_bn = "materialize", None
            return _Plan(hops=hops, consumer_index=consumer_idx, mode=mode,
                         beta_bn_index=beta_bn, first_chain=first_chain)
        if consumer.kind == "depthwise_conv":
            bn_after = None
            if consumer_idx + 1 < len(graph.layers) and graph.layers[consumer_idx + 1].kind == "bn":
                bn_after = consumer_idx + 1
            carrying.add(consumer.name)
            if bn_after is not None:
                carrying.add(graph.layers[bn_after].name)
            current_hop = _Hop(dw_index=consumer_idx, bn_index=bn_after, chain=[])
            hops.append(current_hop)
            cursor = (bn_after if bn_after is not None else consumer_idx) + 1
            continue
        return "residual"  # pragma: no cover - no other consumer kinds exist


def scan_candidates(graph, epsilon, *, quantize_act_of_beta=False):
    """All BN channels with running variance strictly below epsilon, in layer
    then channel order, with their post-activation constants."""
    out = []
    for i, layer in enumerate(graph.layers):
        if layer.kind != "bn":
            continue
        params = layer.params
        chain, _ = _walk_chain(graph, i + 1)
        dtype = params.beta.dtype
        for c in np.flatnonzero(params.running_var < epsilon):
            c = int(c)
            beta = float(params.beta[c])
            a, _ = _chain_const(graph, chain, beta, quantize_act_of_beta, dtype)
            out.append(PruneCandidate(layer=layer.name, channel=c,
                                      running_var=float(params.running_var[c]),
                                      beta=beta, act_of_beta=a))
    return out


def compute_bias_correction(weight_slice, act_value):
    """Correction added downstream when a constant input channel is removed.

    weight_slice is the consumer's weights for that input channel: (O, kh, kw)
    for a conv (summed over the kernel) or (K,) for an affine."""
    if weight_slice.ndim == 3:
        return weight_slice.sum(axis=(1, 2)) * act_value
    if weight_slice.ndim == 1:
        return weight_slice * act_value
    raise ValueError(f"unexpected weight slice rank {weight_slice.ndim}")


def _delete(arr, channels, axis):
    return np.delete(arr, channels, axis=axis)


def _process_group(graph, bn_index, group, plan, quantize_act_of_beta, correct):
    """Prune one BN layer's candidate channels following a resolved plan.

    Mutates graph layers in place; returns (entries, param_delta)."""
    layers = graph.layers
    bn_layer = layers[bn_index]
    producer = layers[bn_index - 1]
    consumer = layers[plan.consumer_index]
    dtype = bn_layer.params.beta.dtype
    channels = [c.channel for c in group]

    entries = []
    removed = 0
    total_u = None
    for cand in group:
        c = cand.channel
        value, clipped = _chain_const(graph, plan.first_chain, float(bn_layer.params.beta[c]),
                                      quantize_act_of_beta, dtype)
        cascade = []
        for hop in plan.hops:
            dw = layers[hop.dw_index]
            ksum = float(dw.params.weights[c, 0].sum())
            value = ksum * value
            if dw.params.bias is not None:
                value += float(dw.params.bias[c])
            cascade.append((dw.name, c))
            if hop.bn_index is not None:
                bnp = layers[hop.bn_index].params
                inv = 1.0 / float(np.sqrt(bnp.running_var[c] + bnp.epsilon))
                value = (value - float(bnp.running_mean[c])) * inv * float(bnp.gamma[c]) + float(bnp.beta[c])
                cascade.append((layers[hop.bn_index].name, c))
            value, was_clipped = _chain_const(graph, hop.chain, value, quantize_act_of_beta, dtype)
            clipped = clipped or was_clipped

        if consumer.kind == "affine":
            slice_w = consumer.params.weights[c, :]
        else:
            slice_w = consumer.params.weights[:, c]
        u = compute_bias_correction(slice_w, np.asarray(value, dtype=dtype))
        u_norm = float(np.sqrt(np.sum(np.square(u, dtype=np.float64))))

        if not correct:
            kind = "uncorrected"
        elif value == 0.0 and clipped:
            kind = "none-ReLU-zero"
        elif plan.mode == "beta":
            kind = "beta"
        else:
            kind = "bias"
        entries.append(PruneEntry(layer=bn_layer.name, channel=c, kind=kind,
                                  running_var=cand.running_var, beta=cand.beta,
                                  u_norm=u_norm, cascade=cascade))
        total_u = u if total_u is None else total_u + u

    if correct and total_u is not None:
        if plan.mode == "bias":
            consumer.params.bias = (consumer.params.bias + total_u).astype(dtype, copy=False)
        elif plan.mode == "materialize":
            consumer.params.bias = total_u.astype(dtype, copy=False)
            removed -= total_u.size
        elif plan.mode == "beta":
            bnp = layers[plan.beta_bn_index].params
            factor = bnp.gamma / np.sqrt(bnp.running_var + bnp.epsilon)
            bnp.beta = (bnp.beta + factor * total_u).astype(dtype, copy=False)

    # Surgery, after every correction is computed from original weights.
    removed += len(channels) * 2  # bn gamma and beta
    bnp = bn_layer.params
    bn_layer.params = type(bnp)(
        gamma=_delete(bnp.gamma, channels, 0),
        beta=_delete(bnp.beta, channels, 0),
        running_mean=_delete(bnp.running_mean, channels, 0),
        running_var=_delete(bnp.running_var, channels, 0),
        epsilon=bnp.epsilon,
        rho=bnp.rho,
    )

    removed += int(np.prod(producer.params.weights.shape[1:])) * len(channels)
    producer.params.weights = _delete(producer.params.weights, channels, 0)
    if producer.params.bias is not None:
        producer.params.bias = _delete(producer.params.bias, channels, 0)
        removed += len(channels)

    for hop in plan.hops:
        dw = layers[hop.dw_index]
        removed += int(np.prod(dw.params.weights.shape[1:])) * len(channels)
        dw.params.weights = _delete(dw.params.weights, channels, 0)
        if dw.params.bias is not None:
            dw.params.bias = _delete(dw.params.bias, channels, 0)
            removed += len(channels)
        if hop.bn_index is not None:
            hbn = layers[hop.bn_index].params
            removed += len(channels) * 2
            layers[hop.bn_index].params = type(hbn)(
                gamma=_delete(hbn.gamma, channels, 0),
                beta=_delete(hbn.beta, channels, 0),
                running_mean=_delete(hbn.running_mean, channels, 0),
                running_var=_delete(hbn.running_var, channels, 0),
                epsilon=hbn.epsilon,
                rho=hbn.rho,
            )

    if consumer.kind == "affine":
        removed += consumer.params.weights.shape[1] * len(channels)
        consumer.params.weights = _delete(consumer.params.weights, channels, 0)
    else:
        removed += int(
            consumer.params.weights.shape[0] * np.prod(consumer.params.weights.shape[2:])
        ) * len(channels)
        consumer.params.weights = _delete(consumer.params.weights, channels, 1)

    return entries, removed


def apply_pfq(graph, epsilon, *, quantize_act_of_beta=False, correct=True):
    """Remove every prunable sub-epsilon-variance channel with downstream
    compensation. Returns (new_graph, PruneReport).

    With correct=False the channels are removed without any compensation
    (the ablation arm); inference output is then not preserved.
    """
    g = copy_graph(graph)
    params_before = param_count(g)
    macs_before = sum(count_macs(g).values())
    entries = []
    skips = []
    skip_memo = set()
    weights_removed = 0

    while True:
        candidates = scan_candidates(g, epsilon, quantize_act_of_beta=quantize_act_of_beta)
        by_layer = {}
        for cand in candidates:
            if (cand.layer, cand.channel) in skip_memo:
                continue
            by_layer.setdefault(cand.layer, []).append(cand)
        if not by_layer:
            break
        layer_name = next(l.name for l in g.layers if l.name in by_layer)
        group = by_layer[layer_name]
        bn_index = g.index(layer_name)
        bn_layer = g.layers[bn_index]

        if len(group) == bn_layer.params.gamma.shape[0]:
            reason = "would-empty"
        else:
            plan = _resolve_plan(g, bn_index)
            reason = plan if isinstance(plan, str) else None

        if reason is not None:
            for cand in group:
                skip_memo.add((cand.layer, cand.channel))
                skips.append(PruneSkip(layer=cand.layer, channel=cand.channel, reason=reason,
                                       running_var=cand.running_var, beta=cand.beta))
            continue

        new_entries, removed = _process_group(g, bn_index, group, plan,
                                              quantize_act_of_beta, correct)
        entries.extend(new_entries)
        weights_removed += removed
        g = ModelGraph(layers=g.layers, input_shape=g.input_shape)  # revalidate

    report = PruneReport(
        entries=entries,
        skips=skips,
        params_before=params_before,
        params_after=param_count(g),
        macs_before=macs_before,
        macs_after=sum(count_macs(g).values()),
        weights_removed=weights_removed,
    )
    return g, report


def prune_channels(graph, targets, *, correct=True, quantize_act_of_beta=False):
    """Remove explicitly chosen (bn_layer_name, channel) pairs, regardless of
    their running variance. Channels must share no layer unless listed
    together. Returns (new_graph, PruneReport)."""
    g = copy_graph(graph)
    params_before = param_count(g)
    macs_before = sum(count_macs(g).values())
    entries = []
    weights_removed = 0

    by_layer = {}
    for name, channel in targets:
        by_layer.setdefault(name, []).append(channel)

    for name in [l.name for l in g.layers if l.name in by_layer]:
        bn_index = g.index(name)
        bn_layer = g.layers[bn_index]
        chain, _ = _walk_chain(g, bn_index + 1)
        group = []
        for c in sorted(by_layer[name]):
            beta = float(bn_layer.params.beta[c])
            a, _ = _chain_const(g, chain, beta, quantize_act_of_beta, bn_layer.params.beta.dtype)
            group.append(PruneCandidate(layer=name, channel=c,
                                        running_var=float(bn_layer.params.running_var[c]),
                                        beta=beta, act_of_beta=a))
        plan = _resolve_plan(g, bn_index)
        if isinstance(plan, str):
            raise ValueError(f"cannot prune channels of '{name}': {plan}")
        new_entries, removed = _process_group(g, bn_index, group, plan,
                                              quantize_act_of_beta, correct)
        entries.extend(new_entries)
        weights_removed += removed
        g = ModelGraph(layers=g.layers, input_shape=g.input_shape)

    report = PruneReport(entries=entries, skips=[], params_before=params_before,
                         params_after=param_count(g), macs_before=macs_before,
                         macs_after=sum(count_macs(g).values()),
                         weights_removed=weights_removed)
    return g, report


@dataclass
class ConstancyRow:
    layer: str
    channel: int
    running_var: float
    spread: float


def channel_constancy_report(graph, images):
    """Observed output spread (max minus min over batch and space) next to the
    stored running variance, per BN channel, in inference mode."""
    trace = forward_graph(graph, images, training=False)
    rows = []
    for layer in graph.layers:
        if layer.kind != "bn":
            continue
        out = trace.outputs[layer.name]
        axes = (0, 2, 3) if out.ndim == 4 else (0,)
        spread = out.max(axis=axes) - out.min(axis=axes)
        for c in range(out.shape[1]):
            rows.append(ConstancyRow(layer=layer.name, channel=c,
                                     running_var=float(layer.params.running_var[c]),
                                     spread=float(spread[c])))
    return rows


def constancy_report_to_csv(rows, path):
    lines = ["layer,channel,Vt,spread"]
    for r in rows:
        lines.append(f"{r.layer},{r.channel},{r.running_var!r},{r.spread!r}")
    Path(path).write_text("\n".join(lines) + "\n")
