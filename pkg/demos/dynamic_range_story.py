"""Why near-constant channels poison quantization ranges.

A batch-norm channel whose running variance has decayed toward zero folds
into its convolution with a 1/sqrt(V + eps) factor, so the folded weights
blow up while the channel itself carries no information. Per-tensor
quantization then has to stretch its grid over those few huge values and
every useful weight lands in a handful of buckets.

This script trains a small depthwise-separable net with two stem filters
deliberately initialized dead, shows their running variance decaying, and
prints each layer's folded weight range before and after pruning the
constant channels away.
"""

import numpy as np

from pfqkit.data import bundle_from_datasets, make_synthetic, split_validation
from pfqkit.graph import dynamic_range_report, fold_bn_graph
from pfqkit.models import build_ds_convnet
from pfqkit.pruning import apply_pfq, scan_candidates
from pfqkit.training import LRSchedule, OptimizerState, train_epochs


def main():
    full = make_synthetic(4, 24, (3, 16, 16), seed=5)
    train, val = split_validation(full, 4, seed=0)
    data = bundle_from_datasets(train, val, val)

    net = build_ds_convnet(input_shape=(3, 16, 16), class_count=4, width=8,
                           blocks=2, seed=6, dead_stem_filters=2)
    print("training 12 epochs with 2 dead stem filters...")
    net, metrics = train_epochs(net, data, LRSchedule(0.05, 0, 12),
                                OptimizerState(momentum=0.9), epochs=12,
                                batch_size=8, seed=7)
    print(f"float accuracy on the held-out split: {metrics[-1].test_acc:.3f}\n")

    print("smallest running variances per normalization layer:")
    for layer in net.layers:
        if layer.kind == "bn":
            v = np.sort(layer.params.running_var)[:3]
            print(f"  {layer.name:10s} {v[0]:.2e}  {v[1]:.2e}  {v[2]:.2e}")
    candidates = scan_candidates(net, 1e-5)
    print(f"\nchannels below the 1e-5 threshold: "
          f"{[(c.layer, c.channel) for c in candidates]}\n")

    before = {r.layer: r for r in dynamic_range_report(fold_bn_graph(net))}
    pruned, report = apply_pfq(net, 1e-5)
    after = {r.layer: r for r in dynamic_range_report(fold_bn_graph(pruned))}

    print("folded weight range per layer (max - min), before -> after pruning:")
    for name in before:
        b, a = before[name].range, after[name].range
        marker = "  <- constant channels removed" if b - a > 1e-6 else ""
        print(f"  {name:10s} {b:10.3f} -> {a:10.3f}{marker}")

    worst = max(before, key=lambda n: before[n].range)
    print(f"\nat 4 bits the quantization step for {worst} shrinks from "
          f"{before[worst].range / 16:.3f} to {after[worst].range / 16:.3f}")
    print(f"\n{report.summary()}")


if __name__ == "__main__":
    main()
