"""The staged compression workflow, end to end, against an ablation.

Two arms start from the same pre-trained six-block depthwise-separable
net that carries two dead stem filters:

  pruned: prune constant channels, fine-tune with activation quantization
          (normalization still live), prune again, fold, fine-tune with
          weight quantization too.
  plain:  the identical stages with the pruning threshold set to zero, so
          nothing is ever removed.

Both end as folded 4-bit-activation / 4-bit-weight models. The dead
channels cost the plain arm dearly: their near-zero running variance
turns into enormous folded weights, the per-tensor weight grid stretches
over them, and every useful weight collapses into a few buckets.
"""

import numpy as np

from pfqkit.data import bundle_from_datasets, make_synthetic, split_validation
from pfqkit.engine import evaluate
from pfqkit.graph import count_macs, param_count
from pfqkit.models import build_ds_convnet
from pfqkit.training import LRSchedule, OptimizerState, train_epochs
from pfqkit.workflow import WorkflowConfig, run_workflow


def main():
    full = make_synthetic(4, 30, (3, 16, 16), seed=40)
    pool, test = split_validation(full, 6, seed=41)
    train, val = split_validation(pool, 4, seed=0)
    data = bundle_from_datasets(train, val, test)

    net = build_ds_convnet(input_shape=(3, 16, 16), class_count=4, width=8,
                           blocks=6, seed=0, dead_stem_filters=2)
    print("pre-training the float model, 12 epochs...")
    net, _ = train_epochs(net, data, LRSchedule(0.05, 0, 12),
                          OptimizerState(momentum=0.9), epochs=12,
                          batch_size=8, seed=0)
    float_acc = evaluate(net, data.test_images, data.test_labels)
    print(f"float test accuracy: {float_acc:.3f}\n")

    results = {}
    for arm, epsilon in (("pruned", 1e-5), ("plain", 0.0)):
        cfg = WorkflowConfig(epochs_act=2, epochs_weight=2, act_bits=4,
                             weight_bits=4, epsilon=epsilon, batch_size=8,
                             seed=0, act_schedule=LRSchedule(0.002, 0, 2),
                             weight_schedule=LRSchedule(0.001, 0, 2))
        result = run_workflow(net, data, cfg)
        results[arm] = result
        if arm == "pruned":
            print("workflow trace:")
            for line in result.trace:
                print(f"  {line}")
            print()

    print(f"{'model':24s} {'test acc':>8s} {'params':>8s} {'MACs':>9s}")
    print(f"{'float pre-trained':24s} {float_acc:8.3f} "
          f"{param_count(net):8d} {sum(count_macs(net).values()):9d}")
    for arm in ("pruned", "plain"):
        g = results[arm].graph
        acc = evaluate(g, data.test_images, data.test_labels)
        print(f"{arm + ' 4-bit':24s} {acc:8.3f} "
              f"{param_count(g):8d} {sum(count_macs(g).values()):9d}")


if __name__ == "__main__":
    main()
