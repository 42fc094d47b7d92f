"""A one-seed, reduced-size version of the ablation sweep.

The acceptance suite runs the full three-seed sweep on 500-entity pairs; this
script shows the same comparison in about a minute.
"""

from vulnalign.pipeline import TREND_ORDER, ablation_sweep, mean_table, trend_holds
from vulnalign.synthetic import SynthConfig
from vulnalign.training import TrainConfig

config = TrainConfig(optimizer="adam", learning_rate=0.005, epochs=8, patience=4)
table = ablation_sweep(config, SynthConfig(n_target_entities=150), TREND_ORDER, seeds=(0,))
means = mean_table(table)
for name in TREND_ORDER:
    print(f"{name:24s} test macro F1 {means[name]:.4f}")
print("ordering full >= traditional >= mean >= none:", trend_holds(means))
