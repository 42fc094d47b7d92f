"""Generate a small synthetic pair, train the full model, and evaluate it.

Runs the same steps as the command line (synth, train, eval) through the
library so intermediate objects can be inspected.
"""

from vulnalign.kg import default_schema
from vulnalign.pipeline import run_experiment
from vulnalign.synthetic import SynthConfig, generate_pair, measure_inconsistency
from vulnalign.training import TrainConfig

synth = SynthConfig(n_target_entities=120, seed=3)
pair, dataset, truth = generate_pair(synth)
stats = measure_inconsistency(pair, dataset)
print(f"{len(pair.source.entities())} source and {len(pair.target.entities())} target vulnerabilities, "
      f"{truth.n_positive} aligned pairs, {len(dataset)} labelled pairs")
print(f"inconsistent positives {stats.positive_inconsistency:.3f}, "
      f"near-duplicate negatives {stats.negative_similarity:.4f}")

config = TrainConfig(optimizer="adam", learning_rate=0.005, epochs=8, patience=4, seed=3)
result = run_experiment(pair, dataset, default_schema("cert"), config)
for epoch, split, loss, f1, _ in result.log.records:
    if split == "val":
        print(f"epoch {epoch}: validation loss {loss:.4f}, macro F1 {f1:.4f}")
rep = result.report
print(f"test P@R0.95 {rep.precision_at_recall95:.4f}  F1 {rep.f1:.4f}  PRAUC {rep.prauc:.4f}")
print(f"{result.seconds_per_batch * 1000:.0f} ms per batch of {config.batch_size}")
