"""Train the toy two-stream embedder and score cross-modality retrieval."""
import time

from dgtl.config import default_config
from dgtl.experiment import format_train_table, run_experiment

run = default_config()
print(f"{run.num_identities} identities, P={run.P} K={run.K}, arrangement {run.arrangement}, {run.epochs} epochs")

start = time.perf_counter()
trainer, results, untrained = run_experiment(run)
print(f"trained in {time.perf_counter() - start:.1f} s")

means = trainer.history.epoch_means()
print("mean loss, first and last epoch:", round(means[0], 3), round(means[run.epochs - 1], 3))

print("\nuntrained")
print(format_train_table(untrained))
print("\ntrained")
print(format_train_table(results))
