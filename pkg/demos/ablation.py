"""Walk the loss-arrangement ablation on a reduced benchmark."""
from dgtl.config import default_config
from dgtl.experiment import format_table, run_ablation

# Fewer epochs keep the seven cells quick; drop the override for full runs.
run = default_config().replace(epochs=10)
rows, failures = run_ablation(run, "arrangement")
print(format_table(rows))
print(f"{len(rows) // 2} cells, {len(failures)} failures")
