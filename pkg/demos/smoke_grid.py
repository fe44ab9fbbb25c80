"""Run the whole experiment grid at toy size and print the report.

Generates the synthetic corpus, pretrains the lip encoder, trains the audio
foundation, Stage A and every Stage B variant, then evaluates all cells.
Takes about ten seconds; the numbers are meaningless at this size, only the
plumbing is real. Use ``avfuse run-grid --spec acceptance`` for the real run.

    python demos/smoke_grid.py [OUT_DIR]
"""

import sys
import tempfile

from avfuse import experiments as ex

out = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="avfuse-smoke-")
run = ex.run_grid(ex.load_spec("smoke"), out)
print((run.result_dir / "report.md").read_text())
print(f"tables in {run.result_dir}, {run.wall_seconds:.0f} s")
