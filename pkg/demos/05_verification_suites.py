"""Run the four 64-bit property suites in-process: gradient fidelity against
finite differences, mixer monotonicity, greedy-vs-exhaustive joint action
consistency, and normalization/masking invariants. The same suites back
`graphmix verify --suite <name>`.
"""

import json
import time

from graphmix.verify import (run_grad_suite, run_igm_suite, run_masks_suite,
                             run_monotone_suite)

for fn in (run_grad_suite, run_monotone_suite, run_igm_suite, run_masks_suite):
    t0 = time.time()
    report = fn(seed=0)
    report["seconds"] = round(time.time() - t0, 2)
    print(json.dumps(report))
