"""Write the standard worlds as scenario files for ``sgfuse run``."""

import json
import sys
from pathlib import Path

from sgfuse import scenarios

out = Path(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).parent / "scenarios")
out.mkdir(parents=True, exist_ok=True)

docs = {
    "shared_objects": scenarios.shared_objects(0),
    "shared_objects_periodic": scenarios.shared_objects(0, backend_period=40),
    "heterogeneous": scenarios.heterogeneous(0),
    "square_loop": scenarios.square_loop(0),
    "square_loop_outliers": scenarios.square_loop(0, outlier_rate=0.8, inter_per_pair=30),
    "three_robot_alignment": scenarios.three_robot_alignment(0),
}
for name, doc in docs.items():
    path = out / f"{name}.json"
    path.write_text(json.dumps(doc, indent=1) + "\n")
    print(f"wrote {path} ({len(doc['robots'])} robots)")
