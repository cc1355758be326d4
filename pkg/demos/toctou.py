"""A privileged gadget switches PAC/BTI off and back on. Checkpoints outside
the window see nothing; one inside it exposes the disable.

    python3 demos/toctou.py
"""

import os

from pacbti_sim.harness import SCENARIOS_DIR, load_scenario, run_scenario

if __name__ == "__main__":
    for name in ("fop_gap.toy", "fop_caught.toy"):
        rep = run_scenario(load_scenario(os.path.join(SCENARIOS_DIR, name)))
        print(f"{rep.name}: window={rep.extra['fop_window']} detection_gap={rep.detection_gap}")
        for t in rep.tokens:
            bits = "".join("1" if t[k] else "0" for k in ("pac_priv", "pac_unpriv", "bti_priv", "bti_unpriv"))
            print(f"  token@{t['step']:<5} claim={t['lifecycle_claim']} features={bits}")
