"""Backward- and forward-edge overflows against the echo service, with and
without PAC/BTI, followed by an attestation round.

    python3 demos/echo_exploit.py
"""

from pacbti_sim.harness import SCENARIOS_DIR, load_scenario, run_scenario
import os


def show(name):
    rep = run_scenario(load_scenario(os.path.join(SCENARIOS_DIR, name)))
    print(f"{rep.name:<22} leak={str(rep.secret_leaked):<5} fault={rep.fault_kind or '-':<9} "
          f"lifecycle={rep.lifecycle_final}")
    for t in rep.tokens:
        print(f"{'':<22} token@{t['step']:<5} claim={t['lifecycle_claim']} runtime_failure={t['runtime_failure']}")


if __name__ == "__main__":
    for name in ("rop_plain.toy", "rop_protected.toy", "rop_protected_reset.toy", "bti_plain.toy", "bti_protected.toy"):
        show(name)
