"""Tag forging success rate against tag width. Every miss persists a record,
resets the device and rotates the PAC key.

    python3 demos/brute_force.py [attempts]
"""

import random
import sys

from pacbti_sim.assembler import InstrumentConfig
from pacbti_sim.device import Device
from pacbti_sim.harness import FIXTURES_DIR, attack_brute_force, build_image, features_for, load_program
from pacbti_sim.runpba import Policy
import os

if __name__ == "__main__":
    attempts = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
    cfg = InstrumentConfig(pac=True, bti=True)
    program = load_program(os.path.join(FIXTURES_DIR, "brute_target.s"))
    print(f"{'width':>5} {'wins':>6} {'rate':>9} {'expected':>9} {'resets':>7}")
    for width in (4, 6, 8, 12, 16):
        dev = Device(build_image(program, cfg), seed=width, tag_width=width,
                     policy=Policy.RESET_AFTER_PERSIST, features=features_for(cfg)).provision()
        s = attack_brute_force(dev, attempts, width, random.Random(width))
        print(f"{width:>5} {s.successes:>6} {s.successes / attempts:>9.5f} {2.0 ** -width:>9.5f} {s.resets:>7}")
