"""Static and dynamic instrumentation cost over the benchmark fixtures.

    python3 demos/overhead.py
"""

import os

from pacbti_sim.assembler import InstrumentConfig
from pacbti_sim.harness import FIXTURES_DIR, build_image, load_program, overhead_report

INPUTS = {"echo_service.s": [[1, 2, 3], [4, 5]], "fib_recursive.s": [[12]], "loop_sum.s": [[25]],
          "bubble_sort.s": []}

if __name__ == "__main__":
    print(f"{'program':<16} {'size':>9} {'executed':>13} {'ratio':>7}")
    for name, inputs in INPUTS.items():
        p = load_program(os.path.join(FIXTURES_DIR, name))
        plain = build_image(p, InstrumentConfig()).code_units
        inst = build_image(p, InstrumentConfig(True, True)).code_units
        r = overhead_report(p, inputs)
        print(f"{name:<16} {plain:>4}->{inst:<4} {r.plain_count:>6}->{r.instrumented_count:<6} {r.ratio:>7.3f}")
