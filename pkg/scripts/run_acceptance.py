"""Run the acceptance criteria and print one PASS/FAIL line each.

    python3 scripts/run_acceptance.py            # all ten
    python3 scripts/run_acceptance.py 1 2 9      # a subset
"""
import sys

from ensembleiv.acceptance import run_all

if __name__ == "__main__":
    numbers = [int(a) for a in sys.argv[1:]] or None
    results = run_all(numbers, echo=lambda line: print(line, flush=True))
    sys.exit(0 if all(r.passed for r in results) else 1)
