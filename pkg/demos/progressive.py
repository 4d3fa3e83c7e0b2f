"""Alternate the three components on the noisy task and watch accuracy per stage.

Takes roughly eight minutes on one core.
"""

import sys

from relforge import tasks


def main(seed=0):
    def show(rec):
        if rec.get("step") == 0 and "accuracy" in rec:
            print(f"stage {rec['stage']} {rec['component']:>3}: test accuracy {rec['accuracy']:.2f}",
                  flush=True)
    base, final = tasks.progressive_run(seed, metrics=show)
    print(f"stage-1 relation graph {base:.2f}, after all stages {final:.2f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
