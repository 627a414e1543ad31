"""Console entry point. Pins BLAS pools to one thread before numpy loads."""

import os
import sys


def main(argv=None) -> int:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "BLIS_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, "1")
    from .bench import main as bench_main

    return bench_main(argv)


if __name__ == "__main__":
    sys.exit(main())
