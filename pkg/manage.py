#!/usr/bin/env python
"""THC command-line utility: generate, train, evaluate, bench."""
import sys


def main():
    """Run THC commands."""
    from thc_core.cli import main as run
    sys.exit(run(sys.argv[1:]))


if __name__ == '__main__':
    main()
