#!/usr/bin/env python3
"""
medattn reference pipeline launcher

synth -> preprocess -> baseline -> lr / samples / noise / depth sweeps,
all through the command line so every step is reproducible from its echo.
"""

import argparse
import logging
import os
import subprocess
import sys

logger = logging.getLogger("medattn.launch")

SWEEPS = ("lr", "samples", "noise", "depth")


def run_step(args, cwd: str) -> None:
    command = [sys.executable, "main.py", *args]
    logger.info("$ %s", " ".join(command))
    subprocess.run(command, cwd=cwd, check=True)


def main(argv=None) -> int:
    """Run the reference pipeline into an output directory"""
    parser = argparse.ArgumentParser(description="Run the medattn reference pipeline")
    parser.add_argument("--out", default="runs/reference", help="output directory (default runs/reference)")
    parser.add_argument("--config", help="KEY=VALUE configuration file passed to every step")
    parser.add_argument("--seed", type=int, default=42, help="random seed (default 42)")
    parser.add_argument("--sweeps", nargs="*", choices=SWEEPS, default=list(SWEEPS),
                        help="which sweeps to run (default all)")
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(asctime)s %(message)s")

    # Change to the project root directory
    project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    out = os.path.abspath(args.out)
    os.makedirs(out, exist_ok=True)
    shared = ["--seed", str(args.seed)] + (["--config", os.path.abspath(args.config)] if args.config else [])
    corpus = os.path.join(out, "corpus.jsonl")
    encoded = os.path.join(out, "encoded")

    try:
        run_step(["synth", *shared, "--out", corpus], project_root)
        run_step(["preprocess", *shared, "--input", corpus, "--out", encoded], project_root)
        run_step(["baseline", *shared, "--data", encoded, "--out", os.path.join(out, "comparison.csv")],
                 project_root)
        for sweep in args.sweeps:
            run_step(["sweep", sweep, *shared, "--data", encoded, "--out", os.path.join(out, f"{sweep}.csv")],
                     project_root)
    except KeyboardInterrupt:
        logger.warning("Interrupted")
        return 1
    except subprocess.CalledProcessError as e:
        logger.error("Step failed with exit code %d", e.returncode)
        return e.returncode
    logger.info("Reference pipeline finished; results in %s", out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
