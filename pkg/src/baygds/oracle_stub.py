"""Stand-in external solver: reads one request on stdin, prints the response on stdout.

    python -m baygds.oracle_stub --pca pca.bin [--seed 0 --noise 0.01 --gain 4]

With `--watch DIR` it instead serves the directory transport until `--max-requests`
requests have been answered.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from .features import featurize, load_pca
from .oracle import SyntheticOracleConfig, decode_request, encode_response, schedule_from_F, synthetic_evaluate


def respond(req: dict, pca, stats, config: SyntheticOracleConfig) -> dict:
    design, F = decode_request(req)
    z = featurize(design, pca, stats)
    return encode_response(design.id, synthetic_evaluate(z, design.id, schedule_from_F(F), config))


def serve_directory(directory: Path, pca, stats, config, max_requests: int, timeout: float) -> int:
    done = 0
    deadline = time.monotonic() + timeout
    while done < max_requests and time.monotonic() < deadline:
        for req_path in sorted(directory.glob("request_*.json")):
            stem = req_path.name[len("request_"):]
            out = directory / f"response_{stem}"
            if out.exists():
                continue
            resp = respond(json.loads(req_path.read_text()), pca, stats, config)
            tmp = directory / f".response_{stem}.tmp"
            tmp.write_text(json.dumps(resp))
            tmp.replace(out)
            done += 1
        time.sleep(0.02)
    return done


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="baygds-oracle-stub")
    p.add_argument("--pca", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=1e-2)
    p.add_argument("--gain", type=float, default=SyntheticOracleConfig.gain)
    p.add_argument("--mismatch", type=float, default=0.0)
    p.add_argument("--watch")
    p.add_argument("--max-requests", type=int, default=1)
    p.add_argument("--timeout", type=float, default=60.0)
    args = p.parse_args(argv)
    pca, stats, _ = load_pca(args.pca)
    config = SyntheticOracleConfig(seed=args.seed, noise_std=args.noise, gain=args.gain, mismatch=args.mismatch,
                                   n_z=pca.n_z)
    if args.watch:
        serve_directory(Path(args.watch), pca, stats, config, args.max_requests, args.timeout)
        return 0
    json.dump(respond(json.load(sys.stdin), pca, stats, config), sys.stdout)
    return 0


if __name__ == "__main__":
    sys.exit(main())
