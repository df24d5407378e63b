"""Smoke test for the gridflow_py extension module.

Build and install first:
    pip install --no-build-isolation -e crates/python
"""

import json
import sys

import gridflow_py as gf

WATER = """
app = water1d
workers = 2
extent = 16
partitions = 2
iterations = 3
seed = 1
"""


def main() -> int:
    cfg = gf.RunConfig.parse(WATER)
    report = gf.run(cfg)
    assert report.final_hash == gf.oracle_hash(cfg), "distributed run diverged from oracle"
    assert report.iterations == 3
    assert report.copies == 6, report.copies
    state = report.final_state()
    assert sum(len(v) for v in state.values()) > 0

    lines = [json.loads(l) for l in report.metrics().splitlines()]
    assert lines, "empty metrics log"
    assert report.summary_csv().startswith("time_s,iteration,event")

    cfg.workers = 1
    assert gf.run(cfg).final_hash == report.final_hash

    try:
        gf.RunConfig.parse("workers = 2\n")
    except ValueError:
        pass
    else:
        raise AssertionError("config without app accepted")

    frame = gf.execute_job_frame(7, "advance", list(range(10, 1010)))
    assert len(frame) < 64, len(frame)
    assert "ExecuteJob" in gf.describe_frame(frame)

    assert gf.region_count([64, 64], [2, 2]) > 0
    print(f"ok: hash={report.final_hash[:16]} copies={report.copies} records={len(lines)}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
