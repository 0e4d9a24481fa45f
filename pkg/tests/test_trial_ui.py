"""Gate the trial-ui frontend from pytest so one command checks the repo.

The frontend is a separate TypeScript package that talks to this engine only
over HTTP and the published file formats. Its own vitest suite covers the
reaction-time clock, client-side validation, idempotent retries, and a full
scripted session against a live instance of this service (including the
slow-response curation fixture). Here we just build it and run that suite.
"""

from __future__ import annotations

import os
import shutil
import subprocess
from pathlib import Path

import pytest

FRONTEND = Path(__file__).resolve().parents[1] / "frontend"


def _run(cmd: list[str], timeout: int) -> subprocess.CompletedProcess:
    env = {**os.environ, "CI": "1"}
    return subprocess.run(
        cmd, cwd=FRONTEND, env=env, capture_output=True, text=True,
        timeout=timeout,
    )


@pytest.mark.skipif(
    shutil.which("npm") is None or shutil.which("python3") is None,
    reason="node toolchain not available",
)
def test_frontend_build_and_suite():
    if not (FRONTEND / "node_modules").exists():
        install = _run(["npm", "install", "--no-audit", "--no-fund"], 600)
        assert install.returncode == 0, install.stderr[-4000:]

    build = _run(["npx", "tsc", "-p", "."], 300)
    assert build.returncode == 0, (
        "tsc failed:\n" + build.stdout[-4000:] + build.stderr[-4000:]
    )

    suite = _run(["npx", "vitest", "run"], 600)
    tail = suite.stdout[-4000:] + suite.stderr[-4000:]
    assert suite.returncode == 0, "vitest failed:\n" + tail

    summary = [
        line.strip() for line in (suite.stdout + suite.stderr).splitlines()
        if "Tests" in line or "Test Files" in line
    ]
    print(f"PASS frontend build + suite: {'; '.join(summary) or 'vitest ok'}")
