"""Result cache for the long simulation runs behind the acceptance suite.

A cached result is reused only when the plan fingerprint and a digest of
every source file that can affect the numbers both match, so a stale file
can never stand in for the current code.  Run this module directly to
populate the cache ahead of time::

    python3 tests/simcache.py paper-single paper-double
"""

from __future__ import annotations

import ast
import hashlib
import logging
import sys
from pathlib import Path

import ivmed
from ivmed import simulation

CACHE_DIR = Path(__file__).resolve().parent / "simcache"
EXCLUDED = {"cli.py"}


def _code_fingerprint(source: str) -> bytes:
    """AST dump with docstrings removed; comments never reach the AST."""
    tree = ast.parse(source)
    for node in ast.walk(tree):
        body = getattr(node, "body", None)
        if (isinstance(body, list) and body and isinstance(body[0], ast.Expr)
                and isinstance(body[0].value, ast.Constant) and isinstance(body[0].value.value, str)):
            node.body = body[1:] or [ast.Pass()]
    return ast.dump(tree).encode()


def source_digest() -> str:
    """Digest of the package code and data that can change simulation output.

    Docstring and comment edits leave it unchanged.
    """
    root = Path(ivmed.__file__).resolve().parent
    h = hashlib.sha256()
    files = sorted(p for p in root.rglob("*") if p.suffix in (".py", ".txt") and p.name not in EXCLUDED)
    for p in files:
        h.update(str(p.relative_to(root)).encode())
        h.update(_code_fingerprint(p.read_text()) if p.suffix == ".py" else p.read_bytes())
    return h.hexdigest()[:16]


def cache_path(plan: simulation.SimulationPlan) -> Path:
    return CACHE_DIR / f"{plan.setting}-{plan.fingerprint()}-{source_digest()}.json"


def cached_run(plan: simulation.SimulationPlan, jobs: int = 1):
    """Return ``(result, path, was_cached)``."""
    path = cache_path(plan)
    if path.is_file():
        return simulation.SimulationResult.from_json(path.read_text()), path, True
    result = simulation.run(plan, jobs=jobs)
    CACHE_DIR.mkdir(exist_ok=True)
    path.write_text(result.to_json())
    return result, path, False


def bundled(name: str) -> simulation.SimulationPlan:
    return simulation.plan_from_text(simulation.bundled_plan_text(name))


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    for name in sys.argv[1:]:
        _, path, hit = cached_run(bundled(name))
        print(name, "cached" if hit else "computed", path)
