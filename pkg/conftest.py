"""Put every fragility/skills/<skill>/scripts directory on sys.path.

The scripts directories are flat module collections without __init__.py, so
tests import ``from models import ...`` or ``from attack import ...``
directly. All of them share one import namespace; a module name that appears
in two skills would shadow the other, so that is rejected here.
"""

import sys
from pathlib import Path

_skills_root = Path(__file__).resolve().parent / "fragility" / "skills"

_seen: dict[str, Path] = {}
for scripts_dir in sorted(p for p in _skills_root.glob("*/scripts") if p.is_dir()):
    for module in scripts_dir.glob("*.py"):
        if module.stem in _seen:
            raise RuntimeError(f"Module {module.stem} defined in both {_seen[module.stem]} and {scripts_dir}")
        _seen[module.stem] = scripts_dir
    if str(scripts_dir) not in sys.path:
        sys.path.insert(0, str(scripts_dir))
