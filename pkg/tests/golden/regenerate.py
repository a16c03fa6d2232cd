"""Rewrite the golden CLI reports: ``python3 tests/golden/regenerate.py``."""

import contextlib
import io
import json
import sys
import tempfile
from pathlib import Path

HERE = Path(__file__).parent
sys.path.insert(0, str(HERE.parent))

from jacksonnet import cli  # noqa: E402
from test_cli import CONFIGS, GOLDEN_CASES  # noqa: E402


def main():
    with tempfile.TemporaryDirectory() as tmp:
        for golden, (name, argv) in sorted(GOLDEN_CASES.items()):
            path = Path(tmp) / f"{name}.json"
            path.write_text(json.dumps(CONFIGS[name]))
            cmd = argv[:2] if argv[0] == "bikeshare" else argv[:1]
            buf = io.StringIO()
            with contextlib.redirect_stdout(buf):
                code = cli.main([*cmd, str(path), *argv[len(cmd):]])
            if code:
                raise SystemExit(f"{golden}: exit {code}")
            (HERE / golden).write_text(buf.getvalue())
            print("wrote", golden)


if __name__ == "__main__":
    main()
