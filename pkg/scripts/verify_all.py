"""Run every verification suite and write the JSON report (same as `sffn verify --suite all`)."""

import sys

from sffn.cli import main

if __name__ == "__main__":
    out = sys.argv[1] if len(sys.argv) > 1 else "verify_report.json"
    sys.exit(main(["verify", "--suite", "all", "--out", out]))
