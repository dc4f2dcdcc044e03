"""Site-separated run over the file transport, with a privacy audit.

Runs the full selection pipeline twice on the same cohort: once in process
and once with every coordinator/site exchange serialized through JSON files
in an outbox directory.  The two reports must match byte for byte, and the
on-disk transcript is audited to confirm no message carries anything
row-shaped.

Run: python3 demos/file_protocol_audit.py
"""

from __future__ import annotations

import tempfile
from collections import Counter
from pathlib import Path

from fedcausal import (
    BootstrapPlan,
    FileTransport,
    RISK_RATIO,
    SCENARIOS,
    audit_transcript,
    estimate_fs,
    generate,
)


def main() -> None:
    data = generate(SCENARIOS["2.2"], n=600, seed=21)
    plan = BootstrapPlan(B=40, seed=5)

    in_process = estimate_fs(data, RISK_RATIO, plan=plan)

    with tempfile.TemporaryDirectory() as tmp:
        transport = FileTransport(Path(tmp) / "fed")
        via_files = estimate_fs(data, RISK_RATIO, plan=plan, transport=transport)

        match = via_files.to_json() == in_process.to_json()
        print(f"file run equals in-process run byte for byte: {match}")

        n_msgs = audit_transcript(transport.log)
        print(f"transcript audit passed on {n_msgs} messages")
        kinds = Counter(m.kind for m in transport.log)
        print("message kinds on the wire:")
        for kind, count in sorted(kinds.items()):
            print(f"  {kind:<24} x{count}")

        sample = sorted(transport.outbox.iterdir())[0]
        print(f"\nfirst outbox file ({sample.name}):")
        print(f"  {sample.read_text()}")

    print(f"\nfinal report: psi_hat={via_files.psi_hat:.3f} se={via_files.se:.3f}"
          f" sites={list(via_files.selected_sites)}")


if __name__ == "__main__":
    main()
