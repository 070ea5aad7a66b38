"""Benchmark and stress harness.

``hprm-bench`` spawns the coordination daemon, the object store daemon,
and one process per federate, then aggregates their measurements into a
CSV report.  See :mod:`hprm.bench.cli` for the command surface and
:mod:`hprm.bench.scenarios` for what each scenario measures.
"""

from hprm.bench.report import LatencyRecord, emit_report, load_report

__all__ = ["LatencyRecord", "emit_report", "load_report"]
