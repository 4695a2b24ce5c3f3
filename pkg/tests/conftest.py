from __future__ import annotations

import struct

import pytest

from bpfiso import runtime
from bpfiso.helpers import META_FMT, META_MAGIC

# Every Machine built anywhere in the suite is audited when its test ends.
_machines: list = []
AUDIT = {"machines": 0, "confinement": 0, "involution": 0, "metadata": 0}
ACCEPTANCE: list[str] = []

_orig_init = runtime.Machine.__init__


def _tracking_init(self, *args, **kwargs):
    _orig_init(self, *args, **kwargs)
    _machines.append(self)


runtime.Machine.__init__ = _tracking_init


def _metadata_intact(m) -> bool:
    for image in m.images:
        for obj in image.maps:
            raw = m.kread(obj.meta, struct.calcsize(META_FMT), image.space)
            if struct.unpack(META_FMT, raw)[0] != META_MAGIC:
                return False
    return True


@pytest.fixture(autouse=True)
def audit_machines(request):
    """Shadow-log check: enter/exit is an involution everywhere; with every
    protection on, BPF code never touches memory outside its domain and
    map metadata keeps its magic."""
    start = len(_machines)
    yield
    built = _machines[start:]
    del _machines[start:]
    if request.node.get_closest_marker("no_audit"):
        return
    for m in built:
        AUDIT["machines"] += 1
        AUDIT["involution"] += m.involution_failures
        assert m.involution_failures == 0
        if m.config.all_on:
            v = m.mmu.confinement_violations()
            AUDIT["confinement"] += v
            assert v == 0, f"{v} confinement violations"
            if not _metadata_intact(m):
                AUDIT["metadata"] += 1
            assert _metadata_intact(m)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
    terminalreporter.write_line(
        "machine audit: {machines} machines, {involution} involution failures, "
        "{confinement} confinement violations, {metadata} metadata corruptions".format(**AUDIT))
