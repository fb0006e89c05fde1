import sys

import pytest

from dfcreg import geometry, procrustes

# Every rotation the library builds during the session is audited here; the
# SO(3) acceptance criterion reads the log at the end of the run.
SO3_AUDIT = {"count": 0, "worst": 0.0, "worst_where": None}


def _note(R, where):
    d = geometry.so3_defect(R)
    SO3_AUDIT["count"] += 1
    if d > SO3_AUDIT["worst"]:
        SO3_AUDIT["worst"], SO3_AUDIT["worst_where"] = d, where


@pytest.fixture(scope="session", autouse=True)
def so3_audit():
    post = geometry.RigidTransform.__post_init__
    batch = procrustes.solve_batch

    def audited_post(self):
        post(self)
        caller = sys._getframe(2)
        # transforms built by test code or parsed from files are inputs, not outputs
        if caller.f_globals.get("__name__", "").startswith("dfcreg") and caller.f_code.co_name != "from_matrix":
            _note(self.rotation, f"{caller.f_globals['__name__']}.{caller.f_code.co_name}")

    def audited_batch(*a, **kw):
        R, t, ok = batch(*a, **kw)
        for r in R[ok]:
            _note(r, "procrustes.solve_batch")
        return R, t, ok

    geometry.RigidTransform.__post_init__ = audited_post
    procrustes.solve_batch = audited_batch
    yield SO3_AUDIT
    geometry.RigidTransform.__post_init__ = post
    procrustes.solve_batch = batch


def pytest_collection_modifyitems(items):
    # the SO(3) audit has to see everything else first
    last = [it for it in items if "so3_audit_all_transforms" in it.name]
    items[:] = [it for it in items if it not in last] + last


ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if "test_acceptance" in report.nodeid and (report.when == "call" or report.outcome != "passed"):
        ACCEPTANCE[report.nodeid.split("::")[-1]] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    from test_acceptance import DETAILS

    for name in sorted(ACCEPTANCE, key=lambda n: int(n.split("_")[1])):
        status = "PASS" if ACCEPTANCE[name] == "passed" else "FAIL"
        terminalreporter.write_line(f"{status}  {name}  {DETAILS.get(name, '')}".rstrip())
