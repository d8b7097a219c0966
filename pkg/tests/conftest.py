import os
import sys
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None)
settings.register_profile("ci", deadline=None, max_examples=50)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ROOT = Path(__file__).resolve().parent.parent
SCENARIOS = ROOT / "scenarios"
CORPUS = Path(__file__).parent / "corpus"


@pytest.fixture
def market():
    """A world with bank, sls and a builder for hosts with auctioneers."""
    from agora.auctioneer import Auctioneer
    from agora.bank import BankService
    from agora.directory import DirectoryService
    from agora.simnet import World

    class Market:
        def __init__(self):
            self.world = World(seed=1)
            self.bank = BankService(self.world)
            self.sls = DirectoryService(self.world)
            self.aucs = {}

        def host(self, host_id, cpu=1.0, mem=4096, boot=5.0, monitor=None):
            h = self.world.add_host(host_id, cpu_capacity=cpu, memory_total=mem, boot_delay=boot)
            self.bank.bank.open_account(f"prov-{host_id}")
            auc = Auctioneer(self.world, h, f"prov-{host_id}", monitor=monitor)
            auc.start()
            self.aucs[host_id] = auc
            return auc

        def account(self, name, grant="1000.00"):
            self.bank.bank.open_account(name, grant)

        def advance(self, t):
            self.world.advance(t)

    return Market()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
