"""Central credit ledger and its bus service.

Every credit that exists starts in the reserve account; opening an account
moves a grant out of the reserve, settling a bid moves the full bid amount
from bidder to provider. The journal is append-only and replaying it from
genesis reproduces every balance.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass
from decimal import Decimal
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional

from .market import Bid, CreditLike, credit
from .simnet import Envelope, Service, World, canonical

logger = logging.getLogger(__name__)

RESERVE = "reserve"
DEFAULT_SUPPLY = Decimal("1000000000.00")


class BankError(Exception):
    pass


class DuplicateAccount(BankError):
    pass


class UnknownAccount(BankError):
    pass


class InsufficientFunds(BankError):
    pass


class Reason(str, enum.Enum):
    BID_SETTLEMENT = "BID_SETTLEMENT"
    GRANT = "GRANT"
    MANUAL = "MANUAL"


@dataclass(frozen=True)
class Account:
    account_id: str
    balance: Decimal


@dataclass(frozen=True)
class Transfer:
    transfer_id: str
    source: str
    dest: str
    amount: Decimal
    reason: Reason
    at: float

    def to_record(self) -> dict:
        return {"kind": "transfer", "transfer_id": self.transfer_id, "from": self.source,
                "to": self.dest, "amount": str(self.amount), "reason": self.reason.value,
                "at": self.at}


class Bank:
    def __init__(self, supply: CreditLike = DEFAULT_SUPPLY, now: Callable[[], float] = lambda: 0.0,
                 journal_path: Optional[Path] = None):
        self._now = now
        self._balances: Dict[str, Decimal] = {}
        self.journal: List[dict] = []
        self._next_transfer = 1
        self._journal_fh = None
        # Test hook, called between debit and credit of a transfer.
        self.fault_hook: Optional[Callable[[Transfer], None]] = None
        path = Path(journal_path) if journal_path is not None else None
        fresh = path is None or not path.exists() or path.stat().st_size == 0
        if fresh:
            self._append({"kind": "genesis", "account": RESERVE, "supply": str(credit(supply))})
            self._balances[RESERVE] = credit(supply)
        else:
            with open(path, encoding="utf-8") as fh:
                self._replay(fh)
        if path is not None:
            self._journal_fh = open(path, "a", encoding="utf-8")
            if fresh:
                for rec in self.journal:
                    self._journal_fh.write(canonical(rec) + "\n")
                self._journal_fh.flush()

    # -- journal ----------------------------------------------------------
    def _append(self, record: dict) -> None:
        self.journal.append(record)
        if self._journal_fh is not None:
            self._journal_fh.write(canonical(record) + "\n")
            self._journal_fh.flush()

    def journal_lines(self) -> List[str]:
        return [canonical(r) for r in self.journal]

    def _replay(self, lines: Iterable[str]) -> None:
        for rec in replay_journal(lines, into=self._balances, records=self.journal):
            if rec["kind"] == "transfer":
                self._next_transfer = max(self._next_transfer, int(rec["transfer_id"][1:]) + 1)

    def close(self) -> None:
        if self._journal_fh is not None:
            self._journal_fh.close()
            self._journal_fh = None

    # -- queries ----------------------------------------------------------
    def balance(self, account_id: str) -> Decimal:
        try:
            return self._balances[account_id]
        except KeyError:
            raise UnknownAccount(f"unknown account {account_id!r}") from None

    def balances(self) -> Dict[str, Decimal]:
        return dict(self._balances)

    def total(self) -> Decimal:
        return sum(self._balances.values(), Decimal("0.00"))

    def __contains__(self, account_id: str) -> bool:
        return account_id in self._balances

    # -- mutations --------------------------------------------------------
    def open_account(self, account_id: str, initial_grant: CreditLike = "0.00") -> Account:
        grant = credit(initial_grant)
        if not account_id or account_id in self._balances:
            raise DuplicateAccount(f"account {account_id!r} already exists")
        if grant > self._balances[RESERVE]:
            raise InsufficientFunds(f"reserve cannot fund a grant of {grant}")
        self._balances[account_id] = Decimal("0.00")
        self._append({"kind": "open", "account": account_id, "at": self._now()})
        if grant > 0:
            self.transfer(RESERVE, account_id, grant, Reason.GRANT)
        return Account(account_id, self._balances[account_id])

    def transfer(self, source: str, dest: str, amount: CreditLike,
                 reason: Reason = Reason.MANUAL) -> Transfer:
        amount = credit(amount)
        if amount <= 0:
            raise BankError("transfer amount must be positive")
        if source == dest:
            raise BankError("cannot transfer to the same account")
        for acct in (source, dest):
            if acct not in self._balances:
                raise UnknownAccount(f"unknown account {acct!r}")
        if self._balances[source] < amount:
            raise InsufficientFunds(
                f"{source} holds {self._balances[source]}, needs {amount}")
        tr = Transfer(f"t{self._next_transfer}", source, dest, amount, Reason(reason), self._now())
        before = (self._balances[source], self._balances[dest])
        try:
            self._balances[source] = before[0] - amount
            if self.fault_hook is not None:
                self.fault_hook(tr)
            self._balances[dest] = before[1] + amount
            self._append(tr.to_record())
        except BaseException:
            self._balances[source], self._balances[dest] = before
            raise
        self._next_transfer += 1
        return tr

    def settle_bid(self, bid: Bid, provider_account: str) -> Transfer:
        return self.transfer(bid.bidder, provider_account, bid.amount, Reason.BID_SETTLEMENT)


def replay_journal(lines: Iterable[str], into: Optional[Dict[str, Decimal]] = None,
                   records: Optional[List[dict]] = None):
    """Rebuild balances from journal lines, yielding each record.

    Independent of `Bank` so tests can use it as a replay oracle.
    """
    balances = {} if into is None else into
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            kind = rec["kind"]
        except (ValueError, KeyError, TypeError) as exc:
            raise BankError(f"journal line {lineno}: malformed record") from exc
        if kind == "genesis":
            balances[rec["account"]] = credit(rec["supply"])
        elif kind == "open":
            balances.setdefault(rec["account"], Decimal("0.00"))
        elif kind == "transfer":
            amount = credit(rec["amount"])
            balances[rec["from"]] -= amount
            balances[rec["to"]] += amount
            if balances[rec["from"]] < 0:
                raise BankError(f"journal line {lineno}: overdraft on {rec['from']}")
        else:
            raise BankError(f"journal line {lineno}: unknown record kind {kind!r}")
        if records is not None:
            records.append(rec)
        yield rec


def replay_balances(lines: Iterable[str]) -> Dict[str, Decimal]:
    balances: Dict[str, Decimal] = {}
    for _ in replay_journal(lines, into=balances):
        pass
    return balances


class BankService(Service):
    """`bank.open`, `bank.settle`, `bank.balance` over the bus.

    Mutations are applied one message at a time in delivery order, which
    is what makes the bank a single writer.
    """

    prefix = "bank"

    def __init__(self, world: World, endpoint: str = "bank", bank: Optional[Bank] = None,
                 supply: CreditLike = DEFAULT_SUPPLY, journal_path: Optional[Path] = None):
        super().__init__(world.bus, endpoint)
        self.world = world
        self.bank = bank or Bank(supply, now=lambda: world.clock.now, journal_path=journal_path)
        world.services[endpoint] = self

    def on_open(self, env: Envelope) -> None:
        body = env.body
        try:
            acct = self.bank.open_account(body["account"], body.get("grant", "0.00"))
        except BankError as exc:
            self.reply(env, ok=False, error=str(exc), account=body.get("account"))
            return
        self.reply(env, ok=True, account=acct.account_id, balance=str(acct.balance),
                   balances={acct.account_id: str(acct.balance),
                             RESERVE: str(self.bank.balance(RESERVE))})

    def on_settle(self, env: Envelope) -> None:
        bid = Bid.from_wire(env.body["bid"])
        provider = env.body["provider"]
        try:
            tr = self.bank.settle_bid(bid, provider)
        except BankError as exc:
            self.reply(env, ok=False, error=str(exc), bid_id=bid.bid_id)
            return
        self.reply(env, ok=True, bid_id=bid.bid_id, transfer=tr.to_record(),
                   balances={tr.source: str(self.bank.balance(tr.source)),
                             tr.dest: str(self.bank.balance(tr.dest))})

    def on_balance(self, env: Envelope) -> None:
        account = env.body["account"]
        try:
            bal = self.bank.balance(account)
        except BankError as exc:
            self.reply(env, ok=False, error=str(exc), account=account)
            return
        self.reply(env, ok=True, account=account, balance=str(bal))
