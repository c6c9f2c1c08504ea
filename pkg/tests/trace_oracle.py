"""Test-side reconstruction of consumer holdings from a harness trace.

Independent of the runner's own bookkeeping: it only reads the raw
records (broker transitions plus the runner's notes).
"""
from collections import defaultdict


class Holdings:
    def __init__(self):
        self.name_of_cid = {}
        self.held = defaultdict(set)
        self.killed_in_flight = {}
        self.redelivered = set()
        self.drops = []  # (consumer name, requeued tags) per connection drop
        self._naming = None
        self._dropping = None

    def feed(self, rec):
        event = rec["event"]
        if event in ("spawn", "reconnect"):
            self._naming = rec["consumer"]
        elif event == "consumer_added":
            self.name_of_cid[rec["consumer"]] = self._naming
        elif event == "kill":
            if rec["consumer"] not in self.killed_in_flight:
                self.killed_in_flight[rec["consumer"]] = set(self.held[rec["consumer"]])
        elif event == "deliver":
            self.held[self.name_of_cid[rec["consumer"]]].add(rec["tag"])
            if rec["redelivered"]:
                self.redelivered.add(rec["tag"])
        elif event in ("ack", "dead_letter"):
            self.held[self.name_of_cid[rec["consumer"]]].discard(rec["tag"])
        elif event == "requeue":
            name = self.name_of_cid[rec["consumer"]]
            if self._dropping is None or self._dropping[0] != name:
                self._dropping = (name, set(self.held[name]), set())
            self._dropping[2].add(rec["tag"])
            self.held[name].discard(rec["tag"])
        elif event == "consumer_dropped":
            name = self.name_of_cid[rec["consumer"]]
            if self._dropping is not None and self._dropping[0] == name:
                self.drops.append((name, self._dropping[1], self._dropping[2], rec["t"]))
            else:
                self.drops.append((name, set(), set(), rec["t"]))
            self._dropping = None


def replay(trace):
    holdings = Holdings()
    for rec in trace:
        holdings.feed(rec)
    return holdings
