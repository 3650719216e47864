"""In-process backend: each rank is a thread, mailboxes are shared directly."""

from __future__ import annotations

import threading

from .base import Communicator


class ThreadWorld:
    """The shared state of one in-process run: one mailbox per rank."""

    def __init__(self, size: int, *, timeout: float = 30.0):
        if size < 1:
            raise ValueError("need at least one rank")
        self.size = size
        self.abort_event = threading.Event()
        self.comms = [ThreadComm(self, r, timeout=timeout) for r in range(size)]

    def abort(self) -> None:
        self.abort_event.set()
        for comm in self.comms:
            comm.mailbox.poke()


class ThreadComm(Communicator):
    backend = "threads"

    def __init__(self, world: ThreadWorld, rank: int, *, timeout: float):
        super().__init__(rank, world.size, timeout=timeout, abort_event=world.abort_event)
        self.world = world

    def _transmit(self, dest, tag, payload, on_match):
        self.world.comms[dest].mailbox.deliver(self.rank, tag, payload, on_match)
