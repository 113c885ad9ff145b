import inspect
from dataclasses import dataclass, field
from enum import Enum
from threading import Lock, Thread
from typing import Any, List, Optional, Tuple

import torch

from diffusers.utils import logging

from apb_helper.costmodel import FlopCounter
from apb_helper.errors import ConfigError, ContractViolation, DeadlockError
from apb_helper.tensor_core import PartialAttention


logger = logging.get_logger(__name__)  # pylint: disable=invalid-name


class CollectiveKind(Enum):
    ALL_GATHER = "all_gather"
    GATHER = "gather"
    ALL_TO_ALL = "all_to_all"
    RING_PASS = "ring_pass"


class Schedule(Enum):
    ORDERED = "ordered"
    REVERSED = "reversed"
    SHUFFLED = "shuffled"
    THREADED = "threaded"


@dataclass
class Collective:
    """A barrier request yielded by a host body; the engine answers it once every host has yielded."""
    kind: CollectiveKind
    payload: Any
    root: int = 1
    step: int = 0
    tag: str = ''


def all_gather(payload, tag=''):
    return Collective(CollectiveKind.ALL_GATHER, payload, tag=tag)


def gather(payload, root=1, tag=''):
    return Collective(CollectiveKind.GATHER, payload, root=root, tag=tag)


def all_to_all(payloads, tag=''):
    return Collective(CollectiveKind.ALL_TO_ALL, list(payloads), tag=tag)


def ring_pass(payload, step, tag=''):
    return Collective(CollectiveKind.RING_PASS, payload, step=step, tag=tag)


def payload_elements(payload) -> int:
    """Counts f32 elements on the wire; plain ints and strings ride along for free."""
    if payload is None:
        return 0
    if isinstance(payload, torch.Tensor):
        return int(payload.numel())
    if isinstance(payload, PartialAttention):
        return int(payload.out.numel() + payload.lse.numel())
    if isinstance(payload, dict):
        return sum(payload_elements(v) for v in payload.values())
    if isinstance(payload, (list, tuple)):
        return sum(payload_elements(v) for v in payload)
    return 0


@dataclass
class TraceEntry:
    round: int
    kind: CollectiveKind
    tag: str
    sent: Tuple[int, ...]
    received: Tuple[int, ...]

    @property
    def volume(self):
        return sum(self.sent)

    def conserved(self):
        hosts = len(self.sent)
        if self.kind in (CollectiveKind.ALL_GATHER, CollectiveKind.GATHER):
            # every host ends up with every payload, its own included
            return all(r == self.volume for r in self.received)
        if self.kind == CollectiveKind.RING_PASS:
            return all(self.received[h] == self.sent[(h - 1) % hosts] for h in range(hosts))
        return sum(self.received) == self.volume

    def to_dict(self):
        return dict(round=self.round, kind=self.kind.value, tag=self.tag, sent=list(self.sent), received=list(self.received))


@dataclass
class CommTrace:
    entries: List[TraceEntry] = field(default_factory=list)

    def record(self, entry: TraceEntry):
        self.entries.append(entry)

    @property
    def volume(self):
        return sum(entry.volume for entry in self.entries)

    def cumulative(self):
        total, out = 0, []
        for entry in self.entries:
            total += entry.volume
            out.append(total)
        return out

    def select(self, prefix='', kind: Optional[CollectiveKind] = None):
        return [e for e in self.entries if e.tag.startswith(prefix) and (kind is None or e.kind == kind)]

    def volume_of(self, prefix='', kind: Optional[CollectiveKind] = None):
        return sum(entry.volume for entry in self.select(prefix, kind))

    def sent_by(self, host, prefix=''):
        return sum(entry.sent[host - 1] for entry in self.select(prefix))

    def to_dict(self):
        return dict(volume=self.volume, entries=[entry.to_dict() for entry in self.entries])


@dataclass
class HostContext:
    host: int
    hosts: int
    counter: FlopCounter

    @property
    def is_last(self):
        return self.host == self.hosts


def advance_threaded(advance, live):
    """Advances every live host on its own worker thread and waits for all of them."""
    outcomes, errors = {}, []
    lock = Lock()

    def work(i):
        try:
            outcome = advance(i)
        except Exception as e:
            with lock:
                errors.append((i, e))
            return
        with lock:
            outcomes[i] = outcome

    threads = [Thread(target=work, args=(i,), daemon=True) for i in live]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()

    if errors:
        raise min(errors, key=lambda item: item[0])[1]
    return {i: outcomes[i] for i in live}


class HostGroup:
    """
    Lockstep in-process fabric of H simulated hosts.

    A host body is a generator function taking a HostContext; each `yield` of a
    Collective is a barrier. Once all hosts have yielded, the collective is
    resolved in host-index order and each host is resumed with its share.
    """

    def __init__(self, hosts, schedule: Schedule = Schedule.ORDERED, seed=0):
        if hosts < 1:
            raise ConfigError(f'host count must be >= 1, got {hosts}')
        self.hosts = hosts
        self.schedule = Schedule(schedule)
        self.seed = seed
        self.trace = CommTrace()
        self.counters = [FlopCounter() for _ in range(hosts)]
        self.round = 0
        self._waiting = []

    def pending(self):
        return len(self._waiting)

    def reset_counters(self):
        previous = self.counters
        self.counters = [FlopCounter() for _ in range(self.hosts)]
        return previous

    def _order(self):
        if self.schedule == Schedule.REVERSED:
            return list(reversed(range(self.hosts)))
        if self.schedule == Schedule.SHUFFLED:
            generator = torch.Generator().manual_seed(self.seed * 1000003 + self.round)
            return torch.randperm(self.hosts, generator=generator).tolist()
        return list(range(self.hosts))

    def run(self, body, *args, **kwargs) -> list:
        contexts = [HostContext(h + 1, self.hosts, self.counters[h]) for h in range(self.hosts)]
        results = [None] * self.hosts
        generators = [None] * self.hosts

        for i, ctx in enumerate(contexts):
            out = body(ctx, *args, **kwargs)
            if inspect.isgenerator(out):
                generators[i] = out
            else:
                results[i] = out

        inbox = [None] * self.hosts
        def advance(i):
            try:
                return generators[i].send(inbox[i]), False, None
            except StopIteration as stop:
                return None, True, stop.value

        try:
            while True:
                live = [i for i in self._order() if generators[i] is not None]
                if not live:
                    break

                if self.schedule == Schedule.THREADED:
                    outcomes = advance_threaded(advance, live)
                else:
                    outcomes = {i: advance(i) for i in live}

                requests = [None] * self.hosts
                for i, (request, finished, value) in outcomes.items():
                    if finished:
                        generators[i] = None
                        results[i] = value
                    elif not isinstance(request, Collective):
                        raise ContractViolation(f'host {i + 1} yielded {type(request).__name__}, expected a Collective')
                    else:
                        requests[i] = request

                self._waiting = [i + 1 for i in range(self.hosts) if requests[i] is not None]
                if not self._waiting:
                    break
                if len(self._waiting) != self.hosts:
                    finished = [h for h in range(1, self.hosts + 1) if h not in self._waiting]
                    raise DeadlockError(self.round, self._waiting, finished, requests[self._waiting[0] - 1].kind.value)

                inbox = self._dispatch(requests)
                self._waiting = []
                self.round += 1
        finally:
            for generator in generators:
                if generator is not None:
                    generator.close()

        return results

    def _dispatch(self, requests: List[Collective]):
        first = requests[0]
        for h, request in enumerate(requests[1:], start=2):
            if request.kind != first.kind:
                raise ContractViolation(f'round {self.round}: host 1 called {first.kind.value} but host {h} called {request.kind.value}')
            if request.root != first.root or request.step != first.step:
                raise ContractViolation(f'round {self.round}: hosts disagree on {first.kind.value} root/step')

        payloads = [request.payload for request in requests]
        if first.kind == CollectiveKind.ALL_GATHER:
            return self.all_gather(payloads, tag=first.tag)
        if first.kind == CollectiveKind.GATHER:
            return self.gather(payloads, root=first.root, tag=first.tag)
        if first.kind == CollectiveKind.ALL_TO_ALL:
            return self.all_to_all(payloads, tag=first.tag)
        return self.ring_pass(payloads, step=first.step, tag=first.tag)

    def _record(self, kind, tag, sent, received):
        entry = TraceEntry(self.round, kind, tag, tuple(sent), tuple(received))
        self.trace.record(entry)
        logger.debug(f'round {self.round} {kind.value} {tag}: {entry.volume} elements')
        return entry

    def _check_count(self, payloads):
        if len(payloads) != self.hosts:
            raise ContractViolation(f'collective needs {self.hosts} payloads, got {len(payloads)}')

    def all_gather(self, payloads, tag=''):
        self._check_count(payloads)
        sizes = [payload_elements(p) for p in payloads]
        self._record(CollectiveKind.ALL_GATHER, tag, sizes, [sum(sizes)] * self.hosts)
        return [list(payloads) for _ in range(self.hosts)]

    def gather(self, payloads, root=1, tag=''):
        # broadcast-gather: every host receives the ordered list so replicated tails stay identical
        self._check_count(payloads)
        if not 1 <= root <= self.hosts:
            raise ContractViolation(f'gather root {root} outside 1..{self.hosts}')
        sizes = [payload_elements(p) for p in payloads]
        self._record(CollectiveKind.GATHER, tag, sizes, [sum(sizes)] * self.hosts)
        return [list(payloads) for _ in range(self.hosts)]

    def all_to_all(self, payloads, tag=''):
        self._check_count(payloads)
        for h, row in enumerate(payloads, start=1):
            if not isinstance(row, (list, tuple)) or len(row) != self.hosts:
                raise ContractViolation(f'all_to_all: host {h} must provide exactly {self.hosts} payloads')
        sent = [sum(payload_elements(p) for p in row) for row in payloads]
        received = [sum(payload_elements(payloads[i][j]) for i in range(self.hosts)) for j in range(self.hosts)]
        self._record(CollectiveKind.ALL_TO_ALL, tag, sent, received)
        return [[payloads[i][j] for i in range(self.hosts)] for j in range(self.hosts)]

    def ring_pass(self, payloads, step=0, tag=''):
        self._check_count(payloads)
        if not 0 <= step < self.hosts:
            raise ContractViolation(f'ring step {step} outside 0..{self.hosts - 1}')
        sizes = [payload_elements(p) for p in payloads]
        received = [sizes[(h - 1) % self.hosts] for h in range(self.hosts)]
        self._record(CollectiveKind.RING_PASS, tag, sizes, received)
        return [payloads[(h - 1) % self.hosts] for h in range(self.hosts)]
