import pytest
import torch

from apb_helper.errors import ContractViolation, DeadlockError
from apb_helper.simnet import (
    CollectiveKind, HostGroup, Schedule, all_gather, all_to_all, gather, payload_elements, ring_pass,
)
from apb_helper.tensor_core import PartialAttention


def gather_body(ctx):
    received = yield all_gather(torch.full((ctx.host,), float(ctx.host)), tag='test/gather')
    return [t.tolist() for t in received]


def test_all_gather_returns_payloads_in_host_order():
    group = HostGroup(3)
    results = group.run(gather_body)
    expected = [[1.0], [2.0, 2.0], [3.0, 3.0, 3.0]]
    assert results == [expected] * 3

    (entry,) = group.trace.entries
    assert entry.kind == CollectiveKind.ALL_GATHER
    assert entry.sent == (1, 2, 3)
    assert entry.received == (6, 6, 6)
    assert entry.conserved()
    assert group.trace.volume == 6
    assert group.pending() == 0


def test_gather_broadcasts_to_every_host():
    def body(ctx):
        received = yield gather(torch.tensor([ctx.host]), root=ctx.hosts, tag='test/root')
        return [int(t) for t in received]

    group = HostGroup(4)
    assert group.run(body) == [[1, 2, 3, 4]] * 4
    assert group.trace.entries[0].kind == CollectiveKind.GATHER


def test_all_to_all_transposes():
    def body(ctx):
        received = yield all_to_all([torch.tensor([10 * ctx.host + j]) for j in range(1, ctx.hosts + 1)])
        return [int(t) for t in received]

    group = HostGroup(3)
    assert group.run(body) == [[11, 21, 31], [12, 22, 32], [13, 23, 33]]
    assert group.trace.entries[0].conserved()


def test_all_to_all_rejects_ragged_rows():
    def body(ctx):
        yield all_to_all([torch.zeros(1)] * ctx.host)

    with pytest.raises(ContractViolation, match='all_to_all'):
        HostGroup(2).run(body)


def test_ring_pass_receives_from_predecessor():
    def body(ctx):
        received = yield ring_pass(torch.tensor([ctx.host]), step=0)
        return int(received)

    group = HostGroup(4)
    assert group.run(body) == [4, 1, 2, 3]
    assert group.trace.entries[0].conserved()


def test_ring_rotation_completes_after_hosts_minus_one_steps():
    def body(ctx):
        current, seen = torch.tensor([ctx.host]), []
        for step in range(ctx.hosts - 1):
            current = yield ring_pass(current, step=step, tag=f'ring{step}')
            seen.append(int(current))
        return seen

    results = HostGroup(4).run(body)
    for host, seen in enumerate(results, start=1):
        assert sorted(seen + [host]) == [1, 2, 3, 4]


def test_deadlock_names_round():
    def body(ctx):
        yield all_gather(torch.zeros(1))
        if ctx.host != 2:
            yield all_gather(torch.zeros(1))

    with pytest.raises(DeadlockError, match='round 1') as info:
        HostGroup(3).run(body)
    assert info.value.finished == [2]
    assert info.value.waiting == [1, 3]


def test_mismatched_collectives():
    def body(ctx):
        if ctx.host == 1:
            yield all_gather(torch.zeros(1))
        else:
            yield gather(torch.zeros(1))

    with pytest.raises(ContractViolation, match='host 2'):
        HostGroup(2).run(body)


def test_non_generator_body_returns_directly():
    assert HostGroup(2).run(lambda ctx: ctx.host * 10) == [10, 20]


def work_body(ctx):
    x = torch.full((2,), float(ctx.host))
    for step in range(3):
        gathered = yield all_gather(x * (step + 1), tag=f'step{step}')
        x = torch.stack(gathered).sum(dim=0) / ctx.hosts + ctx.host
    return x


@pytest.mark.parametrize('schedule', list(Schedule))
def test_schedules_agree(schedule):
    reference = HostGroup(4).run(work_body)
    group = HostGroup(4, schedule=schedule, seed=7)
    results = group.run(work_body)
    for a, b in zip(reference, results):
        assert torch.equal(a, b)
    assert group.pending() == 0
    assert group.round == 3
    assert all(entry.conserved() for entry in group.trace.entries)


def test_trace_queries():
    group = HostGroup(2)
    group.run(work_body)
    trace = group.trace
    assert trace.cumulative() == [4, 8, 12]
    assert trace.volume_of('step1') == 4
    assert trace.sent_by(2) == 6
    assert len(trace.select(kind=CollectiveKind.ALL_GATHER)) == 3
    assert trace.to_dict()['volume'] == 12


def test_payload_elements():
    part = PartialAttention(torch.zeros(2, 3, 4), torch.zeros(2, 3))
    assert payload_elements(part) == 30
    assert payload_elements(dict(keys=torch.zeros(5), source=3)) == 5
    assert payload_elements([torch.zeros(2), None, (torch.zeros(3),)]) == 5


def test_reset_counters_hands_back_previous():
    group = HostGroup(2)
    group.counters[0].add('ffn', 5)
    previous = group.reset_counters()
    assert previous[0].flops['ffn'] == 5
    assert group.counters[0].flops['ffn'] == 0


def test_threaded_schedule_reraises_lowest_host_error():
    def body(ctx):
        yield all_gather(torch.zeros(1))
        if ctx.host >= 2:
            raise ValueError(f'host {ctx.host} failed')
        yield all_gather(torch.zeros(1))

    with pytest.raises(ValueError, match='host 2 failed'):
        HostGroup(4, schedule=Schedule.THREADED).run(body)


def test_threaded_schedule_detects_deadlock():
    def body(ctx):
        yield all_gather(torch.zeros(1))
        if ctx.host != 3:
            yield all_gather(torch.zeros(1))

    with pytest.raises(DeadlockError, match='round 1') as info:
        HostGroup(3, schedule=Schedule.THREADED).run(body)
    assert info.value.finished == [3]
