"""Backend-independent acceptance scenarios over real communicators.

Each helper takes ``open_comm(**options)``, so the same code runs against the
in-process broker and, when one is configured, a live AMQP broker.
"""
import collections
import concurrent.futures
import random
import threading
import time

from commkit import BroadcastFilter, RemoteException, UnroutableError
from commkit.envelope import MessageKind

from oracles import reference_glob


def _offload(pool, fn, *args):
    return pool.submit(fn, *args)


def bulk_tasks(open_comm, tasks, consumers, timeout=30.0):
    """Submit ``tasks`` to ``consumers`` prefetch-1 workers; count executions per serial."""
    lock = threading.Lock()
    executions = collections.Counter()

    def handler(_comm, payload):
        with lock:
            executions[payload["serial"]] += 1
        return payload["serial"]

    workers = [open_comm() for _ in range(consumers)]
    for comm in workers:
        comm.add_task_subscriber(handler, prefetch=1)
    submitter = open_comm()
    started = time.perf_counter()
    futures = [submitter.task_send({"serial": n}) for n in range(tasks)]
    results = [f.result(timeout) for f in futures]
    elapsed = time.perf_counter() - started
    for comm in workers + [submitter]:
        comm.close(grace=1.0)
    return {
        "elapsed": elapsed,
        "results_ok": results == list(range(tasks)),
        "executions": executions,
    }


def kill_run(open_comm, tasks, consumers, kills, seed, work=0.002, timeout=30.0):
    """Workers on real communicators; ``kills`` of them die abruptly part-way through.

    Returns the serials each killed worker was executing when it died and the
    per-serial execution counts.
    """
    rng = random.Random(seed)
    lock = threading.Lock()
    executions = collections.Counter()
    running = collections.defaultdict(set)
    pool = concurrent.futures.ThreadPoolExecutor(4 * consumers)
    completed = [0]
    progress = threading.Condition(lock)

    killed = set()

    def make_handler(index):
        def run(serial):
            time.sleep(work)
            with lock:
                completed[0] += 1
                progress.notify_all()
            return serial

        def handler(_comm, payload):
            serial = payload["serial"]
            with lock:
                if index in killed:
                    # A dead process starts nothing; the broker will hand this on.
                    return concurrent.futures.Future()
                executions[serial] += 1
                running[index].add(serial)
            return _offload(pool, run, serial)

        return handler

    def track_settlement(comm, index):
        # In flight means started and not yet settled: the ack (or reply) is only
        # sent from inside _finish_task.
        original = comm._finish_task  # pylint: disable=protected-access

        def finish(handle, env, reply_to, value, exc):
            try:
                original(handle, env, reply_to, value, exc)
            finally:
                with lock:
                    running[index].discard(env.body["serial"])

        comm._finish_task = finish  # pylint: disable=protected-access

    workers = []
    for index in range(consumers):
        comm = open_comm()
        track_settlement(comm, index)
        comm.add_task_subscriber(make_handler(index), prefetch=rng.randint(1, 3))
        workers.append(comm)
    submitter = open_comm()
    futures = [submitter.task_send({"serial": n}) for n in range(tasks)]
    victims = rng.sample(range(consumers), kills)
    thresholds = sorted(rng.randint(tasks // 10, tasks // 2) for _ in victims)
    in_flight_at_kill = {}
    for victim, threshold in zip(victims, thresholds):
        with progress:
            progress.wait_for(lambda: completed[0] >= threshold, timeout)
        with lock:
            killed.add(victim)
            in_flight_at_kill[victim] = set(running[victim])
            workers[victim].transport.abort()
    results = [f.result(timeout) for f in futures]
    for index, comm in enumerate(workers):
        if index not in victims:
            comm.close(grace=1.0)
    submitter.close()
    pool.shutdown(wait=False)
    return {
        "results_ok": results == list(range(tasks)),
        "executions": executions,
        "in_flight_at_kill": in_flight_at_kill,
    }


def rpc_contract(open_comm, iterations, seed):
    """Randomized RPC round trips plus the UNROUTABLE and REMOTE_EXCEPTION paths."""
    rng = random.Random(seed)
    server, client = open_comm(), open_comm()
    sent, replied = {}, []
    original_on_reply = client._on_reply  # pylint: disable=protected-access

    def spy(env):
        replied.append(env.correlation_id)
        original_on_reply(env)

    client._on_reply = spy  # pylint: disable=protected-access
    original_publish = client.transport.publish_rpc

    def publish_spy(env, raw):
        sent[env.correlation_id] = env
        return original_publish(env, raw)

    client.transport.publish_rpc = publish_spy

    def fail(_comm, payload):
        raise ValueError(f"refused {payload!r}")

    server.add_rpc_subscriber(lambda _c, payload: payload, "echo")
    server.add_rpc_subscriber(fail, "fail")
    problems = []
    for i in range(iterations):
        payload = _random_value(rng)
        mode = rng.random()
        if mode < 0.6:
            got = client.rpc_send("echo", payload).result(10)
            if got != payload:
                problems.append(f"echo {i}: {got!r} != {payload!r}")
        elif mode < 0.8:
            fut = client.rpc_send(f"ghost-{i}", payload)
            try:
                fut.result(10)
                problems.append(f"ghost {i} resolved")
            except UnroutableError:
                pass
        else:
            fut = client.rpc_send("fail", payload)
            try:
                fut.result(10)
                problems.append(f"fail {i} resolved")
            except RemoteException as exc:
                if "refused" not in str(exc):
                    problems.append(f"fail {i}: message lost: {exc}")
    unmatched = [cid for cid in replied if cid not in sent]
    if unmatched:
        problems.append(f"{len(unmatched)} replies with unknown correlation ids")
    if sorted(set(replied)) != sorted(sent):
        problems.append("not every request received exactly its own reply")
    server.close()
    client.close()
    return problems


def _random_value(rng, depth=0):
    roll = rng.random()
    if depth > 2 or roll < 0.5:
        return rng.choice([None, True, False, rng.randint(-10**12, 10**12), rng.random() * 1e6,
                           "".join(rng.choice("abcxyz é✓\n\"") for _ in range(rng.randint(0, 12)))])
    if roll < 0.75:
        return [_random_value(rng, depth + 1) for _ in range(rng.randint(0, 4))]
    return {f"k{j}": _random_value(rng, depth + 1) for j in range(rng.randint(0, 4))}


FENCE = "__fence__"


def broadcast_fanout(open_comm, pairs, seed, communicators=3):
    """Random filter sets and broadcasts; delivered sets must equal the brute-force oracle."""
    rng = random.Random(seed)
    comms = [open_comm() for _ in range(communicators)]
    sender = open_comm()
    words = ["p1", "p2", "p10", "state_changed.7.finished", "state_changed.9.killed", "kill", "pause", "a.b.c"]
    patterns = ["*", "p*", "p1", "p1*", "state_changed.7.*", "state_changed.*", "*.killed", "kill", "*a*", "a.*.c"]
    mismatches = []
    for index in range(pairs):
        lock = threading.Lock()
        delivered = set()
        tokens = []
        subs = []
        for sub_index in range(rng.randint(1, 6)):
            comm = rng.choice(comms)
            filt = BroadcastFilter(rng.choice(patterns), rng.choice(patterns))

            def handler(_c, body, _s, _j, _cid, sub_index=sub_index):
                with lock:
                    if body != FENCE:
                        delivered.add(sub_index)

            tokens.append((comm, comm.add_broadcast_subscriber(handler, filt)))
            subs.append(filt)
        fence_done = threading.Event()
        fence_seen = set()

        # A fence broadcast sent last tells us when every communicator has drained
        fence_tokens = []
        for comm_index, comm in enumerate(comms):
            def on_fence(_c, body, _s, _j, _cid, comm_index=comm_index):
                if body == FENCE:
                    with lock:
                        fence_seen.add(comm_index)
                        if len(fence_seen) == len(comms):
                            fence_done.set()

            fence_tokens.append((comm, comm.add_broadcast_subscriber(on_fence, BroadcastFilter(FENCE, "*"))))
        b_sender = rng.choice(words + [None])
        b_subject = rng.choice(words + [None])
        sender.broadcast_send({"pair": index}, sender=b_sender, subject=b_subject)
        sender.broadcast_send(FENCE, sender=FENCE, subject=FENCE)
        if not fence_done.wait(10):
            mismatches.append(f"pair {index}: fence never arrived")
        expected = {
            i for i, filt in enumerate(subs)
            if reference_glob(filt.sender, b_sender) and reference_glob(filt.subject, b_subject)
        }
        with lock:
            if delivered != expected:
                mismatches.append(f"pair {index}: delivered {sorted(delivered)} expected {sorted(expected)}")
        for comm, token in tokens + fence_tokens:
            comm.remove_broadcast_subscriber(token)
    for comm in comms + [sender]:
        comm.close()
    return mismatches


def graceful_close(open_comm, settle=5.0):
    """(requeued task completed elsewhere?, executions when the grace covers the handler)."""
    pool = concurrent.futures.ThreadPoolExecutor(4)
    forever = threading.Event()
    client = open_comm()

    stuck = open_comm()
    stuck.add_task_subscriber(lambda _c, p: pool.submit(forever.wait))
    started = threading.Event()
    original = stuck._on_task  # pylint: disable=protected-access

    def watch(*args):
        started.set()
        return original(*args)

    stuck._on_task = watch  # pylint: disable=protected-access
    fut = client.task_send("hang")
    started.wait(settle)
    time.sleep(0.01)
    stuck.close(grace=0.05)
    rescuer = open_comm()
    rescuer.add_task_subscriber(lambda _c, p: f"rescued {p}")
    requeued_ok = fut.result(settle) == "rescued hang"
    rescuer.close()
    forever.set()

    runs = collections.Counter()
    lock = threading.Lock()

    def quick(_c, payload):
        with lock:
            runs[payload] += 1
        return pool.submit(time.sleep, 0.02)

    tidy = open_comm()
    tidy.add_task_subscriber(quick)
    other = open_comm()
    other.add_task_subscriber(quick)
    futs = [client.task_send(n) for n in range(4)]
    time.sleep(0.005)
    tidy.close(grace=1.0)
    for f in futs:
        f.result(settle)
    other.close()
    client.close()
    pool.shutdown(wait=False)
    return requeued_ok, runs
