"""Release gate: one test per headline guarantee, in order.

Each test is a self-contained check of one property the package
promises, at the stated tolerance.  Run with -v to get exactly one
pass/fail line per guarantee.
"""

from __future__ import annotations

import asyncio
import json
import random
import time
from importlib import resources

import pytest
from click.testing import CliRunner

from classplay.checkpoint import restore_checkpoint, write_checkpoint
from classplay.cli import main as cli_main
from classplay.engine import derive_pair_code, partition_sizes
from classplay.protocol import (
    C2S_TYPES,
    S2C_TYPES,
    Frame,
    FrameDecoder,
    decode_frame,
    encode_frame,
)
from classplay.scenario import (
    Scenario,
    load_scenario,
    matching_entries,
    reachable_pair_states,
)
from classplay.server import ClassplayServer, ServerConfig
from classplay.simharness import (
    BARRIER_PHASES,
    SessionDriver,
    profile_mix,
    run_session,
    run_sweep,
)
from classplay.survey import (
    DegenerateError,
    Respondent,
    SurveyMatrix,
    cronbach_alpha,
    mann_whitney,
    recode,
    score,
)

from conftest import (
    explicit_script,
    reference_replay,
    replay_over_tcp,
    roster_from_events,
)

SCENARIO_TEXT = resources.files("classplay.scenarios").joinpath("sample_en.json").read_text("utf-8")

SWEEP_SIZES = range(6, 37)
SWEEP_SEEDS = range(10)
INVARIANT_NAMES = ("EQUAL-START", "COMPLEMENTARITY", "COVERAGE", "DIARY-ORDER", "NO-LEAK")


@pytest.fixture(scope="module")
def scenario() -> Scenario:
    return load_scenario(SCENARIO_TEXT)


@pytest.fixture(scope="module")
def sweep(scenario):
    """The full compliant-bot sweep, shared by the criteria that cite it."""
    start = time.monotonic()
    rows = run_sweep(scenario, SWEEP_SIZES, SWEEP_SEEDS)
    wall = time.monotonic() - start
    return rows, wall


def test_01_full_session_property_sweep(sweep):
    """Sizes 6..36 x 10 seeds reach Ended with every invariant green, <60s."""
    rows, wall = sweep
    assert len(rows) == len(SWEEP_SIZES) * len(SWEEP_SEEDS)
    failures = [
        (row["players"], row["seed"])
        for row in rows
        if not (row["ok"] and all(row["invariants"][name] is True for name in INVARIANT_NAMES))
    ]
    assert failures == [], f"failing cells: {failures}"
    assert wall < 60.0, f"sweep took {wall:.1f}s"


def test_02_determinism_across_runs_and_transports(scenario, tmp_path):
    """Identical inputs give identical digests, in process and over TCP."""
    runner = CliRunner()
    args = ["sim", "--players", "7", "--seed", "13"]
    first = runner.invoke(cli_main, args)
    second = runner.invoke(cli_main, args)
    assert first.exit_code == 0 and second.exit_code == 0
    def digest_of(result) -> str:
        return next(t for t in result.output.split() if t.startswith("digest="))

    assert digest_of(first) == digest_of(second)

    seed = 13
    source = run_session(scenario, 6, seed)
    assert source.ok
    script = explicit_script(source.driver.events)
    code = f"sim-{seed:04d}"
    reference, expected = reference_replay(scenario, code, seed, script)
    assert reference.digest() == source.driver.digest()
    roster = roster_from_events(script)
    facilitator = next(r["player_id"] for r in roster if r["role"] == "facilitator")

    async def over_tcp():
        server = ClassplayServer(ServerConfig(port=0, checkpoint_dir=str(tmp_path)))
        await server.start()
        try:
            server.open_room(SCENARIO_TEXT, roster, seed, join_code=code, clock="scripted")
            return await replay_over_tcp(server.port, code, script, expected, facilitator)
        finally:
            await server.stop()

    info = asyncio.run(over_tcp())
    assert info["phase"] == "Ended"
    assert info["digest"] == reference.digest()


def test_03_checkpoint_equivalence(scenario):
    """Kill/restore at phase edges and random points matches the twin run."""
    source = run_session(scenario, 20, seed=11)
    assert source.ok
    events = source.driver.events
    final = source.driver.state.to_dict()
    session_id = source.driver.state.session_id
    seed = source.driver.state.seed

    walker = SessionDriver(scenario, session_id, seed, auto_timers=False)
    kill_points = {}
    boundaries = 0
    rng = random.Random(0xACCE55)
    random_indices = set(rng.sample(range(1, len(events) - 1), 10))
    phase_before = walker.state.phase
    for i, event in enumerate(events):
        walker.dispatch(event)
        crossed = walker.state.phase != phase_before
        phase_before = walker.state.phase
        if crossed:
            boundaries += 1
        if crossed or (i + 1) in random_indices:
            kill_points[i + 1] = write_checkpoint(walker.state)
    assert walker.state.to_dict() == final  # twin replay is exact
    assert boundaries >= 12
    assert len(kill_points) >= boundaries + 8  # random points may hit edges

    for index, blob in sorted(kill_points.items()):
        restored = restore_checkpoint(blob, scenario)
        resumed = SessionDriver.resume(scenario, restored, auto_timers=False)
        for event in events[index:]:
            resumed.dispatch(event)
        assert resumed.state.to_dict() == final, f"divergence after kill at {index}"


def test_04_group_partition_correctness():
    """Every class size 6..60 splits into threes and fours, as enumerated."""
    from classplay.engine import assign_groups

    for n in range(6, 61):
        sizes = partition_sizes(n)
        assert sum(sizes) == n
        assert set(sizes) <= {3, 4}, f"n={n} gave {sizes}"
        valid = {
            (threes, fours)
            for threes in range(n // 3 + 1)
            for fours in range(n // 4 + 1)
            if 3 * threes + 4 * fours == n
        }
        assert valid, f"enumeration found no 3/4 split for {n}"
        assert (sizes.count(3), sizes.count(4)) in valid

        players = [f"p{i}" for i in range(n)]
        units = [players[i : i + 2] for i in range(0, n, 2)]
        groups = assign_groups(units, sizes, random.Random(n))
        assert [len(g) for g in groups] == sizes
        assert sorted(pid for group in groups for pid in group) == sorted(players)


def test_05_pair_code_uniqueness(scenario, sweep):
    """Each reachable pair state matches exactly one code entry."""
    states = reachable_pair_states(scenario)
    assert states, "sample scenario must have a reachable pair state"
    for set_a, set_b in states:
        hits = matching_entries(scenario, set_a, set_b)
        assert len(hits) == 1, f"{sorted(set_a)}+{sorted(set_b)} matched {len(hits)}"
        assert derive_pair_code(scenario, set_a, set_b) == hits[0]
    rows, _ = sweep
    assert all(row["invariants"]["PAIR-DERIVE"] is True for row in rows)


def test_06_guess18_arithmetic():
    """Overall equals the sum of the nine subscale means, inside [9,45]."""
    items = tuple(f"i{n:02d}" for n in range(1, 19))

    def one(values: list[int]):
        matrix = SurveyMatrix(items, (Respondent("r", "f", tuple(values)),))
        return score(recode(matrix))[0]

    neutral = one([3] * 18)
    assert neutral.overall == 27.0
    best = [5] * 18
    best[7] = 1  # the reverse-keyed item: raw 1 recodes to 5
    assert one(best).overall == 45.0
    worst = [1] * 18
    worst[7] = 5
    assert one(worst).overall == 9.0

    rng = random.Random(0x6E55)
    for _ in range(2000):
        values = [rng.randint(1, 5) for _ in range(18)]
        scored = one(values)
        total = sum(scored.subscales.values())
        assert scored.overall == total  # halves are exact in binary
        assert 9.0 <= scored.overall <= 45.0


def test_07_mann_whitney_pair_count_oracle():
    """U equals the exhaustive pair count on a 10^4-case fuzz corpus."""
    rng = random.Random(0xFEED)
    cases = 0
    while cases < 10_000:
        n1, n2 = rng.randint(1, 8), rng.randint(1, 8)
        a = [float(rng.randint(1, 6)) for _ in range(n1)]
        b = [float(rng.randint(1, 6)) for _ in range(n2)]
        oracle = sum(
            1.0 if x > y else 0.5 if x == y else 0.0 for x in a for y in b
        )
        forward = mann_whitney(a, b)
        backward = mann_whitney(b, a)
        assert forward.U == oracle
        assert forward.U + backward.U == n1 * n2
        cases += 1


def test_08_cronbach_alpha_oracles():
    """alpha == 1 on clone columns, fixture to 1e-9, degenerate raises."""
    items = tuple(f"i{n:02d}" for n in range(1, 19))
    first_three = items[:3]

    def rows(*triples: tuple[int, int, int]) -> tuple[Respondent, ...]:
        # Values live in the first three columns; the rest stay missing,
        # which listwise deletion ignores for a three-item alpha.
        return tuple(
            Respondent(f"r{i}", "missing", tuple(t) + (None,) * 15)
            for i, t in enumerate(triples)
        )

    clones = SurveyMatrix(
        items,
        tuple(
            Respondent(f"r{i}", "missing", (v,) * 18)
            for i, v in enumerate((1, 4, 2, 5, 3, 4, 1, 5))
        ),
    )
    assert abs(cronbach_alpha(clones) - 1.0) <= 1e-12

    # item variances 5/3, 11/12, 11/12; total variance 4 -> 3/2 * (1 - 3.5/4)
    fixture = SurveyMatrix(items, rows((2, 3, 4), (4, 4, 5), (3, 5, 5), (5, 5, 3)))
    assert abs(cronbach_alpha(fixture, items=first_three) - 0.1875) <= 1e-9

    constant = SurveyMatrix(items, rows((3, 3, 3), (3, 3, 3), (3, 3, 3), (3, 3, 3)))
    with pytest.raises(DegenerateError):
        cronbach_alpha(constant, items=first_three)


def _random_payload(rng: random.Random, depth: int = 0):
    roll = rng.random()
    if depth < 2 and roll < 0.25:
        return {
            f"k{j}": _random_payload(rng, depth + 1) for j in range(rng.randint(0, 3))
        }
    if depth < 2 and roll < 0.45:
        return [_random_payload(rng, depth + 1) for _ in range(rng.randint(0, 4))]
    return rng.choice(
        [
            rng.randint(-(10**9), 10**9),
            "text with spaces",
            "umlauts äöü and 中文",
            True,
            False,
            None,
            "",
        ]
    )


def test_09_protocol_round_trip_and_resync():
    """encode/decode identity over 10^4 frames; splice damage is skipped."""
    rng = random.Random(0xF7A3E)
    catalog = sorted(C2S_TYPES | S2C_TYPES)
    frames = []
    for i in range(10_000):
        frame = Frame(
            session=rng.choice(["", "ROOM", "sim-0001"]),
            seq=rng.randint(0, 10**6),
            type=rng.choice(catalog),
            payload={"n": i, "data": _random_payload(rng)},
        )
        assert decode_frame(encode_frame(frame)) == frame
        frames.append(frame)

    keep = frames[:50]
    blob = b"".join(encode_frame(f) for f in keep[:20])
    blob += b"\x00\x17 not json at all\n"
    blob += encode_frame(keep[20])[:-10]  # truncated frame, no newline
    blob += b"\n"
    blob += b"".join(encode_frame(f) for f in keep[21:])
    decoder = FrameDecoder()
    out = []
    position = 0
    while position < len(blob):
        step = rng.randint(1, 97)
        out.extend(decoder.feed(blob[position : position + step]))
        position += step
    assert out == keep[:20] + keep[21:]
    assert decoder.dropped == 2


def test_10_liveness_under_faults(scenario):
    """A drop-and-rejoin at every barrier phase still reaches Ended."""
    for phase in BARRIER_PHASES:
        result = run_session(
            scenario, 8, 3, profiles=profile_mix(8, dropper=1, drop_phase=phase)
        )
        assert result.ok, f"rejoin at {phase}: {result.summary()}"
        assert result.final_phase == "Ended"
    # a player who never comes back must not hold any barrier either
    for phase in ("IndividualDiscovery", "GroupPuzzle", "DiaryCircle"):
        result = run_session(
            scenario,
            8,
            3,
            profiles=profile_mix(8, dropper=1, drop_phase=phase, rejoin_ms=None),
        )
        assert result.ok and not result.deadlock, f"no-rejoin at {phase}"
